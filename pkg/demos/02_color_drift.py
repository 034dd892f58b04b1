"""Why long clips turn grey, and how calibration stops it.

Each autoregressive batch starts from the previous batch's last frame, so
the frame passes through the lossy latent codec again and again.  The
flow-copy oracle stands in for the denoiser here: it returns the encoded
flow-warped video exactly, which isolates the codec round trip.

    python3 demos/02_color_drift.py --batches 13
"""

import argparse

from vidprop.codec import LatentCodec
from vidprop.conditions import spatial_conditions
from vidprop.diffusion import build_schedule
from vidprop.editprop import BatchPlan, EditSpec, FlowCopyModel, Propagator, run_autoregressive
from vidprop.media import luminance
from vidprop.scenes import make_scene


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batches", type=int, default=13)
    ap.add_argument("--frames-per-batch", type=int, default=4)
    args = ap.parse_args()

    plan = BatchPlan(interval=1, frames_per_batch=args.frames_per_batch, batches=args.batches)
    scene = make_scene("translating-square", 64, plan.num_keys, seed=1, velocity=(0.5, 0.25))
    frames = scene.clip().frames
    spatial = spatial_conditions(frames, "canny")
    edit = EditSpec("colormap", params={"gain": (0.2, 0.9, 0.3), "bias": (0.0, 0.1, 0.6)})
    sched = build_schedule()
    prop = Propagator(FlowCopyModel(sched), sched, LatentCodec(), injection=False)
    ref = luminance(edit.apply(frames[0])).mean()

    runs = {}
    for calibration in (False, True):
        _, report = run_autoregressive(prop, frames, edit, plan, spatial, calibration=calibration)
        runs[calibration] = [m - ref for m in report.pre_clamp_means]

    print("batch  luma drift (raw)  luma drift (calibrated)")
    for b, (raw, cal) in enumerate(zip(runs[False], runs[True])):
        print(f"{b + 1:5d}  {raw:+16.4f}  {cal:+23.1e}")


if __name__ == "__main__":
    main()
