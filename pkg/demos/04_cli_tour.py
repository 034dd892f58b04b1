"""The command-line workflow end to end, driven from Python.

Equivalent shell session:

    vidprop synth --scene panning --frames 12 --output demo_out/cli/clip
    vidprop generate --input demo_out/cli/clip --output demo_out/cli/gen \\
        --editor colormap --hue 200 --batch-frames 4 --interval 2 --seed 7
    vidprop bench --input demo_out/cli/clip --output demo_out/cli/bench ...

Without --checkpoint, generate uses the flow-copy oracle, so this runs in
seconds.  Every output directory carries a manifest.txt that replays the
run via --config.
"""

import argparse
from pathlib import Path

from vidprop.cli import main as vidprop
from vidprop.media import read_manifest


def run(*argv):
    print("$ vidprop", " ".join(argv))
    code = vidprop(list(argv))
    if code:
        raise SystemExit(code)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="demo_out/cli")
    out = Path(ap.parse_args().out)
    clip, gen, bench = str(out / "clip"), str(out / "gen"), str(out / "bench")
    plan = ["--batch-frames", "4", "--interval", "2", "--steps", "10"]

    run("synth", "--scene", "panning", "--frames", "12", "--output", clip)
    run("generate", "--input", clip, "--output", gen, "--editor", "colormap", "--hue", "200", "--seed", "7", *plan)
    m = read_manifest(Path(gen) / "manifest.txt")
    print(f"  {m['result.key_frames']} key frames -> {m['result.output_frames']} frames, "
          f"warping error {m['result.temporal_consistency']}")
    run("generate", "--config", str(Path(gen) / "manifest.txt"), "--output", str(out / "replay"))
    run("bench", "--input", clip, "--output", bench, *plan)
    print((Path(bench) / "bench.csv").read_text())


if __name__ == "__main__":
    main()
