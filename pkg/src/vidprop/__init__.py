"""First-frame video edit propagation with flow-warped conditions, at toy scale.

Modules: ``media`` (frames, clips, file formats), ``tensorad`` and
``layers`` (numpy autodiff), ``flow`` (optical flow, occlusion, warping),
``conditions`` (edge/depth images), ``codec`` (lossy latent codec),
``diffusion`` (schedule, DDIM), ``denoiser`` (toy U-Net), ``training``,
``editprop`` (generation pipeline) and ``cli``.
"""

__version__ = "0.1.0"
