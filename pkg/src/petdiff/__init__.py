"""Dual-branch conditional diffusion for MRI-guided low-dose PET denoising.

Library surface:

- ``diffusion``: noise schedules, forward noising, learned-variance reverse step
- ``network``: the dual encoder/decoder denoiser with hierarchical fusion
- ``training``: multi-task objective, partial-MRI masking, optimisation loop
- ``sampling``: reverse-diffusion inference with branch ensembling
- ``phantom`` / ``tomo`` / ``dataset``: synthetic paired data and dose simulation
- ``fusion``: multi-orientation volume reassembly and wavelet-domain fusion
- ``metrics``: SSIM / PSNR / NMSE / perceptual proxy / paired t-test
- ``analysis``: activation capture and linear CKA
- ``cli``: the ``petdiff`` command-line entry point
"""

__version__ = "0.1.0"
