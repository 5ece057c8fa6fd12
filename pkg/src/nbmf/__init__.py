"""Dual-energy material decomposition with neural base-material fields.

Modules
-------
geometry   fan-beam scan geometry, rays and ray sampling
spectra    energy grid, source spectra, mass attenuation tables
phantom    analytic ellipse phantoms and rasterisation
projector  polychromatic forward projection, sinograms, Poisson noise
field      positional encoding, MLP, hand-written backward pass, checkpoints
trainer    L1 loss on projections, exact gradients, Adam
metrics    image extraction, PSNR, SSIM, profiles, bilinear resampling
config     experiment configuration and scenario presets
cli        the ``nbmf`` command
"""

__version__ = "0.1.0"
