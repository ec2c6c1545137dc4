"""Conditional generative modelling of 3D cardiac anatomy across age.

Library layout:
  voxelgrid    label volumes, one-hot maps, VXL file I/O, boundary surfaces
  phantom      procedural ageing-heart population with exact measures
  conditioning age binning and noisy one-hot condition encoding
  diffcore     reverse-mode autodiff, 3D convolutions, Adam, gradient checks
  model        the six networks and their composition
  losses       the training objective terms and weighting
  trainer      alternating adversarial training, checkpoints, logs
  metrics      clinical measures, Dice/HD/ASSD, KL/WD, evaluation protocols
  figures      matplotlib reports rendered next to CSV outputs
  cli          the ``cardiosynth`` command (phantom/train/synthesize/evaluate/gradcheck)
"""

__version__ = "0.1.0"
