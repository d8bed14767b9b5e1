"""DARN: adaptive-regularization segmentation decoder, desk scale.

Modules are organized by concern: `autodiff` (tensor engine),
`encoder` (frozen feature pyramid), `decoder` (complexity prediction,
adaptive dropout, capacity gating, pyramid fusion), `objectives`
(losses and metrics), `synthworld` (data, corruptions, FGSM),
`trainer` (AdamW loop, checkpoints) and `cli` (commands).
"""

__version__ = "0.1.0"
