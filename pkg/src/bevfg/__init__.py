"""Self-supervised BEV segmentation pretraining on a from-scratch numpy stack.

Subpackages and modules:

- ``autodiff``: reverse-mode tensors, differentiable ops and SGD
- ``camera``: pinhole intrinsics, rigid poses, projection
- ``field``: image-conditioned density field and depth compositing
- ``photometric``: view warping and the photometric loss
- ``tmae``: masked encoding, voxel lifting/warping and reconstruction
- ``bev``: BEV head, cross-entropy and mIoU
- ``synthscene``: procedural scenes with exact ground truth
- ``pipeline``: configuration, training, checkpoints and the CLI
"""

__version__ = "0.1.0"
