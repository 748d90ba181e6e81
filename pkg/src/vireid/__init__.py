"""Visible-infrared re-identification with a cross-modality transformer.

Subpackages
-----------
numerics
    float64 tensors, reverse-mode tape, gradient checker, tensor blobs.
model
    overlapping patch tokens, modality embeddings, encoder, BN neck.
losses
    ID, weighted triplet, modality-aware center / ID losses and baselines.
data
    synthetic two-modality identities, augmentation, Q x K sampling.
evaluation
    cosine ranking, CMC, mAP, mINP, gallery protocols.
training
    AdamW, step schedule, training loop and checkpoints.
harness
    experiment runner and the ``vireid`` command line.
"""
from ._kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"
