"""Max fusion of per-modality embeddings."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from . import tensor as T
from .errors import EmptyStack, ShapeMismatch
from .tensor import Tensor


@dataclass
class ModalityStack:
    """Embeddings stacked as Z[N, m, n]; column l comes from ``modality_ids[l]``."""

    Z: Tensor
    modality_ids: tuple

    def __post_init__(self):
        self.modality_ids = tuple(self.modality_ids)
        if self.Z.ndim != 3:
            raise ShapeMismatch(f"modality stack must be [N,m,n], got {self.Z.shape}")
        if len(self.modality_ids) != self.Z.shape[2]:
            raise ShapeMismatch(
                f"{len(self.modality_ids)} modality ids for {self.Z.shape[2]} columns")


@dataclass
class FusedVector:
    c: Tensor


def stack_modalities(embeddings: Sequence[Tensor], modality_ids: Sequence[str]) -> ModalityStack:
    if not embeddings:
        raise EmptyStack("no modality embeddings to fuse")
    widths = {e.shape for e in embeddings}
    if len(widths) != 1 or embeddings[0].ndim != 2:
        raise ShapeMismatch(f"modality embeddings must share one [N,m] shape, got {sorted(widths)}")
    return ModalityStack(T.stack(list(embeddings), axis=2), tuple(modality_ids))


def fuse_max(stack: ModalityStack) -> FusedVector:
    """c[:, k] = max over modalities of Z[:, k, l]; ties route gradient to the lowest l."""
    if stack.Z.shape[2] < 1:
        raise EmptyStack("modality stack has no columns")
    return FusedVector(T.reduce("max", stack.Z, axis=2))
