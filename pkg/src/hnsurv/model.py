"""The full multimodal survival network."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .cbam import CbamBlock
from .fusion import fuse_max, stack_modalities
from .nn import ClinicalEncoder, Module, VolumeEncoder
from .survival import SurvivalHead, SurvivalOutput, TimeGrid
from .tensor import Tensor


class SurvivalModel(Module):
    """Per-modality encoders -> max fusion -> discrete-time hazard head.

    Imaging encoders get their own weights and, when enabled, one attention
    block on their last feature map. ``grid`` and the clinical
    standardisation statistics travel with the model so checkpoints are
    self-contained.
    """

    def __init__(self, cfg, grid: TimeGrid, rng: np.random.Generator,
                 n_clinical: int = 0, clinical_mean=None, clinical_std=None):
        super().__init__()
        dtype = np.dtype(cfg.dtype)
        self.cfg = cfg
        self.grid = grid
        self.modalities = tuple(cfg.modalities)
        self.encoders = {}
        for m in self.modalities:
            if m == "clinical":
                continue
            att = None
            if cfg.use_cbam:
                att = CbamBlock(cfg.widths[-1], rng, cfg.cbam_reduction, cfg.cbam_kernel, dtype)
            self.encoders[m] = VolumeEncoder(cfg.widths, cfg.depths, cfg.embedding, rng,
                                             attention=att, min_input=cfg.min_input, dtype=dtype)
        self.clinical = None
        self.n_clinical = n_clinical
        if "clinical" in self.modalities:
            if n_clinical < 1:
                raise ValueError("clinical modality enabled but no clinical features")
            self.clinical = ClinicalEncoder(n_clinical, cfg.embedding, rng,
                                            hidden=cfg.clinical_hidden, dtype=dtype)
        self.clinical_mean = np.zeros(n_clinical) if clinical_mean is None else np.asarray(clinical_mean, float)
        self.clinical_std = np.ones(n_clinical) if clinical_std is None else np.asarray(clinical_std, float)
        self.head = SurvivalHead(cfg.embedding, grid.p, rng, dtype)

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    def forward(self, volumes: dict, clinical: Optional[np.ndarray] = None) -> SurvivalOutput:
        embs, ids = [], []
        for m in self.modalities:
            if m == "clinical":
                z = (np.asarray(clinical, dtype=float) - self.clinical_mean) / self.clinical_std
                embs.append(self.clinical(Tensor._wrap(z.astype(self.dtype))))
            else:
                x = volumes[m]
                x = x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=self.dtype))
                embs.append(self.encoders[m](x))
            ids.append(m)
        fused = fuse_max(stack_modalities(embs, ids))
        return self.head(fused.c)

    def predict(self, arrays, batch_size: int = 16) -> np.ndarray:
        """Eval-mode survival curves [N, p] for a CohortArrays (no tape)."""
        was = self.training
        self.eval()
        try:
            out = []
            for s in range(0, len(arrays), batch_size):
                sl = slice(s, s + batch_size)
                vols = {m: v[sl] for m, v in arrays.volumes.items()}
                clin = None if arrays.clinical is None else arrays.clinical[sl]
                out.append(self.forward(vols, clin).survival.data)
            return np.concatenate(out, axis=0)
        finally:
            self.train(was)


def zero_head(model: SurvivalModel) -> None:
    """Set head weights and bias to zero (every subject then gets h = 0.5)."""
    lin = model.head.linear
    lin.weight.data = np.zeros_like(lin.weight.data)
    lin.bias.data = np.zeros_like(lin.bias.data)

