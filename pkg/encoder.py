"""
Region encoder: fuses bottom-up region descriptors into the attention memory.

    v_i = f_i ⊕ FC(p_i ⊕ onehot(c_i) ⊕ s_i)          (36 × 3072)
    seq = act(proj2(act(proj1(v))))                    (36 × 512)
    global = global_proj(mean_i seq_i)                 (512)
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from config import EncoderConfig
from corpus import RegionFeatureSet
from errors import FeatureFormatError


def _get_linear_layer(n_input: int, n_output: int, bias: bool = True, w_init_gain: str = "linear") -> nn.Linear:
    """Glorot-uniform weights, zero bias."""
    linear = nn.Linear(n_input, n_output, bias=bias)
    nn.init.xavier_uniform_(linear.weight, gain=nn.init.calculate_gain(w_init_gain))
    if bias:
        nn.init.zeros_(linear.bias)
    return linear


@dataclass
class EncoderOutput:
    seq: Tensor         # (..., 36, 512) attention memory
    global_vec: Tensor  # (..., 512) image vector for the embedding constraint


class RegionEncoder(nn.Module):
    """Fuse -> two projections -> per-image global vector."""

    def __init__(self, config: Optional[EncoderConfig] = None) -> None:
        super().__init__()
        self.config = config or EncoderConfig()
        cfg = self.config
        gain = "relu" if cfg.activation == "relu" else "linear"

        self.fc_fuse = _get_linear_layer(cfg.fuse_input_dim, cfg.fuse_dim)
        self.proj1 = _get_linear_layer(cfg.fused_dim, cfg.hidden_dim, w_init_gain=gain)
        self.proj2 = _get_linear_layer(cfg.hidden_dim, cfg.embed_dim, w_init_gain=gain)
        self.global_proj = _get_linear_layer(cfg.embed_dim, cfg.embed_dim)

    def _act(self, x: Tensor) -> Tensor:
        return F.relu(x) if self.config.activation == "relu" else x

    def fuse(self, f: Tensor, p: Tensor, c: Tensor, s: Tensor) -> Tensor:
        """(..., l, d), (..., l, 5), (..., l), (..., l) -> (..., l, d + fuse_dim)."""
        n_classes = self.config.n_classes
        if c.numel() > 0 and (int(c.max()) >= n_classes or int(c.min()) < 0):
            raise FeatureFormatError(f"class index outside [0, {n_classes})", field="c")
        onehot = F.one_hot(c.long(), n_classes).to(f.dtype)
        tail = self.fc_fuse(torch.cat([p.to(f.dtype), onehot, s.to(f.dtype).unsqueeze(-1)], dim=-1))
        return torch.cat([f, tail], dim=-1)

    def encode(self, f: Tensor, p: Tensor, c: Tensor, s: Tensor) -> Tensor:
        fused = self.fuse(f, p, c, s)
        return self._act(self.proj2(self._act(self.proj1(fused))))

    def global_vector(self, seq: Tensor) -> Tensor:
        """Permutation-invariant over regions: mean then affine."""
        return self.global_proj(seq.mean(dim=-2))

    def forward(self, f: Tensor, p: Tensor, c: Tensor, s: Tensor) -> EncoderOutput:
        seq = self.encode(f, p, c, s)
        return EncoderOutput(seq=seq, global_vec=self.global_vector(seq))


def region_tensors(rfs: RegionFeatureSet, dtype: torch.dtype = torch.float32, device=None):
    """Single RegionFeatureSet -> (f, p, c, s) tensors without a batch axis."""
    return (
        torch.as_tensor(np.asarray(rfs.f), dtype=dtype, device=device),
        torch.as_tensor(np.asarray(rfs.p), dtype=dtype, device=device),
        torch.as_tensor(np.asarray(rfs.c, dtype=np.int64), device=device),
        torch.as_tensor(np.asarray(rfs.s), dtype=dtype, device=device),
    )


def fuse_region_features(rfs: RegionFeatureSet, encoder: RegionEncoder) -> Tensor:
    param = next(encoder.parameters())
    return encoder.fuse(*region_tensors(rfs, param.dtype, param.device))


def encode(rfs: RegionFeatureSet, encoder: RegionEncoder) -> Tensor:
    param = next(encoder.parameters())
    return encoder.encode(*region_tensors(rfs, param.dtype, param.device))


def image_global_vector(seq: Tensor, encoder: RegionEncoder) -> Tensor:
    return encoder.global_vector(seq)
