#!/usr/bin/env python3
"""
Tests for the assembled model: encoder, decoder and speech embedder
trained through one loss.
"""

import os
import sys

import pytest
import torch

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config import build_run_config
from corpus import TrainingBatch
from sas_model import SASModel

WHOLE_MODEL = {
    "audio": {"n_mels": 4},
    "encoder": {"feature_dim": 3, "n_regions": 3, "n_classes": 5, "fuse_dim": 2, "hidden_dim": 4, "embed_dim": 4},
    "decoder": {"n_mels": 4, "prenet_units": [3, 3], "prenet_dropout": 0.0, "attn_dim": 6,
                "location_filters": 2, "location_kernel": 3, "rnn_units": 8,
                "postnet_layers": 2, "postnet_filters": 2, "postnet_kernel": 3, "max_frames": 12},
    "embedder": {"conv_filters": 3, "conv_kernel": 3, "conv_stride": 2, "gru_hidden": 2, "gru_layers": 1},
    "corpus": {"feature_dim": 3},
}


def whole_model_batch(seed: int = 0) -> TrainingBatch:
    """Two images of three regions, spoken captions of 5 and 3 frames."""
    g = torch.Generator().manual_seed(seed)
    lengths = torch.tensor([5, 3])
    frame_mask = torch.arange(5).unsqueeze(0) < lengths.unsqueeze(1)
    mels = torch.randn(2, 5, 4, generator=g, dtype=torch.float64) * frame_mask.unsqueeze(-1)
    stops = (torch.arange(5).unsqueeze(0) >= (lengths - 1).unsqueeze(1)).to(torch.float64)
    return TrainingBatch(
        image_ids=["img00000", "img00001"],
        tokens=[["a", "dog"], ["a", "cat"]],
        region_f=torch.randn(2, 3, 3, generator=g, dtype=torch.float64),
        region_p=torch.rand(2, 3, 5, generator=g, dtype=torch.float64),
        region_c=torch.randint(0, 5, (2, 3), generator=g),
        region_s=torch.rand(2, 3, generator=g, dtype=torch.float64),
        target_mels=mels,
        frame_mask=frame_mask,
        stop_targets=stops,
        lengths=lengths,
        match_mask=torch.eye(2, dtype=torch.bool),
    )


class _TotalLoss(torch.nn.Module):
    def __init__(self, inner: SASModel):
        super().__init__()
        self.inner = inner

    def forward(self, batch: TrainingBatch) -> torch.Tensor:
        breakdown, _ = self.inner.compute_losses(batch)
        return breakdown.total


def whole_model(seed: int = 5) -> SASModel:
    torch.manual_seed(seed)
    model = SASModel(build_run_config(WHOLE_MODEL)).double()
    with torch.no_grad():
        for param in model.parameters():
            if param.dim() == 1:
                param.uniform_(-0.2, 0.2)
    return model


def test_parameter_groups():
    model = whole_model()
    groups = {name.split(".")[0] for name, _ in model.named_parameters()}
    assert groups == {"encoder", "decoder", "embedder"}


def test_loss_parts_add_up():
    model = whole_model()
    batch = whole_model_batch()
    breakdown, out = model.compute_losses(batch, lambda_ec=0.5)
    expected = breakdown.L_s + breakdown.L_st + 0.5 * breakdown.L_ec
    assert float(breakdown.total) == pytest.approx(float(expected), rel=1e-12)
    assert out.decoder.mel_post.shape == (2, 5, 4)
    assert out.speech_vecs.shape == (2, 4)
    assert out.encoder.global_vec.shape == (2, 4)


def test_total_loss_gradients_match_finite_differences():
    model = whole_model()
    batch = whole_model_batch(seed=1)
    names = [name for name, _ in model.named_parameters()]
    params = tuple(p.detach().clone().requires_grad_(True) for _, p in model.named_parameters())
    assert {name.split(".")[0] for name in names} == {"encoder", "decoder", "embedder"}

    total = _TotalLoss(model)

    def readout(*flat):
        bound = {f"inner.{name}": value for name, value in zip(names, flat)}
        return torch.func.functional_call(total, bound, (batch,))

    assert torch.autograd.gradcheck(readout, params, eps=1e-6, atol=1e-5)


def main():
    print("=" * 80)
    print("WHOLE MODEL TESTS")
    print("=" * 80)
    return pytest.main([__file__, "-v"])


if __name__ == "__main__":
    sys.exit(main())
