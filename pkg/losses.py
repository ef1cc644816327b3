"""
Training objective.

    L = L_s + L_st + λ·L_ec

L_s is masked MSE before and after the Post-Net, L_st a weighted stop-token
BCE, and L_ec a Masked Margin Softmax between the image global vector and an
embedding of the ground-truth spectrogram.
"""

from dataclasses import dataclass
from typing import Dict, Optional, Union

import torch
import torch.nn.functional as F
from torch import Tensor, nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from config import EmbedderConfig, LossWeights
from errors import LossInputError


@dataclass
class LossBreakdown:
    L_s: Tensor
    L_st: Tensor
    L_ec: Tensor
    total: Tensor

    def as_floats(self) -> Dict[str, float]:
        return {name: float(getattr(self, name).detach()) for name in ("L_s", "L_st", "L_ec", "total")}


def _valid_count(frame_mask: Tensor) -> Tensor:
    count = frame_mask.sum()
    if int(count) == 0:
        raise LossInputError("no valid frames in batch")
    return count


def masked_mse(pred: Tensor, target: Tensor, frame_mask: Tensor) -> Tensor:
    """Mean squared error over valid (frame, channel) cells."""
    count = _valid_count(frame_mask) * pred.shape[-1]
    mask = frame_mask.unsqueeze(-1)
    diff = torch.where(mask, pred - target, torch.zeros_like(pred))
    return diff.pow(2).sum() / count


def spectrogram_loss(mel_pre: Tensor, mel_post: Tensor, target: Tensor, frame_mask: Tensor) -> Tensor:
    return masked_mse(mel_pre, target, frame_mask) + masked_mse(mel_post, target, frame_mask)


def stop_token_loss(stop_logits: Tensor, stop_targets: Tensor, frame_mask: Tensor,
                    weights: Union[LossWeights, float] = 5.0) -> Tensor:
    """BCE with the positive class weighted, averaged over valid frames."""
    pos_weight = weights.stop_positive_weight if isinstance(weights, LossWeights) else float(weights)
    count = _valid_count(frame_mask)
    safe_logits = torch.where(frame_mask, stop_logits, torch.zeros_like(stop_logits))
    safe_targets = torch.where(frame_mask, stop_targets, torch.zeros_like(stop_targets))
    per_frame = F.binary_cross_entropy_with_logits(
        safe_logits, safe_targets,
        pos_weight=torch.tensor(pos_weight, dtype=stop_logits.dtype, device=stop_logits.device),
        reduction="none",
    )
    return torch.where(frame_mask, per_frame, torch.zeros_like(per_frame)).sum() / count


class SpeechEmbedder(nn.Module):
    """Conv1d over time -> 2-layer bi-GRU -> mean over valid steps."""

    def __init__(self, n_mels: int = 80, config: Optional[EmbedderConfig] = None) -> None:
        super().__init__()
        self.config = config or EmbedderConfig()
        cfg = self.config
        self.conv = nn.Conv1d(n_mels, cfg.conv_filters, cfg.conv_kernel,
                              stride=cfg.conv_stride, padding=cfg.conv_kernel // 2)
        self.gru = nn.GRU(cfg.conv_filters, cfg.gru_hidden, num_layers=cfg.gru_layers,
                          batch_first=True, bidirectional=True)

    @property
    def output_dim(self) -> int:
        return 2 * self.config.gru_hidden

    def output_lengths(self, lengths: Tensor) -> Tensor:
        cfg = self.config
        padding = cfg.conv_kernel // 2
        return torch.div(lengths + 2 * padding - cfg.conv_kernel, cfg.conv_stride, rounding_mode="floor") + 1

    def forward(self, mels: Tensor, lengths: Optional[Tensor] = None) -> Tensor:
        """mels (B, T, n_mels) -> (B, 2·gru_hidden)."""
        batch, n_frames, _ = mels.shape
        if n_frames == 0 or batch == 0:
            raise LossInputError("speech embedder needs at least one frame")
        if lengths is None:
            lengths = torch.full((batch,), n_frames, dtype=torch.long)
        lengths = lengths.to("cpu", torch.long)
        if int(lengths.min()) < 1:
            raise LossInputError("speech embedder got an empty spectrogram in the batch")

        valid = torch.arange(n_frames).unsqueeze(0) < lengths.unsqueeze(1)
        mels = mels * valid.to(mels.device, mels.dtype).unsqueeze(-1)
        features = F.relu(self.conv(mels.transpose(1, 2))).transpose(1, 2)

        out_lengths = self.output_lengths(lengths).clamp(max=features.shape[1])
        packed = pack_padded_sequence(features, out_lengths, batch_first=True, enforce_sorted=False)
        outputs, _ = self.gru(packed)
        outputs, _ = pad_packed_sequence(outputs, batch_first=True, total_length=features.shape[1])
        return outputs.sum(dim=1) / out_lengths.to(outputs.device, outputs.dtype).unsqueeze(-1)


def speech_embedding(mel: Tensor, embedder: SpeechEmbedder) -> Tensor:
    """Single (T, n_mels) spectrogram -> (2·gru_hidden,) vector."""
    if mel.shape[0] == 0:
        raise LossInputError("cannot embed an empty spectrogram")
    return embedder(mel.unsqueeze(0))[0]


def mms_loss(image_vecs: Tensor, speech_vecs: Tensor, margin: float = 1.0,
             match_mask: Optional[Tensor] = None) -> Tensor:
    """
    Masked Margin Softmax over the B×B dot-product matrix, both directions averaged.

    Off-diagonal entries marked in match_mask are known positives and leave
    the negative set. A batch of one has no negatives and scores exactly 0.
    """
    batch = image_vecs.shape[0]
    if batch == 0:
        raise LossInputError("MMS loss needs a non-empty batch")
    scores = image_vecs @ speech_vecs.T
    diagonal = torch.eye(batch, dtype=torch.bool, device=scores.device)
    if match_mask is None:
        match_mask = diagonal
    known_positive = match_mask.to(scores.device, torch.bool) & ~diagonal

    logits = scores.masked_fill(known_positive, float("-inf"))
    logits = torch.where(diagonal, scores - margin, logits)
    labels = torch.arange(batch, device=scores.device)

    image_to_speech = F.cross_entropy(logits, labels)
    speech_to_image = F.cross_entropy(logits.T, labels)
    return 0.5 * (image_to_speech + speech_to_image)


def total_loss(L_s: Tensor, L_st: Tensor, L_ec: Tensor,
               weights: Union[LossWeights, float] = 0.25) -> LossBreakdown:
    lam = weights.lambda_ec if isinstance(weights, LossWeights) else float(weights)
    return LossBreakdown(L_s=L_s, L_st=L_st, L_ec=L_ec, total=L_s + L_st + lam * L_ec)
