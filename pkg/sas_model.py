"""
SASModel: region encoder + spectrogram decoder + speech embedder as one module.

Parameter names are prefixed `encoder.`, `decoder.` and `embedder.`; the
checkpoint format stores them under those names.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import torch
from torch import Tensor, nn

from config import RunConfig
from corpus import RegionFeatureSet, TrainingBatch
from decoder import DecoderOutput, GreedyResult, SpeechDecoder
from encoder import EncoderOutput, RegionEncoder, region_tensors
from errors import NumericalError
from losses import (LossBreakdown, SpeechEmbedder, mms_loss, spectrogram_loss,
                    stop_token_loss, total_loss)


@dataclass
class ForwardOutput:
    encoder: EncoderOutput
    decoder: DecoderOutput
    speech_vecs: Tensor


class SASModel(nn.Module):
    def __init__(self, config: Optional[RunConfig] = None) -> None:
        super().__init__()
        self.config = config or RunConfig()
        cfg = self.config
        self.encoder = RegionEncoder(cfg.encoder)
        self.decoder = SpeechDecoder(cfg.decoder, memory_dim=cfg.encoder.embed_dim)
        self.embedder = SpeechEmbedder(cfg.decoder.n_mels, cfg.embedder)

    def forward(self, batch: TrainingBatch, feed_mask: Optional[Tensor] = None) -> ForwardOutput:
        enc = self.encoder(batch.region_f, batch.region_p, batch.region_c, batch.region_s)
        dec = self.decoder.unroll_teacher_forced(enc.seq, batch.target_mels, feed_mask)
        speech_vecs = self.embedder(batch.target_mels, batch.lengths)
        return ForwardOutput(encoder=enc, decoder=dec, speech_vecs=speech_vecs)

    def compute_losses(self, batch: TrainingBatch, feed_mask: Optional[Tensor] = None,
                       lambda_ec: Optional[float] = None) -> Tuple[LossBreakdown, ForwardOutput]:
        weights = self.config.losses
        lam = self.config.lambda_ec if lambda_ec is None else lambda_ec
        out = self(batch, feed_mask)
        dec = out.decoder

        L_s = spectrogram_loss(dec.mel_pre, dec.mel_post, batch.target_mels, batch.frame_mask)
        L_st = stop_token_loss(dec.stop_logits, batch.stop_targets, batch.frame_mask, weights)
        L_ec = mms_loss(out.encoder.global_vec, out.speech_vecs, weights.mms_margin, batch.match_mask)
        breakdown = total_loss(L_s, L_st, L_ec, lam)

        for name in ("L_s", "L_st", "L_ec", "total"):
            if not torch.isfinite(getattr(breakdown, name)):
                raise NumericalError(f"{name} is not finite ({float(getattr(breakdown, name))})",
                                     tensor_name=name)
        return breakdown, out

    def encode_features(self, rfs: RegionFeatureSet) -> EncoderOutput:
        param = next(self.parameters())
        f, p, c, s = region_tensors(rfs, param.dtype, param.device)
        return self.encoder(f.unsqueeze(0), p.unsqueeze(0), c.unsqueeze(0), s.unsqueeze(0))

    @torch.no_grad()
    def synthesize(self, rfs: RegionFeatureSet, max_frames: Optional[int] = None) -> GreedyResult:
        """Features of one image -> free-running spectrogram."""
        was_training = self.training
        self.eval()
        try:
            return self.decoder.infer_greedy(self.encode_features(rfs).seq, max_frames)
        finally:
            self.train(was_training)
