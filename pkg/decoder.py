"""
Spectrogram decoder.

One step:
    x   = prenet(prev_frame) ⊕ context
    y   = LSTM2(LSTM1(x))
    ctx', w' = location-sensitive attention(query=y, memory, w, w_cum)
    frame_pre = Linear(y ⊕ ctx'),  stop_logit = Linear(y ⊕ ctx')

A whole unroll is refined once by the residual Post-Net.
"""

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from config import DecoderConfig
from errors import DecoderInputError, FeatureFormatError, NumericalError
from encoder import _get_linear_layer


ALIGNMENT_MAGIC = b"SASALN1"
_ALIGNMENT_HEADER = struct.Struct("<II")


class _Prenet(nn.Module):
    """Bias-free ReLU bottleneck; dropout only while training."""

    def __init__(self, n_input: int, sizes: List[int], dropout: float = 0.5) -> None:
        super().__init__()
        in_sizes = [n_input] + list(sizes[:-1])
        self.layers = nn.ModuleList(
            [_get_linear_layer(in_size, out_size, bias=False, w_init_gain="relu")
             for in_size, out_size in zip(in_sizes, sizes)]
        )
        self.dropout = dropout

    def forward(self, x: Tensor) -> Tensor:
        for linear in self.layers:
            x = F.dropout(F.relu(linear(x)), p=self.dropout, training=self.training and self.dropout > 0)
        return x


class _Postnet(nn.Module):
    """Conv1d stack along time, tanh on all but the last layer. Returns the residual."""

    def __init__(self, n_mels: int, n_filters: int, kernel_size: int, n_layers: int) -> None:
        super().__init__()
        padding = (kernel_size - 1) // 2
        channels = [n_mels] + [n_filters] * (n_layers - 1) + [n_mels]
        self.convolutions = nn.ModuleList()
        for i, (n_in, n_out) in enumerate(zip(channels[:-1], channels[1:])):
            conv = nn.Conv1d(n_in, n_out, kernel_size, stride=1, padding=padding)
            gain = "linear" if i == n_layers - 1 else "tanh"
            nn.init.xavier_uniform_(conv.weight, gain=nn.init.calculate_gain(gain))
            nn.init.zeros_(conv.bias)
            self.convolutions.append(conv)

    def forward(self, x: Tensor) -> Tensor:
        """x: (B, n_mels, T)."""
        last = len(self.convolutions) - 1
        for i, conv in enumerate(self.convolutions):
            x = conv(x) if i == last else torch.tanh(conv(x))
        return x


class _LocationLayer(nn.Module):
    def __init__(self, n_filters: int, kernel_size: int, attn_dim: int) -> None:
        super().__init__()
        self.location_conv = nn.Conv1d(2, n_filters, kernel_size, padding=(kernel_size - 1) // 2, bias=False)
        nn.init.xavier_uniform_(self.location_conv.weight)
        self.location_dense = _get_linear_layer(n_filters, attn_dim, bias=False, w_init_gain="tanh")

    def forward(self, weights_cat: Tensor) -> Tensor:
        """(B, 2, R) -> (B, R, attn_dim)."""
        return self.location_dense(self.location_conv(weights_cat).transpose(1, 2))


class _LocationSensitiveAttention(nn.Module):
    """e_j = vᵀ tanh(W q + V m_j + U loc_j + b)."""

    def __init__(self, query_dim: int, memory_dim: int, attn_dim: int,
                 n_filters: int, kernel_size: int) -> None:
        super().__init__()
        self.query_layer = _get_linear_layer(query_dim, attn_dim, bias=False, w_init_gain="tanh")
        self.memory_layer = _get_linear_layer(memory_dim, attn_dim, bias=False, w_init_gain="tanh")
        self.v = _get_linear_layer(attn_dim, 1, bias=False)
        self.location_layer = _LocationLayer(n_filters, kernel_size, attn_dim)
        self.bias = nn.Parameter(torch.zeros(attn_dim))

    def process_memory(self, memory: Tensor) -> Tensor:
        return self.memory_layer(memory)

    def energies(self, query: Tensor, processed_memory: Tensor, weights_cat: Tensor) -> Tensor:
        processed_query = self.query_layer(query).unsqueeze(1)
        processed_location = self.location_layer(weights_cat)
        hidden = torch.tanh(processed_query + processed_memory + processed_location + self.bias)
        return self.v(hidden).squeeze(-1)

    def forward(self, query: Tensor, memory: Tensor, weights: Tensor, weights_cum: Tensor,
                processed_memory: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
        if processed_memory is None:
            processed_memory = self.process_memory(memory)
        weights_cat = torch.stack([weights, weights_cum], dim=1)
        energies = self.energies(query, processed_memory, weights_cat)
        if not torch.isfinite(energies).all():
            bad = int((~torch.isfinite(energies)).sum())
            raise NumericalError(f"attention energies contain {bad} non-finite values", tensor_name="energies")
        new_weights = F.softmax(energies, dim=-1)
        context = torch.bmm(new_weights.unsqueeze(1), memory).squeeze(1)
        return context, new_weights


@dataclass
class DecoderState:
    prev_frame: Tensor        # (B, n_mels)
    h1: Tensor
    c1: Tensor
    h2: Tensor
    c2: Tensor
    attn_weights: Tensor      # (B, R)
    attn_weights_cum: Tensor  # (B, R)
    context: Tensor           # (B, E)


@dataclass
class DecoderOutput:
    mel_pre: Tensor      # (B, T, n_mels)
    mel_post: Tensor     # (B, T, n_mels)
    stop_logits: Tensor  # (B, T)
    alignments: Tensor   # (B, T, R)


@dataclass
class GreedyResult:
    mel_post: Tensor     # (T, n_mels)
    mel_pre: Tensor      # (T, n_mels)
    alignments: Tensor   # (T, R)
    stop_probs: Tensor   # (T,)
    n_frames: int
    truncated: bool


class SpeechDecoder(nn.Module):
    """Autoregressive log-mel decoder over the region memory."""

    def __init__(self, config: Optional[DecoderConfig] = None, memory_dim: int = 512) -> None:
        super().__init__()
        self.config = config or DecoderConfig()
        cfg = self.config
        self.memory_dim = memory_dim

        self.prenet = _Prenet(cfg.n_mels, list(cfg.prenet_units), cfg.prenet_dropout)
        self.lstm1 = nn.LSTMCell(cfg.prenet_units[-1] + memory_dim, cfg.rnn_units)
        self.lstm2 = nn.LSTMCell(cfg.rnn_units, cfg.rnn_units)
        self.attention = _LocationSensitiveAttention(
            cfg.rnn_units, memory_dim, cfg.attn_dim, cfg.location_filters, cfg.location_kernel)
        self.frame_proj = _get_linear_layer(cfg.rnn_units + memory_dim, cfg.n_mels)
        self.stop_proj = _get_linear_layer(cfg.rnn_units + memory_dim, 1, w_init_gain="sigmoid")
        self.postnet = _Postnet(cfg.n_mels, cfg.postnet_filters, cfg.postnet_kernel, cfg.postnet_layers)

    def init_state(self, memory: Tensor) -> DecoderState:
        """Zero go frame and recurrent state, uniform alignment, mean-of-rows context."""
        batch, n_regions, _ = memory.shape
        zeros = memory.new_zeros(batch, self.config.rnn_units)
        weights = memory.new_full((batch, n_regions), 1.0 / n_regions)
        return DecoderState(
            prev_frame=memory.new_zeros(batch, self.config.n_mels),
            h1=zeros, c1=zeros.clone(), h2=zeros.clone(), c2=zeros.clone(),
            attn_weights=weights,
            attn_weights_cum=memory.new_zeros(batch, n_regions),
            context=torch.bmm(weights.unsqueeze(1), memory).squeeze(1),
        )

    def decode_step(self, state: DecoderState, memory: Tensor, input_frame: Tensor,
                    processed_memory: Optional[Tensor] = None) -> Tuple[Tensor, Tensor, DecoderState]:
        x = torch.cat([self.prenet(input_frame), state.context], dim=-1)
        h1, c1 = self.lstm1(x, (state.h1, state.c1))
        h2, c2 = self.lstm2(h1, (state.h2, state.c2))

        context, weights = self.attention(
            h2, memory, state.attn_weights, state.attn_weights_cum, processed_memory)

        projection_input = torch.cat([h2, context], dim=-1)
        frame_pre = self.frame_proj(projection_input)
        stop_logit = self.stop_proj(projection_input).squeeze(-1)
        if not torch.isfinite(frame_pre).all():
            raise NumericalError("decoder frame projection produced non-finite values", tensor_name="frame_pre")

        new_state = DecoderState(
            prev_frame=frame_pre, h1=h1, c1=c1, h2=h2, c2=c2,
            attn_weights=weights,
            attn_weights_cum=state.attn_weights_cum + weights,
            context=context,
        )
        return frame_pre, stop_logit, new_state

    def postnet_refine(self, mel_pre: Tensor) -> Tensor:
        """(B, T, n_mels) -> mel_pre + PostNet(mel_pre)."""
        return mel_pre + self.postnet(mel_pre.transpose(1, 2)).transpose(1, 2)

    def unroll_teacher_forced(self, memory: Tensor, target: Tensor,
                              feed_mask: Optional[Tensor] = None) -> DecoderOutput:
        """
        Step t gets target frame t-1 where feed_mask[:, t] is true and its own
        previous frame_pre (detached) otherwise. Step 0 always gets the go frame.
        """
        batch, n_steps, _ = target.shape
        if n_steps == 0:
            raise DecoderInputError("cannot unroll over an empty target spectrogram")
        if feed_mask is None:
            feed_mask = torch.ones(batch, n_steps, dtype=torch.bool, device=target.device)
        elif feed_mask.dim() == 1:
            feed_mask = feed_mask.unsqueeze(0).expand(batch, -1)

        state = self.init_state(memory)
        processed_memory = self.attention.process_memory(memory)
        frames, stops, alignments = [], [], []
        for t in range(n_steps):
            if t == 0:
                input_frame = state.prev_frame
            else:
                input_frame = torch.where(
                    feed_mask[:, t:t + 1], target[:, t - 1], state.prev_frame.detach())
            frame_pre, stop_logit, state = self.decode_step(state, memory, input_frame, processed_memory)
            frames.append(frame_pre)
            stops.append(stop_logit)
            alignments.append(state.attn_weights)

        mel_pre = torch.stack(frames, dim=1)
        return DecoderOutput(
            mel_pre=mel_pre,
            mel_post=self.postnet_refine(mel_pre),
            stop_logits=torch.stack(stops, dim=1),
            alignments=torch.stack(alignments, dim=1),
        )

    @torch.no_grad()
    def infer_greedy(self, memory: Tensor, max_frames: Optional[int] = None) -> GreedyResult:
        """Single image, free running until sigmoid(stop) > threshold; the firing frame is kept."""
        if memory.dim() == 2:
            memory = memory.unsqueeze(0)
        if memory.shape[0] != 1:
            raise DecoderInputError(f"infer_greedy decodes one image at a time, got batch {memory.shape[0]}")
        max_frames = max_frames or self.config.max_frames

        state = self.init_state(memory)
        processed_memory = self.attention.process_memory(memory)
        frames, stop_probs, alignments = [], [], []
        truncated = True
        for _ in range(max_frames):
            frame_pre, stop_logit, state = self.decode_step(state, memory, state.prev_frame, processed_memory)
            frames.append(frame_pre)
            stop_probs.append(torch.sigmoid(stop_logit))
            alignments.append(state.attn_weights)
            if float(stop_probs[-1][0]) > self.config.stop_threshold:
                truncated = False
                break

        mel_pre = torch.stack(frames, dim=1)
        mel_post = self.postnet_refine(mel_pre)
        return GreedyResult(
            mel_post=mel_post[0],
            mel_pre=mel_pre[0],
            alignments=torch.stack(alignments, dim=1)[0],
            stop_probs=torch.stack(stop_probs, dim=1)[0],
            n_frames=len(frames),
            truncated=truncated,
        )


def write_alignment(alignments: np.ndarray, path: Path, metadata: Optional[Dict] = None) -> Path:
    """SASALN1 + u32 T + u32 R + float32 T×R grid, and a <path>.json sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    grid = np.ascontiguousarray(alignments, dtype="<f4")
    if grid.ndim != 2:
        raise DecoderInputError(f"alignment grid must be 2-D, got shape {grid.shape}")
    with open(path, "wb") as f:
        f.write(ALIGNMENT_MAGIC)
        f.write(_ALIGNMENT_HEADER.pack(*grid.shape))
        f.write(grid.tobytes())

    sidecar = {"n_frames": int(grid.shape[0]), "n_regions": int(grid.shape[1])}
    sidecar.update(metadata or {})
    with open(path.with_name(path.name + ".json"), "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def read_alignment(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    header_size = len(ALIGNMENT_MAGIC) + _ALIGNMENT_HEADER.size
    if len(data) < header_size or data[:len(ALIGNMENT_MAGIC)] != ALIGNMENT_MAGIC:
        raise FeatureFormatError(f"{path}: not a SASALN1 alignment file", field="magic")
    n_frames, n_regions = _ALIGNMENT_HEADER.unpack_from(data, len(ALIGNMENT_MAGIC))
    if len(data) != header_size + 4 * n_frames * n_regions:
        raise FeatureFormatError(f"{path}: alignment payload size mismatch", field="frames")
    return np.frombuffer(data, dtype="<f4", offset=header_size).reshape(n_frames, n_regions).copy()
