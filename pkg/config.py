"""
Run configuration.

Every section is a dataclass with the documented defaults. A run file is
TOML; it is merged into an omegaconf structured config built from these
dataclasses, so unknown keys and wrongly typed values are rejected.
`section.key=value` overrides are applied last.
"""

import json
import sys
if sys.version_info >= (3, 11):
    import tomllib
else:  # Python 3.10: API-identical backport
    import tomli as tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from omegaconf import OmegaConf
from omegaconf.errors import OmegaConfBaseException

from audio_frontend import AudioConfig
from errors import ConfigurationError


FEATURE_MODES = ("bottom-up", "baseline-grid")
ACTIVATIONS = ("relu", "identity")


@dataclass
class EncoderConfig:
    feature_dim: int = 2048
    n_regions: int = 36
    n_classes: int = 1601
    geometry_dim: int = 5
    fuse_dim: int = 1024
    hidden_dim: int = 1025
    embed_dim: int = 512
    activation: str = "relu"

    @property
    def fuse_input_dim(self) -> int:
        """Geometry + one-hot class + confidence."""
        return self.geometry_dim + self.n_classes + 1

    @property
    def fused_dim(self) -> int:
        return self.feature_dim + self.fuse_dim


@dataclass
class DecoderConfig:
    n_mels: int = 80
    prenet_units: List[int] = field(default_factory=lambda: [256, 256])
    attn_dim: int = 128
    location_filters: int = 32
    location_kernel: int = 31
    rnn_units: int = 1024
    rnn_layers: int = 2
    postnet_layers: int = 5
    postnet_filters: int = 512
    postnet_kernel: int = 5
    stop_threshold: float = 0.5
    max_frames: int = 400
    prenet_dropout: float = 0.5


@dataclass
class EmbedderConfig:
    conv_filters: int = 512
    conv_kernel: int = 9
    conv_stride: int = 2
    gru_hidden: int = 256
    gru_layers: int = 2


@dataclass
class LossWeights:
    lambda_ec: float = 0.25
    stop_positive_weight: float = 5.0
    mms_margin: float = 1.0


@dataclass
class TrainConfig:
    peak_lr: float = 2e-3
    warmup_iters: int = 4000
    decay_gamma: float = 0.99995
    eps_min: float = 97.5
    ss_k: float = 2000.0
    max_iters: int = 30000
    batch_size: int = 16
    grad_clip_norm: float = 1.0
    seed: int = 1
    lambda_ec: Optional[float] = None  # overrides losses.lambda_ec when set
    feature_mode: str = "bottom-up"
    eval_interval: int = 500
    checkpoint_interval: int = 1000
    device: str = "cpu"


@dataclass
class CorpusConfig:
    seed: int = 1
    vocab_size: int = 20
    n_images: int = 500
    captions_per_image: int = 3
    split_fractions: List[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])
    frames_per_token: int = 8
    noise_std: float = 0.0
    feature_dim: int = 2048


@dataclass
class PathsConfig:
    data_dir: str = "data/corpus"
    out_dir: str = "runs/sas"


@dataclass
class RunConfig:
    audio: AudioConfig = field(default_factory=AudioConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    @property
    def lambda_ec(self) -> float:
        if self.trainer.lambda_ec is not None:
            return float(self.trainer.lambda_ec)
        return float(self.losses.lambda_ec)

    def validate(self) -> "RunConfig":
        self.audio.validate()
        _check_positive("encoder", self.encoder, [
            "feature_dim", "n_regions", "n_classes", "geometry_dim", "fuse_dim", "hidden_dim", "embed_dim"])
        if self.encoder.activation not in ACTIVATIONS:
            raise ConfigurationError(
                f"encoder.activation must be one of {ACTIVATIONS}, got {self.encoder.activation!r}")

        dec = self.decoder
        _check_positive("decoder", dec, [
            "n_mels", "attn_dim", "location_filters", "location_kernel", "rnn_units",
            "postnet_layers", "postnet_filters", "postnet_kernel", "max_frames"])
        if dec.rnn_layers != 2:
            raise ConfigurationError(f"decoder.rnn_layers must be 2, got {dec.rnn_layers}")
        if not dec.prenet_units or any(u <= 0 for u in dec.prenet_units):
            raise ConfigurationError(f"decoder.prenet_units must be positive, got {dec.prenet_units}")
        if dec.location_kernel % 2 == 0 or dec.postnet_kernel % 2 == 0:
            raise ConfigurationError("decoder.location_kernel and decoder.postnet_kernel must be odd")
        if dec.postnet_layers < 2:
            raise ConfigurationError("decoder.postnet_layers must be >= 2")
        if not 0.0 < dec.stop_threshold < 1.0:
            raise ConfigurationError(f"decoder.stop_threshold must be in (0, 1), got {dec.stop_threshold}")
        if not 0.0 <= dec.prenet_dropout < 1.0:
            raise ConfigurationError(f"decoder.prenet_dropout must be in [0, 1), got {dec.prenet_dropout}")
        if dec.n_mels != self.audio.n_mels:
            raise ConfigurationError(
                f"decoder.n_mels ({dec.n_mels}) must equal audio.n_mels ({self.audio.n_mels})")

        _check_positive("embedder", self.embedder, [
            "conv_filters", "conv_kernel", "conv_stride", "gru_hidden", "gru_layers"])
        if 2 * self.embedder.gru_hidden != self.encoder.embed_dim:
            raise ConfigurationError(
                f"2 * embedder.gru_hidden ({2 * self.embedder.gru_hidden}) must equal "
                f"encoder.embed_dim ({self.encoder.embed_dim})")

        if self.losses.lambda_ec < 0 or (self.trainer.lambda_ec is not None and self.trainer.lambda_ec < 0):
            raise ConfigurationError("lambda_ec must be >= 0")
        if self.losses.stop_positive_weight <= 0:
            raise ConfigurationError("losses.stop_positive_weight must be > 0")
        if self.losses.mms_margin < 0:
            raise ConfigurationError("losses.mms_margin must be >= 0")

        tr = self.trainer
        if not 0.0 < tr.eps_min <= 100.0:
            raise ConfigurationError(f"trainer.eps_min must be in (0, 100], got {tr.eps_min}")
        if tr.warmup_iters < 0 or tr.max_iters < 0:
            raise ConfigurationError("trainer.warmup_iters and trainer.max_iters must be >= 0")
        if tr.peak_lr <= 0:
            raise ConfigurationError(f"trainer.peak_lr must be > 0, got {tr.peak_lr}")
        if not 0.0 < tr.decay_gamma <= 1.0:
            raise ConfigurationError(f"trainer.decay_gamma must be in (0, 1], got {tr.decay_gamma}")
        _check_positive("trainer", tr, ["ss_k", "batch_size", "grad_clip_norm", "eval_interval",
                                        "checkpoint_interval"])
        if tr.feature_mode not in FEATURE_MODES:
            raise ConfigurationError(
                f"trainer.feature_mode must be one of {FEATURE_MODES}, got {tr.feature_mode!r}")

        if self.corpus.feature_dim != self.encoder.feature_dim:
            raise ConfigurationError(
                f"corpus.feature_dim ({self.corpus.feature_dim}) must equal "
                f"encoder.feature_dim ({self.encoder.feature_dim})")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return OmegaConf.to_container(OmegaConf.structured(self), resolve=True)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: Dict[str, Any], overrides: Sequence[str] = ()) -> "RunConfig":
        return build_run_config(data, overrides)


def _check_positive(section: str, obj: Any, names: Sequence[str]) -> None:
    for name in names:
        value = getattr(obj, name)
        if value <= 0:
            raise ConfigurationError(f"{section}.{name} must be positive, got {value}")


def build_run_config(data: Optional[Dict[str, Any]] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """Merge `data` and dotlist overrides into the structured schema, then validate."""
    try:
        schema = OmegaConf.structured(RunConfig)
        merged = OmegaConf.merge(schema, data or {})
        if overrides:
            bad = [item for item in overrides if "=" not in item]
            if bad:
                raise ConfigurationError(f"overrides must look like section.key=value, got {bad}")
            merged = OmegaConf.merge(merged, OmegaConf.from_dotlist(list(overrides)))
        config = OmegaConf.to_object(merged)
    except OmegaConfBaseException as e:
        raise ConfigurationError(f"invalid configuration: {e}") from e
    return config.validate()


def load_run_config(path: Optional[Path] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """Read a TOML run file (optional) and apply overrides."""
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            with open(path, "rb") as f:
                data = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigurationError(f"{path}: {e}") from e
    return build_run_config(data, overrides)
