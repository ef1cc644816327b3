"""
Micro configuration and tiny corpus shared by the test scripts.

Everything is small enough that a handful of training iterations runs in
seconds on a CPU.
"""

import copy
from pathlib import Path
from typing import Any, Dict, Sequence

from config import RunConfig, build_run_config
from corpus import CorpusManifest, generate_synthetic_corpus


MICRO_CONFIG: Dict[str, Any] = {
    "audio": {"n_mels": 8},
    "encoder": {"feature_dim": 8, "fuse_dim": 4, "hidden_dim": 6, "embed_dim": 6},
    "decoder": {
        "n_mels": 8,
        "prenet_units": [6, 6],
        "attn_dim": 5,
        "location_filters": 3,
        "location_kernel": 3,
        "rnn_units": 8,
        "postnet_layers": 3,
        "postnet_filters": 5,
        "postnet_kernel": 3,
        "max_frames": 12,
        "prenet_dropout": 0.0,
    },
    "embedder": {"conv_filters": 4, "conv_kernel": 3, "conv_stride": 2, "gru_hidden": 3, "gru_layers": 2},
    "trainer": {
        "batch_size": 4,
        "max_iters": 4,
        "warmup_iters": 2,
        "eval_interval": 2,
        "checkpoint_interval": 2,
        "device": "cpu",
    },
    "corpus": {
        "feature_dim": 8,
        "vocab_size": 6,
        "n_images": 12,
        "captions_per_image": 2,
        "split_fractions": [0.5, 0.25, 0.25],
    },
}

MICRO_TOML = """
[audio]
n_mels = 8

[encoder]
feature_dim = 8
fuse_dim = 4
hidden_dim = 6
embed_dim = 6

[decoder]
n_mels = 8
prenet_units = [6, 6]
attn_dim = 5
location_filters = 3
location_kernel = 3
rnn_units = 8
postnet_layers = 3
postnet_filters = 5
postnet_kernel = 3
max_frames = 12
prenet_dropout = 0.0

[embedder]
conv_filters = 4
conv_kernel = 3
conv_stride = 2
gru_hidden = 3
gru_layers = 2

[trainer]
batch_size = 4
max_iters = 4
warmup_iters = 2
eval_interval = 2
checkpoint_interval = 2
device = "cpu"

[corpus]
feature_dim = 8
vocab_size = 6
n_images = 12
captions_per_image = 2
split_fractions = [0.5, 0.25, 0.25]
"""


def micro_config(overrides: Sequence[str] = ()) -> RunConfig:
    return build_run_config(copy.deepcopy(MICRO_CONFIG), overrides)


def micro_corpus(out_dir: Path, config: RunConfig = None, **kwargs) -> CorpusManifest:
    config = config or micro_config()
    params = dict(
        seed=config.corpus.seed,
        vocab_size=config.corpus.vocab_size,
        n_images=config.corpus.n_images,
        captions_per_image=config.corpus.captions_per_image,
        split_fractions=config.corpus.split_fractions,
        frames_per_token=config.corpus.frames_per_token,
        noise_std=config.corpus.noise_std,
        feature_dim=config.corpus.feature_dim,
        audio_config=config.audio,
    )
    params.update(kwargs)
    return generate_synthetic_corpus(Path(out_dir), **params)


def write_micro_toml(path: Path) -> Path:
    path = Path(path)
    path.write_text(MICRO_TOML, encoding="utf-8")
    return path
