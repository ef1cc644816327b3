"""
Trainer
=======

End-to-end optimization of SASModel:

- linear warmup to peak_lr, then exponential decay by decay_gamma per iteration
- inverse-sigmoid scheduled sampling with a floor (eps_min, in percent)
- Adam, global-norm clipping, non-finite guards
- SASCKPT checkpoints and resumable, seed-deterministic runs
"""

import json
import math
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np
import torch
from tqdm import tqdm

from config import RunConfig, TrainConfig, build_run_config
from corpus import CorpusManifest, TrainingBatch, batch_iterator, split_pairs
from errors import CheckpointError, CheckpointMismatchError, ConfigurationError, NumericalError
from losses import LossBreakdown
from sas_model import SASModel
from utils import format_time, get_device, notify


CHECKPOINT_MAGIC = b"SASCKPT"
CHECKPOINT_VERSION = 1
_CHECKPOINT_HEADER = struct.Struct("<II")
_CRC = struct.Struct("<I")

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------

def learning_rate(iteration: int, cfg: TrainConfig) -> float:
    if cfg.warmup_iters > 0 and iteration < cfg.warmup_iters:
        return cfg.peak_lr * iteration / cfg.warmup_iters
    return cfg.peak_lr * cfg.decay_gamma ** (iteration - cfg.warmup_iters)


def teacher_forcing_ratio(iteration: int, cfg: TrainConfig) -> float:
    """Percent of ground-truth decoder inputs: max(eps_min, 100·k/(k + exp(iter/k)))."""
    k = float(cfg.ss_k)
    exponent = iteration / k
    # exp overflows past ~709; the unclamped value is 0 there anyway
    value = 0.0 if exponent > 700 else 100.0 * k / (k + math.exp(exponent))
    return max(cfg.eps_min, min(100.0, value))


def step_seed(seed: int, iteration: int) -> int:
    return (seed * 1_000_003 + iteration) % (2 ** 63)


def draw_feed_mask(shape: Tuple[int, int], ratio: float, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """One Bernoulli(ratio/100) draw per decoder step and item."""
    probs = torch.full(shape, ratio / 100.0)
    return torch.bernoulli(probs, generator=generator).bool()


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

def build_optimizer(model: SASModel, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=cfg.peak_lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def _check_gradients(model: SASModel) -> None:
    for name, param in model.named_parameters():
        if param.grad is not None and not torch.isfinite(param.grad).all():
            raise NumericalError(f"gradient of {name} is not finite", tensor_name=name)


def train_step(model: SASModel, optimizer: torch.optim.Optimizer, batch: TrainingBatch,
               iteration: int, config: RunConfig,
               generator: Optional[torch.Generator] = None) -> LossBreakdown:
    """One scheduled-sampling forward, backward and Adam update (in place)."""
    model.train()
    ratio = teacher_forcing_ratio(iteration, config.trainer)
    feed_mask = draw_feed_mask(tuple(batch.frame_mask.shape), ratio, generator).to(batch.frame_mask.device)

    losses, _ = model.compute_losses(batch, feed_mask)

    optimizer.zero_grad(set_to_none=True)
    losses.total.backward()
    _check_gradients(model)
    torch.nn.utils.clip_grad_norm_(model.parameters(), config.trainer.grad_clip_norm)

    lr = learning_rate(iteration, config.trainer)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()

    return LossBreakdown(L_s=losses.L_s.detach(), L_st=losses.L_st.detach(),
                         L_ec=losses.L_ec.detach(), total=losses.total.detach())


@torch.no_grad()
def evaluate_dev_loss(model: SASModel, manifest: CorpusManifest, config: RunConfig,
                      split: str = "dev", max_batches: Optional[int] = None) -> Optional[Dict[str, float]]:
    """Teacher-forced losses averaged over the split's batches; None for an empty split."""
    was_training = model.training
    model.eval()
    device = next(model.parameters()).device
    sums: Dict[str, float] = {}
    n_batches = 0
    try:
        for batch in batch_iterator(manifest, split, config.trainer.batch_size,
                                    feature_mode=config.trainer.feature_mode, audio_config=config.audio):
            losses, _ = model.compute_losses(batch.to(device))
            for name, value in losses.as_floats().items():
                sums[name] = sums.get(name, 0.0) + value
            n_batches += 1
            if max_batches is not None and n_batches >= max_batches:
                break
    finally:
        model.train(was_training)
    if n_batches == 0:
        return None
    return {name: total / n_batches for name, total in sums.items()}


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class CheckpointState:
    config: Dict
    iteration: int
    tensors: Dict[str, np.ndarray]
    adam_steps: Dict[str, int] = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    @property
    def feature_mode(self) -> str:
        return self.config.get("trainer", {}).get("feature_mode", "bottom-up")


def capture_state(model: SASModel, optimizer: Optional[torch.optim.Optimizer],
                  config: RunConfig, iteration: int) -> CheckpointState:
    tensors: Dict[str, np.ndarray] = {}
    for name, value in model.state_dict().items():
        tensors[name] = value.detach().cpu().numpy().astype(np.float32)

    adam_steps: Dict[str, int] = {}
    if optimizer is not None:
        for name, param in model.named_parameters():
            slot = optimizer.state.get(param)
            if not slot:
                continue
            adam_steps[name] = int(float(slot["step"]))
            tensors[f"optim/{name}/exp_avg"] = slot["exp_avg"].detach().cpu().numpy().astype(np.float32)
            tensors[f"optim/{name}/exp_avg_sq"] = slot["exp_avg_sq"].detach().cpu().numpy().astype(np.float32)

    return CheckpointState(config=config.to_dict(), iteration=iteration, tensors=tensors, adam_steps=adam_steps)


def encode_checkpoint(state: CheckpointState) -> bytes:
    """
    SASCKPT | u32 version | u32 header_len | sorted JSON header |
    float32 LE blobs in index order | u32 crc32 of everything before.
    """
    index: List[Dict] = []
    blobs: List[bytes] = []
    offset = 0
    for name, array in state.tensors.items():
        blob = np.ascontiguousarray(array, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(array.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)

    header = json.dumps({
        "config": state.config,
        "iteration": state.iteration,
        "adam_steps": state.adam_steps,
        "tensors": index,
    }, sort_keys=True, separators=(",", ":")).encode("utf-8")

    body = CHECKPOINT_MAGIC + _CHECKPOINT_HEADER.pack(state.version, len(header)) + header + b"".join(blobs)
    return body + _CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(state: CheckpointState, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(state))
    tmp.replace(path)
    return path


def load_checkpoint(path: Path) -> CheckpointState:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"checkpoint not found: {path}")
    data = path.read_bytes()

    prefix = len(CHECKPOINT_MAGIC) + _CHECKPOINT_HEADER.size
    if len(data) < prefix + _CRC.size or data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a SASCKPT checkpoint or truncated header")
    version, header_len = _CHECKPOINT_HEADER.unpack_from(data, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")

    body, (crc,) = data[:-_CRC.size], _CRC.unpack(data[-_CRC.size:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: checksum mismatch, file is truncated or corrupt")

    try:
        header = json.loads(body[prefix:prefix + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable checkpoint header ({e})") from e

    blob_start = prefix + header_len
    tensors: Dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        start = blob_start + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(body):
            raise CheckpointError(f"{path}: tensor {entry['name']} extends past end of file")
        tensors[entry["name"]] = np.frombuffer(body[start:end], dtype="<f4").reshape(entry["shape"]).copy()

    return CheckpointState(config=header["config"], iteration=int(header["iteration"]),
                           tensors=tensors, adam_steps={k: int(v) for k, v in header["adam_steps"].items()},
                           version=version)


def restore_checkpoint(state: CheckpointState, model: SASModel,
                       optimizer: Optional[torch.optim.Optimizer] = None,
                       config: Optional[RunConfig] = None) -> None:
    """Load parameters (and Adam moments) into live objects; all checks run before anything is written."""
    if config is not None and state.feature_mode != config.trainer.feature_mode:
        raise CheckpointMismatchError(
            f"checkpoint was trained with feature_mode={state.feature_mode!r}, "
            f"config asks for {config.trainer.feature_mode!r}")

    current = model.state_dict()
    missing = sorted(set(current) - set(state.tensors))
    if missing:
        raise CheckpointMismatchError(f"checkpoint lacks parameters: {', '.join(missing[:5])}")
    for name, value in current.items():
        if tuple(value.shape) != tuple(state.tensors[name].shape):
            raise CheckpointMismatchError(
                f"{name}: checkpoint shape {tuple(state.tensors[name].shape)} != model shape {tuple(value.shape)}")

    model.load_state_dict({name: torch.from_numpy(state.tensors[name]).to(value.dtype)
                           for name, value in current.items()})

    if optimizer is None:
        return
    optim_state = optimizer.state_dict()
    slots = {}
    for idx, (name, param) in enumerate(model.named_parameters()):
        if name not in state.adam_steps:
            continue
        slots[idx] = {
            "step": torch.tensor(float(state.adam_steps[name])),
            "exp_avg": torch.from_numpy(state.tensors[f"optim/{name}/exp_avg"]).to(param.device, param.dtype),
            "exp_avg_sq": torch.from_numpy(state.tensors[f"optim/{name}/exp_avg_sq"]).to(param.device, param.dtype),
        }
    optim_state["state"] = slots
    optimizer.load_state_dict(optim_state)


def load_model(path: Path, device: Optional[str] = None) -> Tuple[SASModel, CheckpointState]:
    """Rebuild a model from the config snapshot stored in the checkpoint."""
    state = load_checkpoint(path)
    config = build_run_config(state.config)
    model = SASModel(config)
    restore_checkpoint(state, model)
    model.to(get_device(device or config.trainer.device))
    model.eval()
    return model, state


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

class TrainingLog:
    """JSON-lines writer, one record per line."""

    def __init__(self, path: Path, append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self.path, "a" if append else "w", encoding="utf-8")

    def write(self, record: Dict) -> None:
        self._file.write(json.dumps(record, sort_keys=True) + "\n")
        self._file.flush()

    def close(self) -> None:
        self._file.close()

    def __enter__(self) -> "TrainingLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def iteration_batches(manifest: CorpusManifest, config: RunConfig,
                      start_iteration: int = 0) -> Iterator[Tuple[int, TrainingBatch]]:
    """
    (iteration, batch) for iterations start+1 .. max_iters. Epoch e uses the
    shuffle seed derived from (seed, e), so any iteration's batch is fixed.
    """
    cfg = config.trainer
    n_pairs = len(split_pairs(manifest, "train"))
    if n_pairs == 0:
        raise ConfigurationError("train split is empty")
    per_epoch = math.ceil(n_pairs / cfg.batch_size)

    iteration = start_iteration + 1
    while iteration <= cfg.max_iters:
        epoch, skip = divmod(iteration - 1, per_epoch)
        for batch in batch_iterator(manifest, "train", cfg.batch_size,
                                    shuffle_seed=cfg.seed * 100_003 + epoch,
                                    feature_mode=cfg.feature_mode, audio_config=config.audio,
                                    skip_batches=skip):
            yield iteration, batch
            iteration += 1
            if iteration > cfg.max_iters:
                return


def checkpoint_path(out_dir: Path, iteration: int) -> Path:
    return Path(out_dir) / "checkpoints" / f"iter_{iteration:06d}.sasckpt"


def fit(manifest: CorpusManifest, config: RunConfig, out_dir: Path,
        resume: Optional[Path] = None,
        progress_callback: Optional[Callable[[str], None]] = None,
        show_progress: bool = True) -> Dict:
    """
    Train for trainer.max_iters iterations.

    Writes checkpoints/iter_NNNNNN.sasckpt (initial, periodic, final),
    train_log.jsonl ({iter, lr, tf_ratio, L_s, L_st, L_ec, total} per step)
    and dev_log.jsonl (teacher-forced dev losses every eval_interval).
    """
    cfg = config.trainer
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    device = get_device(cfg.device)

    torch.manual_seed(cfg.seed)
    model = SASModel(config).to(device)
    optimizer = build_optimizer(model, cfg)

    start_iteration = 0
    if resume is not None:
        state = load_checkpoint(resume)
        restore_checkpoint(state, model, optimizer, config)
        start_iteration = state.iteration
        notify(progress_callback, f"🔄 Resumed from {resume} at iteration {start_iteration}")

    last_checkpoint: Optional[Path] = Path(resume) if resume is not None else None
    history: List[Dict] = []
    dev_history: List[Dict] = []
    appending = resume is not None

    with TrainingLog(out_dir / "train_log.jsonl", append=appending) as log, \
            TrainingLog(out_dir / "dev_log.jsonl", append=appending) as dev_log:

        if resume is None:
            last_checkpoint = save_checkpoint(capture_state(model, optimizer, config, 0), checkpoint_path(out_dir, 0))
            dev = evaluate_dev_loss(model, manifest, config)
            if dev is not None:
                dev_record = {"iter": 0, **dev}
                dev_log.write(dev_record)
                dev_history.append(dev_record)

        notify(progress_callback, f"🚀 Training on {device}: iterations {start_iteration + 1}..{cfg.max_iters}, "
                                  f"feature_mode={cfg.feature_mode}, lambda_ec={config.lambda_ec}, "
                                  f"eps_min={cfg.eps_min}")
        started = time.time()

        with tqdm(total=cfg.max_iters, initial=start_iteration, desc="train",
                  unit="it", disable=not show_progress) as bar:
            for iteration, batch in iteration_batches(manifest, config, start_iteration):
                seed = step_seed(cfg.seed, iteration)
                torch.manual_seed(seed)
                generator = torch.Generator().manual_seed(seed)

                losses = train_step(model, optimizer, batch.to(device), iteration, config, generator)
                record = {
                    "iter": iteration,
                    "lr": learning_rate(iteration, cfg),
                    "tf_ratio": teacher_forcing_ratio(iteration, cfg),
                    **losses.as_floats(),
                }
                log.write(record)
                history.append(record)
                bar.update(1)
                bar.set_postfix(total=f"{record['total']:.4f}", tf=f"{record['tf_ratio']:.2f}")

                if iteration % cfg.eval_interval == 0:
                    dev = evaluate_dev_loss(model, manifest, config)
                    if dev is not None:
                        dev_record = {"iter": iteration, **dev}
                        dev_log.write(dev_record)
                        dev_history.append(dev_record)
                        notify(progress_callback, f"📊 iter {iteration}: dev L_s={dev['L_s']:.4f} "
                                                  f"total={dev['total']:.4f}")

                if iteration % cfg.checkpoint_interval == 0 or iteration == cfg.max_iters:
                    last_checkpoint = save_checkpoint(
                        capture_state(model, optimizer, config, iteration), checkpoint_path(out_dir, iteration))

    notify(progress_callback, f"✅ Training finished in {format_time(time.time() - started)}; "
                              f"last checkpoint: {last_checkpoint}")
    return {
        "success": True,
        "iterations": cfg.max_iters,
        "start_iteration": start_iteration,
        "final_checkpoint": str(last_checkpoint) if last_checkpoint else None,
        "history": history,
        "dev_history": dev_history,
        "log_path": str(out_dir / "train_log.jsonl"),
        "model": model,
    }
