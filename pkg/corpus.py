"""
Corpus
======

Region-feature ingestion, spoken-caption records and the deterministic
synthetic desk corpus.

A synthetic image owns 1-3 latent objects. Its 36 region descriptors are
drawn around per-object Gaussian prototypes (object regions carry the
object's class index and a confidence near 1, the rest are low-confidence
distractors). Captions come from a fixed template grammar over the objects
and are "spoken" by concatenating per-token log-mel signatures.
"""

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch

from audio_frontend import AudioConfig, MelSpectrogram, read_mel, write_mel
from errors import ConfigurationError, FeatureFormatError, VocabularyError
from utils import get_num_workers, notify, read_json, write_json


REGION_COUNT = 36
NUM_CLASSES = 1601
GEOMETRY_DIM = 5
GRID_SIDE = 6

REGION_MAGIC = b"SASRF1"
_REGION_HEADER = struct.Struct("<II")

MANIFEST_SCHEMA_VERSION = 1
SIGNATURE_MARGIN = 4.0
SIGNATURE_LEVEL = 4.0  # token signatures sit this far above the log floor

FUNCTION_WORDS = ["a", "and", "with", "near", "on", "the"]
OBJECT_NOUNS = [
    "dog", "cat", "man", "woman", "boy", "girl", "ball", "car", "tree", "bike",
    "horse", "bird", "water", "grass", "beach", "snow", "street", "child",
    "shirt", "field", "rock", "hat", "bench", "boat",
]


@dataclass
class RegionFeatureSet:
    """Bottom-up descriptors of one image: appearance, box geometry, class, confidence."""
    image_id: str
    f: np.ndarray  # (36, d) float32
    p: np.ndarray  # (36, 5) float32: x1, y1, x2, y2, area ratio
    c: np.ndarray  # (36,) int class indices in [0, 1601)
    s: np.ndarray  # (36,) float32 confidences in [0, 1]

    @property
    def feature_dim(self) -> int:
        return int(self.f.shape[1])

    def validate(self) -> None:
        """Raise FeatureFormatError naming the first offending field."""
        if self.f.ndim != 2 or self.f.shape[0] != REGION_COUNT:
            raise FeatureFormatError(
                f"{self.image_id}: expected {REGION_COUNT} regions, found {self.f.shape[0]}", field="f")
        if self.p.shape != (REGION_COUNT, GEOMETRY_DIM):
            raise FeatureFormatError(f"{self.image_id}: p has shape {self.p.shape}", field="p")
        if self.c.shape != (REGION_COUNT,):
            raise FeatureFormatError(f"{self.image_id}: c has shape {self.c.shape}", field="c")
        if self.s.shape != (REGION_COUNT,):
            raise FeatureFormatError(f"{self.image_id}: s has shape {self.s.shape}", field="s")

        for name in ("f", "p", "s"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise FeatureFormatError(f"{self.image_id}: non-finite values in {name}", field=name)

        x1, y1, x2, y2, area = (self.p[:, k] for k in range(GEOMETRY_DIM))
        if np.any(x1 > x2) or np.any(y1 > y2):
            raise FeatureFormatError(f"{self.image_id}: box corners out of order", field="p")
        if np.any(self.p[:, :4] < 0) or np.any(self.p[:, :4] > 1):
            raise FeatureFormatError(f"{self.image_id}: box coordinates outside [0, 1]", field="p")
        if np.any(area <= 0) or np.any(area > 1):
            raise FeatureFormatError(f"{self.image_id}: area ratio outside (0, 1]", field="p")
        if np.any(self.c < 0) or np.any(self.c >= NUM_CLASSES):
            raise FeatureFormatError(f"{self.image_id}: class index outside [0, {NUM_CLASSES})", field="c")
        if np.any(self.s < 0) or np.any(self.s > 1):
            raise FeatureFormatError(f"{self.image_id}: confidence outside [0, 1]", field="s")


def write_region_features(rfs: RegionFeatureSet, path: Path) -> Path:
    """SASRF1: magic, u32 l, u32 d, f, p (float32), c (u16), s (float32), little-endian."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n_regions, dim = rfs.f.shape
    with open(path, "wb") as out:
        out.write(REGION_MAGIC)
        out.write(_REGION_HEADER.pack(n_regions, dim))
        out.write(np.ascontiguousarray(rfs.f, dtype="<f4").tobytes())
        out.write(np.ascontiguousarray(rfs.p, dtype="<f4").tobytes())
        out.write(np.ascontiguousarray(rfs.c, dtype="<u2").tobytes())
        out.write(np.ascontiguousarray(rfs.s, dtype="<f4").tobytes())
    return path


def load_region_features(path: Path, image_id: Optional[str] = None) -> RegionFeatureSet:
    path = Path(path)
    image_id = image_id or path.stem
    try:
        data = path.read_bytes()
    except OSError as e:
        raise FeatureFormatError(f"{path}: cannot read feature file ({e})", field="file") from e

    header_size = len(REGION_MAGIC) + _REGION_HEADER.size
    if len(data) < header_size or data[:len(REGION_MAGIC)] != REGION_MAGIC:
        raise FeatureFormatError(f"{path}: malformed header (missing SASRF1 magic)", field="header")
    n_regions, dim = _REGION_HEADER.unpack_from(data, len(REGION_MAGIC))
    if n_regions != REGION_COUNT:
        raise FeatureFormatError(
            f"{path}: expected {REGION_COUNT} regions, found {n_regions}", field="l")
    if dim == 0:
        raise FeatureFormatError(f"{path}: feature dimension is zero", field="d")

    sizes = [
        ("f", "<f4", n_regions * dim),
        ("p", "<f4", n_regions * GEOMETRY_DIM),
        ("c", "<u2", n_regions),
        ("s", "<f4", n_regions),
    ]
    expected = header_size + sum(np.dtype(dt).itemsize * count for _, dt, count in sizes)
    if len(data) != expected:
        raise FeatureFormatError(
            f"{path}: expected {expected} bytes, found {len(data)}", field="size")

    arrays = {}
    offset = header_size
    for name, dt, count in sizes:
        arrays[name] = np.frombuffer(data, dtype=dt, count=count, offset=offset).copy()
        offset += np.dtype(dt).itemsize * count

    rfs = RegionFeatureSet(
        image_id=image_id,
        f=arrays["f"].reshape(n_regions, dim).astype(np.float32),
        p=arrays["p"].reshape(n_regions, GEOMETRY_DIM).astype(np.float32),
        c=arrays["c"].astype(np.int64),
        s=arrays["s"].astype(np.float32),
    )
    rfs.validate()
    return rfs


@dataclass
class TokenSignatureBank:
    """Per-token K-frame log-mel patterns used to "speak" and "hear" captions."""
    vocab: List[str]
    signatures: np.ndarray         # (V, K, n_mels)
    silence_signature: np.ndarray  # (K, n_mels)
    frames_per_token: int = 8

    def __post_init__(self):
        self._index = {token: i for i, token in enumerate(self.vocab)}

    @property
    def n_mels(self) -> int:
        return int(self.silence_signature.shape[1])

    def token_index(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise VocabularyError(f"token {token!r} is not in the signature bank vocabulary") from None

    def min_separation(self) -> float:
        """Smallest Euclidean distance between two distinct patterns (silence included)."""
        patterns = np.concatenate(
            [self.signatures, self.silence_signature[None]], axis=0).reshape(len(self.vocab) + 1, -1)
        patterns = patterns.astype(np.float64)
        sq = np.sum(patterns ** 2, axis=1)
        dist2 = sq[:, None] + sq[None, :] - 2.0 * patterns @ patterns.T
        np.fill_diagonal(dist2, np.inf)
        return float(np.sqrt(max(dist2.min(), 0.0)))


def build_signature_bank(vocab: Sequence[str], seed: int, n_mels: int = 80,
                         frames_per_token: int = 8, log_floor: float = 1e-5,
                         margin: float = SIGNATURE_MARGIN) -> TokenSignatureBank:
    """
    Seeded +-0.5 patterns around a level above the log floor; silence is the floor itself.
    A pattern closer than `margin` to an earlier one is redrawn.
    """
    if frames_per_token < 1:
        raise ConfigurationError("frames_per_token must be >= 1")
    rng = np.random.default_rng([seed, 7919])
    floor = float(np.log(log_floor))
    silence = np.full((frames_per_token, n_mels), floor, dtype=np.float32)

    accepted: List[np.ndarray] = []
    for _ in vocab:
        for _attempt in range(1000):
            signs = rng.choice([-0.5, 0.5], size=(frames_per_token, n_mels))
            candidate = (floor + SIGNATURE_LEVEL + signs).astype(np.float32)
            others = accepted + [silence]
            if all(np.linalg.norm(candidate - other) >= margin for other in others):
                accepted.append(candidate)
                break
        else:
            raise ConfigurationError(
                f"could not draw {len(vocab)} signatures separated by {margin}; "
                "increase frames_per_token or n_mels")

    signatures = np.stack(accepted) if accepted else np.zeros((0, frames_per_token, n_mels), np.float32)
    return TokenSignatureBank(
        vocab=list(vocab), signatures=signatures,
        silence_signature=silence, frames_per_token=frames_per_token)


def save_signature_bank(bank: TokenSignatureBank, path: Path) -> Path:
    """Bank rows in SASMEL1 layout: every token's K frames, then silence."""
    stacked = np.concatenate(
        [bank.signatures.reshape(-1, bank.n_mels), bank.silence_signature], axis=0)
    return write_mel(MelSpectrogram(frames=stacked, hop_length=0, sample_rate=0), path)


def load_signature_bank(path: Path, vocab: Sequence[str], frames_per_token: int) -> TokenSignatureBank:
    stacked = read_mel(path).frames
    k = frames_per_token
    if stacked.shape[0] != (len(vocab) + 1) * k:
        raise FeatureFormatError(
            f"{path}: bank holds {stacked.shape[0]} frames, expected {(len(vocab) + 1) * k}", field="frames")
    signatures = stacked[:len(vocab) * k].reshape(len(vocab), k, -1)
    return TokenSignatureBank(
        vocab=list(vocab), signatures=signatures.copy(),
        silence_signature=stacked[len(vocab) * k:].copy(), frames_per_token=k)


def render_caption_speech(tokens: Sequence[str], bank: TokenSignatureBank, noise_std: float = 0.0,
                          rng: Optional[np.random.Generator] = None,
                          audio_config: Optional[AudioConfig] = None) -> MelSpectrogram:
    """Stack the tokens' signatures (K frames each) and add Gaussian noise, kept above the floor."""
    audio_config = audio_config or AudioConfig(n_mels=bank.n_mels)
    indices = [bank.token_index(token) for token in tokens]
    if not indices:
        frames = np.zeros((0, bank.n_mels), dtype=np.float32)
    else:
        frames = bank.signatures[indices].reshape(-1, bank.n_mels).astype(np.float32)
        if noise_std > 0:
            rng = rng if rng is not None else np.random.default_rng(0)
            noisy = frames + rng.normal(0.0, noise_std, size=frames.shape)
            frames = np.maximum(noisy, np.log(audio_config.log_floor)).astype(np.float32)
    return MelSpectrogram(frames=frames, hop_length=audio_config.hop_length,
                          sample_rate=audio_config.sample_rate)


@dataclass
class CaptionRecord:
    image_id: str
    tokens: List[str]
    mel_ref: str  # relative to the manifest directory


@dataclass
class ImageRecord:
    image_id: str
    features: str
    grid_features: Optional[str]
    objects: List[int]  # latent object class indices
    captions: List[CaptionRecord] = field(default_factory=list)

    def feature_path(self, feature_mode: str) -> str:
        if feature_mode == "baseline-grid":
            if not self.grid_features:
                raise ConfigurationError(f"{self.image_id}: corpus has no baseline-grid features")
            return self.grid_features
        return self.features


@dataclass
class CorpusManifest:
    root: Path
    seed: int
    vocab: List[str]
    splits: Dict[str, List[ImageRecord]]
    frames_per_token: int = 8
    n_mels: int = 80
    feature_dim: int = 2048
    noise_std: float = 0.0
    bank: str = "bank.sasmel"
    schema_version: int = MANIFEST_SCHEMA_VERSION

    def resolve(self, relative: str) -> Path:
        return self.root / relative

    def split(self, name: str) -> List[ImageRecord]:
        if name not in self.splits:
            raise ConfigurationError(f"split {name!r} not in manifest (have: {', '.join(self.splits)})")
        return self.splits[name]

    def load_bank(self) -> TokenSignatureBank:
        return load_signature_bank(self.resolve(self.bank), self.vocab, self.frames_per_token)

    def to_dict(self) -> Dict:
        return {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "vocab": list(self.vocab),
            "frames_per_token": self.frames_per_token,
            "n_mels": self.n_mels,
            "feature_dim": self.feature_dim,
            "noise_std": self.noise_std,
            "bank": self.bank,
            "splits": {
                name: [
                    {
                        "image_id": rec.image_id,
                        "features": rec.features,
                        "grid_features": rec.grid_features,
                        "objects": list(rec.objects),
                        "captions": [{"tokens": list(cap.tokens), "mel": cap.mel_ref} for cap in rec.captions],
                    }
                    for rec in records
                ]
                for name, records in self.splits.items()
            },
        }


def save_manifest(manifest: CorpusManifest, path: Optional[Path] = None) -> Path:
    path = Path(path) if path else manifest.root / "manifest.json"
    return write_json(path, manifest.to_dict())


def load_manifest(path: Path) -> CorpusManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise ConfigurationError(f"manifest not found: {path}")
    data = read_json(path)
    if data.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise FeatureFormatError(
            f"{path}: unsupported manifest schema_version {data.get('schema_version')}", field="schema_version")

    splits: Dict[str, List[ImageRecord]] = {}
    for name, records in data["splits"].items():
        splits[name] = [
            ImageRecord(
                image_id=rec["image_id"],
                features=rec["features"],
                grid_features=rec.get("grid_features"),
                objects=list(rec.get("objects", [])),
                captions=[CaptionRecord(image_id=rec["image_id"], tokens=list(cap["tokens"]), mel_ref=cap["mel"])
                          for cap in rec["captions"]],
            )
            for rec in records
        ]
    return CorpusManifest(
        root=path.parent,
        seed=data["seed"],
        vocab=list(data["vocab"]),
        splits=splits,
        frames_per_token=data.get("frames_per_token", 8),
        n_mels=data.get("n_mels", 80),
        feature_dim=data.get("feature_dim", 2048),
        noise_std=data.get("noise_std", 0.0),
        bank=data.get("bank", "bank.sasmel"),
    )


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

def build_vocabulary(vocab_size: int) -> Tuple[List[str], List[str]]:
    """Split V tokens into template function words and object nouns."""
    n_function = min(len(FUNCTION_WORDS), vocab_size // 2)
    function_words = FUNCTION_WORDS[:n_function]
    n_objects = vocab_size - n_function
    nouns = [OBJECT_NOUNS[i] if i < len(OBJECT_NOUNS) else f"object{i}" for i in range(n_objects)]
    return function_words, nouns


def object_class_index(object_idx: int) -> int:
    """Class 0 is background; object k maps to class k + 1."""
    return object_idx + 1


def template_caption(objects: Sequence[int], nouns: Sequence[str], function_words: Sequence[str],
                     rng: np.random.Generator) -> List[str]:
    """"a dog", "a dog with a ball", "a man near a bike and a car", ..."""
    article = function_words[0]
    connectors = list(function_words[1:])
    order = rng.permutation(len(objects))
    tokens = [article, nouns[objects[order[0]]]]
    for k in order[1:]:
        if connectors:
            tokens.append(connectors[int(rng.integers(len(connectors)))])
        tokens.extend([article, nouns[objects[k]]])
    return tokens


def _random_boxes(rng: np.random.Generator, count: int) -> np.ndarray:
    x1 = rng.uniform(0.0, 0.7, count)
    y1 = rng.uniform(0.0, 0.7, count)
    x2 = np.minimum(1.0, x1 + rng.uniform(0.1, 0.3, count))
    y2 = np.minimum(1.0, y1 + rng.uniform(0.1, 0.3, count))
    area = np.clip((x2 - x1) * (y2 - y1), 1e-3, 1.0)
    return np.stack([x1, y1, x2, y2, area], axis=1).astype(np.float32)


def _synthetic_regions(image_id: str, objects: Sequence[int], prototypes: np.ndarray,
                       n_objects: int, rng: np.random.Generator) -> Tuple[RegionFeatureSet, np.ndarray]:
    dim = prototypes.shape[1]
    f = (0.5 * rng.normal(size=(REGION_COUNT, dim))).astype(np.float32)
    p = _random_boxes(rng, REGION_COUNT)
    c = rng.integers(object_class_index(n_objects), NUM_CLASSES, size=REGION_COUNT).astype(np.int64)
    s = rng.uniform(0.05, 0.4, REGION_COUNT).astype(np.float32)

    slots = rng.permutation(REGION_COUNT)
    cursor = 0
    for obj in objects:
        n_regions = int(rng.integers(4, 9))
        for slot in slots[cursor:cursor + n_regions]:
            f[slot] = prototypes[obj] + 0.1 * rng.normal(size=dim)
            c[slot] = object_class_index(obj)
            s[slot] = rng.uniform(0.85, 1.0)
        cursor += n_regions

    return RegionFeatureSet(image_id=image_id, f=f, p=p, c=c, s=s), slots


def _synthetic_grid(image_id: str, objects: Sequence[int], prototypes: np.ndarray,
                    rng: np.random.Generator) -> RegionFeatureSet:
    """6x6 raster-scan cells; each object smears over a random block of cells, no class/confidence."""
    dim = prototypes.shape[1]
    f = (0.3 * rng.normal(size=(REGION_COUNT, dim))).astype(np.float32)
    for obj in objects:
        row, col = rng.integers(0, GRID_SIDE - 1, size=2)
        height, width = rng.integers(1, 3, size=2)
        for r in range(row, min(GRID_SIDE, row + height)):
            for cc in range(col, min(GRID_SIDE, col + width)):
                f[r * GRID_SIDE + cc] += 0.8 * prototypes[obj]

    cells = np.arange(REGION_COUNT)
    rows, cols = cells // GRID_SIDE, cells % GRID_SIDE
    p = np.stack([cols / GRID_SIDE, rows / GRID_SIDE, (cols + 1) / GRID_SIDE, (rows + 1) / GRID_SIDE,
                  np.full(REGION_COUNT, 1.0 / REGION_COUNT)], axis=1).astype(np.float32)
    return RegionFeatureSet(
        image_id=image_id, f=f, p=p,
        c=np.zeros(REGION_COUNT, dtype=np.int64), s=np.zeros(REGION_COUNT, dtype=np.float32))


def split_sizes(n_images: int, split_fractions: Sequence[float]) -> Tuple[int, int, int]:
    if len(split_fractions) != 3:
        raise ConfigurationError("split_fractions needs exactly three values (train, dev, test)")
    fractions = [float(x) for x in split_fractions]
    if any(x < 0 for x in fractions) or abs(sum(fractions) - 1.0) > 1e-6:
        raise ConfigurationError(f"split fractions must be nonnegative and sum to 1, got {fractions}")
    n_dev = int(round(n_images * fractions[1]))
    n_test = int(round(n_images * fractions[2]))
    n_train = n_images - n_dev - n_test
    if n_train < 1:
        raise ConfigurationError(f"split fractions {fractions} leave no training images")
    return n_train, n_dev, n_test


def generate_synthetic_corpus(out_dir: Path, seed: int = 1, vocab_size: int = 20, n_images: int = 500,
                              captions_per_image: int = 3,
                              split_fractions: Sequence[float] = (0.8, 0.1, 0.1),
                              frames_per_token: int = 8, noise_std: float = 0.0,
                              feature_dim: int = 2048, audio_config: Optional[AudioConfig] = None,
                              progress_callback: Optional[Callable[[str], None]] = None) -> CorpusManifest:
    """Write features, grid features, caption mels, signature bank and manifest.json under out_dir."""
    audio_config = audio_config or AudioConfig()
    if vocab_size < 2:
        raise ConfigurationError(f"vocab_size must be >= 2, got {vocab_size}")
    if n_images < 10:
        raise ConfigurationError(f"n_images must be >= 10, got {n_images}")
    if not 1 <= captions_per_image <= 5:
        raise ConfigurationError(f"captions_per_image must be in [1, 5], got {captions_per_image}")
    if noise_std < 0:
        raise ConfigurationError("noise_std must be >= 0")
    n_train, n_dev, n_test = split_sizes(n_images, split_fractions)

    function_words, nouns = build_vocabulary(vocab_size)
    n_objects = len(nouns)
    if object_class_index(n_objects) >= NUM_CLASSES:
        raise ConfigurationError(f"vocab_size {vocab_size} needs more than {NUM_CLASSES} classes")
    vocab = function_words + nouns

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    bank = build_signature_bank(vocab, seed, n_mels=audio_config.n_mels,
                                frames_per_token=frames_per_token, log_floor=audio_config.log_floor)
    save_signature_bank(bank, out_dir / "bank.sasmel")

    prototypes = rng.normal(size=(n_objects, feature_dim)).astype(np.float32)
    notify(progress_callback, f"🚀 Generating {n_images} synthetic images (V={vocab_size}, seed={seed})")

    records: List[ImageRecord] = []
    for idx in range(n_images):
        image_id = f"img{idx:05d}"
        n_present = int(rng.integers(1, min(3, n_objects) + 1))
        objects = [int(x) for x in rng.choice(n_objects, size=n_present, replace=False)]

        regions, _ = _synthetic_regions(image_id, objects, prototypes, n_objects, rng)
        grid = _synthetic_grid(image_id, objects, prototypes, rng)
        feature_rel = f"features/{image_id}.sasrf"
        grid_rel = f"grid/{image_id}.sasrf"
        write_region_features(regions, out_dir / feature_rel)
        write_region_features(grid, out_dir / grid_rel)

        record = ImageRecord(image_id=image_id, features=feature_rel, grid_features=grid_rel,
                             objects=[object_class_index(o) for o in objects])
        for j in range(captions_per_image):
            tokens = template_caption(objects, nouns, function_words, rng)
            mel = render_caption_speech(tokens, bank, noise_std, rng=rng, audio_config=audio_config)
            mel_rel = f"mels/{image_id}_{j}.sasmel"
            write_mel(mel, out_dir / mel_rel)
            record.captions.append(CaptionRecord(image_id=image_id, tokens=tokens, mel_ref=mel_rel))
        records.append(record)

        if progress_callback and (idx + 1) % max(1, n_images // 10) == 0:
            progress_callback(f"Generated {idx + 1}/{n_images} images")

    order = rng.permutation(n_images)
    shuffled = [records[i] for i in order]
    splits = {
        "train": shuffled[:n_train],
        "dev": shuffled[n_train:n_train + n_dev],
        "test": shuffled[n_train + n_dev:],
    }

    manifest = CorpusManifest(
        root=out_dir, seed=seed, vocab=vocab, splits=splits,
        frames_per_token=frames_per_token, n_mels=audio_config.n_mels,
        feature_dim=feature_dim, noise_std=noise_std)
    manifest_path = save_manifest(manifest)
    notify(progress_callback, f"✅ Corpus written: {manifest_path} "
                              f"(train {n_train}, dev {n_dev}, test {n_test})")
    return manifest


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

@dataclass
class TrainingBatch:
    image_ids: List[str]
    tokens: List[List[str]]
    region_f: torch.Tensor      # (B, 36, d)
    region_p: torch.Tensor      # (B, 36, 5)
    region_c: torch.Tensor      # (B, 36) long
    region_s: torch.Tensor      # (B, 36)
    target_mels: torch.Tensor   # (B, T_max, n_mels)
    frame_mask: torch.Tensor    # (B, T_max) bool
    stop_targets: torch.Tensor  # (B, T_max)
    lengths: torch.Tensor       # (B,) long
    match_mask: torch.Tensor    # (B, B) bool, True for known positives

    @property
    def size(self) -> int:
        return len(self.image_ids)

    def to(self, device) -> "TrainingBatch":
        moved = {name: getattr(self, name).to(device) for name in (
            "region_f", "region_p", "region_c", "region_s", "target_mels",
            "frame_mask", "stop_targets", "lengths", "match_mask")}
        return TrainingBatch(image_ids=self.image_ids, tokens=self.tokens, **moved)


def stack_region_features(feature_sets: Sequence[RegionFeatureSet]) -> Dict[str, torch.Tensor]:
    return {
        "region_f": torch.from_numpy(np.stack([r.f for r in feature_sets]).astype(np.float32)),
        "region_p": torch.from_numpy(np.stack([r.p for r in feature_sets]).astype(np.float32)),
        "region_c": torch.from_numpy(np.stack([r.c for r in feature_sets]).astype(np.int64)),
        "region_s": torch.from_numpy(np.stack([r.s for r in feature_sets]).astype(np.float32)),
    }


def collate_batch(items: Sequence[Tuple[RegionFeatureSet, MelSpectrogram, List[str]]],
                  pad_value: float) -> TrainingBatch:
    """
    Pad mels to the longest item. Stop targets are 0 on valid frames except 1
    on the last valid frame and on every padding frame.
    """
    lengths = [mel.n_frames for _, mel, _ in items]
    n_mels = items[0][1].n_mels
    t_max = max(lengths) if lengths else 0
    batch_size = len(items)

    mels = np.full((batch_size, t_max, n_mels), pad_value, dtype=np.float32)
    frame_mask = np.zeros((batch_size, t_max), dtype=bool)
    stop_targets = np.ones((batch_size, t_max), dtype=np.float32)
    for i, (_, mel, _) in enumerate(items):
        length = lengths[i]
        mels[i, :length] = mel.frames
        frame_mask[i, :length] = True
        stop_targets[i, :max(length - 1, 0)] = 0.0

    image_ids = [rfs.image_id for rfs, _, _ in items]
    match_mask = np.array([[a == b for b in image_ids] for a in image_ids], dtype=bool)

    return TrainingBatch(
        image_ids=image_ids,
        tokens=[list(tokens) for _, _, tokens in items],
        target_mels=torch.from_numpy(mels),
        frame_mask=torch.from_numpy(frame_mask),
        stop_targets=torch.from_numpy(stop_targets),
        lengths=torch.tensor(lengths, dtype=torch.long),
        match_mask=torch.from_numpy(match_mask),
        **stack_region_features([rfs for rfs, _, _ in items]),
    )


def split_pairs(manifest: CorpusManifest, split: str) -> List[Tuple[ImageRecord, CaptionRecord]]:
    return [(rec, cap) for rec in manifest.split(split) for cap in rec.captions]


def batch_iterator(manifest: CorpusManifest, split: str, batch_size: int,
                   shuffle_seed: Optional[int] = None, feature_mode: str = "bottom-up",
                   audio_config: Optional[AudioConfig] = None,
                   num_workers: Optional[int] = None, skip_batches: int = 0) -> Iterator[TrainingBatch]:
    """
    Yield padded batches of (image, spoken caption) pairs.

    Items are shuffled with `shuffle_seed` (None keeps manifest order); files
    are read by a bounded thread pool, results consumed in order. The first
    `skip_batches` batches of the order are skipped without being loaded.
    """
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    audio_config = audio_config or AudioConfig(n_mels=manifest.n_mels)
    pairs = split_pairs(manifest, split)
    if not pairs:
        return

    order = np.arange(len(pairs))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(pairs))

    def load(index: int):
        rec, cap = pairs[index]
        rfs = load_region_features(manifest.resolve(rec.feature_path(feature_mode)), image_id=rec.image_id)
        mel = read_mel(manifest.resolve(cap.mel_ref), audio_config.hop_length, audio_config.sample_rate)
        return rfs, mel, cap.tokens

    workers = num_workers or get_num_workers()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for start in range(skip_batches * batch_size, len(order), batch_size):
            chunk = order[start:start + batch_size]
            items = list(pool.map(load, chunk))
            yield collate_batch(items, audio_config.log_floor_value)
