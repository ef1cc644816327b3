"""
Evaluation: spectrogram transcribers and the captioning-metric protocol.

Each test image is decoded free-running, the spectrogram is transcribed back
to tokens and the transcripts are scored against the image's reference
captions with BLEU-1..4, METEOR, ROUGE-L and CIDEr-D.
"""

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from audio_frontend import MelSpectrogram
from caption_metrics import MetricReport, compute_metric_report
from corpus import CorpusManifest, TokenSignatureBank, load_region_features
from errors import ConfigurationError, MetricInputError
from sas_model import SASModel
from utils import notify, write_json


class Transcriber:
    """Maps a log-mel spectrogram to a token sequence; deterministic per input."""
    name = "base"

    def begin_item(self, image_id: str, references: Sequence[Sequence[str]]) -> None:
        """Called before each item is transcribed. Most transcribers ignore it."""

    def transcribe(self, mel: MelSpectrogram) -> List[str]:
        raise NotImplementedError


class TemplateTranscriber(Transcriber):
    """
    Nearest-signature decoding: consecutive K-frame windows (a trailing
    partial window is dropped) map to the closest token signature; a window
    closest to silence ends the transcript. Ties go to the lowest token index.
    """
    name = "template"

    def __init__(self, bank: TokenSignatureBank):
        self.bank = bank
        k = bank.frames_per_token
        self._patterns = np.concatenate(
            [bank.signatures.reshape(len(bank.vocab), -1), bank.silence_signature.reshape(1, -1)], axis=0
        ).astype(np.float64)
        self._window = k
        self._silence_index = len(bank.vocab)

    def transcribe(self, mel: MelSpectrogram) -> List[str]:
        frames = np.asarray(mel.frames, dtype=np.float64)
        n_windows = frames.shape[0] // self._window
        tokens: List[str] = []
        for w in range(n_windows):
            window = frames[w * self._window:(w + 1) * self._window].reshape(-1)
            distances = np.sum((self._patterns - window) ** 2, axis=1)
            best = int(np.argmin(distances))
            if best == self._silence_index:
                break
            tokens.append(self.bank.vocab[best])
        return tokens


class OracleTranscriber(Transcriber):
    """Returns the current item's first reference; upper bound for the metrics."""
    name = "oracle"

    def __init__(self):
        self._current: List[str] = []

    def begin_item(self, image_id: str, references: Sequence[Sequence[str]]) -> None:
        self._current = list(references[0]) if references else []

    def transcribe(self, mel: MelSpectrogram) -> List[str]:
        return list(self._current)


class EmptyTranscriber(Transcriber):
    name = "empty"

    def transcribe(self, mel: MelSpectrogram) -> List[str]:
        return []


@dataclass
class TranscriberInfo:
    """Information about a transcriber."""
    name: str
    display_name: str
    available: bool
    priority: int  # Higher = preferred
    description: str


class TranscriberManager:
    """Registry of transcribers with auto-selection."""

    def __init__(self, bank: Optional[TokenSignatureBank] = None):
        self.bank = bank
        self.transcribers: Dict[str, TranscriberInfo] = {}
        self.detect_transcribers()

    def detect_transcribers(self) -> None:
        self.transcribers = {
            "template": TranscriberInfo(
                name="template",
                display_name="Template (nearest token signature)",
                available=self.bank is not None,
                priority=20,
                description="Inverse of the synthetic corpus renderer; needs the corpus signature bank.",
            ),
            "oracle": TranscriberInfo(
                name="oracle",
                display_name="Oracle (first reference)",
                available=True,
                priority=5,
                description="Returns the first reference caption; metric upper bound.",
            ),
            "empty": TranscriberInfo(
                name="empty",
                display_name="Empty",
                available=True,
                priority=0,
                description="Returns no tokens; metric lower bound.",
            ),
        }

    def get_available_transcribers(self) -> List[TranscriberInfo]:
        available = [info for info in self.transcribers.values() if info.available]
        return sorted(available, key=lambda x: x.priority, reverse=True)

    def get_transcriber_info(self, name: str) -> Optional[TranscriberInfo]:
        return self.transcribers.get(name)

    def auto_select_transcriber(self) -> str:
        available = self.get_available_transcribers()
        if not available:
            raise ConfigurationError("No transcribers available")
        return available[0].name

    def create(self, name: str = "auto") -> Transcriber:
        if name == "auto":
            name = self.auto_select_transcriber()
        info = self.get_transcriber_info(name)
        if info is None:
            raise ConfigurationError(
                f"Unknown transcriber '{name}' (choose from: {', '.join(self.transcribers)})")
        if not info.available:
            raise ConfigurationError(f"Transcriber '{name}' is not available: {info.description}")
        if name == "template":
            return TemplateTranscriber(self.bank)
        if name == "oracle":
            return OracleTranscriber()
        return EmptyTranscriber()


def evaluate(model: SASModel, manifest: CorpusManifest, split: str, transcriber: Transcriber,
             feature_mode: Optional[str] = None,
             progress_callback: Optional[Callable[[str], None]] = None) -> Dict[str, Any]:
    """
    Decode, transcribe and score every image of `split`.

    A failing item is recorded with success=False and an empty candidate;
    it never aborts the corpus.
    """
    records = manifest.split(split)
    if not records:
        raise MetricInputError(f"split {split!r} has no images")
    feature_mode = feature_mode or model.config.trainer.feature_mode
    start_time = time.time()

    notify(progress_callback, f"🔍 Evaluating {len(records)} {split} images with the "
                              f"{transcriber.name} transcriber")

    per_image: List[Dict[str, Any]] = []
    success_count = 0
    failure_count = 0
    for i, record in enumerate(records, 1):
        references = [list(cap.tokens) for cap in record.captions]
        entry: Dict[str, Any] = {
            "image_id": record.image_id,
            "references": references,
            "candidate": [],
            "n_frames": 0,
            "truncated": False,
            "success": False,
            "error": None,
        }
        try:
            rfs = load_region_features(manifest.resolve(record.feature_path(feature_mode)),
                                       image_id=record.image_id)
            result = model.synthesize(rfs)
            mel = MelSpectrogram(frames=result.mel_post.cpu().numpy(),
                                 hop_length=model.config.audio.hop_length,
                                 sample_rate=model.config.audio.sample_rate)
            transcriber.begin_item(record.image_id, references)
            entry.update(candidate=transcriber.transcribe(mel), n_frames=result.n_frames,
                         truncated=result.truncated, success=True)
            success_count += 1
        except Exception as e:
            entry["error"] = str(e)
            failure_count += 1
            notify(progress_callback, f"❌ {record.image_id}: {e}")
        per_image.append(entry)

        if progress_callback and i % max(1, len(records) // 10) == 0:
            progress_callback(f"Transcribed {i}/{len(records)} images")

    report = compute_metric_report([e["candidate"] for e in per_image], [e["references"] for e in per_image])
    notify(progress_callback, f"✅ Evaluation complete: {success_count} successful, {failure_count} failed")
    return {
        "success": failure_count == 0,
        "split": split,
        "transcriber": transcriber.name,
        "per_image": per_image,
        "report": report,
        "success_count": success_count,
        "failure_count": failure_count,
        "total_time": time.time() - start_time,
    }


def write_evaluation(result: Dict[str, Any], path: Path) -> Path:
    """{per_image: [{image_id, candidate, references, ...}], report: {B1..C}} as sorted JSON."""
    payload = {
        "split": result["split"],
        "transcriber": result["transcriber"],
        "per_image": result["per_image"],
        "report": result["report"].as_dict(),
        "success_count": result["success_count"],
        "failure_count": result["failure_count"],
    }
    return write_json(path, payload)


def write_transcripts(result: Dict[str, Any], path: Path) -> Path:
    """Plain-text dump: one block per image with the transcript and its references."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for entry in result["per_image"]:
        lines.append(entry["image_id"])
        lines.append("ASRs: " + " ".join(entry["candidate"]))
        for ref in entry["references"]:
            lines.append("REF:  " + " ".join(ref))
        if entry["error"]:
            lines.append("ERROR: " + entry["error"])
        lines.append("")
    path.write_text("\n".join(lines), encoding="utf-8")
    return path


def format_report_table(rows: Sequence[Dict[str, Any]]) -> str:
    """Header plus one line per {label, report} row, columns B1 B2 B3 B4 M R C."""
    width = max([len(str(row.get("label", ""))) for row in rows] + [5])
    lines = [f"{'run':<{width}} {MetricReport.header()}"]
    for row in rows:
        lines.append(f"{str(row.get('label', '')):<{width}} {row['report'].as_row()}")
    return "\n".join(lines)
