"""
Image features -> spoken description files.

For each feature file: encode, decode free-running, invert with Griffin-Lim
and write <stem>.wav, <stem>.sasmel and <stem>.sasaln (+ JSON sidecar).
"""

import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

from audio_frontend import MelSpectrogram, build_mel_filterbank, griffin_lim, write_mel, write_wav
from corpus import load_region_features
from decoder import write_alignment
from sas_model import SASModel
from utils import notify, safe_filename

FEATURE_SUFFIX = ".sasrf"


def find_feature_files(path: Path) -> List[Path]:
    path = Path(path)
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix == FEATURE_SUFFIX)
    return [path]


def synthesize_file(model: SASModel, feature_file: Path, out_dir: Path,
                    filterbank=None) -> Dict[str, Any]:
    """Synthesize one feature file; the result dict reports success or the error."""
    feature_file = Path(feature_file)
    start_time = time.time()
    try:
        rfs = load_region_features(feature_file)
        audio = model.config.audio
        result = model.synthesize(rfs)
        mel = MelSpectrogram(frames=result.mel_post.cpu().numpy(),
                             hop_length=audio.hop_length, sample_rate=audio.sample_rate)
        wave = griffin_lim(mel, audio, filterbank=filterbank)

        stem = safe_filename(feature_file.stem)
        out_dir = Path(out_dir)
        wav_path = write_wav(wave, out_dir / f"{stem}.wav")
        mel_path = write_mel(mel, out_dir / f"{stem}.sasmel")
        alignment_path = write_alignment(
            result.alignments.cpu().numpy(), out_dir / f"{stem}.sasaln",
            metadata={"image_id": rfs.image_id, "truncated": result.truncated,
                      "stop_threshold": model.config.decoder.stop_threshold})
        return {
            "success": True,
            "feature_file": str(feature_file),
            "wav": str(wav_path),
            "mel": str(mel_path),
            "alignment": str(alignment_path),
            "n_frames": result.n_frames,
            "truncated": result.truncated,
            "duration": wave.duration,
            "processing_time": time.time() - start_time,
            "error": None,
        }
    except Exception as e:
        return {
            "success": False,
            "feature_file": str(feature_file),
            "error": str(e),
            "processing_time": time.time() - start_time,
        }


def synthesize_batch(model: SASModel, features: Path, out_dir: Path,
                     progress_callback: Optional[Callable[[str], None]] = None) -> Dict[str, Any]:
    """Synthesize a feature file or every .sasrf file in a directory."""
    start_time = time.time()
    feature_files = find_feature_files(features)
    if not feature_files:
        return {
            "success": False,
            "error": f"No {FEATURE_SUFFIX} feature files found in {features}",
            "results": [],
            "success_count": 0,
            "failure_count": 0,
            "total_time": 0,
        }

    notify(progress_callback, f"Found {len(feature_files)} feature file(s) to synthesize")
    filterbank = build_mel_filterbank(model.config.audio)
    Path(out_dir).mkdir(parents=True, exist_ok=True)

    results = []
    success_count = 0
    failure_count = 0
    for i, feature_file in enumerate(feature_files, 1):
        result = synthesize_file(model, feature_file, out_dir, filterbank)
        results.append(result)
        if result["success"]:
            success_count += 1
            flag = " ⚠️ truncated" if result["truncated"] else ""
            notify(progress_callback, f"[{i}/{len(feature_files)}] ✅ {feature_file.name}: "
                                      f"{result['n_frames']} frames, {result['duration']:.2f}s{flag}")
        else:
            failure_count += 1
            notify(progress_callback, f"[{i}/{len(feature_files)}] ❌ {feature_file.name}: {result['error']}")

    notify(progress_callback, f"✅ Batch complete: {success_count} successful, {failure_count} failed")
    return {
        "success": failure_count == 0,
        "error": None if failure_count == 0 else f"{failure_count} file(s) failed",
        "results": results,
        "success_count": success_count,
        "failure_count": failure_count,
        "total_time": time.time() - start_time,
    }
