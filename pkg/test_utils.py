#!/usr/bin/env python3
"""
Tests for the shared helpers and the batch synthesis result records.
"""

import os
import sys

import pytest
import torch

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from audio_frontend import read_mel, read_wav
from sas_model import SASModel
from sas_testing import micro_config, micro_corpus
from synthesis import find_feature_files, synthesize_batch
from utils import format_time, get_device, get_num_workers, notify, read_json, safe_filename, write_json


def test_format_time():
    assert format_time(5) == "00:05"
    assert format_time(125.7) == "02:05"
    assert format_time(3725) == "01:02:05"


def test_safe_filename():
    assert safe_filename("img 001?.sasrf") == "img_001_.sasrf"
    assert safe_filename("__") == "unnamed"


def test_device_and_workers(monkeypatch):
    assert get_device("cpu") == "cpu"
    assert get_device() in ("cuda", "mps", "cpu")
    monkeypatch.setenv("SAS_NUM_WORKERS", "3")
    assert get_num_workers() == 3
    monkeypatch.setenv("SAS_NUM_WORKERS", "many")
    assert get_num_workers() >= 1


def test_notify_and_json(tmp_path):
    messages = []
    notify(messages.append, "✅ done")
    notify(None, "dropped")
    assert messages == ["✅ done"]

    path = write_json(tmp_path / "nested" / "a.json", {"b": 1, "a": [1, 2]})
    assert path.read_text().index('"a"') < path.read_text().index('"b"')
    assert read_json(path) == {"a": [1, 2], "b": 1}


def test_synthesize_batch_records(tmp_path):
    manifest = micro_corpus(tmp_path / "corpus", n_images=10)
    features = tmp_path / "features"
    features.mkdir()
    for record in manifest.split("train")[:2]:
        (features / f"{record.image_id}.sasrf").write_bytes(manifest.resolve(record.features).read_bytes())
    (features / "notes.txt").write_text("ignored")
    (features / "zz_broken.sasrf").write_bytes(b"\x00" * 10)
    assert [p.name for p in find_feature_files(features)][-1] == "zz_broken.sasrf"
    assert len(find_feature_files(features)) == 3

    torch.manual_seed(0)
    model = SASModel(micro_config())
    messages = []
    result = synthesize_batch(model, features, tmp_path / "out", progress_callback=messages.append)
    assert not result["success"]
    assert result["success_count"] == 2
    assert result["failure_count"] == 1
    assert result["error"] == "1 file(s) failed"

    good = result["results"][0]
    assert good["success"]
    wave = read_wav(good["wav"])
    mel = read_mel(good["mel"])
    assert mel.n_frames == good["n_frames"]
    assert len(wave) == mel.n_frames * 200
    assert not result["results"][2]["success"]
    assert any("❌ zz_broken.sasrf" in m for m in messages)


def main():
    print("=" * 80)
    print("HELPER AND SYNTHESIS TESTS")
    print("=" * 80)
    return pytest.main([__file__, "-v"])


if __name__ == "__main__":
    sys.exit(main())
