import os
import re
import json
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Optional

import torch


def format_time(seconds: float) -> str:
    """Format seconds into a readable time string (HH:MM:SS)."""
    hours = int(seconds // 3600)
    minutes = int((seconds % 3600) // 60)
    secs = int(seconds % 60)

    if hours > 0:
        return f"{hours:02d}:{minutes:02d}:{secs:02d}"
    else:
        return f"{minutes:02d}:{secs:02d}"


def safe_filename(filename: str) -> str:
    """Create a safe filename by removing/replacing invalid characters."""
    # Remove or replace invalid characters
    safe_name = re.sub(r'[<>:"/\\|?*\s]', '_', filename)
    # Remove multiple underscores
    safe_name = re.sub(r'_+', '_', safe_name)
    # Remove leading/trailing underscores and dots
    safe_name = safe_name.strip('_.')

    if not safe_name:
        safe_name = "unnamed"

    return safe_name


def get_device(requested: Optional[str] = None) -> str:
    """Pick the compute device: an explicit request wins, else CUDA, MPS, CPU."""
    if requested and requested != "auto":
        return requested
    if torch.cuda.is_available():
        return "cuda"
    elif hasattr(torch.backends, 'mps') and torch.backends.mps.is_available():
        return "mps"
    else:
        return "cpu"


def get_num_workers() -> int:
    """
    Number of data-loading workers.

    SAS_NUM_WORKERS wins when set; otherwise the physical core count
    reported by psutil (falling back to os.cpu_count()).
    """
    env_value = os.environ.get("SAS_NUM_WORKERS")
    if env_value:
        try:
            return max(1, int(env_value))
        except ValueError:
            print(f"⚠️  Ignoring invalid SAS_NUM_WORKERS value: {env_value!r}")

    try:
        import psutil
        cores = psutil.cpu_count(logical=False)
    except ImportError:
        cores = None
    return max(1, cores or os.cpu_count() or 1)


def console_progress(message: str) -> None:
    """Default progress callback: timestamped console line."""
    timestamp = datetime.now().strftime("%H:%M:%S")
    print(f"[{timestamp}] {message}")


def notify(progress_callback: Optional[Callable[[str], None]], message: str) -> None:
    """Send a message to an optional progress callback."""
    if progress_callback:
        progress_callback(message)


def write_json(path: Path, data: Any) -> Path:
    """Write JSON with stable key order so reruns produce identical bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write("\n")
    return path


def read_json(path: Path) -> Any:
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)
