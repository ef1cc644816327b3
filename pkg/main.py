#!/usr/bin/env python3
"""
SAS Image-to-Speech Toolkit
Main entry point: logs the compute environment, then runs the command line.

Features:
- Deterministic synthetic image/spoken-caption corpus generation
- End-to-end training with scheduled sampling and the embedding constraint
- Griffin-Lim synthesis of WAV files from region features
- Captioning-metric evaluation through a pluggable transcriber
- Ablation sweeps (EC on/off, feature source, sampling floor)
"""

import sys
import os
import torch
from pathlib import Path

# Add the current directory to Python path for imports
current_dir = Path(__file__).parent
sys.path.insert(0, str(current_dir))


def detect_and_log_hardware():
    """Detect available computing devices and data-loading parallelism."""
    print("=" * 60)
    print("🔍 SYSTEM HARDWARE DETECTION")
    print("=" * 60)

    print(f"🐍 PyTorch Version: {torch.__version__}")
    if hasattr(torch.version, 'cuda') and torch.version.cuda:
        print(f"⚡ PyTorch CUDA Version: {torch.version.cuda}")
    else:
        print("⚠️  PyTorch CUDA Version: Not available (CPU-only installation)")

    cuda_available = torch.cuda.is_available()
    print(f"🖥️  CUDA Available: {cuda_available}")

    if cuda_available:
        gpu_count = torch.cuda.device_count()
        print(f"🎮 GPU Count: {gpu_count}")
        for i in range(gpu_count):
            gpu_name = torch.cuda.get_device_name(i)
            gpu_memory = torch.cuda.get_device_properties(i).total_memory / (1024**3)
            print(f"   └── GPU {i}: {gpu_name} ({gpu_memory:.1f} GB)")
    else:
        print("💾 No CUDA GPU detected")

    mps_available = hasattr(torch.backends, 'mps') and torch.backends.mps.is_available()
    if mps_available:
        print("🍎 Apple Silicon GPU (MPS) Available: True")

    print(f"🔧 CPU Cores: {os.cpu_count()}")
    try:
        import psutil
        memory = psutil.virtual_memory()
        print(f"🧠 RAM: {memory.total / (1024**3):.1f} GB ({memory.available / (1024**3):.1f} GB free)")
    except ImportError:
        pass

    from utils import get_num_workers
    print(f"📦 Data-loading workers: {get_num_workers()} (set SAS_NUM_WORKERS to change)")

    print("\n💡 RECOMMENDATIONS:")
    if cuda_available:
        print("• Set trainer.device=cuda for training")
    elif mps_available:
        print("• Set trainer.device=mps for training")
    else:
        print("• CPU training: shrink decoder.rnn_units and decoder.postnet_filters for desk-scale runs")

    print("=" * 60)
    return cuda_available or mps_available


if __name__ == "__main__":
    try:
        from cli import main
    except ImportError as e:
        print(f"❌ Error importing required modules: {e}")
        print("\nPlease install the required dependencies:")
        print("pip install -r requirements.txt")
        sys.exit(1)

    if len(sys.argv) > 1 and sys.argv[1] in ("train", "sweep"):
        detect_and_log_hardware()
    sys.exit(main())
