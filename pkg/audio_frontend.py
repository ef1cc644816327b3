"""
Audio Frontend
==============

Waveform <-> log-mel spectrogram conversion.

Framing follows the decoder target definition: 50 ms Hann windows with a
12.5 ms hop (800/200 samples at 16 kHz), an HTK mel filterbank and natural
log compression with an amplitude floor. Predicted spectrograms are turned
back into audio with Griffin-Lim using the pseudo-inverse of the filterbank.

Also holds the SASMEL1 spectrogram cache codec and 16-bit PCM WAV I/O.
"""

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import librosa
import numpy as np
import soundfile as sf

from errors import AudioInputError, ConfigurationError, FeatureFormatError


MEL_MAGIC = b"SASMEL1"
_MEL_HEADER = struct.Struct("<II")


@dataclass
class AudioConfig:
    """STFT / mel / Griffin-Lim settings."""
    sample_rate: int = 16000
    win_length: int = 800       # 50 ms
    hop_length: int = 200       # 12.5 ms
    fft_size: int = 1024
    n_mels: int = 80
    fmin: float = 0.0
    fmax: Optional[float] = None  # None -> sample_rate / 2
    log_floor: float = 1e-5
    griffin_lim_iters: int = 60
    griffin_lim_seed: int = 0

    @property
    def effective_fmax(self) -> float:
        return float(self.sample_rate) / 2 if self.fmax is None else float(self.fmax)

    @property
    def n_freqs(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def log_floor_value(self) -> float:
        return float(np.log(self.log_floor))

    def validate(self) -> None:
        if self.sample_rate <= 0:
            raise ConfigurationError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.win_length > self.fft_size:
            raise ConfigurationError(
                f"win_length ({self.win_length}) must not exceed fft_size ({self.fft_size})")
        if self.hop_length <= 0 or self.hop_length > self.win_length:
            raise ConfigurationError(
                f"hop_length must be in (0, win_length], got {self.hop_length}")
        if self.n_mels < 1:
            raise ConfigurationError(f"n_mels must be >= 1, got {self.n_mels}")
        if not (0 <= self.fmin < self.effective_fmax <= self.sample_rate / 2):
            raise ConfigurationError(
                f"need 0 <= fmin < fmax <= sample_rate/2, got fmin={self.fmin}, fmax={self.effective_fmax}")
        if self.log_floor <= 0:
            raise ConfigurationError(f"log_floor must be positive, got {self.log_floor}")
        if self.griffin_lim_iters < 1:
            raise ConfigurationError("griffin_lim_iters must be >= 1")


@dataclass
class Waveform:
    samples: np.ndarray  # float32 in [-1, 1]
    sample_rate: int

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    @property
    def duration(self) -> float:
        return len(self) / float(self.sample_rate)


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # (T, n_mels) natural-log mel energies
    hop_length: int
    sample_rate: int

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def n_mels(self) -> int:
        return int(self.frames.shape[1])


def mel_center_frequencies(config: AudioConfig) -> np.ndarray:
    """Peak frequency (Hz) of every filter: interior points of the HTK mel grid."""
    edges = librosa.mel_frequencies(
        n_mels=config.n_mels + 2, fmin=config.fmin, fmax=config.effective_fmax, htk=True)
    return edges[1:-1]


def build_mel_filterbank(config: AudioConfig) -> np.ndarray:
    """Triangular HTK mel filters, shape (n_mels, fft_size/2 + 1), unnormalized."""
    config.validate()
    filterbank = librosa.filters.mel(
        sr=config.sample_rate,
        n_fft=config.fft_size,
        n_mels=config.n_mels,
        fmin=config.fmin,
        fmax=config.effective_fmax,
        htk=True,
        norm=None,
    ).astype(np.float64)

    empty_rows = np.where(filterbank.max(axis=1) <= 0)[0]
    if len(empty_rows) > 0:
        raise ConfigurationError(
            f"{len(empty_rows)} mel filters cover no FFT bin (first: {int(empty_rows[0])}); "
            "use fewer mels or a larger fft_size")
    return filterbank


def expected_frame_count(n_samples: int, config: AudioConfig) -> int:
    """Frames produced for a signal reflect-padded by fft_size/2 on both sides."""
    if n_samples <= 0:
        return 0
    padded = n_samples + 2 * (config.fft_size // 2)
    return (padded - config.fft_size) // config.hop_length + 1


def waveform_to_logmel(wave: Waveform, config: AudioConfig,
                       filterbank: Optional[np.ndarray] = None) -> MelSpectrogram:
    """log(max(filterbank . |STFT|, log_floor)) on centered Hann frames."""
    if wave.sample_rate != config.sample_rate:
        raise AudioInputError(
            f"waveform sample rate {wave.sample_rate} Hz does not match config {config.sample_rate} Hz")

    if len(wave) == 0:
        return MelSpectrogram(
            frames=np.zeros((0, config.n_mels), dtype=np.float32),
            hop_length=config.hop_length,
            sample_rate=config.sample_rate,
        )

    samples = np.asarray(wave.samples, dtype=np.float64)
    if not np.all(np.isfinite(samples)):
        raise AudioInputError("waveform contains non-finite samples")

    if filterbank is None:
        filterbank = build_mel_filterbank(config)

    # reflect padding needs more samples than the pad width
    pad_mode = "reflect" if len(samples) > config.fft_size // 2 else "constant"
    spectrum = librosa.stft(
        samples,
        n_fft=config.fft_size,
        hop_length=config.hop_length,
        win_length=config.win_length,
        window="hann",
        center=True,
        pad_mode=pad_mode,
    )
    magnitude = np.abs(spectrum)
    mel = filterbank @ magnitude
    log_mel = np.log(np.maximum(mel, config.log_floor)).T

    return MelSpectrogram(
        frames=log_mel.astype(np.float32),
        hop_length=config.hop_length,
        sample_rate=config.sample_rate,
    )


def griffin_lim(mel: MelSpectrogram, config: AudioConfig, seed: Optional[int] = None,
                filterbank: Optional[np.ndarray] = None) -> Waveform:
    """
    Invert a log-mel spectrogram to audio.

    mel -> linear magnitude via the filterbank pseudo-inverse (negatives
    clipped), then Griffin-Lim from a seeded random phase. Output length
    is n_frames * hop_length, clipped to [-1, 1].
    """
    if mel.n_frames == 0:
        return Waveform(samples=np.zeros(0, dtype=np.float32), sample_rate=config.sample_rate)
    if mel.n_mels != config.n_mels:
        raise AudioInputError(f"spectrogram has {mel.n_mels} mel channels, config expects {config.n_mels}")

    if filterbank is None:
        filterbank = build_mel_filterbank(config)
    seed = config.griffin_lim_seed if seed is None else seed

    mel_linear = np.exp(mel.frames.astype(np.float64)).T
    magnitude = np.maximum(np.linalg.pinv(filterbank) @ mel_linear, 0.0)

    samples = librosa.griffinlim(
        magnitude,
        n_iter=config.griffin_lim_iters,
        hop_length=config.hop_length,
        win_length=config.win_length,
        window="hann",
        center=True,
        length=mel.n_frames * config.hop_length,
        pad_mode="reflect",
        init="random",
        random_state=np.random.RandomState(seed),
    )
    samples = np.clip(samples, -1.0, 1.0).astype(np.float32)
    return Waveform(samples=samples, sample_rate=config.sample_rate)


def write_mel(mel: MelSpectrogram, path: Path) -> Path:
    """SASMEL1 cache: magic, u32 T, u32 n_mels, then row-major float32 LE."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frames = np.ascontiguousarray(mel.frames, dtype="<f4")
    with open(path, "wb") as f:
        f.write(MEL_MAGIC)
        f.write(_MEL_HEADER.pack(frames.shape[0], frames.shape[1]))
        f.write(frames.tobytes())
    return path


def read_mel(path: Path, hop_length: int = 200, sample_rate: int = 16000) -> MelSpectrogram:
    path = Path(path)
    data = path.read_bytes()
    header_size = len(MEL_MAGIC) + _MEL_HEADER.size
    if len(data) < header_size or data[:len(MEL_MAGIC)] != MEL_MAGIC:
        raise FeatureFormatError(f"{path}: not a SASMEL1 spectrogram file", field="magic")
    n_frames, n_mels = _MEL_HEADER.unpack_from(data, len(MEL_MAGIC))
    expected = header_size + 4 * n_frames * n_mels
    if len(data) != expected:
        raise FeatureFormatError(
            f"{path}: expected {expected} bytes for {n_frames}x{n_mels} frames, found {len(data)}",
            field="frames")
    frames = np.frombuffer(data, dtype="<f4", offset=header_size).reshape(n_frames, n_mels)
    return MelSpectrogram(frames=frames.astype(np.float32), hop_length=hop_length, sample_rate=sample_rate)


def write_wav(wave: Waveform, path: Path) -> Path:
    """16-bit PCM mono WAV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(path), np.clip(wave.samples, -1.0, 1.0), wave.sample_rate, subtype="PCM_16")
    return path


def read_wav(path: Path) -> Waveform:
    samples, sample_rate = sf.read(str(path), dtype="float32", always_2d=False)
    if samples.ndim != 1:
        raise AudioInputError(f"{path}: expected mono audio, found {samples.shape[1]} channels")
    return Waveform(samples=samples, sample_rate=int(sample_rate))
