"""Audio I/O, emphasis filters, segmentation and synthetic corpora."""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import soundfile as sf
import structlog
from scipy.signal import lfilter

from config import rng_stream, settings
from errors import (
    InvalidPadLen,
    IoFailure,
    MalformedHeader,
    UnpairedFiles,
    UnsupportedFormat,
)

logger = structlog.get_logger()

PCM_SCALE = 32768.0
PCM_MAX = 32767


@dataclass
class AudioBuffer:
    """Mono samples at the pipeline rate."""
    samples: np.ndarray
    rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.rate != settings.SAMPLE_RATE:
            raise UnsupportedFormat(f"rate {self.rate} Hz, expected {settings.SAMPLE_RATE} Hz")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio samples must be finite")

    def __len__(self) -> int:
        return self.samples.shape[0]


@dataclass
class SegmentBatch:
    """Fixed-width windows cut from one utterance."""
    segments: np.ndarray  # (n, window)
    pad_len: int
    window: int

    @property
    def count(self) -> int:
        return self.segments.shape[0]


@dataclass
class UtterancePair:
    """Clean reference and its noisy mixture."""
    clean: AudioBuffer
    noisy: AudioBuffer
    utt_id: str = ""
    snr_db: Optional[float] = None

    def __post_init__(self):
        if len(self.clean) != len(self.noisy):
            raise ValueError(
                f"clean/noisy length mismatch for '{self.utt_id}': "
                f"{len(self.clean)} vs {len(self.noisy)}"
            )


def read_wav(path: Union[str, Path]) -> AudioBuffer:
    """
    Read a 16-bit PCM mono WAV file.

    Returns:
        AudioBuffer with samples scaled to [-1, 1] (PCM / 32768)
    """
    path = Path(path)
    try:
        info = sf.info(str(path))
    except RuntimeError as e:
        logger.error("wav_header_unreadable", path=str(path), error=str(e))
        raise MalformedHeader(f"{path}: {e}") from e

    if info.format != "WAV" or info.subtype != "PCM_16":
        raise UnsupportedFormat(f"{path}: {info.format}/{info.subtype}, expected WAV/PCM_16")
    if info.channels != 1:
        raise UnsupportedFormat(f"{path}: {info.channels} channels, expected mono")
    if info.samplerate != settings.SAMPLE_RATE:
        raise UnsupportedFormat(f"{path}: {info.samplerate} Hz, expected {settings.SAMPLE_RATE} Hz")

    try:
        pcm, rate = sf.read(str(path), dtype="int16", always_2d=False)
    except RuntimeError as e:
        logger.error("wav_read_failed", path=str(path), error=str(e))
        raise MalformedHeader(f"{path}: {e}") from e

    return AudioBuffer(samples=pcm.astype(np.float64) / PCM_SCALE, rate=rate)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    """Clamp to the PCM range and round half away from zero."""
    scaled = np.asarray(samples, dtype=np.float64) * PCM_SCALE
    rounded = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    return np.clip(rounded, -PCM_SCALE, PCM_MAX).astype(np.int16)


def write_wav(path: Union[str, Path], buf: AudioBuffer) -> None:
    """Write a buffer as 16-bit PCM mono WAV."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        sf.write(str(path), to_pcm16(buf.samples), buf.rate, subtype="PCM_16", format="WAV")
    except (OSError, RuntimeError) as e:
        logger.error("wav_write_failed", path=str(path), error=str(e))
        raise IoFailure(f"{path}: {e}") from e


def _check_coef(coef: float) -> float:
    if not 0.0 <= coef < 1.0:
        raise ValueError(f"emphasis coefficient must be in [0, 1), got {coef}")
    return coef


def preemphasize(buf: AudioBuffer, coef: Optional[float] = None) -> AudioBuffer:
    """y[t] = x[t] - coef * x[t-1], y[0] = x[0]."""
    coef = _check_coef(settings.PREEMPHASIS if coef is None else coef)
    return AudioBuffer(samples=lfilter([1.0, -coef], [1.0], buf.samples), rate=buf.rate)


def deemphasize(buf: AudioBuffer, coef: Optional[float] = None) -> AudioBuffer:
    """y[t] = x[t] + coef * y[t-1], y[0] = x[0]."""
    coef = _check_coef(settings.PREEMPHASIS if coef is None else coef)
    return AudioBuffer(samples=lfilter([1.0], [1.0, -coef], buf.samples), rate=buf.rate)


def _cut(samples: np.ndarray, offsets: Sequence[int], window: int) -> SegmentBatch:
    end = offsets[-1] + window if offsets else 0
    pad_len = max(end - samples.shape[0], 0)
    padded = np.concatenate([samples, np.zeros(pad_len)])
    segments = np.stack([padded[o:o + window] for o in offsets]) if offsets else np.zeros((0, window))
    return SegmentBatch(segments=segments, pad_len=pad_len, window=window)


def segment_for_training(
    buf: AudioBuffer,
    window: Optional[int] = None,
    overlap: Optional[float] = None
) -> SegmentBatch:
    """
    Overlapping training windows on a fixed grid.

    Windows start every window*(1-overlap) samples until one reaches the end of
    the utterance; that last window is zero-padded.
    """
    window = window or settings.WINDOW
    overlap = settings.TRAIN_OVERLAP if overlap is None else overlap
    if len(buf) < 1:
        raise ValueError("cannot segment an empty buffer")
    hop = max(1, int(round(window * (1.0 - overlap))))

    offsets = [0]
    while offsets[-1] + window < len(buf):
        offsets.append(offsets[-1] + hop)
    return _cut(buf.samples, offsets, window)


def segment_for_inference(buf: AudioBuffer, window: Optional[int] = None) -> SegmentBatch:
    """Non-overlapping windows; the final one is zero-padded."""
    window = window or settings.WINDOW
    count = math.ceil(len(buf) / window)
    return _cut(buf.samples, [i * window for i in range(count)], window)


def reconstruct(batch: SegmentBatch) -> AudioBuffer:
    """Concatenate inference windows and drop the trailing padding."""
    if not 0 <= batch.pad_len < batch.window:
        raise InvalidPadLen(f"pad_len {batch.pad_len} outside [0, {batch.window})")
    if batch.count == 0:
        return AudioBuffer(samples=np.zeros(0), rate=settings.SAMPLE_RATE)
    samples = batch.segments.reshape(-1)
    return AudioBuffer(samples=samples[:samples.shape[0] - batch.pad_len], rate=settings.SAMPLE_RATE)


def _speech_like(rng: np.random.Generator, length: int, rate: int) -> np.ndarray:
    t = np.arange(length) / rate
    signal = np.zeros(length)
    for _ in range(rng.integers(3, 9)):
        freq = rng.uniform(80.0, 4000.0)
        amp = rng.uniform(0.2, 1.0)
        env_rate = rng.uniform(0.5, 4.0)  # syllable-like modulation, Hz
        envelope = 0.75 + 0.25 * np.sin(2 * np.pi * env_rate * t + rng.uniform(0, 2 * np.pi))
        signal += amp * envelope * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    peak = np.max(np.abs(signal))
    return 0.5 * signal / peak if peak > 0 else signal


def synth_dataset(
    seed: int,
    n_utterances: int,
    utterance_len: int,
    snrs_db: Sequence[float]
) -> List[UtterancePair]:
    """
    Deterministic synthetic corpus standing in for recorded speech.

    Clean signals are 3-8 modulated sinusoids in the 80-4000 Hz band; noise is
    white Gaussian scaled to hit the SNR exactly. Utterance i uses
    snrs_db[i % len(snrs_db)].
    """
    if n_utterances < 1:
        raise ValueError("n_utterances must be at least 1")
    if not snrs_db:
        raise ValueError("snrs_db must hold at least one SNR")

    rate = settings.SAMPLE_RATE
    clean_rng = rng_stream(seed, "data")
    noise_rng = rng_stream(seed, "noise")
    pairs = []
    for i in range(n_utterances):
        snr = float(snrs_db[i % len(snrs_db)])
        clean = _speech_like(clean_rng, utterance_len, rate)
        noise = noise_rng.standard_normal(utterance_len)
        noise *= math.sqrt(np.mean(clean ** 2) / (np.mean(noise ** 2) * 10 ** (snr / 10)))

        # rescale both parts together so the mixture stays inside PCM range
        peak = np.max(np.abs(clean + noise))
        if peak > 0.99:
            clean, noise = clean * 0.99 / peak, noise * 0.99 / peak

        pairs.append(UtterancePair(
            clean=AudioBuffer(samples=clean, rate=rate),
            noisy=AudioBuffer(samples=clean + noise, rate=rate),
            utt_id=f"utt{i:04d}",
            snr_db=snr,
        ))

    logger.info("synthetic_dataset_created", seed=seed, utterances=n_utterances, length=utterance_len)
    return pairs


def pair_wav_paths(
    first_dir: Union[str, Path],
    second_dir: Union[str, Path]
) -> List[Tuple[str, Path, Path]]:
    """
    Match `<stem>.wav` files of two directories, sorted by stem.

    Raises:
        UnpairedFiles: a stem exists on one side only
    """
    first_dir, second_dir = Path(first_dir), Path(second_dir)
    first = {p.stem: p for p in first_dir.glob("*.wav")}
    second = {p.stem: p for p in second_dir.glob("*.wav")}
    for stem in sorted(set(first) ^ set(second)):
        raise UnpairedFiles(stem, second_dir.name if stem in first else first_dir.name)
    return [(stem, first[stem], second[stem]) for stem in sorted(first)]


def load_dataset_dir(root: Union[str, Path]) -> List[UtterancePair]:
    """
    Load a `clean/<id>.wav` + `noisy/<id>.wav` corpus.

    Raises:
        UnpairedFiles: a stem exists on one side only
    """
    root = Path(root)
    pairs = [
        UtterancePair(clean=read_wav(clean), noisy=read_wav(noisy), utt_id=stem)
        for stem, clean, noisy in pair_wav_paths(root / "clean", root / "noisy")
    ]
    logger.info("dataset_loaded", root=str(root), utterances=len(pairs))
    return pairs


def write_dataset_dir(pairs: Sequence[UtterancePair], root: Union[str, Path]) -> List[Path]:
    """Write pairs under `root/clean` and `root/noisy`; returns the written paths."""
    root = Path(root)
    written = []
    for pair in pairs:
        for side, buf in (("clean", pair.clean), ("noisy", pair.noisy)):
            path = root / side / f"{pair.utt_id}.wav"
            write_wav(path, buf)
            written.append(path)
    return written
