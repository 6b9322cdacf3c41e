"""Objective quality metrics: segmental SNR and STOI, per utterance and per corpus."""

import csv
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from numpy.lib.stride_tricks import sliding_window_view
from pystoi import stoi as pystoi_stoi

from audio_pipeline import AudioBuffer, read_wav
from config import settings
from errors import AllSilent, CorpusEvaluationError, IoFailure, LengthMismatch, TooShort
from models import MetricReport, UtteranceMetrics

logger = structlog.get_logger()

# 30 analysis frames of the 10 kHz STOI front end, expressed at 16 kHz
STOI_MIN_SAMPLES = 6349


def _check_lengths(clean: AudioBuffer, test: AudioBuffer) -> None:
    if len(clean) != len(test):
        raise LengthMismatch(f"clean has {len(clean)} samples, test has {len(test)}")


def ssnr(clean: AudioBuffer, test: AudioBuffer) -> float:
    """
    Segmental SNR in dB.

    Frame-wise 10 log10(sum x^2 / sum (x - y)^2), clamped to
    [SSNR_MIN_DB, SSNR_MAX_DB], averaged over frames whose clean energy
    exceeds SILENCE_ENERGY.

    Raises:
        LengthMismatch: buffers differ in length
        TooShort: shorter than one frame
        AllSilent: every frame is silent
    """
    _check_lengths(clean, test)
    frame = settings.SAMPLE_RATE * settings.SSNR_FRAME_MS // 1000
    hop = max(1, int(round(frame * (1.0 - settings.SSNR_OVERLAP))))
    if len(clean) < frame:
        raise TooShort(f"{len(clean)} samples, segmental SNR needs at least {frame}")

    x = sliding_window_view(clean.samples, frame)[::hop]
    err = sliding_window_view(clean.samples - test.samples, frame)[::hop]
    signal = np.sum(x ** 2, axis=1)
    noise = np.sum(err ** 2, axis=1)
    voiced = signal > settings.SILENCE_ENERGY
    if not np.any(voiced):
        raise AllSilent("no frame of the clean signal exceeds the silence threshold")

    with np.errstate(divide="ignore"):
        per_frame = 10.0 * np.log10(signal[voiced] / noise[voiced])
    return float(np.mean(np.clip(per_frame, settings.SSNR_MIN_DB, settings.SSNR_MAX_DB)))


def stoi(clean: AudioBuffer, test: AudioBuffer) -> float:
    """
    Short-time objective intelligibility in [0, 1].

    Raises:
        LengthMismatch: buffers differ in length
        TooShort: fewer samples than the 30-frame analysis minimum
    """
    _check_lengths(clean, test)
    if len(clean) < STOI_MIN_SAMPLES:
        raise TooShort(f"{len(clean)} samples, STOI needs at least {STOI_MIN_SAMPLES}")
    score = pystoi_stoi(clean.samples, test.samples, clean.rate, extended=False)
    return float(np.clip(score, 0.0, 1.0))


def utterance_metrics(utt_id: str, clean: AudioBuffer, test: AudioBuffer) -> UtteranceMetrics:
    return UtteranceMetrics(id=utt_id, ssnr_db=ssnr(clean, test), stoi=stoi(clean, test))


def _evaluate_one(item: Tuple[str, AudioBuffer, AudioBuffer]) -> UtteranceMetrics:
    utt_id, clean, test = item
    try:
        return utterance_metrics(utt_id, clean, test)
    except Exception as e:
        logger.error("utterance_evaluation_failed", utt_id=utt_id, error=str(e))
        raise CorpusEvaluationError(utt_id, e) from e


def evaluate_buffers(
    items: Sequence[Tuple[str, AudioBuffer, AudioBuffer]],
    workers: Optional[int] = None
) -> MetricReport:
    """
    Metrics for in-memory (id, clean, test) triples.

    Utterances are evaluated in parallel and reported sorted by id.

    Raises:
        CorpusEvaluationError: an utterance failed; carries its id
    """
    if not items:
        raise ValueError("nothing to evaluate")
    workers = workers or settings.EVAL_WORKERS
    ordered = sorted(items, key=lambda item: item[0])
    if workers <= 1:
        results = [_evaluate_one(item) for item in ordered]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_evaluate_one, ordered))

    report = MetricReport(utterances=results)
    logger.info("corpus_evaluated", utterances=len(results),
                mean_ssnr_db=report.mean_ssnr_db, mean_stoi=report.mean_stoi)
    return report


def evaluate_corpus(
    pairs: Sequence[Tuple[Union[str, Path], Union[str, Path]]],
    workers: Optional[int] = None
) -> MetricReport:
    """Metrics for (clean path, test path) pairs; the id is the clean file's stem."""
    items = []
    for clean_path, test_path in pairs:
        utt_id = Path(clean_path).stem
        try:
            items.append((utt_id, read_wav(clean_path), read_wav(test_path)))
        except Exception as e:
            logger.error("utterance_read_failed", utt_id=utt_id, error=str(e))
            raise CorpusEvaluationError(utt_id, e) from e
    return evaluate_buffers(items, workers)


def mean_row(report: MetricReport) -> str:
    return f"MEAN,{report.mean_ssnr_db:.4f},{report.mean_stoi:.4f}"


def write_report_csv(path: Union[str, Path], report: MetricReport) -> Path:
    """`id,ssnr_db,stoi` rows at 4 decimals plus a trailing MEAN row."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["id", "ssnr_db", "stoi"])
            for u in report.utterances:
                writer.writerow([u.id, f"{u.ssnr_db:.4f}", f"{u.stoi:.4f}"])
            writer.writerow(["MEAN", f"{report.mean_ssnr_db:.4f}", f"{report.mean_stoi:.4f}"])
    except OSError as e:
        raise IoFailure(f"{path}: {e}") from e
    return path
