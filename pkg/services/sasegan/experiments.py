"""Snapshot-averaged evaluation and the attention placement study."""

import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import structlog

from adversarial_training import train
from audio_pipeline import UtterancePair
from checkpoints import load_checkpoint
from config import rng_stream
from models import MetricReport, ModelConfig, PlacementRow, TrainConfig, UtteranceMetrics, parse_attention_layers
from quality_metrics import evaluate_buffers
from segan_model import Generator, build_discriminator, build_generator, enhance_buffer, networks_from_checkpoint

logger = structlog.get_logger()


def enhance_corpus(gen: Generator, pairs: Sequence[UtterancePair], seed: int) -> MetricReport:
    """Enhance every noisy utterance and score it against its clean reference."""
    items = []
    for pair in pairs:
        # latent stream keyed by utterance id, not position
        enhanced = enhance_buffer(gen, pair.noisy, rng_stream(seed, f"latent.{pair.utt_id}"))
        items.append((pair.utt_id, pair.clean, enhanced))
    return evaluate_buffers(items)


def noisy_baseline(pairs: Sequence[UtterancePair]) -> MetricReport:
    return evaluate_buffers([(pair.utt_id, pair.clean, pair.noisy) for pair in pairs])


def evaluate_snapshots(
    paths: Sequence[Union[str, Path]],
    pairs: Sequence[UtterancePair],
    seed: int = 0,
    model_config: Optional[ModelConfig] = None
) -> MetricReport:
    """
    Average per-utterance metrics over several checkpoints.

    Every snapshot enhances every noisy utterance; the metrics (not the
    weights) are averaged across snapshots.
    """
    if not paths:
        raise ValueError("no checkpoints to evaluate")
    ssnr_sums: Dict[str, List[float]] = {}
    stoi_sums: Dict[str, List[float]] = {}
    for path in paths:
        gen, _ = networks_from_checkpoint(load_checkpoint(path, model_config))
        report = enhance_corpus(gen, pairs, seed)
        for u in report.utterances:
            ssnr_sums.setdefault(u.id, []).append(u.ssnr_db)
            stoi_sums.setdefault(u.id, []).append(u.stoi)
        logger.info("snapshot_evaluated", path=str(path), mean_ssnr_db=report.mean_ssnr_db,
                    mean_stoi=report.mean_stoi)

    return MetricReport(utterances=[
        UtteranceMetrics(
            id=utt_id,
            ssnr_db=math.fsum(ssnr_sums[utt_id]) / len(ssnr_sums[utt_id]),
            stoi=math.fsum(stoi_sums[utt_id]) / len(stoi_sums[utt_id]),
        )
        for utt_id in sorted(ssnr_sums)
    ])


def placement_label(layers: Sequence[int], depth: int, first_layer: int) -> str:
    if not layers:
        return "none"
    if list(layers) == list(range(max(3, first_layer), depth + 1)) and len(layers) > 1:
        return "all"
    return ",".join(str(layer) for layer in layers)


def run_placement_study(
    dataset: Sequence[UtterancePair],
    options: Sequence[str],
    model_config: ModelConfig,
    train_config: TrainConfig
) -> List[PlacementRow]:
    """
    Train one model per attention placement and compare them on `dataset`.

    Every placement shares the seed, data and schedule. Gains are measured
    against the "none" placement when it is among the options, otherwise
    against the unprocessed noisy signals.
    """
    first_layer = model_config.shrink + 1
    noisy = noisy_baseline(dataset)
    rows = []
    for option in options:
        layers = parse_attention_layers(option, model_config.depth, first_layer)
        cfg = model_config.model_copy(update={"attention_layers": layers}).ensure_valid()
        gen = build_generator(cfg, train_config.seed)
        disc = build_discriminator(cfg, train_config.seed)
        _, log = train(gen, disc, dataset, train_config)
        report = enhance_corpus(gen, dataset, train_config.seed)
        rows.append(PlacementRow(
            label=placement_label(layers, cfg.depth, first_layer),
            attention_layers=layers,
            mean_ssnr_db=report.mean_ssnr_db,
            mean_stoi=report.mean_stoi,
            final_g_l1=log[-1].g_l1 if log else None,
        ))
        logger.info("placement_trained", label=rows[-1].label, mean_ssnr_db=report.mean_ssnr_db,
                    mean_stoi=report.mean_stoi)

    baseline = next((row for row in rows if row.label == "none"), None)
    base_ssnr = baseline.mean_ssnr_db if baseline else noisy.mean_ssnr_db
    base_stoi = baseline.mean_stoi if baseline else noisy.mean_stoi
    for row in rows:
        row.ssnr_gain_db = row.mean_ssnr_db - base_ssnr
        row.stoi_gain = row.mean_stoi - base_stoi

    rows.insert(0, PlacementRow(
        label="noisy",
        attention_layers=[],
        mean_ssnr_db=noisy.mean_ssnr_db,
        mean_stoi=noisy.mean_stoi,
        ssnr_gain_db=noisy.mean_ssnr_db - base_ssnr,
        stoi_gain=noisy.mean_stoi - base_stoi,
    ))
    return rows


def format_placement_table(rows: Sequence[PlacementRow]) -> str:
    lines = [f"{'placement':<12}{'ssnr_db':>10}{'stoi':>10}{'d_ssnr':>10}{'d_stoi':>10}"]
    for row in rows:
        lines.append(
            f"{row.label:<12}{row.mean_ssnr_db:>10.4f}{row.mean_stoi:>10.4f}"
            f"{row.ssnr_gain_db:>10.4f}{row.stoi_gain:>10.4f}"
        )
    return "\n".join(lines)
