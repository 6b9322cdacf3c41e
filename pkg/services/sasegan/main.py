"""Command-line entry point for the SASEGAN enhancer."""

import argparse
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import structlog

import config
from adversarial_training import train, write_train_log_csv
from audio_pipeline import (
    load_dataset_dir,
    pair_wav_paths,
    preemphasize,
    read_wav,
    segment_for_inference,
    synth_dataset,
    write_dataset_dir,
    write_wav,
)
from checkpoints import latest_checkpoints, load_checkpoint
from config import rng_stream, settings
from errors import CorpusEvaluationError, DivergedLoss, InvalidConfig, IoFailure
from experiments import evaluate_snapshots, format_placement_table, run_placement_study
from models import ModelConfig, RunManifest, TrainConfig
from quality_metrics import evaluate_corpus, mean_row, write_report_csv
from segan_model import (
    build_discriminator,
    build_generator,
    enhance_buffer,
    networks_from_checkpoint,
    sample_latent,
)
from self_attention import attn_footprint, write_attention_csv

logger = structlog.get_logger()

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def configure_logging() -> None:
    """structlog to standard error; standard output carries tables and mean rows."""
    renderer = (
        structlog.processors.JSONRenderer()
        if settings.LOG_FORMAT == "json"
        else structlog.dev.ConsoleRenderer(colors=False)
    )
    structlog.configure(
        processors=[
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            renderer,
        ],
        wrapper_class=structlog.make_filtering_bound_logger(
            logging.getLevelName(settings.LOG_LEVEL.upper())
        ),
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=False,
    )


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class RunRecorder:
    """Collects artifacts of one command and writes its manifest."""

    def __init__(self, command: str, out_dir: Path, seed: Optional[int] = None):
        self.out_dir = out_dir
        self.manifest = RunManifest(command=command, seed=seed, started_at=_now())
        self.manifest.config.update(settings.model_dump())

    def echo(self, prefix: str, values: Dict[str, Any]) -> None:
        self.manifest.config.update({f"{prefix}.{key}": val for key, val in values.items()})

    def artifact(self, name: str, path: Path) -> None:
        self.manifest.artifacts[name] = str(path)

    def finish(self) -> Path:
        self.manifest.finished_at = _now()
        path = self.out_dir / "manifest.txt"
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            path.write_text(self.manifest.to_text())
        except OSError as e:
            raise IoFailure(f"{path}: {e}") from e
        logger.info("run_manifest_written", path=str(path))
        return path


def _model_config(args) -> ModelConfig:
    return ModelConfig.from_settings(
        attention_layers=getattr(args, "attention_layers", None),
        scale_divisor=getattr(args, "scale_divisor", None),
    ).ensure_valid()


def _dataset(args, cfg: ModelConfig):
    if args.synthetic:
        length = args.synth_len or 2 * cfg.scaled_input_len
        return synth_dataset(args.seed, args.synth_count, length, _floats(args.snrs))
    if not args.data:
        raise InvalidConfig("either --data DIR or --synthetic is required")
    return load_dataset_dir(args.data)


def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InvalidConfig(f"expected a comma list of numbers, got '{text}'")


def _write_table(path: Path, lines: List[str]) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n")
    except OSError as e:
        raise IoFailure(f"{path}: {e}") from e
    return path


def _ints(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InvalidConfig(f"expected a comma list of integers, got '{text}'")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _model_config(args)
    tcfg = TrainConfig.from_settings(
        epochs=args.epochs, batch_size=args.batch_size, lambda_l1=args.lambda_l1,
        lr=args.lr, seed=args.seed, max_steps=args.max_steps,
    )
    out_dir = Path(args.out_dir)
    run = RunRecorder("train", out_dir, tcfg.seed)
    run.echo("model", cfg.model_dump())
    run.echo("train", tcfg.model_dump())

    dataset = _dataset(args, cfg)
    gen = build_generator(cfg, tcfg.seed)
    disc = build_discriminator(cfg, tcfg.seed)
    log_path = out_dir / "train_log.csv"
    try:
        ckpt, log = train(gen, disc, dataset, tcfg, out_dir / "checkpoints")
    except DivergedLoss as e:
        write_train_log_csv(log_path, e.log)
        raise

    run.artifact("train_log", write_train_log_csv(log_path, log))
    for i, path in enumerate(latest_checkpoints(out_dir / "checkpoints", tcfg.keep_checkpoints)):
        run.artifact(f"checkpoint_{i}", path)
    run.finish()
    print(f"trained {ckpt.step} steps, final g_l1={log[-1].g_l1:.6f}")
    return EXIT_OK


def cmd_enhance(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if args.scale_divisor is not None and ckpt.model_config.scale_divisor != args.scale_divisor:
        raise InvalidConfig(
            f"checkpoint scale_divisor {ckpt.model_config.scale_divisor}, requested {args.scale_divisor}"
        )
    gen, _ = networks_from_checkpoint(ckpt)
    out_dir = Path(args.out_dir)
    run = RunRecorder("enhance", out_dir, args.seed)
    run.echo("model", ckpt.model_config.model_dump())
    run.artifact("checkpoint", Path(args.checkpoint))

    for source in args.inputs:
        source = Path(source)
        enhanced = enhance_buffer(gen, read_wav(source), rng_stream(args.seed, f"latent.{source.stem}"))
        target = out_dir / f"{source.stem}.wav"
        write_wav(target, enhanced)
        run.artifact(source.stem, target)
        logger.info("utterance_enhanced", source=str(source), target=str(target), samples=len(enhanced))
    run.finish()
    return EXIT_OK


def cmd_evaluate(args) -> int:
    pairs = pair_wav_paths(args.clean, args.test)
    report = evaluate_corpus([(clean, test) for _, clean, test in pairs])
    out_dir = Path(args.out_dir)
    run = RunRecorder("evaluate", out_dir)
    run.artifact("report", write_report_csv(out_dir / "report.csv", report))
    run.finish()
    print(mean_row(report))
    return EXIT_OK


def cmd_attention_dump(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.model_config
    if args.layer not in cfg.attention_layers:
        raise InvalidConfig(f"layer {args.layer} has no attention layer (placement {cfg.attention_layers})")
    if args.segment < 0:
        raise InvalidConfig(f"--segment must be non-negative, got {args.segment}")
    gen, _ = networks_from_checkpoint(ckpt)

    batch = segment_for_inference(preemphasize(read_wav(args.input)), cfg.scaled_input_len)
    segment = batch.segments[min(args.segment, batch.count - 1)]
    z = sample_latent(cfg, rng_stream(args.seed, f"latent.{Path(args.input).stem}"))
    _, _, maps = gen.forward_vjp(segment, z)
    attn_map = maps[f"enc.{args.layer}.attn"][0]

    rows = _ints(args.rows) if args.rows else None
    out_dir = Path(args.out_dir)
    run = RunRecorder("attention-dump", out_dir, args.seed)
    path = out_dir / f"attention_layer{args.layer}.csv"
    write_attention_csv(path, args.layer, attn_map, rows)
    run.artifact("attention", path)
    run.finish()
    print(f"layer {args.layer}: {attn_map.shape[0]} rows x {attn_map.shape[1]} keys")
    return EXIT_OK


def cmd_mem_profile(args) -> int:
    layers = list(range(1, args.depth + 1)) if args.layers == "all" else _ints(args.layers)
    footprints = [attn_footprint(args.input_len, layer, args.p, args.depth) for layer in layers]
    out_dir = Path(args.out_dir)
    run = RunRecorder("mem-profile", out_dir)

    header = ["layer", "time_dim", "pooled_keys", "raw_map_elems", "pooled_map_elems"]
    print("".join(f"{h:>18}" for h in header))
    for fp in footprints:
        print("".join(f"{getattr(fp, h):>18}" for h in header))

    lines = [",".join(header)] + [",".join(str(getattr(fp, h)) for h in header) for fp in footprints]
    run.artifact("footprints", _write_table(out_dir / "mem_profile.csv", lines))
    run.finish()
    return EXIT_OK


def cmd_synth_data(args) -> int:
    pairs = synth_dataset(args.seed, args.count, args.length, _floats(args.snrs))
    out_dir = Path(args.out_dir)
    run = RunRecorder("synth-data", out_dir, args.seed)
    write_dataset_dir(pairs, out_dir)
    for pair in pairs:
        run.manifest.config[f"snr_db.{pair.utt_id}"] = pair.snr_db
        run.artifact(pair.utt_id, out_dir / "noisy" / f"{pair.utt_id}.wav")
    run.finish()
    return EXIT_OK


def cmd_evaluate_snapshots(args) -> int:
    paths = latest_checkpoints(args.checkpoint_dir, args.n)
    if not paths:
        raise InvalidConfig(f"no checkpoints in {args.checkpoint_dir}")
    report = evaluate_snapshots(paths, load_dataset_dir(args.data), args.seed)
    out_dir = Path(args.out_dir)
    run = RunRecorder("evaluate-snapshots", out_dir, args.seed)
    for i, path in enumerate(paths):
        run.artifact(f"checkpoint_{i}", path)
    run.artifact("report", write_report_csv(out_dir / "snapshot_report.csv", report))
    run.finish()
    print(mean_row(report))
    return EXIT_OK


def cmd_placement_study(args) -> int:
    cfg = _model_config(args)
    tcfg = TrainConfig.from_settings(
        epochs=args.epochs, batch_size=args.batch_size, seed=args.seed, max_steps=args.max_steps,
    )
    options = [opt.strip() for opt in args.options.split(";") if opt.strip()]
    rows = run_placement_study(_dataset(args, cfg), options, cfg, tcfg)

    out_dir = Path(args.out_dir)
    run = RunRecorder("placement-study", out_dir, tcfg.seed)
    run.echo("model", cfg.model_dump())
    run.echo("train", tcfg.model_dump())
    lines = ["label,attention_layers,mean_ssnr_db,mean_stoi,ssnr_gain_db,stoi_gain"] + [
        f"{r.label},{' '.join(map(str, r.attention_layers))},{r.mean_ssnr_db:.4f},"
        f"{r.mean_stoi:.4f},{r.ssnr_gain_db:.4f},{r.stoi_gain:.4f}"
        for r in rows
    ]
    run.artifact("table", _write_table(out_dir / "placement_study.csv", lines))
    run.finish()
    print(format_placement_table(rows))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_data_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", help="dataset directory with clean/ and noisy/")
    parser.add_argument("--synthetic", action="store_true", help="generate a synthetic corpus")
    parser.add_argument("--synth-count", type=int, default=20)
    parser.add_argument("--synth-len", type=int, default=None, help="samples per synthetic utterance")
    parser.add_argument("--snrs", default="5", help="comma list of SNRs in dB")


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--attention-layers", default=None, help='comma list, "all" or "none"')
    parser.add_argument("--scale-divisor", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sasegan", description="Self-attention SEGAN speech enhancer")
    parser.add_argument("--config", help="key=value settings file")
    parser.add_argument("--serial", action="store_true", help="force the deterministic single-worker path")
    parser.add_argument("--log-level", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="adversarial training")
    _add_model_flags(p)
    _add_data_flags(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lambda", dest="lambda_l1", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("enhance", help="enhance WAV files with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("inputs", nargs="+")
    p.add_argument("--scale-divisor", type=int, default=None, help="expected checkpoint scale")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(handler=cmd_enhance)

    p = sub.add_parser("evaluate", help="SSNR/STOI of a test directory against clean references")
    p.add_argument("--clean", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("attention-dump", help="dump encoder attention rows")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--rows", default=None, help="comma list of row indices (default all)")
    p.add_argument("--segment", type=int, default=0)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(handler=cmd_attention_dump)

    p = sub.add_parser("mem-profile", help="attention map footprint per layer")
    p.add_argument("--input-len", type=int, default=16384)
    p.add_argument("--p", type=int, default=4)
    p.add_argument("--depth", type=int, default=11)
    p.add_argument("--layers", default="all")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(handler=cmd_mem_profile)

    p = sub.add_parser("synth-data", help="write a synthetic clean/noisy corpus")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--length", type=int, default=32768)
    p.add_argument("--snrs", default="0,5,10,15")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(handler=cmd_synth_data)

    p = sub.add_parser("evaluate-snapshots", help="metrics averaged over the latest checkpoints")
    p.add_argument("--checkpoint-dir", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(handler=cmd_evaluate_snapshots)

    p = sub.add_parser("placement-study", help="train and compare attention placements")
    _add_model_flags(p)
    _add_data_flags(p)
    p.add_argument("--options", default="none;3;5;7;9;11;all", help="semicolon list of placements")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(handler=cmd_placement_study)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        if args.config and not Path(args.config).is_file():
            raise InvalidConfig(f"settings file not found: {args.config}")
        config.load_settings(args.config, LOG_LEVEL=args.log_level, EVAL_WORKERS=1 if args.serial else None)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    configure_logging()
    if getattr(args, "seed", "absent") is None:
        args.seed = settings.SEED
    if getattr(args, "out_dir", "absent") is None:
        args.out_dir = settings.OUT_DIR

    try:
        return args.handler(args)
    except DivergedLoss as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except CorpusEvaluationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG if isinstance(e.cause, ValueError) else EXIT_FAILURE
    except (ValueError, IoFailure) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        logger.error("command_failed", command=args.command, error=str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
