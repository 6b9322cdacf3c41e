import numpy as np
import pytest

from adversarial_training import train
from audio_pipeline import synth_dataset
from checkpoints import Checkpoint, pack_networks, save_checkpoint
from experiments import (
    enhance_corpus,
    evaluate_snapshots,
    format_placement_table,
    noisy_baseline,
    placement_label,
    run_placement_study,
)
from models import ModelConfig, TrainConfig
from segan_model import build_discriminator, build_generator


@pytest.fixture
def pairs():
    return synth_dataset(seed=0, n_utterances=2, utterance_len=7000, snrs_db=[5, 10])


def test_enhancement_does_not_depend_on_corpus_order(tiny_config, pairs):
    gen = build_generator(tiny_config)
    forward = enhance_corpus(gen, pairs, seed=0)
    backward = enhance_corpus(gen, list(reversed(pairs)), seed=0)
    assert forward == backward


def test_snapshot_average_of_identical_checkpoints(tmp_path, tiny_config, pairs):
    gen = build_generator(tiny_config, seed=2)
    ckpt = Checkpoint(model_config=tiny_config, arrays=pack_networks(gen, build_discriminator(tiny_config)))
    paths = [save_checkpoint(tmp_path / f"{i}.ckpt", ckpt) for i in range(2)]
    averaged = evaluate_snapshots(paths, pairs, seed=0)
    single = enhance_corpus(gen, pairs, seed=0)
    for a, b in zip(averaged.utterances, single.utterances):
        assert a.id == b.id
        assert a.ssnr_db == pytest.approx(b.ssnr_db)
        assert a.stoi == pytest.approx(b.stoi)


def test_snapshot_evaluation_needs_checkpoints(pairs):
    with pytest.raises(ValueError):
        evaluate_snapshots([], pairs)


@pytest.mark.parametrize("layers, label", [([], "none"), ([3], "3"), ([3, 4], "all"), ([2, 4], "2,4")])
def test_placement_labels(layers, label):
    assert placement_label(layers, depth=4, first_layer=1) == label


def test_placement_study(tiny_config, tiny_train_config, pairs):
    tcfg = tiny_train_config.model_copy(update={"max_steps": 2})
    rows = run_placement_study(pairs, ["none", "3", "all"], tiny_config, tcfg)

    assert [r.label for r in rows] == ["noisy", "none", "3", "all"]
    assert rows[3].attention_layers == [3, 4]
    assert rows[1].ssnr_gain_db == 0.0
    assert rows[1].stoi_gain == 0.0
    baseline = noisy_baseline(pairs)
    assert rows[0].mean_ssnr_db == pytest.approx(baseline.mean_ssnr_db)
    assert all(r.final_g_l1 is not None for r in rows[1:])

    table = format_placement_table(rows).splitlines()
    assert table[0].split() == ["placement", "ssnr_db", "stoi", "d_ssnr", "d_stoi"]
    assert len(table) == 5


def test_placement_gains_fall_back_to_noisy(tiny_config, tiny_train_config, pairs):
    tcfg = tiny_train_config.model_copy(update={"max_steps": 1})
    rows = run_placement_study(pairs, ["3"], tiny_config, tcfg)
    assert rows[0].label == "noisy"
    assert rows[0].ssnr_gain_db == 0.0
    assert rows[1].ssnr_gain_db == pytest.approx(rows[1].mean_ssnr_db - rows[0].mean_ssnr_db)


def desk_scale_run(attention_layers):
    cfg = ModelConfig(scale_divisor=4, attention_layers=attention_layers).ensure_valid()
    tcfg = TrainConfig(epochs=1000, batch_size=10, max_steps=300, seed=7)
    dataset = synth_dataset(seed=7, n_utterances=20, utterance_len=8192, snrs_db=[5.0])
    gen, disc = build_generator(cfg, tcfg.seed), build_discriminator(cfg, tcfg.seed)
    _, log = train(gen, disc, dataset, tcfg)
    return log, enhance_corpus(gen, dataset, tcfg.seed), noisy_baseline(dataset)


@pytest.mark.slow
@pytest.mark.parametrize("attention_layers", [[11], [3]])
def test_desk_scale_training_improves_on_noisy_input(attention_layers):
    log, enhanced, noisy = desk_scale_run(attention_layers)
    first = np.mean([r.g_l1 for r in log[:10]])
    last = np.mean([r.g_l1 for r in log[-10:]])
    assert last < 0.5 * first
    assert enhanced.mean_ssnr_db >= noisy.mean_ssnr_db + 1.0
