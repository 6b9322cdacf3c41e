import numpy as np
import pytest

import checkpoints
from adversarial_training import OptimState
from checkpoints import (
    MAGIC,
    Checkpoint,
    CheckpointStore,
    latest_checkpoints,
    load_checkpoint,
    pack_networks,
    save_checkpoint,
    unpack_networks,
)
from errors import ConfigMismatch, CorruptFile, IoFailure, VersionMismatch
from models import TrainConfig
from segan_model import (
    build_discriminator,
    build_generator,
    init_vbn_reference,
    networks_from_checkpoint,
    sample_latent,
)


@pytest.fixture
def snapshot(tiny_config):
    gen = build_generator(tiny_config, seed=1)
    disc = build_discriminator(tiny_config, seed=1)
    rng = np.random.default_rng(0)
    init_vbn_reference(disc, rng.uniform(-0.5, 0.5, (2, 64)), rng.uniform(-0.5, 0.5, (2, 64)))
    g_optim = OptimState(acc={"enc.1.bias": np.full(4, 0.5)})
    return Checkpoint(
        model_config=tiny_config,
        step=42,
        train_config=TrainConfig(epochs=3),
        arrays=pack_networks(gen, disc, g_optim, OptimState()),
    )


def test_round_trip(tmp_path, snapshot):
    path = save_checkpoint(tmp_path / "a.ckpt", snapshot)
    assert path.read_bytes().startswith(MAGIC)
    loaded = load_checkpoint(path, snapshot.model_config)
    assert loaded.step == 42
    assert loaded.train_config.epochs == 3
    assert loaded.model_config == snapshot.model_config
    assert sorted(loaded.arrays) == sorted(snapshot.arrays)
    for name, arr in snapshot.arrays.items():
        np.testing.assert_array_equal(loaded.arrays[name], arr)
    assert "D.state.vbn.3.ref_mean" in loaded.arrays
    assert "G.state.spectral.enc.1.u" in loaded.arrays
    np.testing.assert_array_equal(loaded.arrays["G.optim.enc.1.bias"], np.full(4, 0.5))


def test_saving_twice_gives_identical_bytes(tmp_path, snapshot):
    first = save_checkpoint(tmp_path / "a.ckpt", snapshot)
    second = save_checkpoint(tmp_path / "b.ckpt", snapshot)
    assert first.read_bytes() == second.read_bytes()


def test_truncated_file(tmp_path, snapshot):
    path = save_checkpoint(tmp_path / "a.ckpt", snapshot)
    blob = path.read_bytes()
    for cut in (4, 20, len(blob) - 8):
        path.write_bytes(blob[:cut])
        with pytest.raises(CorruptFile):
            load_checkpoint(path)


def test_bad_magic(tmp_path, snapshot):
    path = save_checkpoint(tmp_path / "a.ckpt", snapshot)
    path.write_bytes(b"NOTACKPT" + path.read_bytes()[8:])
    with pytest.raises(CorruptFile):
        load_checkpoint(path)


def test_flipped_payload_byte(tmp_path, snapshot):
    path = save_checkpoint(tmp_path / "a.ckpt", snapshot)
    blob = bytearray(path.read_bytes())
    blob[-3] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CorruptFile):
        load_checkpoint(path)


def test_unknown_format_version(tmp_path, snapshot, monkeypatch):
    path = save_checkpoint(tmp_path / "a.ckpt", snapshot)
    monkeypatch.setattr(checkpoints, "FORMAT_VERSION", 2)
    with pytest.raises(VersionMismatch):
        load_checkpoint(path)


def test_config_mismatch(tmp_path, snapshot):
    path = save_checkpoint(tmp_path / "a.ckpt", snapshot)
    other = snapshot.model_config.model_copy(update={"attention_layers": [4]})
    with pytest.raises(ConfigMismatch):
        load_checkpoint(path, other)


def test_unpack_rejects_other_networks(snapshot, tiny_config):
    plain = tiny_config.model_copy(update={"attention_layers": []})
    with pytest.raises(ConfigMismatch):
        unpack_networks(snapshot, build_generator(plain), build_discriminator(plain))


def test_missing_file(tmp_path):
    with pytest.raises(IoFailure):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_restored_networks_compute_the_same(tmp_path, tiny_config):
    gen = build_generator(tiny_config, seed=3)
    disc = build_discriminator(tiny_config, seed=3)
    rng = np.random.default_rng(0)
    clean, noisy = rng.uniform(-0.5, 0.5, (2, 64)), rng.uniform(-0.5, 0.5, (2, 64))
    init_vbn_reference(disc, clean, noisy)
    ckpt = Checkpoint(model_config=tiny_config, arrays=pack_networks(gen, disc))
    restored_gen, restored_disc = networks_from_checkpoint(
        load_checkpoint(save_checkpoint(tmp_path / "a.ckpt", ckpt))
    )

    z = sample_latent(tiny_config, rng, batch=2)
    np.testing.assert_array_equal(restored_gen.forward(noisy, z), gen.forward(noisy, z))
    np.testing.assert_array_equal(restored_disc.forward(clean, noisy), disc.forward(clean, noisy))


def test_store_keeps_the_latest(tmp_path, snapshot):
    store = CheckpointStore(tmp_path, keep=2)
    for step in (1, 5, 10):
        store.save(Checkpoint(model_config=snapshot.model_config, step=step, arrays=snapshot.arrays))
    assert [p.name for p in latest_checkpoints(tmp_path, n=None)] == [
        "step_00000005.ckpt", "step_00000010.ckpt",
    ]
    assert [p.name for p in latest_checkpoints(tmp_path, n=1)] == ["step_00000010.ckpt"]
