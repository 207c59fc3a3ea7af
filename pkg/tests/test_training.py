import math

import numpy as np
import pytest

from conftest import small_config
from deqei.experiment import build_experiment, make_checkpoint, run_training
from deqei.formats import decode_checkpoint, encode_checkpoint
from deqei.models import Denoiser, DenoiserArch
from deqei.training import (AdamConfig, AdamState, Dataset, EpochRecord, GroundTruthAccess, GroundTruthGuard,
                            PretrainConfig, RunHistory, TrainConfig, adam_step, generate_phantoms,
                            load_dataset, pretrain_denoiser, save_dataset)
from deqei.autodiff import ParameterSet


def test_phantoms_in_range_and_seeded():
    a = generate_phantoms(6, 16, seed=1)
    b = generate_phantoms(6, 16, seed=1)
    assert a.images.shape == (6, 1, 16, 16)
    assert a.images.min() >= 0 and a.images.max() <= 1
    assert np.array_equal(a.images, b.images)
    assert not np.array_equal(a.images, generate_phantoms(6, 16, seed=1, name="pretrain-data").images)
    assert generate_phantoms(2, 16, channels=2).images[:, 1].max() == 0


def test_split_is_disjoint_and_seeded():
    ds = Dataset.with_split(np.zeros((20, 1, 4, 4)), seed=3)
    assert len(ds.train_idx) == 18 and len(ds.test_idx) == 2
    assert not set(ds.train_idx) & set(ds.test_idx)
    assert np.array_equal(ds.test_idx, Dataset.with_split(np.zeros((20, 1, 4, 4)), seed=3).test_idx)


def test_dataset_file_round_trip(tmp_path):
    ds = generate_phantoms(5, 16, seed=2)
    save_dataset(ds, tmp_path / "d.img1")
    back = load_dataset(tmp_path / "d.img1", seed=2)
    assert back.images.tobytes() == ds.images.tobytes()
    assert np.array_equal(back.test_idx, ds.test_idx)


def test_adam_matches_reference_formula():
    ps = ParameterSet({"w": np.array([1.0, -2.0])})
    st = AdamState()
    cfg = AdamConfig(0.1)
    g = np.array([0.5, -1.0])
    for _ in range(3):
        adam_step(ps, {"w": g}, st, cfg)
    # constant gradient: bias-corrected m/sqrt(v) equals sign(g)
    assert np.allclose(ps["w"].data, np.array([1.0, -2.0]) - 0.3 * np.sign(g), atol=1e-6)
    blocks = st.to_blocks()
    back = AdamState.from_blocks(blocks)
    assert back.t == 3 and np.array_equal(back.m["w"], st.m["w"])


def test_pretraining_reduces_denoising_loss():
    den = Denoiser(DenoiserArch(hidden_channels=4, depth=2, norm_groups=0, residual=False, zero_init_last=False))
    imgs = generate_phantoms(16, 16, seed=0).images
    losses = pretrain_denoiser(den, imgs, PretrainConfig(epochs=3, learning_rate=5e-3, batch_size=4))
    assert losses[-1] < losses[0]
    with pytest.raises(ValueError):
        pretrain_denoiser(den, imgs, PretrainConfig(epochs=1, sigma=0.0))


def test_ground_truth_guard_denies_every_read():
    g = GroundTruthGuard(5)
    assert len(g) == 5
    for read in (lambda: g[0], lambda: np.asarray(g), lambda: list(g)):
        with pytest.raises(GroundTruthAccess):
            read()


def test_history_csv_round_trip_and_monotone_epochs():
    h = RunHistory()
    h.append(EpochRecord(0, 0.1, 20.5, 3.0, 4.0, 0, 1, 0.25))
    h.append(EpochRecord(1, 1 / 3, math.inf, 3.5, 4.5, 0, 0, 0.5))
    back = RunHistory.from_csv(h.to_csv())
    assert back.records == h.records
    with pytest.raises(ValueError):
        h.append(EpochRecord(1, 0.0, 0.0, 0, 0, 0, 0, 0.0))
    with pytest.raises(ValueError):
        RunHistory.from_csv("a,b\n1,2\n")


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(selection="median")


def test_training_is_deterministic():
    cfg = small_config()
    _, s1, _ = run_training(cfg)
    _, s2, _ = run_training(cfg)
    assert s1.history.key() == s2.history.key()
    assert len(s1.history) == 2


def test_resume_equals_uninterrupted_run():
    cfg = small_config()
    f_full, full, _ = run_training(cfg)
    f_part, part, _ = run_training(cfg, stop_after=3)
    ck = decode_checkpoint(encode_checkpoint(make_checkpoint(cfg, f_part, part)))
    f_res, res, _ = run_training(cfg, resume=(ck, part.history, None))
    assert res.step == full.step
    assert res.history.key() == full.history.key()
    assert f_res.params.flatten().tobytes() == f_full.params.flatten().tobytes()


def test_ei_training_never_reads_ground_truth_and_decreases_loss():
    cfg = small_config(loss={"mode": "equivariant-imaging", "alpha": 1.0}, train={"epochs": 3})
    exp = build_experiment(cfg)
    # the self-supervised path only ever sees the guard in place of training images
    f, st, _ = run_training(cfg, experiment=exp)
    losses = [r.train_loss for r in st.history.records]
    assert min(losses) < losses[0]


def test_supervised_training_improves_test_psnr():
    cfg = small_config(train={"epochs": 3, "learning_rate": 3e-3})
    f, st, exp = run_training(cfg)
    assert st.best_psnr >= st.history.records[0].test_psnr
    assert all(np.isfinite(r.train_loss) for r in st.history.records)


def test_untrainable_kind_rejected():
    with pytest.raises(ValueError):
        run_training(small_config(model={"kind": "pnp"}))
