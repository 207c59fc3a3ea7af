"""Assemble operators, data, models and checkpoints from an :class:`ExperimentConfig`."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .baselines import (IterativeConfig, IterativeReconstructor, RefineReconstructor, UnrolledModel,
                        UnrolledReconstructor)
from .deq import BackpropMode, DeqModel, DeqReconstructor
from .config import parse_config
from .formats import Checkpoint, atomic_write, write_checkpoint
from .linops import NoiseModel, add_noise, build_operator
from .models import Denoiser
from .training import (AdamState, Dataset, GroundTruthGuard, RunHistory, TrainConfig, TrainState,
                       generate_phantoms, load_dataset, pretrain_denoiser, train)

__all__ = [
    "Experiment",
    "build_experiment",
    "build_denoiser",
    "build_reconstructor",
    "train_config",
    "make_checkpoint",
    "restore_checkpoint",
    "run_training",
    "select_best",
    "checkpoint_config",
    "write_history",
    "read_history",
]

TRAINABLE = ("deq", "unrolled", "refine")


@dataclass
class Experiment:
    cfg: object
    A: object
    dataset: Dataset
    y: np.ndarray  # measurements of every image, noise included

    @property
    def y_train(self):
        return self.y[self.dataset.train_idx]

    @property
    def y_test(self):
        return self.y[self.dataset.test_idx]


def build_experiment(cfg):
    t = cfg.task
    A = build_operator(t.operator_spec(), cfg.seed)
    if cfg.data.source == "generate":
        ds = generate_phantoms(cfg.data.n, t.size, cfg.seed, t.channels)
    else:
        ds = load_dataset(cfg.data.path, cfg.seed)
        if ds.images.shape[1:] != A.input_shape:
            raise ValueError(f"dataset images {ds.images.shape[1:]} do not match the task {A.input_shape}")
    y = A.apply(ds.images) if len(ds) else np.zeros((0,) + A.output_shape)
    nm = NoiseModel("additive-gaussian" if t.noise_sigma > 0 else "none", t.noise_sigma, cfg.seed)
    return Experiment(cfg, A, ds, add_noise(y, nm))


def build_denoiser(cfg, pretrain=True):
    """Fresh denoiser, pretrained on an independent phantom set when configured."""
    arch = cfg.denoiser
    if arch.channels != cfg.task.channels:
        arch = replace(arch, channels=cfg.task.channels)
    den = Denoiser(arch, seed=cfg.seed)
    if pretrain and cfg.pretrain.epochs > 0:
        images = generate_phantoms(cfg.pretrain.n, cfg.task.size, cfg.seed, cfg.task.channels,
                                   name="pretrain-data").images
        pretrain_denoiser(den, images, cfg.pretrain, cfg.seed)
    return den


def build_reconstructor(cfg, denoiser, A):
    m = cfg.model
    if m.kind == "deq":
        mode = BackpropMode(m.backprop, m.unrolled_steps)
        return DeqReconstructor(DeqModel(m.template, denoiser, m.eta, A), mode, cfg.solver.forward,
                                cfg.solver.backward)
    if m.kind == "unrolled":
        return UnrolledReconstructor(UnrolledModel(m.unrolled_template, m.steps, denoiser, m.eta, A))
    if m.kind == "refine":
        return RefineReconstructor(denoiser, A)
    return IterativeReconstructor(m.kind, denoiser, A, IterativeConfig(m.iters, m.iterative_eta, m.red_lambda))


def train_config(cfg):
    t = cfg.train
    return TrainConfig(t.epochs, t.batch_size, t.learning_rate, t.adam_beta1, t.adam_beta2, t.adam_eps,
                       t.checkpoint_every, t.selection, cfg.loss, cfg.seed)


def config_echo(cfg):
    return json.dumps(cfg.to_dict(), sort_keys=True, indent=1)


def _denoiser_of(f):
    return f.model.denoiser if hasattr(f, "model") else f.denoiser


def make_checkpoint(cfg, f, state=None, params=None, buffers=None):
    den = _denoiser_of(f)
    params = den.params.values_dict() if params is None else params
    buffers = den.buffers if buffers is None else buffers
    blocks = dict(params)
    blocks.update({f"buffer/{k}": v for k, v in buffers.items()})
    adam = {}
    if state is not None:
        adam = state.adam.to_blocks()
        adam.update(_loop_blocks(f, state))
    return Checkpoint(config_echo(cfg), blocks, adam, state.step if state is not None else 0)


def _loop_blocks(f, state):
    # partial-epoch accumulators, so a run resumed mid-epoch reports the same epoch record
    stats = getattr(f, "stats", None)
    out = {"loop/epoch_loss": np.array([state.epoch_loss]), "loop/epoch_time": np.array([state.epoch_time])}
    if stats is not None:
        out["loop/forward_iterations"] = np.asarray(stats.forward_iterations, dtype=np.float64)
        out["loop/backward_iterations"] = np.asarray(stats.backward_iterations, dtype=np.float64)
        out["loop/failures"] = np.array([stats.forward_failures, stats.backward_failures], dtype=np.float64)
    return out


def _restore_loop(ck, f, state):
    b = ck.adam
    if "loop/epoch_loss" in b:
        state.epoch_loss = float(b["loop/epoch_loss"][0])
        state.epoch_time = float(b["loop/epoch_time"][0])
    stats = getattr(f, "stats", None)
    if stats is not None and "loop/failures" in b:
        stats.forward_iterations[:] = [int(v) for v in b["loop/forward_iterations"]]
        stats.backward_iterations[:] = [int(v) for v in b["loop/backward_iterations"]]
        stats.forward_failures, stats.backward_failures = (int(v) for v in b["loop/failures"])


def checkpoint_config(ck):
    return parse_config(ck.config_text, "<checkpoint>")


def restore_checkpoint(ck, f):
    """Load parameters and buffers into reconstructor ``f``; returns the Adam state."""
    den = _denoiser_of(f)
    params = {k: v for k, v in ck.params.items() if not k.startswith("buffer/")}
    missing = set(den.params) - set(params)
    if missing:
        raise ValueError(f"checkpoint lacks parameters {sorted(missing)}")
    den.params.load(params)
    for k, v in ck.params.items():
        if k.startswith("buffer/"):
            den.buffers[k[len("buffer/"):]] = v.copy()
    return AdamState.from_blocks(ck.adam)


def run_training(cfg, out_dir=None, resume=None, stop_after=None, experiment=None, denoiser=None):
    """Train per ``cfg``; writes checkpoints and history under ``out_dir`` when given.

    Returns ``(reconstructor, state, experiment)`` with the reconstructor at
    its final parameters; see :func:`select_best`.
    """
    if cfg.model.kind not in TRAINABLE:
        raise ValueError(f"model kind {cfg.model.kind!r} is not trainable")
    exp = experiment or build_experiment(cfg)
    den = denoiser if denoiser is not None else build_denoiser(cfg, pretrain=resume is None)
    f = build_reconstructor(cfg, den, exp.A)
    tcfg = train_config(cfg)
    state = None
    if resume is not None:
        ck, history, best = resume
        state = TrainState(step=ck.rng_position, adam=restore_checkpoint(ck, f), history=history)
        _restore_loop(ck, f, state)
        if best is not None and len(history):
            vals = [r.test_psnr for r in history.records]
            state.best_psnr = vals[-1] if tcfg.selection == "last" else max(vals)
            state.best_params = {k: v for k, v in best.params.items() if not k.startswith("buffer/")}
            state.best_buffers = {k[7:]: v for k, v in best.params.items() if k.startswith("buffer/")}
    x_train = exp.dataset.train if cfg.loss.mode == "supervised" else GroundTruthGuard(len(exp.y_train))
    out = Path(out_dir) if out_dir is not None else None

    def on_epoch(st, epoch):
        if out is None:
            return
        every = cfg.train.checkpoint_every
        last = st.step >= tcfg.epochs * math.ceil(len(exp.y_train) / tcfg.batch_size)
        if last or (every and (epoch + 1) % every == 0):
            write_checkpoint(out / "checkpoint.deq1", make_checkpoint(cfg, f, st))
            write_checkpoint(out / "best.deq1", make_checkpoint(cfg, f, st, st.best_params, st.best_buffers))
            write_history(out / "history.csv", st.history, cfg.hash())

    state = train(f, exp.y_train, x_train, exp.y_test, exp.dataset.test, tcfg, state, on_epoch, stop_after)
    return f, state, exp


def select_best(f, state):
    """Load the selected (best or last epoch) parameters into ``f``."""
    if state.best_params is not None:
        den = _denoiser_of(f)
        den.params.load(state.best_params)
        den.buffers.update({k: v.copy() for k, v in state.best_buffers.items()})
    return f


def write_history(path, history, chash):
    atomic_write(path, (f"# config_hash={chash}\n" + history.to_csv()).encode())


def read_history(path):
    text = Path(path).read_text()
    return RunHistory.from_csv("\n".join(ln for ln in text.splitlines() if not ln.startswith("#")))
