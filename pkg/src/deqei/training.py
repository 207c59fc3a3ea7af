"""Synthetic data, denoiser pretraining, Adam and the end-to-end training loop."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .formats import read_img1, write_img1
from .losses import LossConfig, ei_objective, sup_loss
from .metrics import psnr_report
from .rng import stream

__all__ = [
    "Dataset",
    "generate_phantoms",
    "load_dataset",
    "save_dataset",
    "PretrainConfig",
    "pretrain_denoiser",
    "AdamConfig",
    "AdamState",
    "adam_step",
    "TrainConfig",
    "EpochRecord",
    "RunHistory",
    "GroundTruthAccess",
    "GroundTruthGuard",
    "TrainingDiverged",
    "TrainState",
    "train",
]


# ---------------------------------------------------------------- data


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    train_idx: np.ndarray
    test_idx: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 4 and len(self.images):
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")

    def __len__(self):
        return len(self.images)

    @property
    def train(self):
        return self.images[self.train_idx]

    @property
    def test(self):
        return self.images[self.test_idx]

    @classmethod
    def with_split(cls, images, seed=0, train_fraction=0.9):
        images = np.asarray(images, dtype=np.float64)
        n = len(images)
        perm = stream(seed, "split").permutation(n)
        n_train = int(math.floor(train_fraction * n + 0.5))
        return cls(images, np.sort(perm[:n_train]), np.sort(perm[n_train:]))


def _phantom(rng, size):
    c = (np.arange(size) - (size - 1) / 2.0) / (size / 2.0)
    yy, xx = np.meshgrid(-c, c, indexing="ij")
    img = np.zeros((size, size))
    for _ in range(int(rng.integers(3, 9))):
        r, phi = 0.5 * math.sqrt(rng.uniform()), rng.uniform(0, 2 * math.pi)
        cx, cy = r * math.cos(phi), r * math.sin(phi)
        a, b = rng.uniform(0.1, 0.45, size=2)
        th = rng.uniform(0, math.pi)
        u = (xx - cx) * math.cos(th) + (yy - cy) * math.sin(th)
        v = -(xx - cx) * math.sin(th) + (yy - cy) * math.cos(th)
        img += rng.uniform(0.2, 1.0) * ((u / a) ** 2 + (v / b) ** 2 <= 1.0)
    return np.clip(img, 0.0, 1.0)


def generate_phantoms(n, size, seed=0, channels=1, name="data"):
    """``n`` superpositions of 3 to 8 random ellipses, clipped to [0, 1].

    Extra channels (for complex-valued tasks) are zero. Values are rounded
    through float32 so the IMG1 round trip is exact. ``name`` selects the
    random stream, so independent image sets can share a root seed.
    """
    if size < 16:
        raise ValueError("phantom size must be >= 16")
    rng = stream(seed, name)
    out = np.zeros((n, channels, size, size))
    for i in range(n):
        out[i, 0] = _phantom(rng, size)
    return Dataset.with_split(out.astype(np.float32).astype(np.float64), seed)


def save_dataset(ds, path):
    write_img1(path, ds.images)


def load_dataset(path, seed=0):
    return Dataset.with_split(read_img1(path).astype(np.float64), seed)


# ---------------------------------------------------------------- optimizer


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def to_blocks(self):
        out = {"t": np.array([float(self.t)])}
        for k in self.m:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out

    @classmethod
    def from_blocks(cls, blocks):
        st = cls(int(blocks["t"][0]) if "t" in blocks else 0)
        for k, val in blocks.items():
            if k.startswith("m/"):
                st.m[k[2:]] = val.copy()
            elif k.startswith("v/"):
                st.v[k[2:]] = val.copy()
        return st


def adam_step(params, grads, state, cfg):
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = b1 * state.m.get(name, np.zeros_like(g)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(g)) + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return params, state


# ---------------------------------------------------------------- pretraining


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 0
    n: int = 200
    sigma: float = 0.1
    learning_rate: float = 1e-3
    batch_size: int = 8


def pretrain_denoiser(denoiser, images, cfg, seed=0):
    """Fit ``denoiser`` as a Gaussian denoiser on ``images``; returns per-epoch mean losses."""
    if not cfg.sigma > 0:
        raise ValueError("pretraining sigma must be positive")
    images = np.asarray(images, dtype=np.float64)
    opt, state, losses = AdamConfig(cfg.learning_rate), AdamState(), []
    step = 0
    for epoch in range(cfg.epochs):
        perm = stream(seed, "pretrain-shuffle", epoch).permutation(len(images))
        total = 0.0
        for s in range(0, len(images), cfg.batch_size):
            x = images[perm[s:s + cfg.batch_size]]
            noisy = x + cfg.sigma * stream(seed, "pretrain-noise", step).standard_normal(x.shape)
            loss = sup_loss(denoiser(Tensor(noisy)), x) * (1.0 / len(x))
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"non-finite pretraining loss in epoch {epoch}")
            adam_step(denoiser.params, ad.backward(loss, denoiser.params), state, opt)
            denoiser.refresh_spectral_state()
            total += float(loss.data) * len(x)
            step += 1
        losses.append(total / max(len(images), 1))
    return losses


# ---------------------------------------------------------------- training loop


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 0
    selection: str = "best"  # model selection: "best" test PSNR or "last" epoch
    loss: LossConfig = LossConfig()
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.selection not in ("best", "last"):
            raise ValueError(f"unknown selection rule {self.selection!r}")

    @property
    def adam(self):
        return AdamConfig(self.learning_rate, self.adam_beta1, self.adam_beta2, self.adam_eps)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_psnr: float
    forward_iters: float
    backward_iters: float
    forward_failures: int
    backward_failures: int
    wall_time: float

    def key(self):
        """Everything except wall time, for reproducibility comparisons."""
        return tuple(getattr(self, f.name) for f in fields(self) if f.name != "wall_time")


COLUMNS = [f.name for f in fields(EpochRecord)]


@dataclass
class RunHistory:
    records: list = field(default_factory=list)

    def append(self, rec):
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epoch indices must increase")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def key(self):
        return [r.key() for r in self.records]

    def to_csv(self):
        lines = [",".join(COLUMNS)]
        for r in self.records:
            lines.append(",".join(repr(getattr(r, c)) if isinstance(getattr(r, c), float) else str(getattr(r, c))
                                  for c in COLUMNS))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text):
        rows = [ln for ln in text.splitlines() if ln.strip()]
        if not rows or rows[0].split(",") != COLUMNS:
            raise ValueError("not a run-history CSV")
        h = cls()
        for ln in rows[1:]:
            vals = ln.split(",")
            kw = {}
            for c, v in zip(COLUMNS, vals):
                kw[c] = int(v) if c in ("epoch", "forward_failures", "backward_failures") else float(v)
            h.append(EpochRecord(**kw))
        return h


class GroundTruthAccess(RuntimeError):
    pass


class GroundTruthGuard:
    """Stands in for training images in self-supervised mode; any read raises."""

    def __init__(self, n):
        self.n = n

    def __len__(self):
        return self.n

    def _deny(self, *args, **kwargs):
        raise GroundTruthAccess("ground-truth images are not available to self-supervised training")

    __getitem__ = __array__ = __iter__ = _deny


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch, step, seed, detail):
        super().__init__(f"non-finite loss at epoch {epoch}, step {step} (seed {seed}); {detail}")
        self.epoch, self.step = epoch, step


@dataclass
class TrainState:
    """Everything needed to continue a run: step counter, optimizer, history and best model."""

    step: int = 0
    adam: AdamState = field(default_factory=AdamState)
    history: RunHistory = field(default_factory=RunHistory)
    best_psnr: float = -math.inf
    best_params: dict | None = None
    best_buffers: dict | None = None
    epoch_loss: float = 0.0
    epoch_time: float = 0.0


def _buffers(f):
    den = getattr(f, "denoiser", None) or getattr(getattr(f, "model", None), "denoiser", None)
    return den.buffers if den is not None else {}


def _loss(f, A, y, x, cfg, step):
    if cfg.loss.mode == "supervised":
        return sup_loss(f(y), x)
    return ei_objective(y, f, A, cfg.loss, counter=step)


def train(f, y_train, x_train, y_test, x_test, cfg, state=None, on_epoch=None, stop_after=None):
    """Train reconstructor ``f`` (exposing ``params``, ``operator`` and ``after_step``).

    In self-supervised mode ``x_train`` should be a :class:`GroundTruthGuard`;
    the loop reads training images only for the supervised loss. ``state``
    resumes an earlier run; ``on_epoch(state, epoch)`` is called after every
    epoch (for checkpointing); ``stop_after`` limits the number of optimizer
    steps taken in this call.
    """
    state = state or TrainState()
    params = f.params
    A = f.operator
    n = len(y_train)
    nb = math.ceil(n / cfg.batch_size) if n else 0
    stats = getattr(f, "stats", None)
    taken = 0
    while nb and state.step < cfg.epochs * nb:
        epoch, b = divmod(state.step, nb)
        if b == 0:
            state.epoch_loss = state.epoch_time = 0.0
            if stats is not None:
                stats.reset()
        t0 = time.perf_counter()
        perm = stream(cfg.seed, "shuffle", epoch).permutation(n)
        idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
        y = y_train[idx]
        x = x_train[idx] if cfg.loss.mode == "supervised" else None
        loss = _loss(f, A, y, x, cfg, state.step)
        if not np.isfinite(loss.data):
            detail = ""
            if stats is not None:
                detail = f"forward iterations {stats.forward_iterations[-3:]}, backward {stats.backward_iterations[-3:]}"
            raise TrainingDiverged(epoch, state.step, cfg.seed, detail)
        adam_step(params, ad.backward(loss, params), state.adam, cfg.adam)
        f.after_step()
        state.epoch_loss += float(loss.data)
        state.epoch_time += time.perf_counter() - t0
        state.step += 1
        taken += 1
        if state.step % nb == 0:
            rep = psnr_report(f, y_test, x_test) if len(y_test) else None
            test_psnr = rep.mean if rep is not None else math.nan
            rec = EpochRecord(
                epoch, state.epoch_loss / n, test_psnr,
                stats.mean_forward() if stats else 0.0, stats.mean_backward() if stats else 0.0,
                stats.forward_failures if stats else 0, stats.backward_failures if stats else 0,
                state.epoch_time)
            state.history.append(rec)
            if cfg.selection == "last" or test_psnr > state.best_psnr or state.best_params is None:
                state.best_psnr = test_psnr
                state.best_params = params.values_dict()
                state.best_buffers = {k: v.copy() for k, v in _buffers(f).items()}
            if on_epoch is not None:
                on_epoch(state, epoch)
        if stop_after is not None and taken >= stop_after:
            break
    return state
