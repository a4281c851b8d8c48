"""Training loops: RF / OT-CFM, HRF2 with or without data coupling, velocity coupling and D&V.

Every iteration draws from its own generator ``make_rng(seed, 1, k)``, so a
run resumed from a checkpoint at iteration ``k`` continues bit for bit like
the uninterrupted run.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import coupling
from .dists import make_rng
from .interp import interp_state, interp_velocity
from .metrics import distance
from .model import (AccelModel, NetConfig, OptimizerState, load_checkpoint, loss_and_grad,
                    optimizer_step, save_checkpoint)
from .sampling import NfeBudget, sample_hrf2, sample_rf

__all__ = [
    "METHODS",
    "TrainConfig",
    "Checkpoint",
    "CheckpointSet",
    "TrainResult",
    "VelocityPairPool",
    "train",
    "train_rf",
    "train_hrf2_d",
    "train_hrf2_v",
    "train_hrf2_dv",
    "validate",
    "build_pair_pool",
    "config_digest",
    "config_from_dict",
]

METHODS = ("rf", "otcfm", "hrf2", "hrf2-d", "hrf2-v", "hrf2-dv")
COUPLED = ("otcfm", "hrf2-d", "hrf2-dv")

_ITER_STREAM = 1
_POOL_STREAM = 2
_VAL_STREAM = 3


@dataclass(frozen=True)
class TrainConfig:
    method: str
    ot_batch: int | None = 100
    grad_batch: int = 1000
    iters: int = 20_000
    seed: int = 0
    checkpoint_every: int = 1000
    validation_size: int = 2000
    validation_budget: tuple[int, int] = (10, 10)
    pretrained_path: str | None = None
    learning_rate: float = 1e-3
    lr_schedule: str = "constant"
    lr_final_fraction: float = 0.05
    velocity_batch: int = 100
    velocity_n_tau: int = 100
    velocity_pool: int | None = 2000
    init_from_pretrained: bool = True
    log_every: int = 100
    out_dir: str | None = None
    resume_from: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        for name in ("grad_batch", "iters", "checkpoint_every", "validation_size",
                     "velocity_batch", "velocity_n_tau", "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        object.__setattr__(self, "validation_budget", tuple(self.validation_budget))
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")
        if self.coupled and self.ot_batch and self.ot_batch > 1:
            if self.grad_batch % self.ot_batch:
                raise ValueError("grad_batch must be a multiple of ot_batch when data coupling is active")
            if self.ot_batch > coupling.MAX_OT_BATCH:
                raise ValueError(f"ot_batch exceeds {coupling.MAX_OT_BATCH}")
        if self.method in ("hrf2-v", "hrf2-dv"):
            if self.grad_batch % self.velocity_batch:
                raise ValueError("grad_batch must be a multiple of velocity_batch")
            if self.velocity_pool is not None and self.velocity_pool < 1:
                raise ValueError("velocity_pool must be >= 1 or None")

    @property
    def coupled(self) -> bool:
        return self.method in COUPLED

    @property
    def data_ot_batch(self) -> int | None:
        return self.ot_batch if self.coupled else None

    @property
    def variant(self) -> str:
        return "velocity" if self.method in ("rf", "otcfm") else "accel"

    def lr_at(self, k: int) -> float:
        """Learning rate for iteration ``k`` (1-based)."""
        if self.lr_schedule == "constant" or self.iters == 1:
            return self.learning_rate
        frac = (k - 1) / (self.iters - 1)
        lo = self.lr_final_fraction
        return self.learning_rate * (lo + (1 - lo) * 0.5 * (1 + np.cos(np.pi * frac)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["validation_budget"] = list(self.validation_budget)
        return d


@dataclass(frozen=True)
class Checkpoint:
    iteration: int
    path: str | None
    validation_metric: float
    params: np.ndarray | None = field(default=None, repr=False, compare=False)


@dataclass
class CheckpointSet:
    """Checkpoints of one run, all validated with the same budget."""

    budget: tuple[int, int]
    entries: list[Checkpoint] = field(default_factory=list)

    def add(self, ckpt: Checkpoint):
        self.entries.append(ckpt)

    def best(self) -> Checkpoint:
        if not self.entries:
            raise ValueError("no checkpoints recorded")
        # ties go to the earliest iteration
        return min(self.entries, key=lambda c: (c.validation_metric, c.iteration))

    def __len__(self):
        return len(self.entries)


@dataclass
class TrainResult:
    model: AccelModel
    final: AccelModel
    checkpoints: CheckpointSet
    losses: np.ndarray
    config: TrainConfig
    best_iteration: int


@dataclass(frozen=True)
class VelocityPairPool:
    """Pre-integrated, OT-coupled velocity pairs; rows grouped by anchor."""

    x_t: np.ndarray
    t: np.ndarray
    v0: np.ndarray
    v1: np.ndarray
    per_anchor: int

    @property
    def n_anchors(self) -> int:
        return len(self.x_t)


def validate(model: AccelModel, source, target, nfe: NfeBudget | tuple, n_samples: int,
             seed: int) -> float:
    """Distance between ``n_samples`` generated points and fresh target draws."""
    if not isinstance(nfe, NfeBudget):
        nfe = NfeBudget(*nfe)
    rng = make_rng(seed, _VAL_STREAM)
    z0 = source.draw(n_samples, rng)
    ref = target.draw(n_samples, rng)
    if model.config.variant == "velocity":
        gen, _ = sample_rf(model, z0, nfe.total)
    else:
        gen, _ = sample_hrf2(model, z0, nfe, seed)
    return distance(gen, ref, seed=seed)


def _data_pairs(source, target, n, rng, ot_batch):
    x0 = source.draw(n, rng)
    x1 = target.draw(n, rng)
    return coupling.minibatch_couple(x0, x1, ot_batch)


def _anchors(source, target, n_anchors, rng, ot_batch):
    """Space-time anchors from pairs drawn under the active data coupling."""
    if ot_batch and ot_batch > 1:
        m = max(ot_batch, -(-n_anchors // ot_batch) * ot_batch)
        x0, x1 = _data_pairs(source, target, m, rng, ot_batch)
        x0, x1 = x0[:n_anchors], x1[:n_anchors]
    else:
        x0, x1 = _data_pairs(source, target, n_anchors, rng, None)
    t = rng.uniform(size=n_anchors)
    return interp_state(x0, x1, t), t


def build_pair_pool(pretrained: AccelModel, source, target, n_anchors: int, per_anchor: int,
                    n_tau: int, ot_batch: int | None, seed: int,
                    anchors_per_chunk: int = 50) -> VelocityPairPool:
    """Integrate ``n_anchors * per_anchor`` velocity pairs with the pretrained model."""
    xs, ts, v0s, v1s = [], [], [], []
    for c, start in enumerate(range(0, n_anchors, anchors_per_chunk)):
        rng = make_rng(seed, _POOL_STREAM, c)
        a = min(anchors_per_chunk, n_anchors - start)
        x_t, t = _anchors(source, target, a, rng, ot_batch)
        _, _, v0, v1 = coupling.velocity_pairs(pretrained, x_t, t, per_anchor, n_tau, rng)
        xs.append(x_t)
        ts.append(t)
        v0s.append(v0.reshape(a, per_anchor, -1))
        v1s.append(v1.reshape(a, per_anchor, -1))
    return VelocityPairPool(np.concatenate(xs), np.concatenate(ts), np.concatenate(v0s),
                            np.concatenate(v1s), per_anchor)


class _BatchMaker:
    def __init__(self, cfg: TrainConfig, source, target, pretrained=None, pool=None):
        self.cfg, self.source, self.target = cfg, source, target
        self.pretrained, self.pool = pretrained, pool

    def __call__(self, k: int):
        cfg = self.cfg
        rng = make_rng(cfg.seed, _ITER_STREAM, k)
        n = cfg.grad_batch
        if cfg.method in ("hrf2-v", "hrf2-dv"):
            return self._velocity_batch(rng)
        x0, x1 = _data_pairs(self.source, self.target, n, rng, cfg.data_ot_batch)
        t = rng.uniform(size=n)
        x_t = interp_state(x0, x1, t)
        vel = x1 - x0
        if cfg.variant == "velocity":
            return x_t, t, None, None, vel
        v0 = rng.standard_normal(x0.shape)
        tau = rng.uniform(size=n)
        return x_t, t, interp_velocity(v0, vel, tau), tau, vel - v0

    def _velocity_batch(self, rng):
        cfg = self.cfg
        n_anchor = cfg.grad_batch // cfg.velocity_batch
        if self.pool is not None:
            idx = rng.integers(0, self.pool.n_anchors, size=n_anchor)
            x_rep = np.repeat(self.pool.x_t[idx], cfg.velocity_batch, axis=0)
            t_rep = np.repeat(self.pool.t[idx], cfg.velocity_batch)
            v0 = self.pool.v0[idx].reshape(cfg.grad_batch, -1)
            v1 = self.pool.v1[idx].reshape(cfg.grad_batch, -1)
        else:
            x_t, t = _anchors(self.source, self.target, n_anchor, rng, cfg.data_ot_batch)
            x_rep, t_rep, v0, v1 = coupling.velocity_pairs(
                self.pretrained, x_t, t, cfg.velocity_batch, cfg.velocity_n_tau, rng)
        tau = rng.uniform(size=cfg.grad_batch)
        return x_rep, t_rep, interp_velocity(v0, v1, tau), tau, v1 - v0


def config_digest(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _write_log(path: Path, rows, cfg: TrainConfig):
    with path.open("w", newline="") as fh:
        fh.write(f"# config_sha256={config_digest(cfg.to_dict())}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loss", "validation_metric"])
        for it, loss, metric in rows:
            w.writerow([it, repr(loss), "" if metric is None else repr(metric)])


def _run(cfg: TrainConfig, model: AccelModel, batches: _BatchMaker, source, target) -> TrainResult:
    out = Path(cfg.out_dir) if cfg.out_dir else None
    opt = OptimizerState.for_model(model, learning_rate=cfg.learning_rate)
    ckpts = CheckpointSet(cfg.validation_budget)
    log_rows: list = []
    start = 1
    if cfg.resume_from:
        model, meta, opt_loaded = load_checkpoint(cfg.resume_from)
        if opt_loaded is None:
            raise ValueError("checkpoint has no optimizer state; cannot resume")
        opt = opt_loaded
        start = int(meta["iteration"]) + 1
        for it, path, metric in meta.get("history", []):
            ckpts.add(Checkpoint(it, path, metric))
        log_rows = [tuple(r) for r in meta.get("log", [])]
    losses = []
    window = []
    for k in range(start, cfg.iters + 1):
        loss, grad = loss_and_grad(model, *batches(k))
        opt.learning_rate = cfg.lr_at(k)
        optimizer_step(opt, model, grad)
        losses.append(loss)
        window.append(loss)
        at_ckpt = k % cfg.checkpoint_every == 0 or k == cfg.iters
        if k % cfg.log_every == 0 or at_ckpt:
            metric = None
            if at_ckpt:
                metric = validate(model, source, target, cfg.validation_budget,
                                  cfg.validation_size, cfg.seed)
            log_rows.append((k, float(np.mean(window)), metric))
            window = []
            if at_ckpt:
                path = None
                if out is not None:
                    path = str(out / f"ckpt_{k:06d}.npz")
                ckpts.add(Checkpoint(k, path, metric, None if out else model.params.copy()))
                if out is not None:
                    meta = {
                        "method": cfg.method,
                        "iteration": k,
                        "validation_metric": metric,
                        "train_config": cfg.to_dict(),
                        "history": [[c.iteration, c.path, c.validation_metric] for c in ckpts.entries],
                        "log": [list(r) for r in log_rows],
                    }
                    save_checkpoint(path, model, meta, opt)
                    _write_log(out / "log.csv", log_rows, cfg)
    best = ckpts.best()
    if best.params is not None:
        best_model = AccelModel(model.config, best.params.copy())
    elif best.path is not None:
        best_model = load_checkpoint(best.path)[0]
    else:
        best_model = model.copy()
    if out is not None:
        save_checkpoint(out / "best.npz", best_model,
                        {"method": cfg.method, "iteration": best.iteration,
                         "validation_metric": best.validation_metric,
                         "train_config": cfg.to_dict()})
    return TrainResult(best_model, model, ckpts, np.asarray(losses), cfg, best.iteration)


def _fresh_model(cfg: TrainConfig, source) -> AccelModel:
    dim = source.dim
    return AccelModel.init(NetConfig(data_dim=dim, variant=cfg.variant), seed=cfg.seed)


def train_rf(source, target, cfg: TrainConfig) -> TrainResult:
    """Rectified flow; ``otcfm`` is the same regression on mini-batch OT pairs."""
    if cfg.method not in ("rf", "otcfm"):
        raise ValueError("train_rf handles method rf or otcfm")
    return _run(cfg, _fresh_model(cfg, source), _BatchMaker(cfg, source, target), source, target)


def train_hrf2_d(source, target, cfg: TrainConfig) -> TrainResult:
    """HRF2 acceleration matching, with data coupling for ``hrf2-d``."""
    if cfg.method not in ("hrf2", "hrf2-d"):
        raise ValueError("train_hrf2_d handles method hrf2 or hrf2-d")
    return _run(cfg, _fresh_model(cfg, source), _BatchMaker(cfg, source, target), source, target)


def _pretrained(cfg: TrainConfig, pretrained):
    if pretrained is None:
        if not cfg.pretrained_path:
            raise ValueError(f"method {cfg.method} needs a pretrained model (pretrained_path)")
        pretrained = load_checkpoint(cfg.pretrained_path)[0]
    if pretrained.config.variant != "accel":
        raise ValueError("velocity coupling needs a pretrained accel model")
    return pretrained


def train_hrf2_v(source, target, cfg: TrainConfig, pretrained: AccelModel | None = None) -> TrainResult:
    """Velocity coupling around a frozen pretrained HRF2 model.

    ``hrf2-v`` anchors come from independent pairs, ``hrf2-dv`` anchors from
    data-coupled pairs.
    """
    if cfg.method not in ("hrf2-v", "hrf2-dv"):
        raise ValueError("train_hrf2_v handles method hrf2-v or hrf2-dv")
    teacher = _pretrained(cfg, pretrained).copy()
    if teacher.config.data_dim != source.dim:
        raise ValueError("pretrained model dimension does not match the data")
    pool = None
    if cfg.velocity_pool is not None:
        pool = build_pair_pool(teacher, source, target, cfg.velocity_pool, cfg.velocity_batch,
                               cfg.velocity_n_tau, cfg.data_ot_batch, cfg.seed)
    model = teacher.copy() if cfg.init_from_pretrained else _fresh_model(cfg, source)
    return _run(cfg, model, _BatchMaker(cfg, source, target, teacher, pool), source, target)


def train_hrf2_dv(source, target, cfg: TrainConfig, pretrained: AccelModel | None = None,
                  stage1: TrainConfig | None = None) -> TrainResult:
    """Two stages: HRF2-D, then velocity coupling on data-coupled anchors.

    Stage 1 runs only when neither ``pretrained`` nor ``cfg.pretrained_path``
    is given and ``stage1`` is; its best checkpoint becomes the teacher.
    """
    if cfg.method != "hrf2-dv":
        raise ValueError("train_hrf2_dv handles method hrf2-dv")
    if pretrained is None and not cfg.pretrained_path:
        if stage1 is None:
            raise ValueError("hrf2-dv needs a stage-1 HRF2-D model or a stage-1 config")
        pretrained = train_hrf2_d(source, target, stage1).model
    return train_hrf2_v(source, target, cfg, pretrained)


def train(source, target, cfg: TrainConfig, pretrained: AccelModel | None = None) -> TrainResult:
    if cfg.method in ("rf", "otcfm"):
        return train_rf(source, target, cfg)
    if cfg.method in ("hrf2", "hrf2-d"):
        return train_hrf2_d(source, target, cfg)
    return train_hrf2_v(source, target, cfg, pretrained)


def config_from_dict(doc: dict) -> TrainConfig:
    doc = dict(doc)
    if "validation_budget" in doc:
        doc["validation_budget"] = tuple(doc["validation_budget"])
    return TrainConfig(**doc)

