"""Incremental lifting: grow the latent dimension and the dataset until tracking stops improving."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .dataset import (Dataset, Provenance, ReferenceRepository, Segment, collect_initial_dataset,
                      dataset_from_segments, make_reference_repo, merge_datasets)
from .errors import BadDims, TrainFailed, TrainingCollapsed
from .koopman import KoopmanModel, TrainConfig, train_koopman
from .metrics import summarize, tracking_metrics
from .mpc import MpcConfig, track_many
from .plants import PlantSpec


@dataclass(frozen=True)
class DataConfig:
    n_traj: int = 200
    l_init: int = 100
    repo_size: int = 100
    repo_length: int = 201
    noise_halfwidth: float = 0.05
    data_seed: int = 0
    repo_seed: int = 1
    eval_seed: int = 2

    def validate(self):
        if self.n_traj < 1 or self.repo_size < 1 or self.repo_length < 2 or self.l_init < 2:
            raise BadDims("invalid data sizes")
        if self.noise_halfwidth < 0:
            raise BadDims("noise_halfwidth must be >= 0")
        return self


@dataclass(frozen=True)
class IncrementalConfig:
    n0: int = 10
    delta_n: int = 8
    J0: int = 100
    max_outer_iters: int = 3
    min_outer_iters: int = 0
    eps_fail: float = 0.15
    eps_conv: float = 0.02
    T_max: int = 200
    eval_repo_size: int = 100
    min_epochs: int = 2
    seed: int = 0
    grow_data: bool = True
    grow_dim: bool = True

    def validate(self, state_dim: int | None = None):
        if self.delta_n < 1 or self.eps_conv < 0 or self.J0 < 1 or self.min_epochs < 1:
            raise BadDims("need delta_n >= 1, eps_conv >= 0, J0 >= 1, min_epochs >= 1")
        if self.max_outer_iters < 0 or self.min_outer_iters < 0 or self.T_max < 1:
            raise BadDims("iteration counts must be non-negative and T_max >= 1")
        if self.eval_repo_size < 1 or self.eps_fail < 0:
            raise BadDims("eval_repo_size must be >= 1 and eps_fail >= 0")
        if state_dim is not None and self.n0 < state_dim:
            raise BadDims(f"n0={self.n0} is smaller than the state dimension {state_dim}")
        return self


@dataclass
class IterationRecord:
    j: int
    n: int
    dataset_size: int
    epochs: int
    final_loss: float
    T_sur: float
    T_sur_train_repo: float | None
    n_failures: int
    metrics: dict
    wall_time: float = field(default=0.0, compare=False)

    def as_dict(self, with_time: bool = True) -> dict:
        d = asdict(self)
        if not with_time:
            d.pop("wall_time")
        return d


def track_converge_check(history, eps_conv: float = 0.02) -> bool:
    """True once the latest survival count fails to beat the previous by ``eps_conv``."""
    if len(history) < 2:
        raise BadDims("convergence check needs at least two entries")
    return bool(history[-1] < history[-2] * (1.0 + eps_conv))


def failure_segments(results, l: int, iteration: int) -> list:
    """Executed windows of length ``l`` ending at each failure step."""
    segs = []
    for r in results:
        if r.failure_step is None:
            continue
        end = min(r.failure_step, r.trajectory.n_steps)
        if end < l:
            continue
        segs.append(Segment(r.trajectory.states[end - l:end + 1],
                            r.trajectory.controls[end - l:end],
                            Provenance.INCREMENTAL, iteration))
    return segs


def collect_failures(spec: PlantSpec, model: KoopmanModel, repo: ReferenceRepository,
                     mpc_cfg: MpcConfig, eps_fail: float, T_max: int = 200,
                     iteration: int = 1):
    """Track every reference and harvest a segment before each failure.

    Returns ``(dataset, results)``; the dataset uses the horizon as segment
    length and may be empty.
    """
    results = track_many(spec, model, repo.plant_units(), mpc_cfg, eps_fail, T_max)
    segs = failure_segments(results, mpc_cfg.H, iteration)
    d = dataset_from_segments(segs, spec.state_dim, spec.control_dim, mpc_cfg.H,
                              None if segs else model.normalizer)
    return d, results


def closed_loop_segments(results, l: int, stride: int | None = None) -> list:
    """Consecutive executed windows of length ``l`` from tracking episodes."""
    stride = l if stride is None else stride
    segs = []
    for r in results:
        tr = r.trajectory
        for s in range(0, tr.n_steps - l + 1, stride):
            segs.append(Segment(tr.states[s:s + l + 1], tr.controls[s:s + l]))
    return segs


def evaluate(spec, model, repo, mpc_cfg, eps_fail, T_max):
    results = track_many(spec, model, repo.plant_units(), mpc_cfg, eps_fail, T_max)
    mets = [tracking_metrics(r.trajectory, r.reference, spec, eps_fail, T_max) for r in results]
    return float(np.mean([r.survival for r in results])), summarize(mets), results


def train_with_halving(n, dataset, train_cfg: TrainConfig, epochs: int, min_epochs: int,
                       train_fn=train_koopman):
    """Train, halving the epoch budget after each failure down to ``min_epochs``."""
    J = epochs
    while True:
        try:
            return train_fn(n, dataset, replace(train_cfg, epochs=J)), J
        except TrainFailed as exc:
            if J <= min_epochs:
                raise TrainingCollapsed(f"training failed at the epoch floor {J}: {exc}") from exc
            J = max(J // 2, min_epochs)


@dataclass
class IncrementalResult:
    model: KoopmanModel
    records: list
    best_index: int
    models: list = field(repr=False, default_factory=list)

    def __iter__(self):
        return iter((self.model, self.records))


def incremental_run(spec: PlantSpec, cfg: IncrementalConfig, train_cfg: TrainConfig,
                    mpc_cfg: MpcConfig, data_cfg: DataConfig | None = None,
                    train_fn=train_koopman, on_iteration=None, keep_models: bool = False,
                    initial_dataset: Dataset | None = None) -> IncrementalResult:
    """Outer loop: train, evaluate, harvest failures, grow ``n`` and the data.

    ``on_iteration(j, model, record)`` is called after each evaluation.
    The returned model has the best held-out survival (ties go to the later
    iteration).
    """
    data_cfg = (data_cfg or DataConfig()).validate()
    cfg.validate(spec.state_dim)
    mpc_cfg.validate(spec.state_dim, spec.control_dim)
    H = mpc_cfg.H
    if initial_dataset is None:
        data = collect_initial_dataset(spec, None, data_cfg.n_traj, data_cfg.l_init, H,
                                       data_cfg.data_seed)
    else:
        data = initial_dataset
    repo = make_reference_repo(spec, data_cfg.repo_size, data_cfg.repo_length,
                               data_cfg.noise_halfwidth, data_cfg.repo_seed)
    eval_repo = make_reference_repo(spec, cfg.eval_repo_size, data_cfg.repo_length,
                                    data_cfg.noise_halfwidth, data_cfg.eval_seed)

    train_cfg = replace(train_cfg, seed=cfg.seed)
    records, models, history = [], [], []
    n, J = cfg.n0, cfg.J0
    best_i, best_T, best_model = 0, -np.inf, None
    j = 0
    n_fail = 0
    while True:
        t0 = time.perf_counter()
        model, J = train_with_halving(n, data, train_cfg, J, cfg.min_epochs, train_fn)
        T_eval, summary, _ = evaluate(spec, model, eval_repo, mpc_cfg, cfg.eps_fail, cfg.T_max)
        rec = IterationRecord(j, n, len(data), J, float(model.history[-1]) if model.history
                              else float("nan"), T_eval, None, n_fail, summary)
        history.append(T_eval)
        if T_eval >= best_T:
            best_i, best_T, best_model = j, T_eval, model
        if keep_models:
            models.append(model)
        stop = j >= cfg.max_outer_iters or (
            j >= max(1, cfg.min_outer_iters) and track_converge_check(history, cfg.eps_conv))
        if not stop:
            incre, results = collect_failures(spec, model, repo, mpc_cfg, cfg.eps_fail,
                                              cfg.T_max, iteration=j + 1)
            rec.T_sur_train_repo = float(np.mean([r.survival for r in results]))
            n_fail = len(incre)
        rec.wall_time = time.perf_counter() - t0
        records.append(rec)
        if on_iteration is not None:
            on_iteration(j, model, rec)
        if stop:
            break
        if cfg.grow_data and len(incre):
            data = merge_datasets(data, incre)
        if cfg.grow_dim:
            n += cfg.delta_n
        j += 1
    return IncrementalResult(best_model, records, best_i, models)
