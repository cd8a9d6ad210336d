"""Prediction and tracking error metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .dataset import Dataset, Normalizer, Segment
from .errors import EmptyDataset, ShapeMismatch
from .koopman import KoopmanModel, batch_predict
from .plants import (JOINT_POSITION, JOINT_VELOCITY, ROOT_ANGULAR_VELOCITY, ROOT_HEIGHT,
                     ROOT_LINEAR_VELOCITY, ROOT_ORIENTATION, PlantSpec, Trajectory)

METRIC_NAMES = ("E_JrPE", "E_JrVE", "E_JrAE", "E_RPE", "E_ROE", "E_RLVE", "E_RAVE")

# metric name -> (state role, differentiate once over dt)
_METRIC_ROLES = {
    "E_JrPE": (JOINT_POSITION, False),
    "E_JrVE": (JOINT_VELOCITY, False),
    "E_JrAE": (JOINT_VELOCITY, True),
    "E_RPE": (ROOT_HEIGHT, False),
    "E_ROE": (ROOT_ORIENTATION, False),
    "E_RLVE": (ROOT_LINEAR_VELOCITY, False),
    "E_RAVE": (ROOT_ANGULAR_VELOCITY, False),
}


@dataclass
class TrackingMetrics:
    """Plant-unit mean L1 errors; ``None`` marks a slice the plant lacks."""

    E_JrPE: float | None
    E_JrVE: float | None
    E_JrAE: float | None
    E_RPE: float | None
    E_ROE: float | None
    E_RLVE: float | None
    E_RAVE: float | None
    T_sur: int
    T_eval: int

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class PredictionCurve:
    ks: list
    errors: np.ndarray


def _frame(normalizer: Normalizer | None, X):
    return X if normalizer is None else normalizer.apply(X)


def k_step_prediction_error(model: KoopmanModel, segment: Segment, k: int,
                            normalizer: Normalizer | None = None) -> float:
    """Mean L1 error of a ``k``-step open-loop prediction with the true controls.

    Errors are measured in plant units, or in the frame of ``normalizer``
    when one is given (useful to compare models with different normalizers
    on a common scale).
    """
    return float(_kstep_errors(model, [segment], [k], normalizer)[0])


def _kstep_errors(model, segments, ks, normalizer):
    if not segments:
        raise EmptyDataset("no segments to evaluate")
    S = np.stack([s.states for s in segments])
    U = np.stack([s.controls for s in segments])
    l = U.shape[1]
    if S.shape[2] != model.state_dim or U.shape[2] != model.control_dim:
        raise ShapeMismatch("segment dimensions do not match the model")
    for k in ks:
        if not 1 <= k <= l:
            raise ShapeMismatch(f"k={k} outside [1, {l}]")
    kmax = max(ks)
    Xn = model.normalizer.apply(S[:, 0])
    pred = model.normalizer.invert(batch_predict(model, Xn, U[:, :kmax]))
    err = np.abs(_frame(normalizer, pred[:, 1:]) - _frame(normalizer, S[:, 1:kmax + 1]))
    # per-segment mean over dims, then cumulative over steps
    per_step = err.mean(axis=2)
    cum = np.cumsum(per_step, axis=1)
    return np.array([np.mean(cum[:, k - 1] / k) for k in ks])


def prediction_curve(model: KoopmanModel, dataset: Dataset, ks=(1, 3, 6, 9, 12, 15),
                     normalizer: Normalizer | None = None) -> PredictionCurve:
    ks = [int(k) for k in ks]
    if any(b <= a for a, b in zip(ks, ks[1:])):
        raise ShapeMismatch("ks must be strictly increasing")
    if len(dataset) == 0:
        raise EmptyDataset("prediction curve of an empty dataset")
    return PredictionCurve(ks, _kstep_errors(model, dataset.segments, ks, normalizer))


def survival_steps(spec: PlantSpec, executed: Trajectory, reference, eps_fail: float,
                   cap: int) -> int:
    """First step whose mean joint-position error exceeds ``eps_fail``, else the cap."""
    sl = spec.slice_of(JOINT_POSITION)
    ref = _aligned_reference(reference, executed.states.shape[0])
    last = min(cap, executed.n_steps)
    err = np.mean(np.abs(executed.states[1:last + 1, sl] - ref[1:last + 1, sl]), axis=1)
    bad = np.flatnonzero(err > eps_fail)
    if bad.size:
        return int(bad[0]) + 1
    if executed.failure_flag and executed.n_steps < cap:
        return executed.n_steps + 1
    return min(cap, executed.n_steps)


def _aligned_reference(reference, length):
    reference = np.asarray(reference, dtype=float)
    idx = np.minimum(np.arange(length), reference.shape[0] - 1)
    return reference[idx]


def tracking_metrics(executed: Trajectory, reference, spec: PlantSpec, eps_fail: float,
                     cap: int = 200) -> TrackingMetrics:
    """Errors averaged over the surviving steps ``1..T_sur``.

    The reference is extended by repeating its last row when it is shorter
    than the executed trajectory.
    """
    reference = np.asarray(reference, dtype=float)
    if reference.ndim != 2 or reference.shape[1] != spec.state_dim \
            or executed.states.shape[1] != spec.state_dim:
        raise ShapeMismatch("executed trajectory and reference must match the plant state")
    T_sur = survival_steps(spec, executed, reference, eps_fail, cap)
    last = min(T_sur, executed.n_steps)
    ref = _aligned_reference(reference, executed.states.shape[0])
    out = {}
    for name, (role, diff) in _METRIC_ROLES.items():
        sl = spec.slice_of(role)
        if sl is None or last < 1:
            out[name] = None
            continue
        xe, xr = executed.states[:last + 1, sl], ref[:last + 1, sl]
        if diff:
            xe = np.diff(xe, axis=0) / executed.dt
            xr = np.diff(xr, axis=0) / executed.dt
            e = np.abs(xe - xr)
        else:
            e = np.abs(xe[1:] - xr[1:])
        out[name] = float(e.mean())
    return TrackingMetrics(**out, T_sur=T_sur, T_eval=cap)


def summarize(metrics: list) -> dict:
    """Mean of every metric across episodes (``None`` stays ``None``)."""
    summary = {}
    for name in METRIC_NAMES + ("T_sur",):
        vals = [getattr(m, name) for m in metrics]
        summary[name] = None if any(v is None for v in vals) or not vals else float(np.mean(vals))
    return summary
