"""Trajectory datasets, normalisation, reference repositories and IKDS files."""

from __future__ import annotations

import enum
import struct
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadDims, FormatError, ShapeMismatch
from .plants import PlantSpec, Trajectory, expert_rollout

STD_FLOOR = 1e-8

IKDS_MAGIC = b"IKDS"
IKDS_VERSION = 1


@dataclass(frozen=True, eq=False)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        std = np.asarray(self.std, dtype=float).reshape(-1)
        if mean.shape != std.shape:
            raise ShapeMismatch("normalizer mean/std shapes differ")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", np.maximum(std, STD_FLOOR))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def apply(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def invert(self, xn):
        return np.asarray(xn, dtype=float) * self.std + self.mean

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim))

    def __eq__(self, other):
        return (isinstance(other, Normalizer)
                and np.array_equal(self.mean, other.mean)
                and np.array_equal(self.std, other.std))


def fit_normalizer(states) -> Normalizer:
    """Per-dimension mean and population std, std floored at ``STD_FLOOR``.

    Emits a ``DegenerateData`` warning (not an exception) when a column is
    constant, since the floor still yields a usable normalizer.
    """
    states = np.asarray(states, dtype=float)
    if states.ndim != 2 or states.shape[0] < 2:
        raise BadDims("fit_normalizer needs a matrix with at least 2 rows")
    mean = states.mean(axis=0)
    std = states.std(axis=0)
    if np.any(std < STD_FLOOR):
        cols = np.flatnonzero(std < STD_FLOOR).tolist()
        warnings.warn(f"constant columns {cols}; std floored at {STD_FLOOR}",
                      DegenerateDataWarning, stacklevel=2)
    return Normalizer(mean, std)


class DegenerateDataWarning(UserWarning):
    pass


class Provenance(enum.IntEnum):
    INITIAL = 0
    INCREMENTAL = 1


@dataclass(frozen=True, eq=False)
class Segment:
    states: np.ndarray
    controls: np.ndarray
    tag: Provenance = Provenance.INITIAL
    iteration: int = 0

    def __post_init__(self):
        s = np.asarray(self.states, dtype=float)
        c = np.asarray(self.controls, dtype=float)
        if s.ndim != 2 or c.ndim != 2 or s.shape[0] != c.shape[0] + 1:
            raise ShapeMismatch("segment needs (l+1, n') states and (l, m') controls")
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "controls", c)
        object.__setattr__(self, "tag", Provenance(self.tag))

    @property
    def length(self) -> int:
        return self.controls.shape[0]


@dataclass(eq=False)
class Dataset:
    segments: list
    normalizer: Normalizer
    state_dim: int
    control_dim: int
    length: int

    def __post_init__(self):
        self.segments = list(self.segments)
        for seg in self.segments:
            if seg.states.shape != (self.length + 1, self.state_dim) or \
                    seg.controls.shape != (self.length, self.control_dim):
                raise ShapeMismatch(
                    f"segment shapes {seg.states.shape}/{seg.controls.shape} do not match "
                    f"(l={self.length}, n'={self.state_dim}, m'={self.control_dim})")
        if self.normalizer.dim != self.state_dim:
            raise ShapeMismatch("normalizer dimension does not match state_dim")

    def __len__(self):
        return len(self.segments)

    def stacked(self):
        """States ``(N, l+1, n')`` and controls ``(N, l, m')`` as arrays."""
        if not self.segments:
            return (np.zeros((0, self.length + 1, self.state_dim)),
                    np.zeros((0, self.length, self.control_dim)))
        return (np.stack([s.states for s in self.segments]),
                np.stack([s.controls for s in self.segments]))

    def all_states(self) -> np.ndarray:
        return self.stacked()[0].reshape(-1, self.state_dim)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        if (self.state_dim, self.control_dim, self.length, len(self)) != \
                (other.state_dim, other.control_dim, other.length, len(other)):
            return False
        if self.normalizer != other.normalizer:
            return False
        return all(
            a.tag == b.tag and a.iteration == b.iteration
            and np.array_equal(a.states, b.states) and np.array_equal(a.controls, b.controls)
            for a, b in zip(self.segments, other.segments))


def dataset_from_segments(segments, state_dim, control_dim, length, normalizer=None) -> Dataset:
    segments = list(segments)
    if normalizer is None:
        if segments:
            normalizer = fit_normalizer(np.concatenate([s.states for s in segments]))
        else:
            normalizer = Normalizer.identity(state_dim)
    return Dataset(segments, normalizer, state_dim, control_dim, length)


def random_segment(traj: Trajectory, l_seg: int, rng: np.random.Generator,
                   tag=Provenance.INITIAL, iteration=0) -> Segment:
    start = int(rng.integers(0, traj.n_steps - l_seg + 1))
    return Segment(traj.states[start:start + l_seg + 1].copy(),
                   traj.controls[start:start + l_seg].copy(), tag, iteration)


def collect_initial_dataset(spec: PlantSpec, expert, n_traj: int, l_init: int, l_seg: int,
                            seed: int) -> Dataset:
    """Expert rollouts of length ``l_init``, one random window of ``l_seg`` each.

    Trajectory ``i`` uses its own generator seeded with ``(seed, i)`` so the
    result does not depend on collection order. ``expert`` is a rollout
    function ``(spec, rng, length) -> Trajectory``; ``None`` selects
    :func:`inckoop.plants.expert_rollout`.
    """
    expert = expert_rollout if expert is None else expert
    if not l_init > l_seg >= 1:
        raise BadDims("need l_init > l_seg >= 1")
    if n_traj < 1:
        raise BadDims("need n_traj >= 1")
    segments = []
    for i in range(n_traj):
        rng = np.random.default_rng([seed, i])
        traj = expert(spec, rng, l_init)
        segments.append(random_segment(traj, l_seg, rng))
    return dataset_from_segments(segments, spec.state_dim, spec.control_dim, l_seg)


def merge_datasets(a: Dataset, b: Dataset) -> Dataset:
    """Union of two datasets with the normalizer refitted on the result."""
    if (a.state_dim, a.control_dim, a.length) != (b.state_dim, b.control_dim, b.length):
        raise ShapeMismatch(
            f"cannot merge (n'={a.state_dim}, m'={a.control_dim}, l={a.length}) with "
            f"(n'={b.state_dim}, m'={b.control_dim}, l={b.length})")
    segments = a.segments + b.segments
    if not segments:
        return dataset_from_segments([], a.state_dim, a.control_dim, a.length, a.normalizer)
    return dataset_from_segments(segments, a.state_dim, a.control_dim, a.length)


# ---------------------------------------------------------------------------
# reference repository


@dataclass(eq=False)
class ReferenceRepository:
    """Noisy reference trajectories.

    ``references`` live in the normalized frame of ``normalizer`` (fitted on
    the clean rollouts); ``plant_units`` maps them back.
    """

    references: np.ndarray
    normalizer: Normalizer
    seed: int
    noise_halfwidth: float
    clean: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return self.references.shape[0]

    def plant_units(self, i=None) -> np.ndarray:
        refs = self.references if i is None else self.references[i]
        return self.normalizer.invert(refs)

    def __eq__(self, other):
        return (isinstance(other, ReferenceRepository)
                and self.seed == other.seed
                and self.noise_halfwidth == other.noise_halfwidth
                and self.normalizer == other.normalizer
                and np.array_equal(self.references, other.references))


def make_reference_repo(spec: PlantSpec, count: int, length: int, noise_halfwidth: float,
                        seed: int, expert=None) -> ReferenceRepository:
    if count < 1 or length < 2 or noise_halfwidth < 0:
        raise BadDims("need count >= 1, length >= 2, noise_halfwidth >= 0")
    expert = expert_rollout if expert is None else expert
    clean = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        clean.append(expert(spec, rng, length - 1).states)
    clean = np.stack(clean)
    norm = fit_normalizer(clean.reshape(-1, spec.state_dim))
    noise_rng = np.random.default_rng([seed, count, 0x5EED])
    noisy = norm.apply(clean) + noise_rng.uniform(-noise_halfwidth, noise_halfwidth,
                                                 size=clean.shape)
    return ReferenceRepository(noisy, norm, seed, float(noise_halfwidth), clean=clean)


# ---------------------------------------------------------------------------
# IKDS persistence

_HEADER = struct.Struct("<4sIIIIQ")
_SEG_HEAD = struct.Struct("<BI")


def dataset_to_bytes(d: Dataset) -> bytes:
    parts = [_HEADER.pack(IKDS_MAGIC, IKDS_VERSION, d.state_dim, d.control_dim, d.length,
                          len(d.segments)),
             np.ascontiguousarray(d.normalizer.mean, dtype="<f8").tobytes(),
             np.ascontiguousarray(d.normalizer.std, dtype="<f8").tobytes()]
    for seg in d.segments:
        parts.append(_SEG_HEAD.pack(int(seg.tag), int(seg.iteration)))
        parts.append(np.ascontiguousarray(seg.states, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(seg.controls, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def dataset_from_bytes(buf: bytes) -> Dataset:
    if len(buf) < 4 or buf[:4] != IKDS_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {IKDS_MAGIC.decode()!r}")
    if len(buf) < _HEADER.size + 4:
        raise FormatError("truncated IKDS file (header)")
    body, trailer = buf[:-4], buf[-4:]
    _, version, n, m, l, count = _HEADER.unpack_from(body, 0)
    if version != IKDS_VERSION:
        raise FormatError(f"unsupported IKDS version {version}")
    seg_bytes = _SEG_HEAD.size + 8 * ((l + 1) * n + l * m)
    expected = _HEADER.size + 16 * n + count * seg_bytes
    if len(body) != expected:
        raise FormatError(f"truncated or oversized IKDS payload: {len(body)} != {expected} bytes")
    if struct.unpack("<I", trailer)[0] != zlib.crc32(body):
        raise FormatError("IKDS checksum mismatch")
    off = _HEADER.size
    mean = np.frombuffer(body, "<f8", n, off).astype(float)
    std = np.frombuffer(body, "<f8", n, off + 8 * n).astype(float)
    off += 16 * n
    segments = []
    for _ in range(count):
        tag, it = _SEG_HEAD.unpack_from(body, off)
        off += _SEG_HEAD.size
        states = np.frombuffer(body, "<f8", (l + 1) * n, off).reshape(l + 1, n).astype(float)
        off += 8 * (l + 1) * n
        controls = np.frombuffer(body, "<f8", l * m, off).reshape(l, m).astype(float)
        off += 8 * l * m
        try:
            segments.append(Segment(states, controls, Provenance(tag), it))
        except ValueError as exc:
            raise FormatError(f"bad provenance tag {tag}") from exc
    return Dataset(segments, Normalizer(mean, std), n, m, l)


def save_dataset(d: Dataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(d))


def load_dataset(path, expected_length: int | None = None) -> Dataset:
    d = dataset_from_bytes(Path(path).read_bytes())
    if expected_length is not None and d.length != expected_length:
        raise ShapeMismatch(f"dataset segment length {d.length} != configured horizon "
                            f"{expected_length}")
    return d


_REPO_MAGIC = b"IKRR"
_REPO_VERSION = 1
_REPO_HEAD = struct.Struct("<4sIIIIqd")


def repo_to_bytes(repo: ReferenceRepository) -> bytes:
    count, length, n = repo.references.shape
    body = b"".join([
        _REPO_HEAD.pack(_REPO_MAGIC, _REPO_VERSION, count, length, n, repo.seed,
                        repo.noise_halfwidth),
        np.ascontiguousarray(repo.normalizer.mean, "<f8").tobytes(),
        np.ascontiguousarray(repo.normalizer.std, "<f8").tobytes(),
        np.ascontiguousarray(repo.references, "<f8").tobytes()])
    return body + struct.pack("<I", zlib.crc32(body))


def repo_from_bytes(buf: bytes) -> ReferenceRepository:
    if len(buf) < 4 or buf[:4] != _REPO_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {_REPO_MAGIC.decode()!r}")
    if len(buf) < _REPO_HEAD.size + 4:
        raise FormatError("truncated reference repository file")
    body, trailer = buf[:-4], buf[-4:]
    _, version, count, length, n, seed, noise = _REPO_HEAD.unpack_from(body, 0)
    if version != _REPO_VERSION:
        raise FormatError(f"unsupported repository version {version}")
    if len(body) != _REPO_HEAD.size + 8 * (2 * n + count * length * n):
        raise FormatError("truncated or oversized reference repository payload")
    if struct.unpack("<I", trailer)[0] != zlib.crc32(body):
        raise FormatError("reference repository checksum mismatch")
    off = _REPO_HEAD.size
    mean = np.frombuffer(body, "<f8", n, off).astype(float)
    std = np.frombuffer(body, "<f8", n, off + 8 * n).astype(float)
    refs = np.frombuffer(body, "<f8", count * length * n, off + 16 * n)
    return ReferenceRepository(refs.reshape(count, length, n).astype(float),
                               Normalizer(mean, std), int(seed), float(noise))


def save_repo(repo: ReferenceRepository, path) -> None:
    Path(path).write_bytes(repo_to_bytes(repo))


def load_repo(path) -> ReferenceRepository:
    return repo_from_bytes(Path(path).read_bytes())
