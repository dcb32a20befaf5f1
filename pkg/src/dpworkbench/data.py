"""Synthetic datasets for memorization sanity checks, plus Poisson batch sampling.

Every generator draws from a generator derived from ``(seed, stream tag)`` so
that training data, probes, batch sampling and mechanism noise never share a
random stream.

Binary dataset format (little endian)::

    offset  size  field
    0       4     magic b"DPWD"
    4       4     uint32 format version (1)
    8       4     uint32 n_records
    12      4     uint32 input dim
    16      4     uint32 n_classes
    20      4     uint32 users (0 if records are not grouped)
    24      4     uint32 records per user (0 if not grouped)
    28      8*n*d float64 inputs, row major
    ...     4*n   int32 labels

When grouped, records are stored user by user.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import numpy as np

STREAMS = {
    "train": 0,
    "probe": 1,
    "sampling": 2,
    "grad_noise": 3,
    "norm_noise": 4,
    "pattern": 5,
    "clip_init": 6,
    "test": 7,
    "server_noise": 8,
    "user_sampling": 9,
}

MODES = ("noise", "pattern-centralized", "pattern-distributed", "blobs")

MAGIC = b"DPWD"
VERSION = 1
_HEADER = struct.Struct("<4s6I")


def derive_rng(seed: int, stream: str) -> np.random.Generator:
    """Independent generator for a named stream of a root seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), STREAMS[stream]]))


@dataclass(frozen=True)
class DatasetSpec:
    mode: str = "pattern-centralized"
    n_examples: int = 1000
    users: int = 100
    records_per_user: int = 10
    input_shape: Tuple[int, int] = (16, 16)
    classes: int = 10
    n_patterns: Optional[int] = None
    pattern_patch: Tuple[int, int] = (8, 8)
    pattern_value: float = 1.0
    pattern_label: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown dataset mode {self.mode!r}")
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "pattern_patch", tuple(int(v) for v in self.pattern_patch))
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        rows, cols = self.input_shape
        pr, pc = self.pattern_patch
        if not (0 < pr <= rows and 0 < pc <= cols):
            raise ValueError(f"patch {self.pattern_patch} does not fit inputs {self.input_shape}")
        if not 0 <= self.pattern_label < self.classes:
            raise ValueError("pattern_label outside class range")
        if self.is_pattern and self.patterns_used > self.total_records:
            raise ValueError(
                f"n_patterns={self.patterns_used} exceeds {self.total_records} records"
            )

    @property
    def is_pattern(self) -> bool:
        return self.mode.startswith("pattern")

    @property
    def dim(self) -> int:
        return self.input_shape[0] * self.input_shape[1]

    @property
    def total_records(self) -> int:
        return self.users * self.records_per_user

    @property
    def patterns_used(self) -> int:
        if self.n_patterns is not None:
            return int(self.n_patterns)
        # centralized default: every record of one user
        return self.records_per_user if self.mode == "pattern-centralized" else self.total_records // 10

    def patch_mask(self) -> np.ndarray:
        mask = np.zeros(self.input_shape, dtype=bool)
        mask[: self.pattern_patch[0], : self.pattern_patch[1]] = True
        return mask.ravel()


@dataclass(frozen=True)
class UserDataset:
    """Records grouped by user: ``inputs`` is ``(U, R, d)``, ``labels`` is ``(U, R)``."""

    inputs: np.ndarray
    labels: np.ndarray
    patterned: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.inputs.ndim != 3 or self.labels.shape != self.inputs.shape[:2]:
            raise ValueError("inputs must be (users, records, dim) with matching labels")

    @property
    def n_users(self) -> int:
        return self.inputs.shape[0]

    @property
    def records_per_user(self) -> int:
        return self.inputs.shape[1]

    @property
    def dim(self) -> int:
        return self.inputs.shape[2]

    def user(self, u: int) -> Tuple[np.ndarray, np.ndarray]:
        return self.inputs[u], self.labels[u]

    def flat(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.inputs.reshape(-1, self.dim), self.labels.reshape(-1)

    def user_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_users), self.records_per_user)

    @classmethod
    def from_groups(cls, X, y, groups) -> "UserDataset":
        """Group flat records by user id; every user must own the same number of records."""
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        groups = np.asarray(groups)
        ids, counts = np.unique(groups, return_counts=True)
        if len(set(counts.tolist())) != 1:
            raise ValueError("all users must hold the same number of records")
        order = np.argsort(groups, kind="stable")
        r = int(counts[0])
        return cls(X[order].reshape(len(ids), r, -1), y[order].reshape(len(ids), r))


def gen_noise_dataset(n: int, dims, classes: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Uniform [0, 1) inputs with uniformly random labels."""
    if n < 1:
        raise ValueError("n must be positive")
    d = int(np.prod(dims))
    rng = derive_rng(seed, "train")
    X = rng.random((n, d))
    y = rng.integers(0, classes, size=n)
    return X, y


def gen_blob_dataset(n: int, dim: int, classes: int, seed: int,
                     separation: float = 1.0, stream: str = "train") -> Tuple[np.ndarray, np.ndarray]:
    """Unit-variance Gaussian class blobs with centres of norm about ``separation``.

    Class centres are drawn once from the root seed (independent of ``stream``)
    so train and test splits share them.
    """
    centres = np.random.default_rng(np.random.SeedSequence([int(seed), 1000])).standard_normal((classes, dim))
    centres *= separation / np.sqrt(dim)
    rng = derive_rng(seed, stream)
    y = rng.integers(0, classes, size=n)
    X = centres[y] + rng.standard_normal((n, dim))
    return X, y


def apply_pattern(inputs: np.ndarray, spec: DatasetSpec) -> np.ndarray:
    out = np.array(inputs, dtype=np.float64, copy=True)
    out[..., spec.patch_mask()] = spec.pattern_value
    return out


def gen_user_pattern_dataset(spec: DatasetSpec) -> UserDataset:
    """Users of random-noise records with one random label per user and an injected pattern.

    The noise inputs and user labels depend only on the seed, so the
    centralized and distributed variants differ only in where the pattern goes.
    """
    if not spec.is_pattern:
        raise ValueError(f"mode {spec.mode!r} is not a pattern mode")
    U, R = spec.users, spec.records_per_user
    rng = derive_rng(spec.seed, "train")
    inputs = rng.random((U, R, spec.dim))
    user_labels = rng.integers(0, spec.classes, size=U)
    labels = np.repeat(user_labels[:, None], R, axis=1)

    n_p = spec.patterns_used
    patterned = np.zeros((U, R), dtype=bool)
    if spec.mode == "pattern-centralized":
        if n_p > R:
            raise ValueError("centralized mode can pattern at most one user's records")
        patterned[0, :n_p] = True
    else:
        flat = derive_rng(spec.seed, "pattern").choice(U * R, size=n_p, replace=False)
        patterned.ravel()[flat] = True

    inputs[patterned] = apply_pattern(inputs[patterned], spec)
    labels[patterned] = spec.pattern_label
    return UserDataset(inputs, labels, patterned)


def pattern_probe_set(n: int, spec: DatasetSpec, seed: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Fresh noise inputs carrying the pattern, all labelled with the pattern label."""
    rng = derive_rng(spec.seed if seed is None else seed, "probe")
    X = apply_pattern(rng.random((n, spec.dim)), spec)
    return X, np.full(n, spec.pattern_label, dtype=np.int64)


def poisson_batches(n: int, q: float, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless stream of index sets, each index kept independently with probability ``q``."""
    if not 0.0 < q <= 1.0:
        raise ValueError(f"q must lie in (0, 1], got {q}")
    while True:
        if q == 1.0:
            yield np.arange(n)
        else:
            yield np.flatnonzero(rng.random(n) < q)


def save_dataset(path, X, y, classes: int, users: int = 0, records_per_user: int = 0) -> None:
    X = np.ascontiguousarray(X, dtype="<f8")
    y = np.ascontiguousarray(y, dtype="<i4")
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError("expected X of shape (n, d) and y of shape (n,)")
    if users and users * records_per_user != X.shape[0]:
        raise ValueError("users * records_per_user must equal n_records")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, X.shape[0], X.shape[1], classes, users, records_per_user))
        fh.write(X.tobytes())
        fh.write(y.tobytes())


def load_dataset(path):
    """Returns ``(X, y, meta)``; ``meta`` holds classes, users and records_per_user."""
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, n, d, classes, users, rpu = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    off = _HEADER.size
    expected = off + 8 * n * d + 4 * n
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    X = np.frombuffer(raw, dtype="<f8", count=n * d, offset=off).reshape(n, d).astype(np.float64)
    y = np.frombuffer(raw, dtype="<i4", count=n, offset=off + 8 * n * d).astype(np.int64)
    return X, y, {"classes": classes, "users": users, "records_per_user": rpu}
