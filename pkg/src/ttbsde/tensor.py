"""Dense contraction and the tensor-train format.

Components are stored as order-3 arrays of shape ``(r_{i-1}, m_i, r_i)`` with
boundary ranks ``r_0 = r_d = 1``.  Dense tensors are plain row-major numpy
arrays.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

ORTHO_TOL = 1e-10
TRUNC_TOL = 1e-13
DENSE_CAP = 10**7
MAGIC = b"TTV1"


class ShapeMismatchError(ValueError):
    pass


class SizeCapError(ValueError):
    pass


def contract(w1, w2) -> np.ndarray:
    """Contract the last index of ``w1`` with the first index of ``w2``."""
    w1 = np.asarray(w1, dtype=float)
    w2 = np.asarray(w2, dtype=float)
    if w1.ndim < 1 or w2.ndim < 1:
        raise ShapeMismatchError("contraction needs tensors of order >= 1")
    n = w1.shape[-1]
    if w2.shape[0] != n:
        raise ShapeMismatchError(
            f"cannot contract extent {n} with extent {w2.shape[0]}"
        )
    out_shape = w1.shape[:-1] + w2.shape[1:]
    prod = w1.reshape(-1, n) @ w2.reshape(n, -1)
    return prod.reshape(out_shape)


@dataclass(frozen=True)
class TensorTrain:
    """Tensor-train representation ``c = u_1 o u_2 o ... o u_d``.

    ``core_position`` is a 0-based index, or ``None`` when the representation
    is not known to be orthogonalized.
    """

    components: tuple
    core_position: int | None = None

    def __post_init__(self):
        comps = tuple(np.asarray(u, dtype=float) for u in self.components)
        if not comps:
            raise ValueError("a tensor train needs at least one component")
        for i, u in enumerate(comps):
            if u.ndim != 3:
                raise ValueError(f"component {i} has order {u.ndim}, expected 3")
        if comps[0].shape[0] != 1 or comps[-1].shape[2] != 1:
            raise ValueError("boundary ranks must be 1")
        for i in range(len(comps) - 1):
            if comps[i].shape[2] != comps[i + 1].shape[0]:
                raise ShapeMismatchError(
                    f"rank mismatch between components {i} and {i + 1}: "
                    f"{comps[i].shape[2]} != {comps[i + 1].shape[0]}"
                )
        if self.core_position is not None and not 0 <= self.core_position < len(comps):
            raise IndexError(f"core position {self.core_position} out of range")
        object.__setattr__(self, "components", comps)

    @property
    def order(self) -> int:
        return len(self.components)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(u.shape[1] for u in self.components)

    @property
    def ranks(self) -> tuple[int, ...]:
        """Representation rank ``(r_1, ..., r_{d-1})``."""
        return tuple(u.shape[2] for u in self.components[:-1])

    @property
    def storage(self) -> int:
        return sum(u.size for u in self.components)

    def norm(self) -> float:
        if self.core_position is not None:
            return float(np.linalg.norm(self.components[self.core_position]))
        return float(np.linalg.norm(move_core(self, 0).components[0]))

    def with_component(self, i: int, u, core_position: int | None = None) -> "TensorTrain":
        comps = list(self.components)
        comps[i] = u
        return TensorTrain(tuple(comps), core_position)

    @classmethod
    def random(cls, dims: Sequence[int], ranks: Sequence[int], rng=None) -> "TensorTrain":
        """Gaussian components scaled by ``1/sqrt(r m)``, core at position 0."""
        rng = np.random.default_rng(rng)
        d = len(dims)
        full = [1, *feasible_ranks(dims, ranks), 1]
        comps = []
        for i in range(d):
            shape = (full[i], dims[i], full[i + 1])
            scale = 1.0 / np.sqrt(max(full[i], full[i + 1]) * dims[i])
            comps.append(rng.standard_normal(shape) * scale)
        return move_core(cls(tuple(comps)), 0)

    @classmethod
    def rank_one(cls, vectors: Sequence) -> "TensorTrain":
        comps = tuple(np.asarray(v, dtype=float).reshape(1, -1, 1) for v in vectors)
        return cls(comps)


def feasible_ranks(dims: Sequence[int], ranks: Sequence[int] | int) -> list[int]:
    """Clip ranks to the largest values admitted by the unfolding sizes."""
    d = len(dims)
    if np.isscalar(ranks):
        ranks = [int(ranks)] * (d - 1)
    if len(ranks) != d - 1:
        raise ValueError(f"expected {d - 1} ranks, got {len(ranks)}")
    out = []
    for i, r in enumerate(ranks):
        left = int(np.prod(dims[: i + 1], dtype=float).clip(max=1e12))
        right = int(np.prod(dims[i + 1:], dtype=float).clip(max=1e12))
        out.append(max(1, min(int(r), left, right)))
    return out


def _left_qr(u):
    r0, m, r1 = u.shape
    q, r = np.linalg.qr(u.reshape(r0 * m, r1))
    return q.reshape(r0, m, q.shape[1]), r


def _right_qr(u):
    r0, m, r1 = u.shape
    q, r = np.linalg.qr(u.reshape(r0, m * r1).T)
    return q.T.reshape(q.shape[1], m, r1), r.T


def move_core(tt: TensorTrain, target: int) -> TensorTrain:
    """Move (or establish) the core position by QR sweeps."""
    d = tt.order
    if not 0 <= target < d:
        raise IndexError(f"core target {target} out of range for order {d}")
    comps = list(tt.components)
    if tt.core_position is None:
        for i in range(target):
            comps[i], r = _left_qr(comps[i])
            comps[i + 1] = np.einsum("ab,bmc->amc", r, comps[i + 1])
        for i in range(d - 1, target, -1):
            comps[i], l = _right_qr(comps[i])
            comps[i - 1] = np.einsum("amb,bc->amc", comps[i - 1], l)
        return TensorTrain(tuple(comps), target)
    mu = tt.core_position
    while mu < target:
        comps[mu], r = _left_qr(comps[mu])
        comps[mu + 1] = np.einsum("ab,bmc->amc", r, comps[mu + 1])
        mu += 1
    while mu > target:
        comps[mu], l = _right_qr(comps[mu])
        comps[mu - 1] = np.einsum("amb,bc->amc", comps[mu - 1], l)
        mu -= 1
    return TensorTrain(tuple(comps), target)


def is_left_orthogonal(u, tol: float = ORTHO_TOL) -> bool:
    mat = u.reshape(-1, u.shape[2])
    return np.allclose(mat.T @ mat, np.eye(u.shape[2]), atol=tol, rtol=0)


def is_right_orthogonal(u, tol: float = ORTHO_TOL) -> bool:
    mat = u.reshape(u.shape[0], -1)
    return np.allclose(mat @ mat.T, np.eye(u.shape[0]), atol=tol, rtol=0)


def check_orthogonality(tt: TensorTrain, tol: float = ORTHO_TOL) -> bool:
    mu = tt.core_position
    if mu is None:
        return False
    left = all(is_left_orthogonal(u, tol) for u in tt.components[:mu])
    right = all(is_right_orthogonal(u, tol) for u in tt.components[mu + 1:])
    return left and right


def tt_decompose(c, tolerance: float = 0.0, max_rank: Sequence[int] | int | None = None) -> TensorTrain:
    """TT-SVD of a dense tensor.

    Each of the ``d-1`` truncations discards at most
    ``tolerance * ||c|| / sqrt(d-1)`` in Frobenius norm, so the total
    reconstruction error is bounded by ``tolerance * ||c||``.
    """
    c = np.asarray(c, dtype=float)
    if c.ndim < 2:
        raise ValueError("tt_decompose needs a tensor of order >= 2")
    d = c.ndim
    dims = c.shape
    if max_rank is None:
        caps = [np.inf] * (d - 1)
    elif np.isscalar(max_rank):
        caps = [int(max_rank)] * (d - 1)
    else:
        caps = list(max_rank)
    total = np.linalg.norm(c)
    delta = tolerance * total / np.sqrt(d - 1)
    comps = []
    r_prev = 1
    rest = c.reshape(dims[0], -1)
    for i in range(d - 1):
        rest = rest.reshape(r_prev * dims[i], -1)
        u, s, vt = np.linalg.svd(rest, full_matrices=False)
        # tail[j] = norm of singular values from j onwards
        tail = np.sqrt(np.cumsum((s**2)[::-1])[::-1])
        keep = len(s)
        for j in range(1, len(s)):
            if tail[j] <= delta:
                keep = j
                break
        if total == 0.0:
            keep = 1
        keep = max(1, min(keep, caps[i]))
        comps.append(u[:, :keep].reshape(r_prev, dims[i], keep))
        rest = s[:keep, None] * vt[:keep]
        r_prev = keep
    comps.append(rest.reshape(r_prev, dims[-1], 1))
    return TensorTrain(tuple(comps), d - 1)


def tt_contract(tt: TensorTrain, cap: int = DENSE_CAP) -> np.ndarray:
    """Assemble the full coefficient tensor (testing only)."""
    size = int(np.prod(tt.dims, dtype=float))
    if size > cap:
        raise SizeCapError(f"dense tensor with {size} entries exceeds cap {cap}")
    out = tt.components[0]
    for u in tt.components[1:]:
        out = contract(out, u)
    return out.reshape(tt.dims)


def truncate(tt: TensorTrain, tolerance: float = TRUNC_TOL, max_rank=None) -> TensorTrain:
    """SVD rounding: left-orthogonalize, then truncate right to left.

    Singular values below ``tolerance`` times the largest one are dropped.
    """
    d = tt.order
    if d == 1:
        return tt
    caps = [np.inf] * (d - 1) if max_rank is None else (
        [int(max_rank)] * (d - 1) if np.isscalar(max_rank) else list(max_rank))
    comps = list(move_core(tt, d - 1).components)
    for i in range(d - 1, 0, -1):
        r0, m, r1 = comps[i].shape
        u, s, vt = np.linalg.svd(comps[i].reshape(r0, m * r1), full_matrices=False)
        if s[0] == 0.0:
            keep = 1
        else:
            keep = int(np.sum(s > tolerance * s[0]))
        keep = max(1, min(keep, caps[i - 1]))
        comps[i] = vt[:keep].reshape(keep, m, r1)
        comps[i - 1] = np.einsum("amb,bc->amc", comps[i - 1], u[:, :keep] * s[:keep])
    return TensorTrain(tuple(comps), 0)


def tt_rank(tt: TensorTrain, tolerance: float = TRUNC_TOL) -> tuple[int, ...]:
    """Minimal rank tuple after SVD truncation at ``tolerance``."""
    return truncate(tt, tolerance).ranks


def tt_add(a: TensorTrain, b: TensorTrain) -> TensorTrain:
    """Sum of two trains by block-diagonal stacking; ranks add."""
    if a.dims != b.dims:
        raise ShapeMismatchError(f"dims differ: {a.dims} vs {b.dims}")
    d = a.order
    if d == 1:
        return TensorTrain((a.components[0] + b.components[0],))
    comps = []
    for i, (u, v) in enumerate(zip(a.components, b.components)):
        m = u.shape[1]
        if i == 0:
            w = np.concatenate([u, v], axis=2)
        elif i == d - 1:
            w = np.concatenate([u, v], axis=0)
        else:
            w = np.zeros((u.shape[0] + v.shape[0], m, u.shape[2] + v.shape[2]))
            w[: u.shape[0], :, : u.shape[2]] = u
            w[u.shape[0]:, :, u.shape[2]:] = v
        comps.append(w)
    return TensorTrain(tuple(comps))


def to_bytes(tt: TensorTrain) -> bytes:
    """``TTV1`` header (int32 LE) followed by float64 LE component data."""
    d = tt.order
    core = -1 if tt.core_position is None else tt.core_position + 1
    header = [d, *tt.dims, *tt.ranks, core]
    parts = [MAGIC, struct.pack(f"<{len(header)}i", *header)]
    for u in tt.components:
        parts.append(np.ascontiguousarray(u, dtype="<f8").tobytes())
    return b"".join(parts)


def from_bytes(buf: bytes) -> tuple[TensorTrain, int]:
    """Parse a serialized train; returns the train and the bytes consumed."""
    if buf[:4] != MAGIC:
        raise ValueError("not a TTV1 stream")
    (d,) = struct.unpack_from("<i", buf, 4)
    n_head = 1 + d + (d - 1) + 1
    header = struct.unpack_from(f"<{n_head}i", buf, 4)
    dims = header[1: 1 + d]
    ranks = header[1 + d: 2 * d]
    core = header[-1]
    full = [1, *ranks, 1]
    offset = 4 + 4 * n_head
    comps = []
    for i in range(d):
        shape = (full[i], dims[i], full[i + 1])
        count = int(np.prod(shape))
        data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
        comps.append(data.reshape(shape).astype(float))
        offset += 8 * count
    core_position = None if core <= 0 else core - 1
    return TensorTrain(tuple(comps), core_position), offset
