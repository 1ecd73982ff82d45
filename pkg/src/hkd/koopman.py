"""Per-location block-diagonal Koopman generators.

Each level carries ``alpha`` and ``beta`` arrays of shape ``[d/2, h, w]``.
Block ``k`` at location ``(i, j)`` is the 2x2 generator
``[[alpha, beta], [-beta, alpha]]`` acting on channels ``(2k, 2k+1)``; its
exponential has the closed form used throughout this module.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .numcore import ShapeError, Tensor, _emit, as_tensor, register_op

EXP_GUARD = 50.0


class KoopmanOverflowError(OverflowError):
    pass


class ConditioningError(ValueError):
    pass


@dataclass
class KoopmanLevelOp:
    level: int
    alpha: Tensor
    beta: Tensor
    trainable: bool = True

    def __post_init__(self):
        if self.alpha.shape != self.beta.shape:
            raise ShapeError(f"alpha {self.alpha.shape} and beta {self.beta.shape} differ")
        if self.alpha.data.ndim != 3:
            raise ShapeError(f"alpha must be [d/2, h, w], got {self.alpha.shape}")
        self.alpha.requires_grad = self.trainable
        self.beta.requires_grad = self.trainable

    @classmethod
    def zeros(cls, level: int, channels: int, h: int, w: int, dtype=np.float32) -> "KoopmanLevelOp":
        if channels % 2:
            raise ShapeError(f"latent channel count must be even, got {channels}")
        shape = (channels // 2, h, w)
        return cls(level, Tensor(np.zeros(shape, dtype)), Tensor(np.zeros(shape, dtype)))

    @property
    def n_blocks(self) -> int:
        return self.alpha.shape[0]

    @property
    def channels(self) -> int:
        return 2 * self.alpha.shape[0]

    def clamp_(self, horizon: float) -> None:
        """Project alpha so that ``|alpha * horizon| <= EXP_GUARD``."""
        lim = EXP_GUARD / horizon
        self.alpha.data = np.clip(self.alpha.data, -lim, lim).astype(self.alpha.dtype)


@dataclass
class LatentPyramid:
    levels: list[Tensor]
    time_tag: float | np.ndarray = 0.0

    def __len__(self):
        return len(self.levels)

    def __iter__(self):
        return iter(self.levels)

    def __getitem__(self, i):
        return self.levels[i]


@dataclass(frozen=True)
class SpectralBand:
    level: int
    lo: int
    hi: int


def _guard(alpha: np.ndarray, dt) -> None:
    worst = float(np.max(np.abs(alpha) * np.max(np.abs(dt)))) if np.size(alpha) else 0.0
    if not worst <= EXP_GUARD:
        raise KoopmanOverflowError(
            f"|alpha*dt| = {worst:.4g} exceeds the exponent guard {EXP_GUARD}")


def block_exp(alpha: float, beta: float, dt: float) -> np.ndarray:
    """Exact exponential of ``[[alpha, beta], [-beta, alpha]] * dt``."""
    if not abs(alpha * dt) <= EXP_GUARD:
        raise KoopmanOverflowError(
            f"|alpha*dt| = {abs(alpha * dt):.4g} exceeds the exponent guard {EXP_GUARD}")
    e = math.exp(alpha * dt)
    c, s = math.cos(beta * dt), math.sin(beta * dt)
    return np.array([[e * c, e * s], [-e * s, e * c]])


def _dt_view(dt, ndim: int, dtype):
    """Broadcast a scalar or per-sample ``dt`` against ``[N, d/2, h, w]``."""
    d = np.asarray(dt, dtype=np.float64)
    if d.ndim == 0:
        return d.astype(dtype)
    return d.reshape((-1,) + (1,) * (ndim - 1)).astype(dtype)


@register_op("evolve")
def evolve(z, op: KoopmanLevelOp, dt) -> Tensor:
    """Advance latent ``z`` by ``dt`` under ``op``, independently per location.

    ``z`` is ``[d, h, w]`` or batched ``[N, d, h, w]``; ``dt`` is a scalar or
    (batched case) one value per sample.  Differentiable in z, alpha, beta.
    """
    z = as_tensor(z)
    alpha, beta = op.alpha, op.beta
    batched = z.data.ndim == 4
    if z.data.ndim not in (3, 4) or z.shape[-3:] != (2 * alpha.shape[0],) + alpha.shape[1:]:
        raise ShapeError(f"latent {z.shape} does not match operator blocks {alpha.shape} "
                         f"(expected {2 * alpha.shape[0]} channels at {alpha.shape[1:]})")
    if not batched and np.ndim(dt) != 0:
        raise ShapeError("per-sample dt needs a batched latent")
    if batched and np.ndim(dt) == 1 and np.shape(dt)[0] != z.shape[0]:
        raise ShapeError(f"dt has {np.shape(dt)[0]} entries for batch of {z.shape[0]}")
    _guard(alpha.data, dt)

    dtype = np.result_type(z.dtype, alpha.dtype)
    zb = z.data if batched else z.data[None]
    n, d, h, w = zb.shape
    pairs = zb.reshape(n, d // 2, 2, h, w)
    u, v = pairs[:, :, 0], pairs[:, :, 1]
    tau = _dt_view(dt, 4, dtype)
    e = np.exp(alpha.data[None] * tau)
    c = np.cos(beta.data[None] * tau)
    s = np.sin(beta.data[None] * tau)
    ec, es = e * c, e * s
    ou = ec * u + es * v
    ov = ec * v - es * u
    out = np.stack([ou, ov], axis=2).reshape(n, d, h, w).astype(dtype, copy=False)
    if not batched:
        out = out[0]

    def vjp(g):
        gb = g if batched else g[None]
        gp = gb.reshape(n, d // 2, 2, h, w)
        gu, gv = gp[:, :, 0], gp[:, :, 1]
        gz = ga = gbeta = None
        if z.requires_grad:
            zu = ec * gu - es * gv
            zv = es * gu + ec * gv
            gz = np.stack([zu, zv], axis=2).reshape(n, d, h, w)
            if not batched:
                gz = gz[0]
        if alpha.requires_grad:
            ga = (tau * (gu * ou + gv * ov)).sum(axis=0)
        if beta.requires_grad:
            gbeta = (tau * (gu * ov - gv * ou)).sum(axis=0)
        return gz, ga, gbeta

    return _emit((z, alpha, beta), out, vjp)


def evolve_pyramid(pyramid: LatentPyramid, ops: list[KoopmanLevelOp], dt) -> LatentPyramid:
    if len(pyramid) != len(ops):
        raise ShapeError(f"pyramid has {len(pyramid)} levels, got {len(ops)} operators")
    levels = [evolve(z, op, dt) for z, op in zip(pyramid.levels, ops)]
    return LatentPyramid(levels, np.asarray(pyramid.time_tag) + np.asarray(dt))


@dataclass
class Eigenvalues:
    """Conjugate pairs ``magnitude * exp(+-i phase)`` per block and location."""

    magnitude: np.ndarray
    phase: np.ndarray

    @property
    def values(self) -> np.ndarray:
        """Complex array of shape ``[d/2, h, w, 2]`` (``+phase`` first)."""
        pos = self.magnitude * np.exp(1j * self.phase)
        return np.stack([pos, np.conj(pos)], axis=-1)


def koopman_eigenvalues(op: KoopmanLevelOp, dt: float) -> Eigenvalues:
    a = np.asarray(op.alpha.data, dtype=np.float64)
    b = np.asarray(op.beta.data, dtype=np.float64)
    _guard(a, dt)
    return Eigenvalues(np.exp(a * dt), b * dt)


def band_ranks(op: KoopmanLevelOp) -> np.ndarray:
    """Rank of every block at its location, 0 = largest alpha (ties by block index)."""
    order = np.argsort(-op.alpha.data, axis=0, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(op.n_blocks)[:, None, None]
                      * np.ones_like(order), axis=0)
    return ranks


def band_mask(op: KoopmanLevelOp, band: SpectralBand) -> np.ndarray:
    """Boolean channel mask ``[d, h, w]`` selecting the blocks ranked in ``[lo, hi)``."""
    if band.level != op.level:
        raise ValueError(f"band is for level {band.level}, operator is level {op.level}")
    if not 0 <= band.lo <= band.hi <= op.n_blocks:
        raise ValueError(f"invalid band [{band.lo}, {band.hi}) for {op.n_blocks} blocks")
    r = band_ranks(op)
    keep = (r >= band.lo) & (r < band.hi)
    return np.repeat(keep, 2, axis=0)


def spectral_mask(z, op: KoopmanLevelOp, band: SpectralBand) -> Tensor:
    keep = band_mask(op, band)
    z = as_tensor(z)
    return z * keep.astype(z.dtype)


def thirds(n_blocks: int) -> list[tuple[int, int]]:
    """Split ``[0, n)`` into largest/intermediate/smallest-alpha thirds."""
    cuts = [round(n_blocks * k / 3) for k in range(4)]
    return [(cuts[k], cuts[k + 1]) for k in range(3)]


# --- block diagonalization ---------------------------------------------------

@dataclass
class BlockDiagonalization:
    P: np.ndarray
    K: np.ndarray
    Q: np.ndarray
    blocks: list[tuple[float, float]] = field(default_factory=list)

    def propagator(self, t: float) -> np.ndarray:
        """``P e^{-t(K-I)} Q`` evaluated blockwise in closed form."""
        n = self.K.shape[0]
        mid = np.zeros((n, n))
        for k, (a, b) in enumerate(self.blocks):
            mid[2 * k:2 * k + 2, 2 * k:2 * k + 2] = block_exp(a, b, -t)
        return self.P @ mid @ self.Q


def block_diagonalize(K: np.ndarray, max_cond: float = 1e8, imag_tol: float = 1e-10
                      ) -> BlockDiagonalization:
    """Rewrite ``e^{-t(K-I)}`` as ``P e^{-t(Kt-I)} Q`` with ``Kt - I`` made of 2x2 blocks.

    Conjugate eigenpairs ``a +- ib`` become rotation-scale blocks with
    ``(alpha, beta) = (a - 1, b)``; a real eigenvalue ``r`` occupies a
    duplicated ``diag(r - 1, r - 1)`` block, so with ``q`` real eigenvalues
    the block side is ``m + q`` and ``P``/``Q`` are ``m x (m+q)`` / ``(m+q) x m``.
    """
    K = np.asarray(K, dtype=np.float64)
    m = K.shape[0]
    if K.shape != (m, m):
        raise ShapeError(f"expected a square matrix, got {K.shape}")
    if m % 2:
        raise ShapeError(f"matrix side must be even, got {m}")
    lam, vecs = np.linalg.eig(K)
    cond = np.linalg.cond(vecs)
    if not cond < max_cond:
        raise ConditioningError(f"eigenvector matrix condition number {cond:.3g} >= {max_cond:.0e}; "
                                "K is defective or too close to it")
    left = np.linalg.inv(vecs)
    scale = max(1.0, float(np.max(np.abs(lam))))
    cols, rows, blocks = [], [], []
    root2 = math.sqrt(2.0)
    for i, l in enumerate(lam):
        if abs(l.imag) <= imag_tol * scale:
            p = vecs[:, i].real
            q = left[i].real
            cols += [p / root2, p / root2]
            rows += [q / root2, q / root2]
            blocks.append((l.real - 1.0, 0.0))
        elif l.imag > 0:
            p, q = vecs[:, i], left[i]
            cols += [root2 * p.real, root2 * p.imag]
            rows += [root2 * q.real, -root2 * q.imag]
            blocks.append((l.real - 1.0, l.imag))
    P = np.column_stack(cols)
    Q = np.vstack(rows)
    n = P.shape[1]
    Kt = np.eye(n)
    for k, (a, b) in enumerate(blocks):
        Kt[2 * k:2 * k + 2, 2 * k:2 * k + 2] += np.array([[a, b], [-b, a]])
    return BlockDiagonalization(P, Kt, Q, blocks)


# --- export ------------------------------------------------------------------

SPECTRA_COLUMNS = ("level", "i", "j", "block", "alpha", "beta", "magnitude", "phase")


def spectra_rows(ops: list[KoopmanLevelOp], dt: float):
    for op in ops:
        ev = koopman_eigenvalues(op, dt)
        nb, h, w = op.alpha.shape
        for i in range(h):
            for j in range(w):
                for k in range(nb):
                    yield (op.level, i, j, k, float(op.alpha.data[k, i, j]),
                           float(op.beta.data[k, i, j]), float(ev.magnitude[k, i, j]),
                           float(ev.phase[k, i, j]))


def write_spectra_csv(path, ops: list[KoopmanLevelOp], dt: float) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(SPECTRA_COLUMNS)
        for row in spectra_rows(ops, dt):
            wr.writerow([*row[:4], *(repr(v) for v in row[4:])])
