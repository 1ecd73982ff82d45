"""Spectral experiments on a trained model and the FD-lite metric.

All image pipelines here share the sampler's chunking, so band-restricted or
edited outputs reduce bit-for-bit to plain one-step samples in their
degenerate settings.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .koopman import (KoopmanLevelOp, LatentPyramid, SpectralBand, band_mask, evolve,
                      evolve_pyramid, thirds)
from .netarch import HKDModel
from .numcore import ShapeError, Tensor
from .trainer import PerceptualExtractor, load, predict

CHUNK = 256
BAND_NAMES = ("low", "mid", "high")


# --- bands ------------------------------------------------------------------------

def named_band(op: KoopmanLevelOp, name: str) -> SpectralBand:
    """``low``/``mid``/``high`` frequency third of a level, or ``all``.

    Low frequency means largest alpha, so ``low`` is the first third of the
    alpha ranking.
    """
    n = op.n_blocks
    if name == "all":
        return SpectralBand(op.level, 0, n)
    if name not in BAND_NAMES:
        raise ValueError(f"unknown band {name!r}")
    lo, hi = thirds(n)[BAND_NAMES.index(name)]
    return SpectralBand(op.level, lo, hi)


def bands_for(model: HKDModel, name: str) -> dict[int, SpectralBand]:
    return {op.level: named_band(op, name) for op in model.koopman}


def third_partition(model: HKDModel) -> dict[int, list[SpectralBand]]:
    return {op.level: [SpectralBand(op.level, lo, hi) for lo, hi in thirds(op.n_blocks)]
            for op in model.koopman}


def check_partition(op: KoopmanLevelOp, bands: list[SpectralBand]) -> None:
    spans = sorted((b.lo, b.hi) for b in bands if b.hi > b.lo)
    pos = 0
    for b in bands:
        if b.level != op.level:
            raise ValueError(f"band for level {b.level} given to level {op.level}")
    for lo, hi in spans:
        if lo != pos:
            raise ValueError(f"bands do not partition [0, {op.n_blocks}) at level {op.level}: "
                             f"{'gap' if lo > pos else 'overlap'} at block rank {min(lo, pos)}")
        pos = hi
    if pos != op.n_blocks:
        raise ValueError(f"bands do not partition [0, {op.n_blocks}) at level {op.level}: "
                         f"ranks from {pos} uncovered")


# --- shared pipeline -------------------------------------------------------------

def _pipeline(model: HKDModel, x_T, edit: Callable | None = None) -> np.ndarray:
    """Encode at T, evolve to epsilon, optionally rewrite the pyramid, decode.

    Mirrors :func:`hkd.trainer.predict` (same chunking, per-sample times), so
    an identity ``edit`` reproduces one-step samples exactly.
    """
    cfg = model.cfg
    x_T = np.asarray(x_T)
    t = np.full(len(x_T), cfg.horizon)
    outs = []
    for i in range(0, len(x_T), CHUNK):
        pyr = model.encode(x_T[i:i + CHUNK], t[i:i + CHUNK])
        pyr = evolve_pyramid(pyr, model.koopman, cfg.epsilon - np.asarray(pyr.time_tag))
        if edit is not None:
            pyr = edit(pyr)
        outs.append(model.decode(pyr).data)
    return np.concatenate(outs)


def _evolved(model: HKDModel, x_T) -> list[LatentPyramid]:
    keep = []
    _pipeline(model, x_T, lambda p: keep.append(p) or p)
    return keep


# --- band decoding ---------------------------------------------------------------

def band_decode(source, x_T, bands: dict[int, SpectralBand] | str) -> np.ndarray:
    """Decode only the blocks of ``bands`` (one per level, or a band name)."""
    model = load(source)
    if isinstance(bands, str):
        bands = bands_for(model, bands)
    masks = [band_mask(op, bands[op.level]) for op in model.koopman]

    def edit(pyr):
        return LatentPyramid([Tensor(z.data * m.astype(z.dtype)) for z, m in zip(pyr.levels, masks)],
                             pyr.time_tag)

    return _pipeline(model, x_T, edit)


# --- cumulative effect --------------------------------------------------------------

@dataclass
class CeReport:
    """Per (level, band, time): ``||masked z_t||_2`` and its share of ``||z_t||^2``."""

    times: np.ndarray
    bands: dict[int, list[SpectralBand]]
    magnitude: dict[int, np.ndarray] = field(default_factory=dict)  # [n_bands, n_times]
    share: dict[int, np.ndarray] = field(default_factory=dict)

    COLUMNS = ("level", "band", "lo", "hi", "t", "magnitude", "share")

    def rows(self):
        for level, bands in self.bands.items():
            for k, b in enumerate(bands):
                for j, t in enumerate(self.times):
                    yield (level, k, b.lo, b.hi, float(t), float(self.magnitude[level][k, j]),
                           float(self.share[level][k, j]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(self.COLUMNS)
            for r in self.rows():
                wr.writerow([*r[:4], *(repr(v) for v in r[4:])])


def _op64(op: KoopmanLevelOp) -> KoopmanLevelOp:
    return KoopmanLevelOp(op.level, Tensor(op.alpha.data, dtype=np.float64),
                          Tensor(op.beta.data, dtype=np.float64), trainable=False)


def cumulative_effect(source, x_T, bands: dict[int, list[SpectralBand]] | None = None,
                      times=None) -> CeReport:
    """Track each band's latent energy while ``z_T`` is evolved down the time grid.

    ``bands`` must partition the block ranks of every level (default: thirds).
    Norms pool the whole batch; arithmetic is float64.
    """
    model = load(source)
    cfg = model.cfg
    bands = bands or third_partition(model)
    ops = {op.level: op for op in model.koopman}
    for level, bl in bands.items():
        if level not in ops:
            raise ValueError(f"no level {level} in model")
        check_partition(ops[level], bl)
    if times is None:
        n_grid = model.run.teacher.n_grid if getattr(model, "run", None) else 9
        times = cfg.horizon - (cfg.horizon - cfg.epsilon) * np.arange(n_grid) / (n_grid - 1)
    times = np.asarray(times, dtype=np.float64)
    if np.any(times < cfg.epsilon * (1 - 1e-6)) or np.any(times > cfg.horizon * (1 + 1e-6)):
        raise ValueError("CE times must lie in [epsilon, T]")
    zT = model.encode(np.asarray(x_T), cfg.horizon)
    report = CeReport(times, bands)
    for level, bl in bands.items():
        op = _op64(ops[level])
        z = Tensor(zT.levels[level - 1].data, dtype=np.float64)
        masks = [band_mask(ops[level], b) for b in bl]
        mag = np.empty((len(bl), len(times)))
        share = np.empty_like(mag)
        for j, t in enumerate(times):
            zt = evolve(z, op, t - cfg.horizon).data
            total = float(np.sum(zt * zt))
            for k, m in enumerate(masks):
                e = float(np.sum((zt * m) ** 2))
                mag[k, j] = np.sqrt(e)
                share[k, j] = e / total if total > 0 else np.nan
        report.magnitude[level] = mag
        report.share[level] = share
    return report


# --- editing --------------------------------------------------------------------------

@dataclass
class EditSpec:
    """Latent mixing recipe.

    ``bands`` maps level to a band (missing levels are left untouched) or is
    ``"all"``; ``region`` is an image-resolution boolean mask or ``None`` for
    the full frame; ``t_edit`` defaults to the midpoint of ``[epsilon, T]``.
    """

    bands: dict[int, SpectralBand] | str = "all"
    ratio: float = 0.5
    region: np.ndarray | None = None
    t_edit: float | None = None

    def validate(self, model: HKDModel) -> None:
        cfg = model.cfg
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"ratio must lie in [0, 1], got {self.ratio}")
        if self.region is not None:
            r = np.asarray(self.region)
            if r.shape != (cfg.image_size, cfg.image_size):
                raise ShapeError(f"region mask is {r.shape}, images are "
                                 f"{(cfg.image_size, cfg.image_size)}")
        t = self.time(model)
        if not cfg.epsilon <= t <= cfg.horizon:
            raise ValueError(f"t_edit {t} outside [{cfg.epsilon}, {cfg.horizon}]")

    def time(self, model: HKDModel) -> float:
        cfg = model.cfg
        return 0.5 * (cfg.horizon + cfg.epsilon) if self.t_edit is None else float(self.t_edit)

    def level_region(self, model: HKDModel, level: int) -> np.ndarray:
        """Boolean ``[h_l, w_l]`` mask: cells whose pixel patch is mostly inside the region."""
        s = model.cfg.level_size(level)
        if self.region is None:
            return np.ones((s, s), dtype=bool)
        f = model.cfg.image_size // s
        r = np.asarray(self.region, dtype=np.float64)
        return r.reshape(s, f, s, f).mean(axis=(1, 3)) >= 0.5

    def level_masks(self, model: HKDModel) -> list[np.ndarray | None]:
        """Per level ``[d, h, w]`` boolean coordinates to mix, or ``None``."""
        bands = bands_for(model, "all") if self.bands == "all" else self.bands
        out = []
        for op in model.koopman:
            if op.level not in bands:
                out.append(None)
                continue
            out.append(band_mask(op, bands[op.level]) & self.level_region(model, op.level)[None])
        return out


def lower_left_region(size: int) -> np.ndarray:
    r = np.zeros((size, size), dtype=bool)
    r[size // 2:, : size // 2] = True
    return r


def frequency_edit(source, x_T_orig, x_T_ref, spec: EditSpec) -> np.ndarray:
    """Blend reference latents into the original's within band and region.

    The blend ``(1 - rho) z_orig + rho z_ref`` is defined on states evolved to
    ``t_edit``.  Masks select whole blocks and evolution acts block by block,
    so blending the states at ``t_edit`` and then evolving equals blending the
    evolved endpoints; the endpoint form is used, which keeps the ``rho = 0``
    and ``rho = 1`` limits bit-exact.
    """
    model = load(source)
    spec.validate(model)
    x_T_orig, x_T_ref = np.asarray(x_T_orig), np.asarray(x_T_ref)
    if x_T_orig.shape != x_T_ref.shape:
        raise ShapeError(f"original {x_T_orig.shape} and reference {x_T_ref.shape} differ")
    masks = spec.level_masks(model)
    rho = spec.ratio
    refs = _evolved(model, x_T_ref)
    counter = iter(range(len(refs)))

    def edit(pyr):
        ref = refs[next(counter)]
        levels = []
        for z, zr, m in zip(pyr.levels, ref.levels, masks):
            if m is None:
                levels.append(z)
                continue
            mixed = (1.0 - rho) * z.data + rho * zr.data
            levels.append(Tensor(np.where(m[None], mixed, z.data).astype(z.dtype)))
        return LatentPyramid(levels, pyr.time_tag)

    return _pipeline(model, x_T_orig, edit)


def affected_pixels(model: HKDModel, spec: EditSpec) -> np.ndarray:
    """Pixels the decoder can change when the latents chosen by ``spec`` change."""
    from .netarch import decoder_receptive_radius

    H = model.cfg.image_size
    out = np.zeros((H, H), dtype=bool)
    for op, m in zip(model.koopman, spec.level_masks(model)):
        if m is None:
            continue
        cells = m.any(axis=0)
        f = H // model.cfg.level_size(op.level)
        r = decoder_receptive_radius(model.cfg, op.level)
        for i, j in zip(*np.nonzero(cells)):
            out[max(0, i * f - r):(i + 1) * f + r, max(0, j * f - r):(j + 1) * f + r] = True
    return out


# --- consistency series ------------------------------------------------------------------

def consistency_series(source, states, times, forward: Callable | None = None):
    """``(t, reconstruction)`` for every stored time of one trajectory, T first."""
    states = np.asarray(states)
    times = np.asarray(times, dtype=np.float64)
    if len(states) != len(times):
        raise ShapeError(f"{len(states)} states for {len(times)} times")
    if forward is None:
        model = load(source)
        recon = predict(model, states, times)
    else:
        recon = np.concatenate([np.asarray(forward(states[g][None], np.array([t])).data)
                                for g, t in enumerate(times)])
    return [(float(t), recon[g]) for g, t in enumerate(times)]


def series_mse(series, target) -> np.ndarray:
    target = np.asarray(target, dtype=np.float64)
    return np.array([np.mean((img.astype(np.float64) - target) ** 2) for _, img in series])


# --- FD-lite -----------------------------------------------------------------------------

def sqrtm_psd(S: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root by eigendecomposition (negative eigenvalues clipped)."""
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def gaussian_fit(x: np.ndarray, reg: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=0)
    cov = np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])
    return mu, cov + reg * np.eye(x.shape[1])


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    ra = sqrtm_psd(cov_a)
    cross = sqrtm_psd(ra @ cov_b @ ra)
    d = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return max(d, 0.0)


def frechet_gaussian(samples_a, samples_b) -> float:
    """Frechet distance between Gaussian fits of two ``[N, D]`` sample sets."""
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"need [N, D] sample sets with equal D, got {a.shape} and {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite samples")
    D = a.shape[1]
    if len(a) <= D or len(b) <= D:
        warnings.warn(f"covariance of {D}-dim features from {min(len(a), len(b))} samples is rank "
                      "deficient", RuntimeWarning, stacklevel=2)
    return frechet_from_moments(*gaussian_fit(a), *gaussian_fit(b))


def fd_lite(images_a, images_b, extractor: PerceptualExtractor) -> float:
    return frechet_gaussian(extractor.features(images_a), extractor.features(images_b))


__all__ = [
    "BAND_NAMES", "CeReport", "EditSpec", "affected_pixels", "band_decode", "bands_for",
    "check_partition", "consistency_series", "cumulative_effect", "fd_lite", "frechet_gaussian",
    "frequency_edit", "gaussian_fit", "lower_left_region", "named_band",
    "series_mse", "sqrtm_psd", "third_partition",
]
