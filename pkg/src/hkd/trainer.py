"""Trajectory-consistency training of the one-step model, and its sampler."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numcore as nc
from .config import RunConfig
from .koopman import LatentPyramid, evolve_pyramid
from .netarch import HKDModel
from .numcore import ShapeError, Tape, Tensor
from .persist import Checkpoint, write_checkpoint
from .teacher import Schedule, TrajectoryDataset, make_gmm, prior_params

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("iter", "epoch", "lambda1", "loss_total", "loss_mse", "loss_feat",
                  "grad_norm_theta", "grad_norm_phi", "grad_norm_A")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite loss {value} at iteration {iteration}")
        self.iteration = iteration


class DatasetMismatchError(ValueError):
    pass


# --- forward map ---------------------------------------------------------------

def hkd_forward(model: HKDModel, x_t, t) -> Tensor:
    """Encode at ``t``, evolve every level by ``epsilon - t``, decode."""
    pyr = model.encode(x_t, t)
    dt = model.cfg.epsilon - np.asarray(pyr.time_tag, dtype=np.float64)
    return model.decode(evolve_pyramid(pyr, model.koopman, dt))


class PerceptualExtractor:
    """Frozen random two-layer conv features (a stand-in for a learned perceptual net).

    Each layer is a 3x3 conv followed by a factor-2 average pool, with SiLU
    between the layers.
    """

    def __init__(self, channels: int, features: int = 8, seed: int = 1234, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.k1 = Tensor(rng.normal(0, np.sqrt(1.0 / (9 * channels)), (features, channels, 3, 3)), dtype=dtype)
        self.b1 = Tensor(rng.normal(0, 0.1, features), dtype=dtype)
        self.k2 = Tensor(rng.normal(0, np.sqrt(1.0 / (9 * features)), (features, features, 3, 3)), dtype=dtype)
        self.b2 = Tensor(rng.normal(0, 0.1, features), dtype=dtype)

    def __call__(self, x) -> Tensor:
        h = nc.resample2(nc.conv2d(x, self.k1, self.b1, 1, 1), "down")
        h = nc.silu(h)
        return nc.resample2(nc.conv2d(h, self.k2, self.b2, 1, 1), "down")

    def features(self, images, chunk: int = 512) -> np.ndarray:
        """Flattened feature vectors ``[N, D]`` as float64."""
        images = np.asarray(images)
        out = [self(Tensor(images[i:i + chunk], dtype=self.k1.dtype)).data.reshape(len(images[i:i + chunk]), -1)
               for i in range(0, len(images), chunk)]
        return np.concatenate(out).astype(np.float64)

    @classmethod
    def from_config(cls, run: RunConfig, dtype=np.float32) -> "PerceptualExtractor":
        return cls(run.model.image_channels, run.train.feature_channels, run.train.feature_seed, dtype)


def perceptual_distance(extractor: PerceptualExtractor, x, y) -> Tensor:
    """``||F(x) - F(y)||^2 / numel(F)``."""
    x, y = nc.as_tensor(x), nc.as_tensor(y)
    if x.shape != y.shape:
        raise ShapeError(f"perceptual_distance shape mismatch {x.shape} vs {y.shape}")
    return nc.mean(nc.square(nc.sub(extractor(x), extractor(y))))


def lambda1_schedule(epoch: int, total_epochs: int) -> float:
    """MSE weight ``10 ** -(3 ** (epoch / total))``: 0.1 at the start, 0.001 at the end."""
    if total_epochs <= 0:
        return 0.1
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return 10.0 ** (-(3.0 ** (epoch / total_epochs)))


@dataclass
class LossTerms:
    total: Tensor
    mse: Tensor
    feat: Tensor


def image_distance(pred, target, lam1: float, extractor: PerceptualExtractor, lam2: float = 1.0) -> LossTerms:
    mse = nc.mse(pred, target)
    if lam2:
        feat = perceptual_distance(extractor, pred, target)
        total = nc.add(nc.mul(mse, lam1), nc.mul(feat, lam2))
    else:
        feat = Tensor(np.zeros((), dtype=mse.dtype))
        total = nc.mul(mse, lam1)
    return LossTerms(total, mse, feat)


def stack_sampled(states: np.ndarray, times: np.ndarray, sampled: list[int]):
    """Inputs, per-sample times and targets for every ``(t in sampled, trajectory)`` pair."""
    B = states.shape[0]
    x = np.concatenate([states[:, g] for g in sampled])
    t = np.repeat(np.asarray(times, dtype=np.float64)[list(sampled)], B)
    target = np.concatenate([states[:, -1]] * len(sampled))
    return x, t, target


def trajectory_consistency_loss(forward: Callable, states: np.ndarray, times: np.ndarray,
                                sampled: list[int], lam1: float,
                                extractor: PerceptualExtractor | None, lam2: float = 1.0) -> LossTerms:
    """Mean over sampled grid times and batch of ``d(forward(x_t, t), x_eps)``.

    ``states`` is ``[B, G, C, H, W]`` with ``x_eps`` at index ``G - 1``;
    ``sampled`` holds grid indices (index 0 is ``T``).
    """
    if len(sampled) == 0:
        raise ValueError("at least one sampled time is required")
    x, t, target = stack_sampled(states, times, sampled)
    pred = forward(x, t)
    return image_distance(pred, Tensor(target, dtype=pred.dtype), lam1, extractor, lam2)


# --- training -----------------------------------------------------------------------

def model_grid_times(model_cfg, dataset: TrajectoryDataset) -> np.ndarray:
    """Dataset grid in float64 with endpoints pinned to the model's epsilon/horizon."""
    t = dataset.times.astype(np.float64)
    if not (np.isclose(t[0], model_cfg.horizon, rtol=1e-6) and np.isclose(t[-1], model_cfg.epsilon, rtol=1e-6)):
        raise DatasetMismatchError(f"dataset grid [{t[-1]}, {t[0]}] does not span "
                                   f"[{model_cfg.epsilon}, {model_cfg.horizon}]")
    t[0], t[-1] = model_cfg.horizon, model_cfg.epsilon
    return t


def check_dataset(run: RunConfig, dataset: TrajectoryDataset) -> None:
    m = run.model
    want = (m.image_channels, m.image_size, m.image_size)
    if tuple(dataset.image_shape) != want:
        raise DatasetMismatchError(f"dataset images are (C,H,W)={tuple(dataset.image_shape)}, "
                                   f"model config expects {want}")
    if dataset.n_grid < 2:
        raise DatasetMismatchError("dataset grid needs at least the endpoints T and epsilon")
    model_grid_times(m, dataset)


def _grad_norm(ts: list[Tensor]) -> float:
    return float(np.sqrt(sum(float(np.sum(t.grad.astype(np.float64) ** 2)) for t in ts if t.grad is not None)))


@dataclass
class TrainResult:
    model: HKDModel
    checkpoint: Checkpoint
    metrics: list[dict] = field(default_factory=list)
    history: list[float] = field(default_factory=list)


def train(run: RunConfig, dataset: TrajectoryDataset, model: HKDModel | None = None,
          checkpoint_path=None, metrics_path=None, hook: Callable | None = None) -> TrainResult:
    """Fit all model parameters to teacher trajectories.

    Every iteration samples ``samples_per_iter - 1`` grid times from
    ``[epsilon, T)`` plus ``T`` itself.  ``hook(info)`` is called after each
    optimizer step with the iteration's bookkeeping.
    """
    check_dataset(run, dataset)
    tc = run.train
    if model is None:
        model = HKDModel(run.model)
    model.run = run
    extractor = PerceptualExtractor.from_config(run, dtype=model.dtype)
    times = model_grid_times(run.model, dataset)
    G = dataset.n_grid
    B = min(tc.batch_size, dataset.n_traj)
    iters_per_epoch = max(1, dataset.n_traj // B)
    params = model.parameters()
    groups = model.groups()
    state = nc.AdamState.for_params(params)
    rng = np.random.default_rng(tc.seed)
    span = run.model.horizon - run.model.epsilon
    forward = lambda x, t: hkd_forward(model, x, t)  # noqa: E731

    metrics, history = [], []
    it = 0
    csv_file = open(metrics_path, "w", newline="") if metrics_path else None
    writer = csv.writer(csv_file) if csv_file else None
    if writer:
        writer.writerow(METRIC_COLUMNS)
    try:
        for epoch in range(tc.epochs):
            lam1 = lambda1_schedule(epoch, tc.epochs) if tc.lambda1 == "anneal" else float(tc.lambda1)
            perm = rng.permutation(dataset.n_traj)
            for b in range(iters_per_epoch):
                it += 1
                idx = np.sort(perm[b * B:(b + 1) * B])
                sampled = [0] + [int(g) for g in rng.integers(1, G, size=tc.samples_per_iter - 1)]
                tape = Tape()
                with tape:
                    terms = trajectory_consistency_loss(forward, dataset.states[idx], times, sampled,
                                                        lam1, extractor, tc.lambda2)
                loss = terms.total.item()
                if not np.isfinite(loss):
                    raise NonFiniteLossError(it, loss)
                nc.backward(terms.total, tape)
                norms = {k: _grad_norm(v) for k, v in groups.items()}
                nc.adam_step(params, [p.grad for p in params], state, tc.lr, tc.beta1, tc.beta2,
                             tc.adam_eps, tc.decay, iters_per_epoch)
                for op in model.koopman:
                    op.clamp_(span)
                history.append(loss)
                row = {"iter": it, "epoch": epoch, "lambda1": lam1, "loss_total": loss,
                       "loss_mse": terms.mse.item(), "loss_feat": terms.feat.item(),
                       "grad_norm_theta": norms["theta"], "grad_norm_phi": norms["phi"],
                       "grad_norm_A": norms["A"]}
                if hook is not None:
                    hook({**row, "sampled_times": times[sampled], "batch": idx})
                last = epoch == tc.epochs - 1 and b == iters_per_epoch - 1
                if it == 1 or it % max(1, tc.log_interval) == 0 or last:
                    metrics.append(row)
                    if writer:
                        writer.writerow([row[c] if isinstance(row[c], int) else repr(float(row[c]))
                                         for c in METRIC_COLUMNS])
                        csv_file.flush()
                    log.info("iter %d epoch %d loss %.5g", it, epoch, loss)
            if checkpoint_path:
                write_checkpoint(Checkpoint.from_model(model, run.text), checkpoint_path)
    finally:
        if csv_file:
            csv_file.close()
    ckpt = Checkpoint.from_model(model, run.text)
    if checkpoint_path:
        write_checkpoint(ckpt, checkpoint_path)
    return TrainResult(model, ckpt, metrics, history)


# --- sampling --------------------------------------------------------------------------

def load(source) -> HKDModel:
    """Model from a :class:`Checkpoint` (config attached) or a model as-is."""
    if isinstance(source, Checkpoint):
        model = source.to_model()
        model.run = source.config
        return model
    return source


def prior_for(model: HKDModel, prior=None) -> tuple[np.ndarray, float]:
    if prior is not None:
        return prior
    run = getattr(model, "run", None)
    if run is None:
        raise ValueError("model carries no run config; pass prior=(mean, std)")
    gmm = make_gmm(run.model, run.teacher)
    return prior_params(gmm, Schedule(run.model.epsilon, run.model.horizon))


def draw_noise(model: HKDModel, n: int, seed: int, prior=None) -> np.ndarray:
    mean, std = prior_for(model, prior)
    rng = np.random.default_rng(seed)
    cfg = model.cfg
    shape = (n, cfg.image_channels, cfg.image_size, cfg.image_size)
    return mean[None] + std * rng.standard_normal(shape)


def predict(model: HKDModel, x, t, chunk: int = 256) -> np.ndarray:
    """Batched :func:`hkd_forward` without recording gradients."""
    x = np.asarray(x)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(x),))
    outs = [hkd_forward(model, x[i:i + chunk], t[i:i + chunk]).data for i in range(0, len(x), chunk)]
    return np.concatenate(outs) if outs else np.zeros((0,) + x.shape[1:], dtype=model.dtype)


def one_step_sample(source, n: int, seed: int, prior=None) -> np.ndarray:
    """``n`` samples: one encoder pass, one evolution from T to epsilon, one decoder pass."""
    model = load(source)
    x_T = draw_noise(model, n, seed, prior)
    return predict(model, x_T, model.cfg.horizon)


# --- loss equivalence probe ---------------------------------------------------------------

@dataclass
class ProbeResult:
    correlation: float
    image_losses: np.ndarray
    latent_losses: np.ndarray
    degenerate: bool


def pearson(a, b) -> tuple[float, bool]:
    """Correlation and a flag set when either vector has no spread."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    da, db = a - a.mean(), b - b.mean()
    na, nb = np.sqrt(da @ da), np.sqrt(db @ db)
    if na == 0 or nb == 0:
        return float("nan"), True
    return float(da @ db / (na * nb)), False


def latent_discrepancy(model: HKDModel, x_t, t, x_T) -> np.ndarray:
    """Per-sample ``sum_l ||E_l(x_t) - exp((t - T) A_l) E_l(x_T)||^2``."""
    cfg = model.cfg
    t = np.asarray(t, dtype=np.float64)
    zt = model.encode(x_t, t)
    zT = model.encode(x_T, cfg.horizon)
    ev = evolve_pyramid(LatentPyramid(zT.levels, cfg.horizon), model.koopman, t - cfg.horizon)
    out = np.zeros(len(x_t))
    for a, b in zip(zt.levels, ev.levels):
        out += ((a.data.astype(np.float64) - b.data) ** 2).reshape(len(x_t), -1).sum(axis=1)
    return out


def loss_equivalence_probe(model: HKDModel, dataset: TrajectoryDataset, n_probe: int, seed: int = 0,
                           lam1: float = 1e-3, extractor: PerceptualExtractor | None = None,
                           forward: Callable | None = None) -> ProbeResult:
    """Correlate the image-space loss with its latent-space counterpart over random ``(x_t, t)``."""
    run = getattr(model, "run", None)
    if extractor is None:
        extractor = (PerceptualExtractor.from_config(run, model.dtype) if run is not None
                     else PerceptualExtractor(model.cfg.image_channels, dtype=model.dtype))
    forward = forward or (lambda x, t: hkd_forward(model, x, t))
    times = model_grid_times(model.cfg, dataset)
    rng = np.random.default_rng(seed)
    traj = rng.integers(0, dataset.n_traj, size=n_probe)
    gidx = rng.integers(1, dataset.n_grid, size=n_probe)
    img, lat = np.empty(n_probe), np.empty(n_probe)
    for k in range(n_probe):
        s = dataset.states[traj[k]]
        x_t, x_eps, x_T = s[gidx[k]][None], s[-1][None], s[0][None]
        t = times[gidx[k]]
        pred = forward(x_t, np.array([t]))
        img[k] = image_distance(pred, Tensor(x_eps, dtype=pred.dtype), lam1, extractor).total.item()
        lat[k] = latent_discrepancy(model, x_t, np.array([t]), x_T)[0]
    r, degenerate = pearson(img, lat)
    return ProbeResult(r, img, lat, degenerate)
