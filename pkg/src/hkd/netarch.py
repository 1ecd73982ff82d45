"""Hierarchical U-Net-lite encoder/decoder around per-level Koopman operators.

Encoder level ``l`` sees the image after ``l-1`` factor-2 descents and emits
an observable map ``[N, d_l, h_l, w_l]`` through a 1x1 head.  The decoder
starts at the bottleneck, upsamples, and adds a 1x1 injection of each
evolved skip before its second conv.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import numcore as nc
from .config import ModelConfig
from .koopman import KoopmanLevelOp, LatentPyramid
from .numcore import ShapeError, Tensor

TIME_SLACK = 1e-6


def conv_shapes(cfg: ModelConfig) -> dict[str, tuple[int, int, int]]:
    """``name -> (cin, cout, k)`` for every conv in encoder and decoder."""
    C, L = cfg.image_channels, cfg.levels
    w, d = cfg.hidden_widths, cfg.latent_channels
    shapes = {}
    for l in range(1, L + 1):
        cin = C + 1 if l == 1 else w[l - 2]
        shapes[f"encoder.level{l}.conv1"] = (cin, w[l - 1], 3)
        shapes[f"encoder.level{l}.conv2"] = (w[l - 1], w[l - 1], 3)
        shapes[f"encoder.level{l}.head"] = (w[l - 1], d[l - 1], 1)
    for l in range(L, 0, -1):
        shapes[f"decoder.level{l}.inject"] = (d[l - 1], w[l - 1], 1)
        cin = w[l - 1] if l == L else w[l]
        shapes[f"decoder.level{l}.conv1"] = (cin, w[l - 1], 3)
        shapes[f"decoder.level{l}.conv2"] = (w[l - 1], w[l - 1], 3)
    shapes["decoder.out"] = (w[0], C, 3)
    return shapes


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every named parameter and its shape, Koopman blocks included."""
    out = {}
    for name, (cin, cout, k) in conv_shapes(cfg).items():
        out[f"{name}.weight"] = (cout, cin, k, k)
        out[f"{name}.bias"] = (cout,)
    for l in range(1, cfg.levels + 1):
        s = cfg.level_size(l)
        nb = cfg.latent_channels[l - 1] // 2
        out[f"koopman.level{l}.alpha"] = (nb, s, s)
        out[f"koopman.level{l}.beta"] = (nb, s, s)
    return out


class HKDModel:
    """Encoder E, decoder D and the Koopman operators of every level."""

    def __init__(self, cfg: ModelConfig, dtype=np.float32, init: bool = True):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.koopman: list[KoopmanLevelOp] = []
        if init:
            self._init_params()

    def _init_params(self):
        rng = np.random.default_rng(self.cfg.seed)
        for name, (cin, cout, k) in conv_shapes(self.cfg).items():
            if name == "decoder.out":
                kern = np.zeros((cout, cin, k, k))
            else:
                bound = np.sqrt(6.0 / (cin * k * k))
                kern = rng.uniform(-bound, bound, size=(cout, cin, k, k))
            self.params[f"{name}.weight"] = Tensor(kern, requires_grad=True, dtype=self.dtype)
            self.params[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True, dtype=self.dtype)
        for l in range(1, self.cfg.levels + 1):
            s = self.cfg.level_size(l)
            self.koopman.append(KoopmanLevelOp.zeros(l, self.cfg.latent_channels[l - 1], s, s,
                                                     dtype=self.dtype))

    # --- parameter bookkeeping ---

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params.items()}
        for op in self.koopman:
            out[f"koopman.level{op.level}.alpha"] = op.alpha.data
            out[f"koopman.level{op.level}.beta"] = op.beta.data
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = param_shapes(self.cfg)
        missing = set(expected) - set(state)
        extra = set(state) - set(expected)
        if missing or extra:
            raise ShapeError(f"parameter set mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, shape in expected.items():
            if tuple(np.shape(state[name])) != shape:
                raise ShapeError(f"parameter {name} has shape {np.shape(state[name])}, expected {shape}")
        self.params = {}
        self.koopman = []
        for name in conv_shapes(self.cfg):
            for suffix in ("weight", "bias"):
                key = f"{name}.{suffix}"
                self.params[key] = Tensor(np.array(state[key]), requires_grad=True, dtype=self.dtype)
        for l in range(1, self.cfg.levels + 1):
            self.koopman.append(KoopmanLevelOp(
                l, Tensor(np.array(state[f"koopman.level{l}.alpha"]), dtype=self.dtype),
                Tensor(np.array(state[f"koopman.level{l}.beta"]), dtype=self.dtype)))

    def astype(self, dtype) -> "HKDModel":
        clone = HKDModel(self.cfg, dtype=dtype, init=False)
        clone.load_state_dict(self.state_dict())
        return clone

    def copy(self) -> "HKDModel":
        return self.astype(self.dtype)

    def groups(self) -> dict[str, list[Tensor]]:
        """Trainable tensors split into encoder (theta), decoder (phi) and Koopman (A)."""
        theta = [v for k, v in self.params.items() if k.startswith("encoder.")]
        phi = [v for k, v in self.params.items() if k.startswith("decoder.")]
        A = [t for op in self.koopman for t in (op.alpha, op.beta)]
        return {"theta": theta, "phi": phi, "A": A}

    def parameters(self) -> list[Tensor]:
        g = self.groups()
        return g["theta"] + g["phi"] + g["A"]

    def parameter_count(self) -> int:
        return sum(int(np.prod(s)) for s in param_shapes(self.cfg).values())

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    # --- building blocks ---

    def _act(self, x):
        return nc.silu(x) if self.cfg.activation == "silu" else x

    def _conv(self, name, x, stride=1):
        w = self.params[f"{name}.weight"]
        return nc.conv2d(x, w, self.params[f"{name}.bias"], stride=stride, pad=w.shape[-1] // 2)

    def _check_time(self, t, n):
        t = np.asarray(t, dtype=np.float64)
        if t.ndim not in (0, 1) or (t.ndim == 1 and t.shape[0] != n):
            raise ShapeError(f"time must be a scalar or one value per sample, got shape {t.shape}")
        lo, hi = self.cfg.epsilon, self.cfg.horizon
        if np.any(t < lo * (1 - TIME_SLACK)) or np.any(t > hi * (1 + TIME_SLACK)):
            raise ValueError(f"time {t} outside [{lo}, {hi}]")
        return t

    # --- encoder / decoder ---

    def encode(self, x, t) -> LatentPyramid:
        """Observable pyramid of ``x`` at diffusion time ``t`` (scalar or per sample)."""
        x = nc.as_tensor(x, dtype=self.dtype)
        cfg = self.cfg
        C, H = cfg.image_channels, cfg.image_size
        if x.data.ndim != 4 or x.shape[1:] != (C, H, H):
            raise ShapeError(f"encode expects [N,{C},{H},{H}], got {x.shape}")
        n = x.shape[0]
        t = self._check_time(t, n)
        tchan = np.broadcast_to((t / cfg.horizon).reshape(-1, 1, 1, 1), (n, 1, H, H))
        h = nc.concat([x, Tensor(tchan, dtype=x.dtype)], axis=1)
        levels = []
        for l in range(1, cfg.levels + 1):
            if l > 1:
                h = nc.resample2(h, "down")
            h = self._act(self._conv(f"encoder.level{l}.conv1", h))
            h = self._act(self._conv(f"encoder.level{l}.conv2", h))
            levels.append(self._conv(f"encoder.level{l}.head", h))
        return LatentPyramid(levels, t)

    def check_pyramid(self, pyramid) -> None:
        cfg = self.cfg
        if len(pyramid.levels) != cfg.levels:
            raise ShapeError(f"pyramid has {len(pyramid.levels)} levels, model has {cfg.levels}")
        n = pyramid.levels[0].shape[0]
        for l, z in enumerate(pyramid.levels, 1):
            s = cfg.level_size(l)
            want = (n, cfg.latent_channels[l - 1], s, s)
            if tuple(z.shape) != want:
                raise ShapeError(f"pyramid level {l} has shape {tuple(z.shape)}, expected {want}")

    def decode(self, pyramid: LatentPyramid) -> Tensor:
        """Image ``[N, C, H, W]`` from a (possibly evolved) pyramid."""
        self.check_pyramid(pyramid)
        L = self.cfg.levels
        zs = [nc.as_tensor(z, dtype=self.dtype) for z in pyramid.levels]
        h = self._conv(f"decoder.level{L}.inject", zs[L - 1])
        h = self._act(self._conv(f"decoder.level{L}.conv1", h))
        h = self._act(self._conv(f"decoder.level{L}.conv2", h))
        for l in range(L - 1, 0, -1):
            h = nc.resample2(h, "up")
            h = self._act(self._conv(f"decoder.level{l}.conv1", h))
            h = nc.add(h, self._conv(f"decoder.level{l}.inject", zs[l - 1]))
            h = self._act(self._conv(f"decoder.level{l}.conv2", h))
        return self._conv("decoder.out", h)

    def zero_pyramid(self, n: int) -> LatentPyramid:
        cfg = self.cfg
        return LatentPyramid([Tensor(np.zeros((n, cfg.latent_channels[l - 1], cfg.level_size(l),
                                                cfg.level_size(l))), dtype=self.dtype)
                              for l in range(1, cfg.levels + 1)], cfg.epsilon)


def decoder_receptive_radius(cfg: ModelConfig, level: int) -> int:
    """Pixels beyond a level-``level`` cell's own span that its latent can reach.

    A 3x3 conv at level ``l`` widens the influence by ``2**(l-1)`` image
    pixels per side; nearest upsampling keeps aligned spans unchanged.
    """
    convs_here = 2 if level == cfg.levels else 1
    r = convs_here * 2 ** (level - 1)
    r += sum(2 * 2 ** (l - 1) for l in range(1, level))
    return r + 1  # decoder.out
