"""Image, latent and classification losses, and the CARNet training objective."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .tensor import ShapeError, Tensor

DEFAULT_SCALE_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass(frozen=True)
class MsSsimConfig:
    """Multi-scale SSIM settings.

    ``weights[j]`` is used both as the contrast and structure exponent at scale
    ``j``; the last entry doubles as the luminance exponent at the coarsest
    scale. When ``weights`` is omitted the first ``scales`` canonical weights
    are taken and renormalised to sum to one.
    """

    scales: int = 3
    weights: tuple[float, ...] | None = None
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0
    window_size: int = 11
    sigma: float = 1.5

    def __post_init__(self):
        if self.scales < 1:
            raise ValueError("MS-SSIM needs at least one scale")
        w = self.weights
        if w is None:
            if self.scales > len(DEFAULT_SCALE_WEIGHTS):
                raise ValueError(f"no default weights for {self.scales} scales")
            base = np.array(DEFAULT_SCALE_WEIGHTS[:self.scales])
            w = tuple(float(x) for x in base / base.sum()) if self.scales < len(DEFAULT_SCALE_WEIGHTS) \
                else DEFAULT_SCALE_WEIGHTS
            object.__setattr__(self, "weights", w)
        if len(self.weights) != self.scales or any(x <= 0 for x in self.weights):
            raise ValueError(f"need {self.scales} positive scale weights, got {self.weights}")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2

    @property
    def c3(self) -> float:
        return self.c2 / 2

    def window(self) -> np.ndarray:
        x = np.arange(self.window_size) - (self.window_size - 1) / 2
        g = np.exp(-(x ** 2) / (2 * self.sigma ** 2))
        return g / g.sum()

    def min_size(self) -> int:
        return self.window_size * 2 ** (self.scales - 1)

    @classmethod
    def full(cls) -> "MsSsimConfig":
        return cls(scales=5)

    @classmethod
    def desk(cls) -> "MsSsimConfig":
        return cls(scales=3)


def _as_images(x, op: str) -> Tensor:
    x = T.as_tensor(x)
    if x.ndim == 2:
        return T.reshape(x, (1, 1) + x.shape)
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape)
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected (H,W), (C,H,W) or (N,C,H,W) images, got {x.shape}")
    return x


def _local_stats(x: Tensor, y: Tensor, cfg: MsSsimConfig):
    g = cfg.window()
    mu_x = nn.separable_filter(x, g)
    mu_y = nn.separable_filter(y, g)
    var_x = T.sub(nn.separable_filter(T.mul(x, x), g), T.mul(mu_x, mu_x))
    var_y = T.sub(nn.separable_filter(T.mul(y, y), g), T.mul(mu_y, mu_y))
    cov = T.sub(nn.separable_filter(T.mul(x, y), g), T.mul(mu_x, mu_y))
    return mu_x, mu_y, var_x, var_y, cov


def _luminance(mu_x, mu_y, cfg):
    num = T.add(T.mul(2.0, T.mul(mu_x, mu_y)), cfg.c1)
    den = T.add(T.add(T.mul(mu_x, mu_x), T.mul(mu_y, mu_y)), cfg.c1)
    return T.div(num, den)


def _contrast_structure(var_x, var_y, cov, cfg):
    # c * s with C3 = C2 / 2 collapses to one ratio that needs no square roots
    num = T.add(T.mul(2.0, cov), cfg.c2)
    den = T.add(T.add(var_x, var_y), cfg.c2)
    return T.div(num, den)


def ssim_components(x, y, cfg: MsSsimConfig = MsSsimConfig()) -> tuple[Tensor, Tensor, Tensor]:
    """Luminance, contrast and structure maps over the local Gaussian window."""
    x, y = _as_images(x, "ssim_components"), _as_images(y, "ssim_components")
    if x.shape != y.shape:
        raise ShapeError(f"ssim_components: shapes differ {x.shape} vs {y.shape}")
    mu_x, mu_y, var_x, var_y, cov = _local_stats(x, y, cfg)
    sd_x = T.sqrt(T.clamp(var_x, 0.0))
    sd_y = T.sqrt(T.clamp(var_y, 0.0))
    lum = _luminance(mu_x, mu_y, cfg)
    con = T.div(T.add(T.mul(2.0, T.mul(sd_x, sd_y)), cfg.c2), T.add(T.add(var_x, var_y), cfg.c2))
    sd_xy = T.mul(sd_x, sd_y)
    struct = T.div(T.add(cov, cfg.c3), T.add(sd_xy, cfg.c3))
    return lum, con, struct


_FLOOR = 1e-8


def ms_ssim(x, y, cfg: MsSsimConfig = MsSsimConfig()) -> Tensor:
    """Per-image MS-SSIM, shape ``(N,)``; a scalar for a single (H, W) image."""
    single = T.as_tensor(x).ndim == 2
    x, y = _as_images(x, "ms_ssim"), _as_images(y, "ms_ssim")
    if x.shape != y.shape:
        raise ShapeError(f"ms_ssim: shapes differ {x.shape} vs {y.shape}")
    h, w = x.shape[2:]
    if min(h, w) < cfg.min_size():
        raise ShapeError(f"ms_ssim: image {h}x{w} too small for {cfg.scales} scales with a "
                         f"{cfg.window_size}-pixel window (need at least {cfg.min_size()})")
    value = None
    for j in range(cfg.scales):
        if j > 0:
            x, y = nn.avg_pool2d(x, 2), nn.avg_pool2d(y, 2)
        mu_x, mu_y, var_x, var_y, cov = _local_stats(x, y, cfg)
        cs = _contrast_structure(var_x, var_y, cov, cfg)
        if j == cfg.scales - 1:
            term = T.mul(_luminance(mu_x, mu_y, cfg), cs)
        else:
            term = cs
        term = T.reduce_mean(term, axis=(1, 2, 3))
        term = T.power(T.clamp(term, _FLOOR), cfg.weights[j])
        value = term if value is None else T.mul(value, term)
    return T.reshape(value, ()) if single else value


def ms_ssim_loss(x, y, cfg: MsSsimConfig = MsSsimConfig()) -> Tensor:
    """Mean of ``1 - MS-SSIM`` over the batch; lies in [0, 1]."""
    return T.reduce_mean(T.sub(1.0, ms_ssim(x, y, cfg)))


def mse(a, b) -> Tensor:
    d = T.sub(a, b)
    return T.reduce_mean(T.mul(d, d))


def smooth_l1(a, b, beta: float = 1.0) -> Tensor:
    if beta <= 0:
        raise ValueError("smooth_l1 needs beta > 0")
    a, b = T._coerce(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"smooth_l1: shapes differ {a.shape} vs {b.shape}")
    d = T.sub(a, b)
    ad = T.abs_(d)
    quad = T.mul(T.mul(d, d), 0.5 / beta)
    lin = T.sub(ad, 0.5 * beta)
    return T.reduce_mean(T.where(np.abs(d.data) < beta, quad, lin))


@dataclass(frozen=True)
class CrossEntropyConfig:
    n_classes: int = 9
    weights: tuple[float, ...] = field(default=None)

    def __post_init__(self):
        if self.weights is None:
            object.__setattr__(self, "weights", (1.0,) * self.n_classes)
        if len(self.weights) != self.n_classes or any(w <= 0 for w in self.weights):
            raise ValueError(f"need {self.n_classes} positive class weights")


def cross_entropy(logits, targets, cfg: CrossEntropyConfig = CrossEntropyConfig()) -> Tensor:
    """Class-weighted cross-entropy averaged over the batch (weights are not renormalised)."""
    logits = T.as_tensor(logits)
    targets = np.asarray(targets.data if isinstance(targets, Tensor) else targets).astype(np.int64)
    n, k = logits.shape
    if k != cfg.n_classes:
        raise ShapeError(f"cross_entropy: logits have {k} classes, config has {cfg.n_classes}")
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy: targets shape {targets.shape} does not match batch {n}")
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise ValueError(f"cross_entropy: target outside [0, {k}): {targets.min()}..{targets.max()}")
    weighted = np.zeros((n, k), dtype=logits.dtype)
    weighted[np.arange(n), targets] = np.asarray(cfg.weights, dtype=logits.dtype)[targets]
    picked = T.reduce_sum(T.mul(T.log_softmax(logits, axis=-1), weighted))
    return T.mul(picked, -1.0 / n)


# ---------------------------------------------------------------------------
# CARNet objective
# ---------------------------------------------------------------------------

LOSS_TERMS = ("recon", "pred", "latent", "sensor")


def carnet_loss_terms(rollout, frames, sensors=None, ssim_cfg: MsSsimConfig = MsSsimConfig(),
                      beta: float = 1.0) -> dict[str, Tensor]:
    """Per-step loss values.

    Returns ``recon`` (B, T), ``pred`` (B, T-1), ``latent`` (B, T-1) and, when
    sensor predictions are present, ``sensor`` (B, T-1).
    """
    frames = T.as_tensor(frames)
    b, t = frames.shape[:2]
    if t < 2:
        raise ValueError(f"window length must be at least 2, got {t}")
    img = frames.shape[2:]
    if rollout.recons is None or rollout.preds is None:
        raise ValueError("rollout has no decoded images; run it with decode=True")
    x_all = T.concat([T.reshape(frames, (b * t,) + img),
                      T.reshape(frames[:, 1:], (b * (t - 1),) + img)], axis=0)
    y_all = T.concat([T.reshape(rollout.recons, (b * t,) + img),
                      T.reshape(rollout.preds, (b * (t - 1),) + img)], axis=0)
    losses = T.sub(1.0, ms_ssim(x_all, y_all, ssim_cfg))
    out = {
        "recon": T.reshape(losses[:b * t], (b, t)),
        "pred": T.reshape(losses[b * t:], (b, t - 1)),
        "latent": _smooth_l1_rows(rollout.pred_latents, rollout.latents[:, 1:], beta),
    }
    if rollout.sensor_preds is not None:
        if sensors is None:
            raise ValueError("sensor predictions present but no sensor targets given")
        target = T.as_tensor(np.asarray(getattr(sensors, "data", sensors), dtype=rollout.sensor_preds.dtype))
        out["sensor"] = _smooth_l1_rows(rollout.sensor_preds, target[:, 1:], beta)
    return out


def _smooth_l1_rows(a: Tensor, b: Tensor, beta: float) -> Tensor:
    """smooth_l1 averaged over the last axis only: (B, T, D) -> (B, T)."""
    d = T.sub(a, b)
    quad = T.mul(T.mul(d, d), 0.5 / beta)
    lin = T.sub(T.abs_(d), 0.5 * beta)
    return T.reduce_mean(T.where(np.abs(d.data) < beta, quad, lin), axis=-1)


def carnet_total_loss(rollout, frames, sensors=None, ssim_cfg: MsSsimConfig = MsSsimConfig(),
                      beta: float = 1.0, use_sensors: bool = True) -> tuple[Tensor, dict[str, Tensor]]:
    """Reconstruction + prediction + latent (+ sensor) terms; ``total == sum(parts)``."""
    if not use_sensors:
        rollout = dataclasses.replace(rollout, sensor_preds=None)
    terms = carnet_loss_terms(rollout, frames, sensors, ssim_cfg, beta)
    parts = {name: T.reduce_mean(terms[name]) for name in LOSS_TERMS if name in terms}
    total = None
    for v in parts.values():
        total = v if total is None else T.add(total, v)
    return total, parts
