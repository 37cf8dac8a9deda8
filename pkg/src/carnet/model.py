"""CARNet: convolutional autoencoder + GRU over latent windows, and the controller head."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .losses import MsSsimConfig
from .rng import stream
from .tensor import DEFAULT_DTYPE, ShapeError, Tensor

N_CLASSES = 9


@dataclass(frozen=True)
class CarnetConfig:
    input_size: int = 64
    latent_size: int = 32
    window: int = 4
    channels: tuple[int, ...] = (2, 4, 8, 16, 32)
    sensor_dim: int = 0
    sensor_embed: int = 16
    action_dim: int = 0
    use_attention: bool = False
    attention_dim: int = 2
    attention_k: int = 3
    attention_relative: bool = True
    controller_widths: tuple[int, ...] | None = None
    ssim: MsSsimConfig = field(default_factory=MsSsimConfig.desk)

    def __post_init__(self):
        if self.window < 2:
            raise ValueError(f"window must be at least 2, got {self.window}")
        sizes = self.encoder_sizes()
        if sizes[-1] != 4:
            raise ValueError(f"channel ladder {self.channels} does not bring {self.input_size} "
                             f"down to 4x4 (got {sizes[-1]})")
        if self.controller_widths is None:
            L = self.latent_size
            object.__setattr__(self, "controller_widths", (L, L, max(L // 2, 1)))

    @property
    def rnn_hidden(self) -> int:
        return self.latent_size + (self.sensor_embed if self.sensor_dim else 0)

    @property
    def rnn_input(self) -> int:
        return self.rnn_hidden + self.action_dim

    @property
    def encoder_in_channels(self) -> int:
        return self.attention_dim if self.use_attention else 1

    def encoder_strides(self) -> list[int]:
        size, out = self.input_size, []
        for _ in self.channels:
            s = 2 if size > 4 else 1
            out.append(s)
            size //= s
        return out

    def encoder_sizes(self) -> list[int]:
        size, out = self.input_size, []
        for s in self.encoder_strides():
            size //= s
            out.append(size)
        return out

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ssim"] = dataclasses.asdict(self.ssim)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CarnetConfig":
        d = dict(d)
        ssim = d.pop("ssim", None)
        for key in ("channels", "controller_widths"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        if ssim is not None:
            ssim = dict(ssim)
            if ssim.get("weights") is not None:
                ssim["weights"] = tuple(ssim["weights"])
            d["ssim"] = MsSsimConfig(**ssim)
        return cls(**d)

    @classmethod
    def full(cls, **kw) -> "CarnetConfig":
        base = dict(input_size=256, latent_size=128, channels=(2, 4, 8, 16, 32, 64),
                    ssim=MsSsimConfig.full())
        base.update(kw)
        return cls(**base)

    @classmethod
    def desk(cls, **kw) -> "CarnetConfig":
        return cls(**kw)

    @classmethod
    def tiny(cls, **kw) -> "CarnetConfig":
        base = dict(input_size=8, latent_size=4, window=3, channels=(2,), sensor_embed=2,
                    ssim=MsSsimConfig(scales=1, weights=(1.0,), window_size=3))
        base.update(kw)
        return cls(**base)


@dataclass
class WindowBatch:
    frames: np.ndarray                      # (B, T, 1, H, W) in [0, 1]
    sensors: np.ndarray | None = None       # (B, T, sensor_dim)
    actions: np.ndarray | None = None       # (B, T, action_dim), action that led to each frame
    autopilot_class: np.ndarray | None = None   # (B,), action taken at frame T-2

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def window(self) -> int:
        return self.frames.shape[1]


@dataclass
class RolloutOutput:
    latents: Tensor                 # (B, T, L)     l_0 .. l_{T-1}
    hiddens: Tensor                 # (B, T-1, H)   h_1 .. h_{T-1}
    pred_latents: Tensor            # (B, T-1, L)   l_{1|0} .. l_{T-1|T-2}
    recons: Tensor | None = None    # (B, T, 1, H, W)
    preds: Tensor | None = None     # (B, T-1, 1, H, W)
    sensor_preds: Tensor | None = None  # (B, T-1, S)


# ---------------------------------------------------------------------------
# encoder / decoder
# ---------------------------------------------------------------------------

def _conv_bn_relu(c_in, c_out, k, stride, padding, rng, dtype):
    return [nn.Conv2d(c_in, c_out, k, rng, stride=stride, padding=padding, dtype=dtype),
            nn.BatchNorm2d(c_out, dtype=dtype), nn.ReLU()]


def _tconv_bn_relu(c_in, c_out, k, stride, padding, output_padding, rng, dtype):
    return [nn.ConvTranspose2d(c_in, c_out, k, rng, stride=stride, padding=padding,
                               output_padding=output_padding, dtype=dtype),
            nn.BatchNorm2d(c_out, dtype=dtype), nn.ReLU()]


class Encoder(nn.Module):
    """Blocks of two 3x3 convolutions (first strided), then a 4x4 projection to the latent."""

    def __init__(self, cfg: CarnetConfig, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        if cfg.use_attention:
            self.attention = nn.LocalSelfAttention(1, cfg.attention_dim, cfg.attention_k, rng,
                                                   relative=cfg.attention_relative, dtype=dtype)
        layers = []
        c_prev = cfg.encoder_in_channels
        for c, s in zip(cfg.channels, cfg.encoder_strides()):
            layers += _conv_bn_relu(c_prev, c, 3, s, 1, rng, dtype)
            layers += _conv_bn_relu(c, c, 3, 1, 1, rng, dtype)
            c_prev = c
        layers += _conv_bn_relu(c_prev, cfg.latent_size, 4, 1, 0, rng, dtype)
        self.body = nn.Sequential(*layers)
        object.__setattr__(self, "cfg", cfg)

    def forward(self, x):
        cfg = self.cfg
        x = T.as_tensor(x)
        if x.shape[1:] != (1, cfg.input_size, cfg.input_size):
            raise ShapeError(f"encode: expected frames (N, 1, {cfg.input_size}, {cfg.input_size}), got {x.shape}")
        if cfg.use_attention:
            x = self.attention(x)
        y = self.body(x)
        return T.reshape(y, (y.shape[0], cfg.latent_size))

    def block_shapes(self, n: int = 1) -> list[tuple[int, ...]]:
        """Output shape after each conv block (pairs), then the projection."""
        cfg = self.cfg
        shapes = [(c, s, s) for c, s in zip(cfg.channels, cfg.encoder_sizes())]
        return shapes + [(cfg.latent_size, 1, 1)]


class Decoder(nn.Module):
    """Mirror of :class:`Encoder` with transposed convolutions and a sigmoid output."""

    def __init__(self, cfg: CarnetConfig, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        chans = list(reversed(cfg.channels))
        sizes = list(reversed(cfg.encoder_sizes()))
        layers = _tconv_bn_relu(cfg.latent_size, chans[0], 4, 1, 0, 0, rng, dtype)
        layers += _tconv_bn_relu(chans[0], chans[0], 3, 1, 1, 0, rng, dtype)
        for i in range(1, len(chans)):
            s = 2 if sizes[i] > sizes[i - 1] else 1
            layers += _tconv_bn_relu(chans[i - 1], chans[i], 3, s, 1, s - 1, rng, dtype)
            layers += _tconv_bn_relu(chans[i], chans[i], 3, 1, 1, 0, rng, dtype)
        s_last = cfg.input_size // sizes[-1]
        layers += [nn.ConvTranspose2d(chans[-1], 1, 3, rng, stride=s_last, padding=1,
                                      output_padding=s_last - 1, dtype=dtype), nn.Sigmoid()]
        self.body = nn.Sequential(*layers)
        object.__setattr__(self, "cfg", cfg)

    def forward(self, latent):
        cfg = self.cfg
        latent = T.as_tensor(latent)
        if latent.ndim != 2 or latent.shape[1] != cfg.latent_size:
            raise ShapeError(f"decode: expected latents (N, {cfg.latent_size}), got {latent.shape}")
        return self.body(T.reshape(latent, latent.shape + (1, 1)))

    def block_shapes(self) -> list[tuple[int, ...]]:
        cfg = self.cfg
        chans = list(reversed(cfg.channels))
        sizes = list(reversed(cfg.encoder_sizes()))
        return [(c, s, s) for c, s in zip(chans, sizes)] + [(1, cfg.input_size, cfg.input_size)]


class Controller(nn.Module):
    """MLP over stacked (previous latent, predicted latent) -> 9 action logits."""

    def __init__(self, latent_size: int, widths: tuple[int, ...], rng: np.random.Generator,
                 n_out: int = N_CLASSES, dtype=DEFAULT_DTYPE):
        super().__init__()
        dims = [2 * latent_size, *widths, n_out]
        layers = []
        for i in range(len(dims) - 1):
            layers.append(nn.Linear(dims[i], dims[i + 1], rng, dtype=dtype))
            if i < len(dims) - 2:
                layers.append(nn.ReLU())
        self.body = nn.Sequential(*layers)
        object.__setattr__(self, "latent_size", latent_size)
        object.__setattr__(self, "dims", dims)

    def forward(self, features):
        features = T.as_tensor(features)
        if features.shape[-1] != 2 * self.latent_size:
            raise ShapeError(f"controller: expected {2 * self.latent_size} input features, got {features.shape}")
        return self.body(features)


def controller_forward(controller: Controller, l_prev, l_pred) -> Tensor:
    l_prev, l_pred = T.as_tensor(l_prev), T.as_tensor(l_pred)
    if l_prev.shape != l_pred.shape or l_prev.shape[-1] != controller.latent_size:
        raise ShapeError(f"controller: latent shapes {l_prev.shape} / {l_pred.shape} "
                         f"do not match latent size {controller.latent_size}")
    return controller(T.concat([l_prev, l_pred], axis=-1))


# ---------------------------------------------------------------------------
# CARNet
# ---------------------------------------------------------------------------

class CARNet(nn.Module):
    def __init__(self, cfg: CarnetConfig, seed: int = 0, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.encoder = Encoder(cfg, stream(seed, "init", "encoder"), dtype)
        self.decoder = Decoder(cfg, stream(seed, "init", "decoder"), dtype)
        g = stream(seed, "init", "gru")
        self.gru = nn.GRUCell(cfg.rnn_input, cfg.rnn_hidden, g, dtype=dtype)
        if cfg.sensor_dim:
            self.sensor_embed = nn.Linear(cfg.sensor_dim, cfg.sensor_embed, g, dtype=dtype, bias=False)
            self.sensor_readout = nn.Linear(cfg.rnn_hidden, cfg.sensor_dim, g, dtype=dtype)
        object.__setattr__(self, "cfg", cfg)
        object.__setattr__(self, "dtype", np.dtype(dtype))

    def autoencoder_parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.decoder.parameters()

    def recurrent_parameters(self) -> list[Tensor]:
        ps = self.gru.parameters()
        if self.cfg.sensor_dim:
            ps += self.sensor_embed.parameters() + self.sensor_readout.parameters()
        return ps

    def encode(self, frames) -> Tensor:
        return self.encoder(frames)

    def decode(self, latents) -> Tensor:
        return self.decoder(latents)

    def _check(self, sensors, actions):
        cfg = self.cfg
        if cfg.sensor_dim and sensors is None:
            raise ValueError("model is sensor-conditioned but the batch has no sensors")
        if cfg.action_dim and actions is None:
            raise ValueError("model is action-conditioned but the batch has no actions")

    def propagate(self, latents: Tensor, sensors=None, actions=None, steps: int | None = None) -> Tensor:
        """Run the GRU from h_0 = 0 over ``steps`` inputs; returns (B, steps, hidden)."""
        cfg = self.cfg
        b, t = latents.shape[:2]
        steps = t if steps is None else steps
        if cfg.sensor_dim:
            s = T.as_tensor(np.asarray(sensors, dtype=self.dtype))
            emb = self.sensor_embed(T.reshape(s, (b * s.shape[1], cfg.sensor_dim)))
            emb = T.reshape(emb, (b, s.shape[1], cfg.sensor_embed))
        h = Tensor(np.zeros((b, cfg.rnn_hidden), dtype=self.dtype))
        hs = []
        for k in range(steps):
            parts = [latents[:, k]]
            if cfg.sensor_dim:
                parts.append(emb[:, k])
            if cfg.action_dim:
                parts.append(Tensor(np.asarray(actions[:, k], dtype=self.dtype)))
            inp = parts[0] if len(parts) == 1 else T.concat(parts, axis=-1)
            h = self.gru(h, inp)
            hs.append(h)
        return T.stack(hs, axis=1)

    def rollout(self, batch: WindowBatch, decode: bool = True) -> RolloutOutput:
        cfg = self.cfg
        self._check(batch.sensors, batch.actions)
        frames = np.asarray(batch.frames, dtype=self.dtype)
        b, t = frames.shape[:2]
        if t < 2:
            raise ValueError(f"window length must be at least 2, got {t}")
        lat = self.encode(frames.reshape((b * t,) + frames.shape[2:]))
        latents = T.reshape(lat, (b, t, cfg.latent_size))
        hiddens = self.propagate(latents, batch.sensors, batch.actions, steps=t - 1)
        pred_latents = hiddens[:, :, :cfg.latent_size] if cfg.sensor_dim else hiddens
        sensor_preds = None
        if cfg.sensor_dim:
            sp = self.sensor_readout(T.reshape(hiddens, (b * (t - 1), cfg.rnn_hidden)))
            sensor_preds = T.reshape(sp, (b, t - 1, cfg.sensor_dim))
        out = RolloutOutput(latents, hiddens, pred_latents, sensor_preds=sensor_preds)
        if decode:
            z = T.concat([lat, T.reshape(pred_latents, (b * (t - 1), cfg.latent_size))], axis=0)
            imgs = self.decode(z)
            shape = imgs.shape[1:]
            out.recons = T.reshape(imgs[:b * t], (b, t) + shape)
            out.preds = T.reshape(imgs[b * t:], (b, t - 1) + shape)
        return out

    def features(self, frames, sensors=None, actions=None) -> Tensor:
        """Controller input ``[l_{k-1}, l_{k|k-1}]`` from the ``k`` frames given, (B, 2L)."""
        cfg = self.cfg
        self._check(sensors, actions)
        frames = np.asarray(frames, dtype=self.dtype)
        b, k = frames.shape[:2]
        lat = self.encode(frames.reshape((b * k,) + frames.shape[2:]))
        latents = T.reshape(lat, (b, k, cfg.latent_size))
        hiddens = self.propagate(latents, sensors, actions, steps=k)
        return T.concat([latents[:, k - 1], hiddens[:, k - 1, :cfg.latent_size]], axis=-1)

    def zero_(self) -> "CARNet":
        """Zero every parameter except batch-norm scales (used by structural tests)."""
        for name, p in self.named_parameters():
            is_bn_scale = name.endswith(".weight") and p.ndim == 1
            p.data = np.ones_like(p.data) if is_bn_scale else np.zeros_like(p.data)
        return self


def encode(model: CARNet, frame) -> Tensor:
    return model.encode(frame)


def decode(model: CARNet, latent) -> Tensor:
    return model.decode(latent)


def rollout(model: CARNet, batch: WindowBatch, decode: bool = True) -> RolloutOutput:
    return model.rollout(batch, decode=decode)
