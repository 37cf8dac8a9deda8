"""Autoencoder pretraining, joint CARNet training and imitation learning."""
from __future__ import annotations

import copy
import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import losses
from . import tensor as T
from .data import Dataset
from .driving import N_ACTIONS, discretize_action  # noqa: F401  (re-exported)
from .metrics import MetricsLog
from .model import CARNet, Controller, WindowBatch, controller_forward
from .optim import Adam
from .rng import stream
from .tensor import Tensor, no_grad


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    lr_patience: int = 5        # halve the learning rate after this many epochs without improvement
    early_stop: int = 0         # stop after this many epochs without improvement (0 disables)
    seed: int = 0
    eval_batch: int = 256


@dataclass
class History:
    train: list[dict] = field(default_factory=list)
    val: list[dict] = field(default_factory=list)
    best_epoch: int = -1


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def minibatches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _value(x) -> float:
    return float(np.asarray(x.data if isinstance(x, Tensor) else x))


def check_finite(value: float, phase: str, epoch: int, detail: str = "") -> None:
    if not math.isfinite(value):
        raise TrainingDiverged(f"{phase}: loss became {value} at epoch {epoch}{detail}; "
                               f"try a lower learning rate")


def snapshot(module) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in module.state().items()}


def restore(module, snap: dict[str, np.ndarray]) -> None:
    for k, v in module.state().items():
        v.data = snap[k].copy()


class Plateau:
    """Tracks the best validation value; halves the learning rate and signals early stopping."""

    def __init__(self, opt: Adam, patience: int, early_stop: int):
        self.opt, self.patience, self.early_stop = opt, patience, early_stop
        self.best = math.inf
        self.since_best = 0
        self.since_cut = 0

    def update(self, value: float) -> tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        if value < self.best:
            self.best, self.since_best, self.since_cut = value, 0, 0
            return True, False
        self.since_best += 1
        self.since_cut += 1
        if self.patience and self.since_cut >= self.patience:
            self.opt.lr = self.opt.lr / 2
            self.since_cut = 0
        return False, bool(self.early_stop and self.since_best >= self.early_stop)


def _step(opt: Adam, loss: Tensor) -> None:
    opt.zero_grad()
    T.backward(loss)
    opt.step()


def _frame_rows(ds: Dataset, which: str) -> np.ndarray:
    starts = ds.window_indices(which)
    return (starts[:, None] + np.arange(ds.window)[None, :]).ravel()


def _frames(ds: Dataset, rows: np.ndarray) -> np.ndarray:
    return ds.frames[rows][:, None].astype(np.float32) / 255.0


# ---------------------------------------------------------------------------
# autoencoder pretraining
# ---------------------------------------------------------------------------

def autoencoder_loss(model: CARNet, frames) -> Tensor:
    return losses.ms_ssim_loss(frames, model.decode(model.encode(frames)), model.cfg.ssim)


def evaluate_autoencoder(model: CARNet, frames: np.ndarray, batch: int = 256) -> float:
    total = 0.0
    with model.evaluating(), no_grad():
        for i in range(0, len(frames), batch):
            x = frames[i:i + batch]
            total += _value(autoencoder_loss(model, x)) * len(x)
    return total / max(len(frames), 1)


def pretrain_autoencoder(model: CARNet, ds: Dataset, cfg: TrainConfig, log: MetricsLog | None = None) -> History:
    """Train encoder and decoder on the multi-scale SSIM reconstruction loss alone."""
    rng = stream(cfg.seed, "pretrain-ae")
    train_rows, val_rows = _frame_rows(ds, "train"), _frame_rows(ds, "val")
    val_frames = _frames(ds, val_rows)
    opt = Adam(model.autoencoder_parameters(), cfg.lr)
    plateau = Plateau(opt, cfg.lr_patience, cfg.early_stop)
    hist = History()
    best = snapshot(model)
    model.train()
    for epoch in range(cfg.epochs):
        run, seen = 0.0, 0
        for idx in minibatches(len(train_rows), cfg.batch_size, rng):
            x = _frames(ds, train_rows[idx])
            loss = autoencoder_loss(model, x)
            v = _value(loss)
            check_finite(v, "pretrain-ae", epoch)
            _step(opt, loss)
            run += v * len(idx)
            seen += len(idx)
        train_loss = run / max(seen, 1)
        val_loss = evaluate_autoencoder(model, val_frames, cfg.eval_batch) if len(val_frames) else train_loss
        hist.train.append({"epoch": epoch, "loss_recon": train_loss})
        hist.val.append({"epoch": epoch, "loss_recon": val_loss, "lr": opt.lr})
        if log:
            log.log("pretrain-ae/train", epoch, loss_total=train_loss, loss_recon=train_loss)
            log.log("pretrain-ae/val", epoch, loss_total=val_loss, loss_recon=val_loss)
        improved, stop = plateau.update(val_loss)
        if improved:
            best, hist.best_epoch = snapshot(model), epoch
        if stop:
            break
    if cfg.epochs:
        restore(model, best)
    return hist


# ---------------------------------------------------------------------------
# joint (ensemble) training
# ---------------------------------------------------------------------------

def window_batch(ds: Dataset, starts: np.ndarray, with_sensors: bool, with_actions: bool = False) -> WindowBatch:
    return WindowBatch(ds.window_frames(starts), ds.window_sensors(starts) if with_sensors else None,
                       ds.window_prev_actions(starts) if with_actions else None,
                       autopilot_class=ds.window_labels(starts))


def model_batch(model: CARNet, ds: Dataset, starts: np.ndarray) -> WindowBatch:
    return window_batch(ds, starts, bool(model.cfg.sensor_dim), bool(model.cfg.action_dim))


def ensemble_loss(model: CARNet, batch: WindowBatch, use_sensors: bool = True):
    out = model.rollout(batch)
    return losses.carnet_total_loss(out, batch.frames, batch.sensors, model.cfg.ssim, use_sensors=use_sensors)


def evaluate_ensemble(model: CARNet, ds: Dataset, starts: np.ndarray, batch: int = 64) -> dict[str, float]:
    sums: dict[str, float] = {}
    with model.evaluating(), no_grad():
        for i in range(0, len(starts), batch):
            s = starts[i:i + batch]
            total, parts = ensemble_loss(model, model_batch(model, ds, s))
            for k, v in [("total", total), *parts.items()]:
                sums[k] = sums.get(k, 0.0) + _value(v) * len(s)
    return {k: v / max(len(starts), 1) for k, v in sums.items()}


def _log_terms(log, phase, epoch, terms):
    if log:
        log.log(phase, epoch, loss_total=terms["total"], loss_recon=terms.get("recon"),
                loss_pred=terms.get("pred"), loss_latent=terms.get("latent"), loss_sensor=terms.get("sensor"))


def train_ensemble(model: CARNet, ds: Dataset, cfg: TrainConfig, *, train_windows: np.ndarray | None = None,
                   val_windows: np.ndarray | None = None, log: MetricsLog | None = None,
                   phase: str = "ensemble") -> History:
    """Train autoencoder and GRU together on the summed reconstruction, prediction, latent
    (and, with sensors, sensor) losses. The autoencoder is not frozen.

    Without ``val_windows`` (and with an empty validation split) the training loss
    drives the schedule. Epoch 0 in the returned history is the loss before any update.
    """
    rng = stream(cfg.seed, phase)
    train_windows = ds.window_indices("train") if train_windows is None else np.asarray(train_windows)
    val_windows = ds.window_indices("val") if val_windows is None else np.asarray(val_windows)
    params = model.autoencoder_parameters() + model.recurrent_parameters()
    opt = Adam(params, cfg.lr)
    plateau = Plateau(opt, cfg.lr_patience, cfg.early_stop)
    hist = History()
    best = snapshot(model)
    model.train()
    for epoch in range(cfg.epochs + 1):
        sums, seen = {}, 0
        for idx in minibatches(len(train_windows), cfg.batch_size, rng):
            batch = model_batch(model, ds, train_windows[idx])
            total, parts = ensemble_loss(model, batch)
            v = _value(total)
            check_finite(v, phase, epoch, f" (terms {({k: _value(p) for k, p in parts.items()})})")
            if epoch > 0:
                _step(opt, total)
            for k, p in [("total", v), *((k, _value(p)) for k, p in parts.items())]:
                sums[k] = sums.get(k, 0.0) + p * len(idx)
            seen += len(idx)
        terms = {k: s / max(seen, 1) for k, s in sums.items()}
        hist.train.append({"epoch": epoch, **terms})
        _log_terms(log, f"{phase}/train", epoch, terms)
        if len(val_windows):
            vterms = evaluate_ensemble(model, ds, val_windows, cfg.eval_batch // 4 or 1)
            hist.val.append({"epoch": epoch, **vterms, "lr": opt.lr})
            _log_terms(log, f"{phase}/val", epoch, vterms)
            monitor = vterms["total"]
        else:
            monitor = terms["total"]
        improved, stop = plateau.update(monitor)
        if improved:
            best, hist.best_epoch = snapshot(model), epoch
        if stop:
            break
    if len(val_windows):
        restore(model, best)
    return hist


def encode_all(model: CARNet, ds: Dataset, batch: int = 256) -> np.ndarray:
    """Latent for every frame in the dataset (eval mode, no gradients)."""
    out = []
    with model.evaluating(), no_grad():
        for i in range(0, ds.n_steps, batch):
            x = ds.frames[i:i + batch][:, None].astype(np.float32) / 255.0
            out.append(model.encode(x).data)
    return np.concatenate(out)


def train_latent_dynamics(model: CARNet, ds: Dataset, cfg: TrainConfig, log: MetricsLog | None = None,
                          phase: str = "dynamics") -> History:
    """Fit only the GRU on latent prediction over a frozen autoencoder's cached latents."""
    rng = stream(cfg.seed, phase)
    lat = encode_all(model, ds)
    win = ds.window
    # the sensor readout gets no gradient from the latent term, so it stays out of the optimizer
    params = model.gru.parameters() + (model.sensor_embed.parameters() if model.cfg.sensor_dim else [])
    opt = Adam(params, cfg.lr)
    plateau = Plateau(opt, cfg.lr_patience, cfg.early_stop)
    hist = History()
    best = snapshot(model)

    def loss_for(starts):
        z = lat[starts[:, None] + np.arange(win)[None, :]]
        s = ds.window_sensors(starts) if model.cfg.sensor_dim else None
        a = ds.window_prev_actions(starts) if model.cfg.action_dim else None
        h = model.propagate(Tensor(z), s, a, steps=win - 1)
        pred = h[:, :, :model.cfg.latent_size] if model.cfg.sensor_dim else h
        return losses.smooth_l1(pred, Tensor(z[:, 1:]))

    train_w, val_w = ds.window_indices("train"), ds.window_indices("val")
    for epoch in range(cfg.epochs):
        run = 0.0
        for idx in minibatches(len(train_w), cfg.batch_size, rng):
            loss = loss_for(train_w[idx])
            v = _value(loss)
            check_finite(v, phase, epoch)
            _step(opt, loss)
            run += v * len(idx)
        with no_grad():
            val = _value(loss_for(val_w)) if len(val_w) else run / len(train_w)
        hist.train.append({"epoch": epoch, "latent": run / len(train_w)})
        hist.val.append({"epoch": epoch, "latent": val, "lr": opt.lr})
        if log:
            log.log(f"{phase}/val", epoch, loss_total=val, loss_latent=val)
        improved, stop = plateau.update(val)
        if improved:
            best, hist.best_epoch = snapshot(model), epoch
        if stop:
            break
    if cfg.epochs:
        restore(model, best)
    return hist


# ---------------------------------------------------------------------------
# imitation learning
# ---------------------------------------------------------------------------

@dataclass
class ImitationConfig(TrainConfig):
    epochs: int = 12
    lr: float = 3e-3
    joint: bool = True          # fine-tune encoder and GRU together with the controller
    backbone_lr: float = 1e-3
    class_weights: tuple[float, ...] | None = None
    mirror: bool = True         # add left-right mirrored windows with steering classes swapped


def mirror_labels(labels: np.ndarray) -> np.ndarray:
    """Class of the mirrored action: steering index ``i -> 2 - i``, acceleration unchanged."""
    labels = np.asarray(labels)
    return 3 * (2 - labels // 3) + labels % 3


def mirror_frames(frames: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(frames[..., ::-1])


def make_controller(model: CARNet, seed: int) -> Controller:
    return Controller(model.cfg.latent_size, model.cfg.controller_widths, stream(seed, "init", "controller"),
                      dtype=model.dtype)


def _observed(ds: Dataset, starts: np.ndarray) -> np.ndarray:
    """The first ``T - 1`` frames of each window: what the controller has seen before acting."""
    return ds.window_frames(starts, ds.window - 1)


def imitation_features(model: CARNet, ds: Dataset, starts: np.ndarray, batch: int = 256,
                       mirror: bool = False) -> np.ndarray:
    out = []
    with model.evaluating(), no_grad():
        for i in range(0, len(starts), batch):
            frames = _observed(ds, starts[i:i + batch])
            out.append(model.features(mirror_frames(frames) if mirror else frames).data)
    return np.concatenate(out) if out else np.zeros((0, 2 * model.cfg.latent_size), dtype=model.dtype)


def predict_actions(model: CARNet, controller: Controller, ds: Dataset, starts: np.ndarray,
                    batch: int = 256) -> np.ndarray:
    feats = imitation_features(model, ds, starts, batch)
    with no_grad():
        return np.argmax(controller(feats).data, axis=-1) if len(feats) else np.zeros(0, dtype=np.int64)


def accuracy(pred: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(pred == labels)) if len(labels) else float("nan")


def majority_baseline(ds: Dataset, split: str = "test") -> tuple[int, float]:
    """Most frequent training class and its accuracy on ``split``."""
    cls = int(np.argmax(ds.label_counts("train")))
    return cls, accuracy(np.full(len(ds.window_indices(split)), cls), ds.window_labels(ds.window_indices(split)))


def train_imitation(model: CARNet, ds: Dataset, cfg: ImitationConfig, log: MetricsLog | None = None,
                    phase: str = "imitation") -> tuple[Controller, History]:
    """Train a controller on (latest latent, predicted next latent) to reproduce autopilot classes.

    With ``cfg.joint`` the encoder and GRU are fine-tuned with the controller;
    otherwise features are computed once from the frozen backbone. The weights
    with the best validation accuracy are kept.
    """
    rng = stream(cfg.seed, phase)
    controller = make_controller(model, cfg.seed)
    ce_cfg = losses.CrossEntropyConfig(N_ACTIONS, cfg.class_weights)
    train_w, val_w = ds.window_indices("train"), ds.window_indices("val")
    train_y, val_y = ds.window_labels(train_w), ds.window_labels(val_w)
    opt = Adam(controller.parameters(), cfg.lr)
    backbone = []
    if cfg.joint:
        backbone = model.encoder.parameters() + model.recurrent_parameters()
        bb_opt = Adam(backbone, cfg.backbone_lr)
        model.train()
    else:
        train_f = imitation_features(model, ds, train_w, cfg.eval_batch)
        if cfg.mirror:
            train_f = np.concatenate([train_f, imitation_features(model, ds, train_w, cfg.eval_batch, mirror=True)])
    n_train = len(train_w) * (2 if cfg.mirror else 1)
    all_y = np.concatenate([train_y, mirror_labels(train_y)]) if cfg.mirror else train_y
    plateau = Plateau(opt, cfg.lr_patience, cfg.early_stop)
    hist = History()
    best = (snapshot(controller), snapshot(model) if cfg.joint else None)
    for epoch in range(cfg.epochs):
        run, correct = 0.0, 0
        for idx in minibatches(n_train, cfg.batch_size, rng):
            y = all_y[idx]
            if cfg.joint:
                frames = _observed(ds, train_w[idx % len(train_w)])
                flip = idx >= len(train_w)
                frames[flip] = mirror_frames(frames[flip])
                feats = model.features(frames)
            else:
                feats = Tensor(train_f[idx])
            logits = controller(feats)
            loss = losses.cross_entropy(logits, y, ce_cfg)
            v = _value(loss)
            check_finite(v, phase, epoch)
            opt.zero_grad()
            if cfg.joint:
                bb_opt.zero_grad()
            T.backward(loss)
            opt.step()
            if cfg.joint:
                bb_opt.step()
            run += v * len(idx)
            correct += int(np.sum(np.argmax(logits.data, -1) == y))
        val_acc = accuracy(predict_actions(model, controller, ds, val_w, cfg.eval_batch), val_y)
        hist.train.append({"epoch": epoch, "loss": run / n_train, "accuracy": correct / n_train})
        hist.val.append({"epoch": epoch, "accuracy": val_acc, "lr": opt.lr})
        if log:
            log.log(f"{phase}/train", epoch, loss_total=run / n_train, accuracy=correct / n_train)
            log.log(f"{phase}/val", epoch, accuracy=val_acc)
        improved, stop = plateau.update(-val_acc)
        if cfg.joint:
            bb_opt.lr = opt.lr * cfg.backbone_lr / cfg.lr
        if improved:
            best, hist.best_epoch = (snapshot(controller), snapshot(model) if cfg.joint else None), epoch
        if stop:
            break
    if cfg.epochs:
        restore(controller, best[0])
        if cfg.joint:
            restore(model, best[1])
    return controller, hist


@dataclass
class ImitationReport:
    accuracies: list[float]
    seeds: list[int]
    majority_class: int
    majority_accuracy: float
    split: str = "test"

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))

    def summary(self) -> str:
        return (f"{self.split} accuracy {100 * self.mean:.2f} ± {100 * self.std:.2f} % over "
                f"{len(self.seeds)} seeds (majority class {self.majority_class}: "
                f"{100 * self.majority_accuracy:.2f} %)")


def imitation_report(backbone: CARNet, ds: Dataset, cfg: ImitationConfig, seeds=(0, 1, 2, 3, 4),
                     split: str = "test", log: MetricsLog | None = None):
    """Train one controller per seed from the same backbone; accuracy on ``split`` for each."""
    accs, trained = [], []
    for s in seeds:
        model = copy.deepcopy(backbone) if cfg.joint else backbone
        run_cfg = dataclasses.replace(cfg, seed=s)
        controller, _ = train_imitation(model, ds, run_cfg, log=log, phase=f"imitation/seed{s}")
        starts = ds.window_indices(split)
        acc = accuracy(predict_actions(model, controller, ds, starts, cfg.eval_batch), ds.window_labels(starts))
        if log:
            log.log(f"imitation/{split}", s, accuracy=acc)
        accs.append(acc)
        trained.append((model, controller))
    cls, maj = majority_baseline(ds, split)
    return ImitationReport(accs, list(seeds), cls, maj, split), trained
