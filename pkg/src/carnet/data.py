"""Autopilot demonstrations: generation, windowing, splitting and the on-disk episode layout.

Layout under a dataset directory::

    dataset.txt                  key = value summary (seed, counts, window)
    index.csv                    window,episode,start,stop,split
    episode_0000/frame_0000.pgm  8-bit binary PGM, one per time step
    episode_0000/steps.csv       t,steering,throttle,brake,steer,accel,action

Row ``t`` of ``steps.csv`` holds the sensors observed with frame ``t`` and the
autopilot action chosen at frame ``t`` (which produces frame ``t + 1``).
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import driving
from .driving import DrivingEnv, EnvConfig
from .rng import stream

SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)


@dataclass
class Dataset:
    frames: np.ndarray        # (N, H, W) uint8
    sensors: np.ndarray       # (N, 3) float32
    actions: np.ndarray       # (N,) int64, autopilot class chosen at each step
    episode: np.ndarray       # (N,) int64
    step: np.ndarray          # (N,) int64, index within the episode
    windows: np.ndarray       # (M,) int64, global start index of each window
    split: np.ndarray         # (M,) int8 index into SPLITS
    window: int = 4
    seed: int = 0

    @property
    def n_steps(self) -> int:
        return len(self.actions)

    def window_indices(self, which: str | None = None) -> np.ndarray:
        if which is None:
            return self.windows
        return self.windows[self.split == SPLITS.index(which)]

    def window_frames(self, starts: np.ndarray, length: int | None = None) -> np.ndarray:
        """(B, length, 1, H, W) float32 in [0, 1]."""
        length = self.window if length is None else length
        idx = np.asarray(starts)[:, None] + np.arange(length)[None, :]
        return (self.frames[idx].astype(np.float32) / 255.0)[:, :, None]

    def window_sensors(self, starts: np.ndarray, length: int | None = None) -> np.ndarray:
        length = self.window if length is None else length
        idx = np.asarray(starts)[:, None] + np.arange(length)[None, :]
        return self.sensors[idx]

    def window_prev_actions(self, starts: np.ndarray, length: int | None = None) -> np.ndarray:
        """One-hot of the action that produced each frame; all zeros at an episode's first frame."""
        length = self.window if length is None else length
        idx = np.asarray(starts)[:, None] + np.arange(length)[None, :]
        out = np.zeros(idx.shape + (driving.N_ACTIONS,), dtype=np.float32)
        has_prev = self.step[idx] > 0
        prev = self.actions[np.maximum(idx - 1, 0)]
        out[has_prev, prev[has_prev]] = 1.0
        return out

    def window_labels(self, starts: np.ndarray) -> np.ndarray:
        """Autopilot class at the last frame the controller sees (frame ``T - 2``)."""
        return self.actions[np.asarray(starts) + self.window - 2]

    def label_counts(self, which: str | None = None) -> np.ndarray:
        return np.bincount(self.window_labels(self.window_indices(which)), minlength=driving.N_ACTIONS)


def make_windows(episode_lengths: list[int], window: int) -> np.ndarray:
    """Non-overlapping, intra-episode window starts (global indices)."""
    starts, offset = [], 0
    for n in episode_lengths:
        starts.extend(range(offset, offset + n - window + 1, window))
        offset += n
    return np.asarray(starts, dtype=np.int64)


def split_windows(n: int, seed: int, fractions=SPLIT_FRACTIONS) -> np.ndarray:
    """Shuffled 70/15/15 partition of ``n`` windows; returns a split code per window."""
    order = stream(seed, "split").permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    codes = np.empty(n, dtype=np.int8)
    codes[order[:n_train]] = 0
    codes[order[n_train:n_train + n_val]] = 1
    codes[order[n_train + n_val:]] = 2
    return codes


def generate_dataset(n_steps: int, seed: int, window: int = 4, episode_steps: int = 200,
                     env_cfg: EnvConfig | None = None) -> Dataset:
    """Roll the autopilot until ``n_steps`` frames are collected."""
    if n_steps < window:
        raise ValueError(f"n_steps ({n_steps}) must be at least the window length ({window})")
    env_cfg = env_cfg or EnvConfig()
    env = DrivingEnv(env_cfg, seed=seed)
    pilot = driving.Autopilot()
    frames, sensors, actions, episode, steps, lengths = [], [], [], [], [], []
    total, ep = 0, 0
    while total < n_steps:
        frame, sens = env.reset(seed=int(stream(seed, "dataset-episode", ep).integers(2 ** 31)))
        budget = min(episode_steps, n_steps - total)
        t = 0
        while True:
            act = pilot(env.state)
            frames.append(np.round(frame * 255).astype(np.uint8)[0])
            sensors.append(sens)
            actions.append(act.index)
            episode.append(ep)
            steps.append(t)
            t += 1
            if t >= budget:
                break
            frame, sens, _, done, _ = env.step(act)
            if done:
                break
        lengths.append(t)
        total += t
        ep += 1
    starts = make_windows(lengths, window)
    return Dataset(np.stack(frames), np.stack(sensors).astype(np.float32), np.asarray(actions, dtype=np.int64),
                   np.asarray(episode, dtype=np.int64), np.asarray(steps, dtype=np.int64),
                   starts, split_windows(len(starts), seed), window, seed)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def write_pgm(path: Path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts, pos = [], 0
    while len(parts) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        parts.append(raw[pos:end].decode("ascii"))
        pos = end
    if parts[0] != "P5" or parts[3] != "255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(parts[1]), int(parts[2])
    data = raw[pos + 1:pos + 1 + w * h]
    if len(data) != w * h:
        raise ValueError(f"{path}: truncated PGM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def _fmt(x: float) -> str:
    return repr(float(x))


def save_dataset(ds: Dataset, root: str | Path) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for ep in np.unique(ds.episode):
        rows = np.flatnonzero(ds.episode == ep)
        d = root / f"episode_{ep:04d}"
        d.mkdir(exist_ok=True)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "steering", "throttle", "brake", "steer", "accel", "action"])
        for i in rows:
            a = driving.Action.from_index(int(ds.actions[i]))
            write_pgm(d / f"frame_{ds.step[i]:04d}.pgm", ds.frames[i])
            w.writerow([int(ds.step[i]), *(_fmt(v) for v in ds.sensors[i]), _fmt(a.steer), _fmt(a.accel),
                        int(ds.actions[i])])
        (d / "steps.csv").write_text(buf.getvalue())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["window", "episode", "start", "stop", "split"])
    for k, (s, code) in enumerate(zip(ds.windows, ds.split)):
        w.writerow([k, int(ds.episode[s]), int(ds.step[s]), int(ds.step[s]) + ds.window, SPLITS[code]])
    (root / "index.csv").write_text(buf.getvalue())
    counts = ", ".join(str(int(c)) for c in ds.label_counts())
    (root / "dataset.txt").write_text(
        f"seed = {ds.seed}\nwindow = {ds.window}\nsteps = {ds.n_steps}\n"
        f"episodes = {len(np.unique(ds.episode))}\nwindows = {len(ds.windows)}\nlabel_counts = {counts}\n")
    return root


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    if not (root / "index.csv").exists():
        raise FileNotFoundError(f"{root}: no index.csv; not a dataset directory")
    meta = dict(line.split(" = ", 1) for line in (root / "dataset.txt").read_text().splitlines() if " = " in line)
    frames, sensors, actions, episode, steps = [], [], [], [], []
    first_row = {}
    for d in sorted(root.glob("episode_*")):
        ep = int(d.name.split("_")[1])
        first_row[ep] = len(actions)
        with open(d / "steps.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                t = int(row["t"])
                frames.append(read_pgm(d / f"frame_{t:04d}.pgm"))
                sensors.append([float(row["steering"]), float(row["throttle"]), float(row["brake"])])
                actions.append(int(row["action"]))
                episode.append(ep)
                steps.append(t)
    starts, split = [], []
    with open(root / "index.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            starts.append(first_row[int(row["episode"])] + int(row["start"]))
            split.append(SPLITS.index(row["split"]))
    return Dataset(np.stack(frames), np.asarray(sensors, dtype=np.float32), np.asarray(actions, dtype=np.int64),
                   np.asarray(episode, dtype=np.int64), np.asarray(steps, dtype=np.int64),
                   np.asarray(starts, dtype=np.int64), np.asarray(split, dtype=np.int8),
                   int(meta.get("window", 4)), int(meta.get("seed", 0)))
