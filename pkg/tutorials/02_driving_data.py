"""
The synthetic driving world
===========================

A kinematic car follows a procedurally curved road. Frames are 64x64
grayscale renders, an autopilot labels every step with one of nine
(steer, accel) classes and the reward scores each transition.
"""
import numpy as np

from carnet import data, driving
from carnet.driving import Action, DrivingEnv, EnvState
from carnet.training import majority_baseline

env = DrivingEnv(seed=0)
frame, sensors = env.reset(seed=1)
print("frame", frame.shape, "sensors (steering, throttle, brake)", np.round(sensors, 3))

# drive with the autopilot for a few seconds
total = 0.0
for t in range(50):
    act = driving.autopilot(env.state)
    frame, sensors, r, done, events = env.step(act)
    total += r
print(f"autopilot reward over 50 steps {total:.2f}, speed {env.state.speed:.2f} m/s")

# three hand-checked reward values
print(driving.reward(EnvState(), Action(0.0, 0.0), {}))
print(driving.reward(EnvState(collided=True), Action(0.0, 0.0), {"collision": True}))
print(driving.reward(EnvState(speed=10.0), Action(0.0, 0.0), {}))

# a small dataset: episodes are cut into non-overlapping windows, split 70/15/15
ds = data.generate_dataset(2000, seed=0)
print("windows per split", {s: len(ds.window_indices(s)) for s in data.SPLITS})
print("label counts", ds.label_counts().tolist())
cls, acc = majority_baseline(ds, "test")
print(f"majority class {cls} covers {100 * acc:.1f}% of the test windows")

# frames are stored as PGM files next to a CSV index
root = data.save_dataset(ds, "tutorial_runs/data")
print("saved to", root, "first frame", data.read_pgm(root / "episode_0000" / "frame_0000.pgm").shape)
