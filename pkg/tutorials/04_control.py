"""
From features to driving decisions
==================================

The controller reads [latest latent, predicted next latent]. With labels
from the autopilot it learns by imitation; with the reward it learns by
Q-learning over a frozen backbone.

The runs below are small enough to finish in a couple of minutes and only
show the mechanics. The acceptance suite trains the full-size versions.
"""
import numpy as np

from carnet import data
from carnet import training as tr
from carnet.model import CARNet, CarnetConfig
from carnet.rl import DqnConfig, train_dqn

ds = data.generate_dataset(3000, seed=0)
model = CARNet(CarnetConfig.desk(), seed=0)
tr.pretrain_autoencoder(model, ds, tr.TrainConfig(epochs=1))
tr.train_ensemble(model, ds, tr.TrainConfig(epochs=1, batch_size=16))

# imitation: nine-way classification, here with two seeds and few epochs
report, _ = tr.imitation_report(model, ds, tr.ImitationConfig(epochs=3), seeds=(0, 1))
print(report.summary())

# reinforcement learning needs a backbone that also sees sensors and the previous action
rl_backbone = CARNet(CarnetConfig.desk(sensor_dim=3, action_dim=9), seed=0)
tr.train_ensemble(rl_backbone, ds, tr.TrainConfig(epochs=1, batch_size=16))
res = train_dqn(rl_backbone, DqnConfig(steps=10000, eval_episodes=10))
print(f"greedy reward {res.eval_rewards.mean():.1f}, random {res.random_rewards.mean():.1f} after 10K steps")
