"""
Training CARNet on windows of frames
====================================

The encoder maps each frame to a latent vector, the GRU predicts the next
latent, and the shared decoder turns both the encoded and the predicted
latents back into images. The objective adds an MS-SSIM reconstruction
term, an MS-SSIM prediction term and a smooth-L1 latent term.
"""
import numpy as np

from carnet import data, losses
from carnet import training as tr
from carnet.model import CARNet, CarnetConfig, WindowBatch

cfg = CarnetConfig.desk()
model = CARNet(cfg, seed=0)
print("encoder ladder", model.encoder.block_shapes())

ds = data.generate_dataset(1200, seed=0, episode_steps=150)
batch = tr.window_batch(ds, ds.window_indices("train")[:4], False)
out = model.rollout(batch)
print("latents", out.latents.shape, "predicted latents", out.pred_latents.shape, "predictions", out.preds.shape)
total, parts = losses.carnet_total_loss(out, batch.frames, None, cfg.ssim)
print("initial loss", {k: round(float(v.data), 4) for k, v in parts.items()})

# MS-SSIM of an image with itself is exactly one
x = np.random.default_rng(0).random((1, 1, 64, 64))
print("MS-SSIM loss of identical images", float(losses.ms_ssim_loss(x, x, cfg.ssim).data))

# pretrain the autoencoder for one epoch, then train the whole ensemble briefly
tr.pretrain_autoencoder(model, ds, tr.TrainConfig(epochs=1, batch_size=64))
hist = tr.train_ensemble(model, ds, tr.TrainConfig(epochs=2, batch_size=16))
for row in hist.val:
    print("epoch", row["epoch"], {k: round(v, 4) for k, v in row.items() if k not in ("epoch", "lr")})
