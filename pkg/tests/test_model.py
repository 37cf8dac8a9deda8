import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from carnet import losses, nn
from carnet import tensor as T
from carnet.gradcheck import check_directional
from carnet.model import CARNet, CarnetConfig, Controller, WindowBatch, controller_forward
from carnet.tensor import ShapeError, Tensor, backward

TABLE_ENCODER = [(2, 128, 128), (4, 64, 64), (8, 32, 32), (16, 16, 16), (32, 8, 8), (64, 4, 4), (128, 1, 1)]
TABLE_DECODER = [(64, 4, 4), (32, 8, 8), (16, 16, 16), (8, 32, 32), (4, 64, 64), (2, 128, 128), (1, 256, 256)]
DESK_ENCODER = [(2, 32, 32), (4, 16, 16), (8, 8, 8), (16, 4, 4), (32, 4, 4), (32, 1, 1)]


def block_outputs(body, x, block_len):
    """Shapes after every ``block_len`` layers of a Sequential, plus the final output."""
    shapes, layers = [], list(body)
    for i, layer in enumerate(layers):
        x = layer(x)
        if (i + 1) % block_len == 0 or i == len(layers) - 1:
            shapes.append(x.shape[1:])
    return shapes


def random_batch(cfg, rng, b=2, sensors=False, actions=False):
    frames = rng.random((b, cfg.window, 1, cfg.input_size, cfg.input_size))
    s = rng.uniform(-1, 1, (b, cfg.window, cfg.sensor_dim)) if sensors else None
    a = np.eye(9)[rng.integers(0, 9, (b, cfg.window))] if actions else None
    return WindowBatch(frames, s, a)


# ---------------------------------------------------------------------------
# configuration and shapes
# ---------------------------------------------------------------------------

def test_full_config_hyperparameters():
    cfg = CarnetConfig.full()
    assert (cfg.input_size, cfg.latent_size, cfg.window) == (256, 128, 4)
    assert cfg.rnn_hidden == cfg.latent_size == cfg.rnn_input == 128
    assert cfg.ssim.scales == 5


def test_full_config_encoder_shapes():
    cfg = CarnetConfig.full()
    model = CARNet(cfg, seed=0)
    x = Tensor(np.random.default_rng(0).random((1, 1, 256, 256)))
    # every block is conv/bn/relu twice; the projection is one conv/bn/relu
    assert block_outputs(model.encoder.body, x, 6) == TABLE_ENCODER
    assert model.encoder.block_shapes() == TABLE_ENCODER
    assert model.encode(x).shape == (1, 128)


def test_full_config_decoder_shapes():
    cfg = CarnetConfig.full()
    model = CARNet(cfg, seed=0)
    z = T.reshape(Tensor(np.random.default_rng(1).standard_normal((1, 128))), (1, 128, 1, 1))
    assert block_outputs(model.decoder.body, z, 6) == TABLE_DECODER
    assert model.decoder.block_shapes() == TABLE_DECODER
    assert model.decode(np.zeros((1, 128))).shape == (1, 1, 256, 256)


def test_full_config_kernels():
    model = CARNet(CarnetConfig.full(), seed=0)
    convs = [m for m in model.encoder.body if isinstance(m, nn.Conv2d)]
    assert [c.weight.shape[-1] for c in convs] == [3] * 12 + [4]
    tconvs = [m for m in model.decoder.body if isinstance(m, nn.ConvTranspose2d)]
    assert [c.weight.shape[-1] for c in tconvs] == [4] + [3] * 12


def test_controller_table_sizes():
    cfg = CarnetConfig.full()
    ctrl = Controller(cfg.latent_size, cfg.controller_widths, np.random.default_rng(0))
    assert ctrl.dims == [256, 128, 128, 64, 9]
    linears = [m for m in ctrl.body if isinstance(m, nn.Linear)]
    assert [m.weight.shape for m in linears] == [(128, 256), (128, 128), (64, 128), (9, 64)]
    assert ctrl(np.zeros((3, 256))).shape == (3, 9)


def test_desk_ladder():
    cfg = CarnetConfig.desk()
    model = CARNet(cfg, seed=0)
    x = Tensor(np.random.default_rng(2).random((2, 1, 64, 64)))
    assert block_outputs(model.encoder.body, x, 6) == DESK_ENCODER
    assert model.encode(x).shape == (2, 32)
    assert model.decode(np.zeros((2, 32))).shape == (2, 1, 64, 64)


def test_invalid_ladder_rejected():
    with pytest.raises(ValueError, match="4x4"):
        CarnetConfig(input_size=64, channels=(2, 4))
    with pytest.raises(ValueError, match="window"):
        CarnetConfig(window=1)


def test_config_dict_round_trip():
    cfg = CarnetConfig.desk(sensor_dim=3, action_dim=9, use_attention=True)
    assert CarnetConfig.from_dict(cfg.to_dict()) == cfg


def test_sensor_mode_dimensions():
    cfg = CarnetConfig.desk(sensor_dim=3, action_dim=9)
    model = CARNet(cfg, seed=0)
    assert cfg.rnn_hidden == 32 + 16 and cfg.rnn_input == 48 + 9
    assert model.sensor_embed.weight.shape == (16, 3)
    assert model.sensor_readout.weight.shape == (3, 48)
    assert model.sensor_embed.bias is None


def test_rollout_shapes_and_counts():
    cfg = CarnetConfig.desk(sensor_dim=3)
    model = CARNet(cfg, seed=1)
    out = model.rollout(random_batch(cfg, np.random.default_rng(3), sensors=True))
    assert out.latents.shape == (2, 4, 32)
    assert out.hiddens.shape == (2, 3, 48)
    assert out.pred_latents.shape == (2, 3, 32)
    assert out.recons.shape == (2, 4, 1, 64, 64)
    assert out.preds.shape == (2, 3, 1, 64, 64)
    assert out.sensor_preds.shape == (2, 3, 3)


def test_attention_keeps_shapes():
    cfg = CarnetConfig.desk(use_attention=True)
    model = CARNet(cfg, seed=0)
    x = Tensor(np.random.default_rng(4).random((2, 1, 64, 64)))
    assert model.encoder.attention(x).shape == (2, 2, 64, 64)
    assert block_outputs(model.encoder.body, model.encoder.attention(x), 6) == DESK_ENCODER
    out = model.rollout(random_batch(cfg, np.random.default_rng(5)))
    assert out.recons.shape == (2, 4, 1, 64, 64) and out.preds.shape == (2, 3, 1, 64, 64)
    full = CARNet(CarnetConfig.full(use_attention=True), seed=0)
    assert full.encode(np.zeros((1, 1, 256, 256))).shape == (1, 128)


def test_shape_errors():
    model = CARNet(CarnetConfig.desk(), seed=0)
    with pytest.raises(ShapeError, match="encode"):
        model.encode(np.zeros((1, 1, 32, 32)))
    with pytest.raises(ShapeError, match="decode"):
        model.decode(np.zeros((1, 31)))


def test_missing_conditioning_inputs():
    cfg = CarnetConfig.tiny(sensor_dim=3, action_dim=9)
    model = CARNet(cfg, seed=0)
    b = random_batch(cfg, np.random.default_rng(6))
    with pytest.raises(ValueError, match="sensor"):
        model.rollout(b)


# ---------------------------------------------------------------------------
# structural properties
# ---------------------------------------------------------------------------

def test_zero_model_zero_frames():
    cfg = CarnetConfig.desk(sensor_dim=3)
    model = CARNet(cfg, seed=0).zero_()
    frames = np.zeros((2, 4, 1, 64, 64))
    out = model.rollout(WindowBatch(frames, np.zeros((2, 4, 3))))
    assert not out.latents.data.any()
    assert not out.hiddens.data.any()
    assert not out.sensor_preds.data.any()
    assert np.all(out.recons.data == 0.5)
    _, gates = nn.gru_step(np.zeros(cfg.rnn_hidden), np.zeros(cfg.rnn_input), model.gru, return_gates=True)
    assert np.all(gates["z"].data == 0.5) and np.all(gates["r"].data == 0.5)


def test_zero_frame_encodes_to_zero():
    model = CARNet(CarnetConfig.desk(), seed=0)
    for p in model.named_parameters():
        name, t = p
        if name.endswith(".bias"):
            t.data = np.zeros_like(t.data)
    assert not model.encode(np.zeros((2, 1, 64, 64))).data.any()


def test_decoder_shared_between_reconstruction_and_prediction():
    cfg = CarnetConfig.tiny()
    model = CARNet(cfg, seed=0, dtype=np.float64)
    names = [n for n, _ in model.named_parameters() if n.startswith("decoder.")]
    assert len(names) == len(set(names)) == len(model.decoder.parameters())
    w = model.decoder.parameters()[0]
    for field in ("recons", "preds"):
        out = model.rollout(random_batch(cfg, np.random.default_rng(7)))
        w.grad = None
        backward(T.reduce_sum(getattr(out, field)))
        assert w.grad is not None and np.abs(w.grad).sum() > 0, field


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.1, 100.0))
def test_decoder_output_in_unit_interval(seed, scale):
    model = CARNet(CarnetConfig.tiny(), seed=seed % 1000)
    z = scale * np.random.default_rng(seed).standard_normal((3, 4))
    y = model.decode(z).data
    assert np.all((y >= 0) & (y <= 1))


def test_controller_zero_weights_uniform():
    ctrl = Controller(4, (4, 4, 2), np.random.default_rng(0), dtype=np.float64)
    for p in ctrl.parameters():
        p.data = np.zeros_like(p.data)
    logits = controller_forward(ctrl, np.ones((5, 4)), -np.ones((5, 4)))
    assert np.all(logits.data == logits.data[0, 0])
    ce = losses.cross_entropy(logits, np.arange(5))
    assert float(ce.data) == pytest.approx(math.log(9), abs=1e-12)


def test_controller_input_order_matters():
    rng = np.random.default_rng(8)
    ctrl = Controller(6, (6, 6, 3), rng, dtype=np.float64)
    a, b = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
    assert not np.allclose(controller_forward(ctrl, a, b).data, controller_forward(ctrl, b, a).data)


def test_controller_shape_errors():
    ctrl = Controller(4, (4, 4, 2), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        controller_forward(ctrl, np.zeros((2, 4)), np.zeros((2, 5)))
    with pytest.raises(ShapeError):
        ctrl(np.zeros((2, 7)))


def test_features_match_rollout():
    cfg = CarnetConfig.tiny()
    model = CARNet(cfg, seed=3, dtype=np.float64).eval()
    batch = random_batch(cfg, np.random.default_rng(9))
    out = model.rollout(batch, decode=False)
    f = model.features(batch.frames[:, :cfg.window - 1])
    k = cfg.window - 2
    assert np.allclose(f.data[:, :4], out.latents.data[:, k])
    assert np.allclose(f.data[:, 4:], out.pred_latents.data[:, k])


def test_same_seed_same_model():
    a, b = CARNet(CarnetConfig.desk(), seed=5), CARNet(CarnetConfig.desk(), seed=5)
    c = CARNet(CarnetConfig.desk(), seed=6)
    pa, pb, pc = a.parameters(), b.parameters(), c.parameters()
    assert all(np.array_equal(x.data, y.data) for x, y in zip(pa, pb))
    assert not all(np.array_equal(x.data, y.data) for x, y in zip(pa, pc))


# ---------------------------------------------------------------------------
# end-to-end differentiability on the tiny configuration
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("sensors, actions", [(False, False), (True, True)])
def test_tiny_rollout_gradient(sensors, actions):
    cfg = CarnetConfig.tiny(sensor_dim=3 if sensors else 0, action_dim=9 if actions else 0)
    assert (cfg.input_size, cfg.latent_size, cfg.window) == (8, 4, 3)
    rng = np.random.default_rng(10)
    worst = 0.0
    for i in range(20):
        model = CARNet(cfg, seed=i, dtype=np.float64)
        batch = random_batch(cfg, rng, sensors=sensors, actions=actions)
        params = model.parameters()

        def loss(*_):
            total, _parts = losses.carnet_total_loss(model.rollout(batch), batch.frames, batch.sensors, cfg.ssim)
            return total

        worst = max(worst, check_directional(loss, params, rng))
    assert worst < 1e-4
