import numpy as np
import pytest

from carnet import checkpoint as ck
from carnet.model import CARNet, CarnetConfig, Controller


def test_arrays_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a": rng.normal(size=(3, 4)).astype(np.float32), "b": rng.normal(size=5),
              "c": np.array(7, dtype=np.int64), "empty": np.zeros((0, 2), np.float32)}
    ck.save_checkpoint(tmp_path / "x", ck.Checkpoint(arrays, "carnet", {"k": 1}, {"e": [1, 2]}))
    back = ck.load_checkpoint(tmp_path / "x")
    assert list(back.arrays) == list(arrays)
    for k, v in arrays.items():
        assert back.arrays[k].dtype == v.dtype and back.arrays[k].tobytes() == v.tobytes()
    assert back.config == {"k": 1} and back.extra == {"e": [1, 2]}


def test_model_round_trip_files_identical(tmp_path):
    m = CARNet(CarnetConfig.desk(sensor_dim=3, action_dim=9), seed=4)
    c = Controller(32, (32, 32, 16), np.random.default_rng(1))
    ck.save_model(tmp_path / "a", m, c)
    m2, c2, info = ck.load_model(tmp_path / "a")
    assert m2.cfg == m.cfg and c2.dims == c.dims
    ck.save_model(tmp_path / "b", m2, c2)
    for ext in (".manifest", ".bin"):
        assert (tmp_path / f"a{ext}").read_bytes() == (tmp_path / f"b{ext}").read_bytes()
    x = np.random.default_rng(0).random((2, 1, 64, 64), dtype=np.float32)
    assert np.array_equal(m.encode(x).data, m2.encode(x).data)


def test_corrupt_byte_names_parameter(tmp_path):
    m = CARNet(CarnetConfig.desk(), seed=0)
    _, payload = ck.save_model(tmp_path / "m", m)
    manifest = (tmp_path / "m.manifest").read_text().splitlines()
    entry = [l.split() for l in manifest if l.startswith("param ")][3]
    raw = bytearray(payload.read_bytes())
    raw[int(entry[4]) + 1] ^= 0xFF
    payload.write_bytes(bytes(raw))
    with pytest.raises(ck.ChecksumError, match=entry[1]):
        ck.load_checkpoint(tmp_path / "m")


def test_truncated_payload(tmp_path):
    _, payload = ck.save_model(tmp_path / "m", CARNet(CarnetConfig.desk(), seed=0))
    payload.write_bytes(payload.read_bytes()[:-10])
    with pytest.raises(ck.CheckpointError, match="truncated"):
        ck.load_checkpoint(tmp_path / "m")


def test_shape_mismatch_names_both_shapes(tmp_path):
    ck.save_model(tmp_path / "m", CARNet(CarnetConfig.desk(), seed=0))
    with pytest.raises(ck.CheckpointError, match=r"checkpoint has \(32, 32, 4, 4\), model expects \(16, 32, 4, 4\)"):
        ck.load_model(tmp_path / "m", cfg=CarnetConfig.desk(latent_size=16))


def test_name_mismatch(tmp_path):
    ck.save_model(tmp_path / "m", CARNet(CarnetConfig.desk(), seed=0))
    with pytest.raises(ck.CheckpointError, match="names differ"):
        ck.load_model(tmp_path / "m", cfg=CarnetConfig.desk(sensor_dim=3))


def test_version_and_format_errors(tmp_path):
    ck.save_checkpoint(tmp_path / "x", ck.Checkpoint({"a": np.zeros(2)}))
    p = tmp_path / "x.manifest"
    text = p.read_text()
    p.write_text(text.replace(f"{ck.FORMAT} {ck.VERSION}", f"{ck.FORMAT} {ck.VERSION + 1}"))
    with pytest.raises(ck.VersionError, match="version"):
        ck.load_checkpoint(tmp_path / "x")
    p.write_text(text.replace(ck.FORMAT, "something-else"))
    with pytest.raises(ck.CheckpointError):
        ck.load_checkpoint(tmp_path / "x")


def test_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        ck.load_checkpoint(tmp_path / "none")
    ck.save_checkpoint(tmp_path / "x", ck.Checkpoint({"a": np.zeros(2)}))
    (tmp_path / "x.bin").unlink()
    with pytest.raises(FileNotFoundError):
        ck.load_checkpoint(tmp_path / "x.manifest")


def test_whitespace_names_rejected(tmp_path):
    with pytest.raises(ck.CheckpointError):
        ck.save_checkpoint(tmp_path / "x", ck.Checkpoint({"a b": np.zeros(1)}))
