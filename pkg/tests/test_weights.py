"""Weight-file format: round trips and the documented rejection cases."""

import struct

import numpy as np
import pytest

from attrface.errors import WeightFileError
from attrface.network import AttributeSpec, MultiBranchModel, NetworkConfig
from attrface.tensor import ShapeError
from attrface.weights import load_into_model, load_weights, save_weights


@pytest.fixture
def params():
    rng = np.random.default_rng(0)
    return {
        "conv.weight": rng.standard_normal((4, 2, 3, 3)).astype(np.float32),
        "conv.bias": rng.standard_normal(4).astype(np.float32),
        "head.weight": rng.standard_normal((4, 7)).astype(np.float64),
    }


def test_round_trip_values(tmp_path, params):
    path = tmp_path / "w.weights"
    save_weights(path, params)
    back = load_weights(path)
    assert set(back) == set(params)
    for name, arr in params.items():
        assert back[name].dtype == arr.dtype
        assert back[name].tobytes() == arr.tobytes()


def test_save_load_save_byte_identical(tmp_path, params):
    first = tmp_path / "a.weights"
    second = tmp_path / "b.weights"
    save_weights(first, params)
    save_weights(second, load_weights(first))
    assert first.read_bytes() == second.read_bytes()


def test_corrupt_magic_rejected(tmp_path, params):
    path = tmp_path / "w.weights"
    save_weights(path, params)
    data = bytearray(path.read_bytes())
    data[:4] = b"JUNK"
    path.write_bytes(bytes(data))
    with pytest.raises(WeightFileError, match="bad magic"):
        load_weights(path)


def test_version_mismatch_rejected(tmp_path, params):
    path = tmp_path / "w.weights"
    save_weights(path, params)
    data = bytearray(path.read_bytes())
    data[4:8] = struct.pack("<I", 42)
    path.write_bytes(bytes(data))
    with pytest.raises(WeightFileError, match="version"):
        load_weights(path)


def test_truncated_payload_rejected(tmp_path, params):
    path = tmp_path / "w.weights"
    save_weights(path, params)
    data = path.read_bytes()
    path.write_bytes(data[:-10])
    with pytest.raises(WeightFileError, match="truncated"):
        load_weights(path)


def tiny_model(embedding=16):
    return MultiBranchModel(NetworkConfig(
        n_identities=4, backbone=((4, 2),), branch_width=4, embedding_dim=embedding,
        attributes=(AttributeSpec("male", 1.0),), reduction=4, seed=0))


def test_load_into_mismatched_config_names_tensor(tmp_path):
    model = tiny_model(embedding=16)
    path = tmp_path / "w.weights"
    save_weights(path, model.params)
    other = tiny_model(embedding=8)
    with pytest.raises(ShapeError, match="fr_conv2"):
        load_into_model(other, path)


def test_load_into_wrong_architecture_rejected(tmp_path):
    model = tiny_model()
    path = tmp_path / "w.weights"
    save_weights(path, {"unrelated": np.zeros(3, dtype=np.float32)})
    with pytest.raises(ShapeError, match="does not match model"):
        load_into_model(model, path)


def test_model_checkpoint_round_trip(tmp_path):
    model = tiny_model()
    path = tmp_path / "w.weights"
    save_weights(path, model.params)
    clone = tiny_model()
    for p in clone.params.values():
        p.data = np.zeros_like(p.data)
    load_into_model(clone, path)
    for name in model.params:
        assert clone.params[name].data.tobytes() == model.params[name].data.tobytes()
