import math

import numpy as np
import pytest

from tonalasr import model as md
from tonalasr import numerics as nx
from tonalasr import transducer as td


def test_lattice_shape(tiny_params):
    lat = md.forward_lattice(tiny_params, np.ones((10, 4)), [1, 2, 3])
    assert lat.shape == (5, 4, 9)


def test_stack_frames_pads_tail():
    feats = np.arange(10.0).reshape(5, 2)
    out = md.stack_frames(feats, 2)
    assert out.shape == (3, 4)
    np.testing.assert_array_equal(out[-1], [8, 9, 0, 0])


def test_encode_dimension_error(tiny_params):
    with pytest.raises(nx.DimensionError):
        md.encode(tiny_params, np.ones((4, 3)))


def test_prediction_is_stateless(tiny_params):
    a = md.predict(tiny_params, 0, 0).data
    np.testing.assert_array_equal(a, md.predict(tiny_params, 0, 0).data)
    assert np.max(np.abs(md.predict(tiny_params, 3, 5).data - md.predict(tiny_params, 4, 5).data)) > 1e-6


def test_context_ids():
    assert md.context_ids([4, 5, 6]) == ([0, 0, 4, 5], [0, 4, 5, 6])
    assert md.context_ids([]) == ([0], [0])


def test_joint_properties(tiny_params):
    rng = np.random.default_rng(0)
    a, b = nx.Tensor(rng.standard_normal(6)), nx.Tensor(rng.standard_normal(6))
    out = md.joint(tiny_params, a, b).data
    np.testing.assert_array_equal(out, md.joint(tiny_params, b, a).data)
    assert abs(np.exp(out).sum() - 1) <= 1e-12
    zero = tiny_params.replace({"joint.weight": np.zeros((6, 9))})
    np.testing.assert_allclose(md.joint(zero, a, b).data, -math.log(9), atol=1e-12)
    with pytest.raises(nx.DimensionError):
        md.joint(tiny_params, nx.Tensor(np.ones(5)), b)


def test_batch_matches_single_lattices(tiny_params):
    rng = np.random.default_rng(1)
    feats = [rng.standard_normal((7, 4)), rng.standard_normal((4, 4))]
    targets = [[1, 2], [3]]
    flat, segs = md.forward_batch(tiny_params, feats, targets)
    for f, y, seg in zip(feats, targets, segs):
        single = md.forward_lattice(tiny_params, f, y).data.reshape(-1, 9)
        np.testing.assert_allclose(flat.data[seg.offset:seg.offset + seg.rows], single, atol=1e-14)


def test_end_to_end_gradient(tiny_params):
    rng = np.random.default_rng(2)
    feats = [rng.standard_normal((5, 4)), rng.standard_normal((4, 4))]
    targets = [[1, 2], [3]]
    names = tiny_params.names()

    def f(tensors):
        p = md.ModelParams(tiny_params.config, dict(zip(names, tensors)))
        flat, segs = md.forward_batch(p, feats, targets)
        return td.batch_transducer_loss(flat, segs)

    assert nx.grad_check(f, [tiny_params[n] for n in names]) <= 1e-4


def test_target_out_of_range(tiny_params):
    with pytest.raises(IndexError):
        md.forward_lattice(tiny_params, np.ones((4, 4)), [9])


def test_checkpoint_round_trip(tmp_path, tiny_params):
    path = tmp_path / "m.ckpt"
    md.save_checkpoint(tiny_params, path, "stage1")
    loaded = md.load_checkpoint(path)
    assert loaded == tiny_params and loaded.stage == "stage1"
    assert path.read_bytes()[:4] == b"CLFT"


@pytest.mark.parametrize("mutate, message", [
    (lambda raw: b"XXXX" + raw[4:], "magic"),
    (lambda raw: raw[:4] + (9).to_bytes(4, "little") + raw[8:], "version"),
    (lambda raw: raw[:8] + bytes([99]) + raw[9:], "stage tag"),
    (lambda raw: raw[:-8], "truncated"),
    (lambda raw: raw + b"\0", "trailing"),
])
def test_checkpoint_errors(tmp_path, tiny_params, mutate, message):
    path = tmp_path / "m.ckpt"
    md.save_checkpoint(tiny_params, path)
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(md.CheckpointFormatError, match=message):
        md.load_checkpoint(path)


def test_reinit_components_keeps_encoder(tiny_params):
    fresh = md.reinit_components(tiny_params, ["prediction", "joint"], np.random.default_rng(9))
    for n in tiny_params.names("encoder"):
        np.testing.assert_array_equal(fresh[n].data, tiny_params[n].data)
    assert not np.array_equal(fresh["joint.weight"].data, tiny_params["joint.weight"].data)


def test_config_validation():
    with pytest.raises(ValueError):
        md.ModelConfig(vocab_size=0)
    with pytest.raises(ValueError):
        md.ModelConfig(vocab_size=3, nonlinearity="gelu")
