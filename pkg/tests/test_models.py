import struct
import zlib

import numpy as np
import pytest

from hsiconvlstm import cells, data
from hsiconvlstm.errors import ChecksumError, FormatError, SpecMismatchError, VersionError
from hsiconvlstm.gradcheck import model_gradcheck
from hsiconvlstm.layers import dense_forward, relu, softmax
from hsiconvlstm.models import (
    MODEL_NAMES,
    Checkpoint,
    Model,
    ModelSpec,
    build,
    checkpoint_bytes,
    layer_shapes,
    load_checkpoint,
    parse_checkpoint,
    save_checkpoint,
)
from hsiconvlstm.optim import AdamState, adam_step
from hsiconvlstm.tensor import SAME, maxpool_forward

# "Output Shape" columns of the parameter tables at s=27, K=10 (K=1 for the 2-D models)
TABLE_SHAPES = {
    "cnn2d": [(27, 27), (27, 27, 32), (13, 13, 32), (13, 13, 64), (6, 6, 64), (6, 6, 64), (6, 6, 128),
              (6, 6, 128), (4608,)],
    "cnn3d": [(10, 27, 27), (10, 27, 27, 32), (5, 13, 13, 32), (5, 13, 13, 64), (3, 6, 6, 64), (3, 6, 6, 64),
              (3, 6, 6, 128), (3, 6, 6, 128), (13824,)],
    "sacl2dnn": [(27, 27), (27, 27, 32), (14, 14, 32), (14, 14, 64), (7, 7, 64), (7, 7, 64), (3136,)],
    "sscl2dnn": [(10, 27, 27), (10, 27, 27, 32), (10, 14, 14, 32), (1, 14, 14, 64), (1, 7, 7, 64),
                 (1, 7, 7, 64), (3136,)],
    "sscl3dnn": [(10, 27, 27), (10, 27, 27, 32), (5, 14, 14, 32), (5, 14, 14, 64), (3, 7, 7, 64),
                 (3, 7, 7, 64), (9408,)],
}


def table_k(name):
    return 1 if name in ("cnn2d", "sacl2dnn") else 10


class TestBuild:
    @pytest.mark.parametrize("name", MODEL_NAMES)
    @pytest.mark.parametrize("n", [9, 16])
    def test_table_shapes(self, name, n):
        shapes = [s for _, s in layer_shapes(build(name, K=table_k(name), s=27, N=n))]
        flat_at = shapes.index(TABLE_SHAPES[name][-1])
        assert shapes[: flat_at + 1] == TABLE_SHAPES[name]
        assert shapes[flat_at + 1] == (128,)
        assert shapes[-1] == (n,)

    def test_sacl2dnn_kernels(self):
        spec = build("sacl2dnn", K=1, s=27, N=16)
        kernels = [ls.kernel for ls in spec.layers if ls.kind == "convlstm"]
        assert kernels == [(3, 3), (5, 5)]

    def test_errors(self):
        with pytest.raises(ValueError):
            build("resnet")
        with pytest.raises(ValueError):
            build("sacl2dnn", K=3)
        with pytest.raises(ValueError):
            build("sscl2dnn", K=0)

    def test_switches(self):
        spec = build("cnn2d", K=1, s=9, N=3, dense_activation=None, conv_activation=None)
        assert {ls.activation for ls in spec.layers if ls.kind in ("conv", "dense")} == {None}
        assert not build("sscl2dnn", K=3, s=9, N=3, peephole=False).peephole
        with pytest.raises(ValueError):
            build("cnn2d", K=1, dense_activation="tanh")

    def test_without_peepholes_params_stay_zero(self, mini):
        model = Model(build("sscl2dnn", K=3, s=9, N=3, peephole=False), seed=0)
        _, grads, _ = model.loss_and_grads(mini.patches, mini.labels)
        assert not any(grads[k].any() for k in grads if k.split(".")[1] in ("w_ci", "w_cf", "w_co"))

    def test_spec_dict_round_trip(self):
        spec = build("cnn3d", K=10, s=27, N=9)
        assert ModelSpec.from_dict(spec.to_dict()).to_dict() == spec.to_dict()


@pytest.fixture(scope="module")
def mini():
    cube, labels = data.synth_cube(classes=3, width=9, height=9, bands=6, noise=0.05, seed=3)
    reduced = data.preprocess(cube, 3)
    coords = np.array([[1, 2], [4, 4], [7, 0], [8, 8]])
    return data.extract_patches(reduced, labels, coords, 9)


class TestForward:
    @pytest.mark.parametrize("name", ["sscl2dnn", "sscl3dnn", "cnn3d"])
    def test_rows_sum_to_one(self, mini, name):
        p = Model(build(name, K=3, s=9, N=3), seed=1).forward(mini.patches)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-12)

    def test_identical_patches_identical_rows(self, mini):
        batch = np.repeat(mini.patches[:1], 3, axis=0)
        p = Model(build("sscl2dnn", K=3, s=9, N=3), seed=1).forward(batch)
        assert (p == p[0]).all()

    def test_inference_is_pure(self, mini):
        model = Model(build("sscl3dnn", K=3, s=9, N=3), seed=1)
        assert np.array_equal(model.forward(mini.patches), model.forward(mini.patches))

    def test_layerwise_replay(self, mini):
        """Recompute SSCL2DNN by calling the primitives directly."""
        model = Model(build("sscl2dnn", K=3, s=9, N=3), seed=7)
        lay = {layer.name: layer for layer in model.layers}
        x = np.moveaxis(mini.patches, -1, 1)[..., None]
        h, _, _ = cells.unroll(x, lay["convlstm1"].cell, None, "all_steps", keep_cache=False)
        h, _ = maxpool_forward(h, (2, 2), (2, 2), SAME)
        h, _, _ = cells.unroll(h, lay["convlstm2"].cell, None, "last_step", keep_cache=False)
        h, _ = maxpool_forward(h, (2, 2), (2, 2), SAME)
        h = relu(dense_forward(h.reshape(len(h), -1), lay["dense"].w, lay["dense"].b))
        expect = softmax(dense_forward(h, lay["output"].w, lay["output"].b))
        np.testing.assert_array_equal(model.forward(mini.patches), expect)

    def test_recorded_activations(self, mini):
        model = Model(build("sscl3dnn", K=3, s=9, N=3), seed=0)
        record = []
        model.logits(mini.patches, record=record)
        assert [name for name, _ in record][:3] == ["input", "convlstm1", "pool1"]
        assert record[1][1].shape == (4, 3, 9, 9, 32)

    def test_bad_patch_shape(self, mini):
        with pytest.raises(ValueError):
            Model(build("sscl2dnn", K=4, s=9, N=3)).forward(mini.patches)

    def test_predict_ids(self, mini):
        ids = Model(build("sscl2dnn", K=3, s=9, N=3)).predict(mini.patches, batch_size=3)
        assert ids.shape == (4,) and set(ids) <= {1, 2, 3}


class TestEndToEndGradient:
    @pytest.mark.parametrize("name", ["sscl2dnn", "sscl3dnn"])
    def test_hundred_coordinates(self, mini, name):
        model = Model(build(name, K=3, s=9, N=3), seed=11)
        n_arrays = len(model.params())
        per = -(-100 // n_arrays)
        errors = model_gradcheck(model, mini.patches, mini.labels, seed=2, per_param=per)
        assert sum(min(per, v.size) for v in model.params().values()) >= 100
        assert max(errors.values()) < 1e-3, max(errors, key=errors.get)


def _trained_checkpoint(name="sscl2dnn", K=3):
    model = Model(build(name, K=K, s=9, N=3), seed=5)
    state = AdamState(lr=1e-3)
    r = np.random.default_rng(0)
    grads = {k: r.standard_normal(v.shape) for k, v in model.params().items()}
    adam_step(model.params(), grads, state)
    return model, Checkpoint(model.spec, {k: v.copy() for k, v in model.params().items()}, state, 5, {"note": "x"})


class TestCheckpoint:
    def test_round_trip(self, tmp_path, mini):
        model, ckpt = _trained_checkpoint()
        path = tmp_path / "m.hsck"
        save_checkpoint(ckpt, path)
        back = load_checkpoint(path)
        assert checkpoint_bytes(back) == checkpoint_bytes(ckpt)
        assert back.meta == {"note": "x"} and back.optimizer.t == 1
        for k, v in ckpt.params.items():
            assert np.array_equal(back.params[k], v)
        for k, v in ckpt.optimizer.m.items():
            assert np.array_equal(back.optimizer.m[k], v) and np.array_equal(back.optimizer.v[k], ckpt.optimizer.v[k])
        assert np.array_equal(Model.from_checkpoint(back).forward(mini.patches), model.forward(mini.patches))

    def test_truncated(self):
        raw = checkpoint_bytes(_trained_checkpoint()[1])
        with pytest.raises(ChecksumError):
            parse_checkpoint(raw[:-1])
        with pytest.raises(FormatError):
            parse_checkpoint(raw[:10])

    def test_unknown_version(self):
        raw = bytearray(checkpoint_bytes(_trained_checkpoint()[1]))
        raw[4:8] = struct.pack("<I", 99)
        body = bytes(raw[:-4])
        with pytest.raises(VersionError):
            parse_checkpoint(body + struct.pack("<I", zlib.crc32(body)))

    def test_missing_blob(self):
        _, ckpt = _trained_checkpoint()
        ckpt.params.pop("output.b")
        with pytest.raises(FormatError, match="output.b"):
            parse_checkpoint(checkpoint_bytes(ckpt))

    def test_spec_mismatch(self, tmp_path):
        cnn = Model(build("cnn2d", K=1, s=9, N=3), seed=0)
        path = tmp_path / "cnn.hsck"
        save_checkpoint(Checkpoint(cnn.spec, cnn.params()), path)
        with pytest.raises(SpecMismatchError):
            Model(build("sscl3dnn", K=3, s=9, N=3)).load(load_checkpoint(path))
        with pytest.raises(SpecMismatchError):
            load_checkpoint(path, expected="sscl3dnn")

    def test_single_byte_mutations(self):
        raw = checkpoint_bytes(_trained_checkpoint()[1])
        r = np.random.default_rng(0)
        for pos in r.choice(len(raw), size=100, replace=False):
            bad = bytearray(raw)
            bad[pos] ^= int(r.integers(1, 256))
            with pytest.raises(FormatError):
                parse_checkpoint(bytes(bad))
