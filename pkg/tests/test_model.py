import numpy as np
import pytest

from attrifact.model import (
    BadMagicError,
    BufferLengthError,
    Layer,
    ManifestError,
    Model,
    NonFiniteWeightError,
    TopologyError,
    UnsupportedLayerError,
    VersionError,
    avgpool_forward,
    forward,
    layer_forward,
    load_modelpack,
    maxpool_forward,
    save_modelpack,
    validate_model,
)

from conftest import random_model


class TestModelPack:
    def test_round_trip(self, tmp_path, small_model):
        path = tmp_path / "m.nnpk"
        save_modelpack(small_model, path)
        loaded = load_modelpack(path)
        assert loaded.class_count == small_model.class_count
        assert tuple(loaded.input_shape) == tuple(small_model.input_shape)
        assert np.allclose(loaded.mean, small_model.mean)
        for a, b in zip(loaded.layers, small_model.layers):
            assert a.kind == b.kind
            if a.weight is not None:
                assert np.array_equal(a.weight, np.asarray(b.weight, dtype=np.float32))
                assert np.array_equal(a.bias, np.asarray(b.bias, dtype=np.float32))

    def test_truncated_file(self, tmp_path, small_model):
        path = tmp_path / "m.nnpk"
        save_modelpack(small_model, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 40])
        with pytest.raises(BufferLengthError):
            load_modelpack(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.nnpk"
        path.write_bytes(b"XXXX" + b"\0" * 32)
        with pytest.raises(BadMagicError):
            load_modelpack(path)

    def test_bad_version(self, tmp_path, small_model):
        path = tmp_path / "m.nnpk"
        save_modelpack(small_model, path)
        blob = bytearray(path.read_bytes())
        blob[4] = 9
        path.write_bytes(bytes(blob))
        with pytest.raises(VersionError):
            load_modelpack(path)

    def test_shape_length_disagreement(self, tmp_path, small_model):
        path = tmp_path / "m.nnpk"
        save_modelpack(small_model, path)
        blob = path.read_bytes()
        # enlarge a declared shape without touching the buffers
        manifest = blob[16 : 16 + int.from_bytes(blob[8:16], "little")]
        patched = manifest.replace(b'"shape":[4,2,3,3]', b'"shape":[5,2,3,3]', 1)
        assert patched != manifest
        out = blob[:8] + len(patched).to_bytes(8, "little") + patched
        out += blob[16 + len(manifest):]
        path.write_bytes(out)
        with pytest.raises(BufferLengthError):
            load_modelpack(path)

    def test_non_finite_weights(self, tmp_path, small_model):
        small_model.layers[0].weight[0, 0, 0, 0] = np.nan
        path = tmp_path / "m.nnpk"
        save_modelpack(small_model, path)
        with pytest.raises(NonFiniteWeightError):
            load_modelpack(path)

    def test_unknown_layer_kind_rejected(self, tmp_path, small_model):
        path = tmp_path / "m.nnpk"
        save_modelpack(small_model, path)
        blob = path.read_bytes()
        manifest = blob[16 : 16 + int.from_bytes(blob[8:16], "little")]
        patched = manifest.replace(b'"kind":"relu"', b'"kind":"batchnorm2d"', 1)
        out = blob[:8] + len(patched).to_bytes(8, "little") + patched
        out += blob[16 + len(manifest):]
        path.write_bytes(out)
        with pytest.raises(UnsupportedLayerError):
            load_modelpack(path)

    def test_topology_validation(self):
        bad = Model(
            layers=[Layer("linear", weight=np.ones((3, 4)), bias=np.zeros(3))],
            class_count=5,
            input_shape=(4,),
            mean=np.zeros(1),
            std=np.ones(1),
        )
        with pytest.raises(TopologyError):
            validate_model(bad)


class TestForward:
    def test_identity_linear(self):
        model = Model(
            layers=[Layer("linear", weight=np.eye(4), bias=np.zeros(4))],
            class_count=4,
            input_shape=(4,),
            mean=np.zeros(1),
            std=np.ones(1),
        )
        image = np.array([0.1, -0.5, 2.0, 0.0])
        trace = forward(model, image)
        assert np.allclose(trace.logits, image)

    def test_identity_conv_caches_image(self):
        w = np.ones((1, 1, 1, 1))
        model = Model(
            layers=[
                Layer("conv2d", weight=w, bias=np.zeros(1)),
                Layer("flatten"),
                Layer("linear", weight=np.eye(9), bias=np.zeros(9)),
            ],
            class_count=9,
            input_shape=(1, 3, 3),
            mean=np.zeros(1),
            std=np.ones(1),
        )
        image = np.arange(9, dtype=float).reshape(1, 3, 3) / 10
        trace = forward(model, image)
        assert np.allclose(trace.inputs[1], image)

    def test_preprocessing_applied(self, rng):
        model = random_model(rng)
        image = rng.random((2, 8, 8))
        trace = forward(model, image)
        assert np.allclose(trace.inputs[0], (image - 0.5) / 0.5)

    def test_replay_bit_identical(self, small_model, small_image):
        t1 = forward(small_model, small_image)
        t2 = forward(small_model, small_image)
        assert np.array_equal(t1.logits, t2.logits)
        for a, b in zip(t1.inputs, t2.inputs):
            assert np.array_equal(a, b)

    def test_shape_mismatch(self, small_model):
        with pytest.raises(ValueError):
            forward(small_model, np.zeros((2, 9, 9)))


class TestLayerArithmetic:
    def test_conv_matches_loop_oracle(self, rng):
        from agf_oracle import conv_fwd

        x = rng.standard_normal((3, 8, 8))
        w = rng.standard_normal((4, 3, 3, 3))
        for stride, pad in [(1, 0), (1, 1), (2, 1)]:
            layer = Layer("conv2d", weight=w, bias=np.zeros(4), stride=stride, padding=pad)
            got = layer_forward(layer, x)
            want = conv_fwd(x, w, stride, pad)
            scale = max(np.abs(want).max(), 1e-12)
            assert np.abs(got - want).max() / scale <= 1e-5

    def test_maxpool_bounded_by_window_max(self, rng):
        x = rng.standard_normal((2, 6, 6))
        out = maxpool_forward(x, 2, 2)
        for c in range(2):
            for oy in range(3):
                for ox in range(3):
                    win = x[c, 2 * oy : 2 * oy + 2, 2 * ox : 2 * ox + 2]
                    assert out[c, oy, ox] <= win.max()
                    assert out[c, oy, ox] == win.max()

    def test_avgpool_equals_window_mean(self, rng):
        x = rng.standard_normal((2, 6, 6))
        out = avgpool_forward(x, 3, 3)
        for c in range(2):
            for oy in range(2):
                for ox in range(2):
                    win = x[c, 3 * oy : 3 * oy + 3, 3 * ox : 3 * ox + 3]
                    assert out[c, oy, ox] == pytest.approx(win.mean())
