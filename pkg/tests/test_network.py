import numpy as np
import pytest

from charprop.network import (
    ArchitectureSpec,
    ConfigurationError,
    Conv,
    HeadOutput,
    Pool,
    builtin_spec,
    compute_stride,
    forward_full,
    forward_patch,
    init_model,
    receptive_field_size,
    shape_trace,
    to_input,
    validate_geometry,
)
from charprop.tensor import ShapeError


@pytest.fixture(params=["CPN-ENG", "CPN-CHS"])
def arch(request):
    return request.param


class TestGeometry:
    def test_eng_trace(self):
        assert shape_trace(builtin_spec("CPN-ENG", 4), 29) == [29, 25, 12, 9, 4, 2, 1, 1, 1]

    def test_chs_trace(self):
        assert shape_trace(builtin_spec("CPN-CHS", 4), 43) == [43, 39, 19, 15, 7, 5, 3, 2, 1, 1]

    @pytest.mark.parametrize("name,size", [("CPN-ENG", 29), ("CPN-CHS", 43)])
    def test_receptive_field(self, name, size):
        spec = builtin_spec(name, 4)
        fn, rf = validate_geometry(spec)
        assert rf == (size, size)
        assert fn(size, size) == (1, 1)
        assert receptive_field_size(spec) == size

    def test_stride(self, arch):
        assert compute_stride(builtin_spec(arch, 4)) == 4

    def test_larger_input(self):
        fn, _ = validate_geometry(builtin_spec("CPN-ENG", 4))
        assert fn(33, 33) == (2, 2)
        assert fn(29 + 4 * 10, 29) == (11, 1)

    def test_output_channels(self):
        assert builtin_spec("CPN-ENG", 4).layers[-1] == Conv(20, 1)
        assert builtin_spec("CPN-ENG", 2).layers[-1].out_channels == 10

    def test_width_keeps_geometry(self, arch):
        spec = builtin_spec(arch, 4, width=0.1)
        assert compute_stride(spec) == 4
        validate_geometry(spec)

    def test_mismatched_input_size(self):
        spec = ArchitectureSpec("bad", (Conv(8, 5), Pool(3, 2), Conv(20, 3)), (29, 29), 4)
        with pytest.raises(ConfigurationError, match="receptive field"):
            validate_geometry(spec)

    def test_wrong_head_width(self):
        with pytest.raises(ConfigurationError):
            ArchitectureSpec("bad", (Conv(8, 5), Conv(19, 1)), (5, 5), 4)

    def test_unknown_arch(self):
        with pytest.raises(ValueError):
            builtin_spec("CPN-XYZ", 4)


class TestForward:
    @pytest.fixture
    def model(self, arch):
        return init_model(builtin_spec(arch, 4, width=0.1), 3, "he", dtype=np.float64)

    def test_patch_is_one_unit(self, model, rng):
        rw, rh = model.receptive_field
        head = forward_patch(model, rng.integers(0, 256, (rh, rw, 3), dtype=np.uint8))
        assert head.scores.shape == (1, 4, 1, 1)
        assert head.regress.shape == (1, 16, 1, 1)

    def test_wrong_patch_size(self, model):
        with pytest.raises(ShapeError):
            forward_patch(model, np.zeros((20, 20, 3), np.uint8))

    def test_too_small_image(self, model):
        with pytest.raises(ShapeError):
            forward_full(model, np.zeros((10, 100, 3), np.uint8))

    def test_sliding_window_equivalence(self, model, rng):
        rw, rh = model.receptive_field
        s = model.stride
        img = rng.integers(0, 256, (rh + 3 * s + 2, rw + 2 * s + 1, 3), dtype=np.uint8)
        full = forward_full(model, img)
        assert full.scores.shape[2:] == (4, 3)
        for i in range(4):
            for j in range(3):
                p = forward_patch(model, img[i * s:i * s + rh, j * s:j * s + rw])
                np.testing.assert_allclose(full.scores[0, :, i, j], p.scores[0, :, 0, 0], rtol=1e-10, atol=1e-12)
                np.testing.assert_allclose(full.regress[0, :, i, j], p.regress[0, :, 0, 0], rtol=1e-10, atol=1e-12)

    def test_zero_weights_uniform(self, arch, rng):
        spec = builtin_spec(arch, 4, width=0.1)
        model = init_model(spec, 0, 0.0)
        rw, rh = model.receptive_field
        head = forward_patch(model, rng.integers(0, 256, (rh, rw, 3), dtype=np.uint8))
        np.testing.assert_allclose(head.probabilities()[0, :, 0, 0], 0.25)
        assert np.all(head.regress == 0)

    def test_batch_matches_single(self, model, rng):
        rw, rh = model.receptive_field
        imgs = rng.integers(0, 256, (3, rh + 4, rw, 3), dtype=np.uint8)
        batch = forward_full(model, imgs).scores
        for b in range(3):
            np.testing.assert_allclose(batch[b], forward_full(model, imgs[b]).scores[0], rtol=1e-10)


class TestHeadLayout:
    def test_regression_block(self):
        out = np.arange(20, dtype=float).reshape(1, 20, 1, 1)
        head = HeadOutput.split(out, 4)
        assert head.scores[0, :, 0, 0].tolist() == [0, 1, 2, 3]
        assert head.regression_block(1)[0, :, 0, 0].tolist() == [4, 5, 6, 7]
        assert head.regression_block(4)[0, :, 0, 0].tolist() == [16, 17, 18, 19]


class TestBackward:
    def test_matches_finite_differences(self, rng):
        from conftest import numerical_grad, rel_error

        spec = ArchitectureSpec("mini", (Conv(3, 3), Pool(2, 2), Conv(10, 2)), (6, 6), 2)
        model = init_model(spec, 1, 0.3, dtype=np.float64)
        x = rng.normal(size=(2, 3, 6, 6))
        g = rng.normal(size=(2, 10, 1, 1))
        out, cache = model.forward(x, keep_cache=True)
        grads = model.backward(cache, g)
        for (kern, bias), (gk, gb) in zip(model.params, grads):
            assert rel_error(gk, numerical_grad(lambda: float(np.sum(model.forward(x) * g)), kern)) < 1e-6
            assert rel_error(gb, numerical_grad(lambda: float(np.sum(model.forward(x) * g)), bias)) < 1e-6


def test_to_input_range():
    x = to_input(np.array([[[0, 255, 128]]], dtype=np.uint8))
    assert x.shape == (1, 3, 1, 1)
    assert x.min() == -0.5 and x.max() == 0.5
