import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gradcases
from pavement_assess import autodiff as ad
from pavement_assess.autodiff import Adam, DimensionError, Tensor, no_grad
from pavement_assess.autodiff.gradcheck import check_gradients, relative_error
from pavement_assess.autodiff.io import (
    CheckpointError,
    TensorFileError,
    load_checkpoint,
    load_ften,
    save_checkpoint,
    save_ften,
)
from pavement_assess.autodiff.tensor import make


def leaf(x):
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


class TestPrimitiveValues:
    def test_softmax_uniform(self):
        np.testing.assert_array_equal(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_relu(self):
        np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_identity_1x1_conv(self):
        x = np.random.default_rng(0).normal(size=(4, 5, 3))
        w = np.eye(3).reshape(1, 1, 3, 3)
        np.testing.assert_array_equal(ad.conv2d(Tensor(x), Tensor(w)).data, x)

    def test_conv_matches_loop(self):
        rng = np.random.default_rng(1)
        x, w, b = rng.normal(size=(4, 5, 2)), rng.normal(size=(3, 3, 2, 4)), rng.normal(size=4)
        xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
        expected = np.empty((4, 5, 4))
        for r in range(4):
            for c in range(5):
                expected[r, c] = np.einsum("ijk,ijkl->l", xp[r : r + 3, c : c + 3], w) + b
        np.testing.assert_allclose(ad.conv2d(Tensor(x), Tensor(w), Tensor(b), 1).data, expected, atol=1e-12)

    def test_adaptive_pool_examples(self):
        x = np.arange(16.0).reshape(4, 4, 1)
        np.testing.assert_array_equal(ad.adaptive_max_pool2d(Tensor(x), 2, 2).data[..., 0], [[5, 7], [13, 15]])
        np.testing.assert_array_equal(ad.adaptive_max_pool2d(Tensor(x), 4, 4).data, x)
        np.testing.assert_array_equal(ad.adaptive_max_pool2d(Tensor(x), 1, 1).data.ravel(), [15])

    def test_adaptive_pool_uneven_windows(self):
        # 5 rows into 2 cells: windows [0, 2) and [2, 5)
        x = np.zeros((5, 1, 1))
        x[4, 0, 0] = 9.0
        x[1, 0, 0] = 3.0
        np.testing.assert_array_equal(ad.adaptive_max_pool2d(Tensor(x), 2, 1).data.ravel(), [3.0, 9.0])

    def test_flatten_order(self):
        a, b, c, d = 1.0, 2.0, 3.0, 4.0
        x = np.array([[[a], [b]], [[c], [d]]])
        np.testing.assert_array_equal(ad.flatten_hwc(Tensor(x)).data, [a, b, c, d])
        y = np.arange(12.0).reshape(2, 3, 2)
        np.testing.assert_array_equal(ad.flatten_hwc(Tensor(y)).data, y.ravel())

    def test_cross_entropy_uniform(self):
        loss = ad.cross_entropy(Tensor(np.zeros((3, 4))), np.array([1, 2, 3]))
        assert loss.item() == pytest.approx(3 * math.log(4), abs=1e-12)

    def test_cross_entropy_all_ignored(self):
        logits = leaf(np.random.default_rng(2).normal(size=(3, 4)))
        loss = ad.cross_entropy(logits, np.zeros(3, dtype=int), ignore_id=0)
        assert loss.item() == 0.0
        loss.backward()
        np.testing.assert_array_equal(logits.grad, 0.0)

    def test_cross_entropy_bad_target(self):
        with pytest.raises(ValueError, match="outside"):
            ad.cross_entropy(Tensor(np.zeros((2, 3))), np.array([1, 3]))

    def test_layer_norm_statistics(self):
        x = np.random.default_rng(3).normal(3.0, 5.0, size=(6, 8))
        y = ad.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.std(axis=-1), 1.0, atol=1e-5)

    def test_embedding_rows(self):
        table = np.arange(12.0).reshape(4, 3)
        np.testing.assert_array_equal(ad.embedding_lookup(Tensor(table), [3, 0, 3]).data, table[[3, 0, 3]])


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = leaf(np.random.default_rng(0).normal(size=(3, 4)))
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_inner_product_gradient(self):
        data = np.random.default_rng(1).normal(size=5)
        x = leaf(data)
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, 2 * data, atol=1e-12)

    def test_shared_subexpression_accumulates(self):
        x = leaf([2.0])
        y = x * 3.0
        (y + y * x).sum().backward()  # 3x + 3x^2 -> 3 + 6x
        np.testing.assert_allclose(x.grad, [15.0])

    def test_second_backward_raises(self):
        x = leaf([1.0, 2.0])
        loss = (x * x).sum()
        loss.backward()
        with pytest.raises(RuntimeError, match="already"):
            loss.backward()

    def test_non_scalar_raises(self):
        with pytest.raises(DimensionError, match="scalar"):
            (leaf([1.0, 2.0]) * 2.0).backward()

    def test_no_grad_builds_no_graph(self):
        x = leaf([1.0])
        with no_grad():
            y = (x * 2.0).sum()
        assert not y.requires_grad
        with pytest.raises(RuntimeError):
            y.backward()

    def test_numpy_scalar_defers_to_tensor(self):
        x = leaf([1.0, 2.0])
        y = np.float64(2.0) * x
        assert isinstance(y, Tensor)

    def test_dimension_errors_name_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\)"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
        with pytest.raises(DimensionError):
            Tensor(np.zeros((2, 3))) + Tensor(np.zeros((3, 2)))
        with pytest.raises(DimensionError, match="channels"):
            ad.conv2d(Tensor(np.zeros((4, 4, 2))), Tensor(np.zeros((3, 3, 3, 1))))
        with pytest.raises(DimensionError, match="exceeds"):
            ad.adaptive_max_pool2d(Tensor(np.zeros((2, 2, 1))), 3, 1)


class TestGradients:
    @pytest.mark.parametrize("name", sorted(gradcases.CASES))
    def test_finite_differences(self, name):
        for seed in range(3):
            assert gradcases.max_error(name, seed) < gradcases.TOL, (name, seed)

    def test_relative_error_floor(self):
        assert relative_error(np.array([1e-7]), np.array([0.0])) == pytest.approx(1e-3)
        assert relative_error(np.array([2.0]), np.array([1.0])) == 0.5
        assert relative_error(np.array([]), np.array([])) == 0.0

    def test_subsampled_check_detects_wrong_gradient(self):
        x = leaf(np.random.default_rng(0).normal(size=50))

        def broken_exp(t):
            # forward is exp, backward passes the upstream grad through unchanged
            return make(np.exp(t.data), (t,), lambda g: (g,), "broken_exp")

        assert check_gradients(lambda: ad.exp(x).sum(), {"x": x}, max_entries=10)["x"] < 1e-6
        assert check_gradients(lambda: broken_exp(x).sum(), {"x": x}, max_entries=10)["x"] > 1e-2


class TestNumerics:
    @settings(max_examples=200)
    @given(st.lists(st.floats(-20, 20), min_size=1, max_size=12))
    def test_softmax_sums_to_one(self, values):
        p = ad.softmax(Tensor(values)).data
        assert abs(p.sum() - 1.0) < 1e-12
        assert np.all(p >= 0)

    @settings(max_examples=200)
    @given(st.lists(st.floats(-20, 20), min_size=1, max_size=12))
    def test_log_softmax_matches_log_of_softmax(self, values):
        x = Tensor(values)
        np.testing.assert_allclose(ad.log_softmax(x).data, np.log(ad.softmax(x).data), atol=1e-9)

    def test_softmax_large_logits_stable(self):
        p = ad.softmax(Tensor([1000.0, 1000.0, -1000.0])).data
        np.testing.assert_allclose(p, [0.5, 0.5, 0.0], atol=1e-12)

    def test_double_precision(self):
        assert (Tensor([1.0]) + Tensor([1e-12])).data.dtype == np.float64


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        p = leaf([1.0, -2.0, 3.0])
        opt = Adam({"p": p}, lr=0.1)
        for _ in range(5):
            p.grad = np.zeros(3)
            opt.step()
        np.testing.assert_array_equal(p.data, [1.0, -2.0, 3.0])

    def test_first_step_moves_against_gradient_by_lr(self):
        p = leaf([1.0, 1.0])
        opt = Adam({"p": p}, lr=0.01)
        p.grad = np.array([3.0, -0.5])
        opt.step()
        np.testing.assert_allclose(p.data, [0.99, 1.01], atol=1e-9)

    def test_quadratic_converges(self):
        p = leaf([5.0])
        opt = Adam({"p": p}, lr=1e-2)
        for _ in range(2000):
            opt.zero_grad()
            ((p - 2.0) ** 2).sum().backward()
            opt.step()
            if abs(p.data[0] - 2.0) < 1e-6:
                break
        assert ((p.data[0] - 2.0) ** 2) < 1e-6

    def test_missing_gradient_named(self):
        a, b = leaf([1.0]), leaf([2.0])
        opt = Adam({"a": a, "b": b})
        (a * 2.0).sum().backward()
        with pytest.raises(RuntimeError, match="b"):
            opt.step()

    def test_cosine_schedule(self):
        assert ad.cosine_lr(1.0, 0, 10) == 1.0
        assert ad.cosine_lr(1.0, 5, 10) == pytest.approx(0.5, abs=1e-12)
        assert ad.cosine_lr(1.0, 10, 10) == pytest.approx(0.0, abs=1e-12)
        assert ad.cosine_lr(0.3, 3, 0) == 0.3


class TestTensorFiles:
    def test_round_trip_exact_for_float32_values(self, tmp_path):
        data = np.random.default_rng(0).normal(size=(2, 3, 4)).astype(np.float32)
        save_ften(tmp_path / "t.ften", data)
        loaded = load_ften(tmp_path / "t.ften")
        assert loaded.dtype == np.float64
        np.testing.assert_array_equal(loaded, data.astype(np.float64))

    def test_layout(self, tmp_path):
        save_ften(tmp_path / "t.ften", np.array([[1.0, 2.0, 3.0]]))
        raw = (tmp_path / "t.ften").read_bytes()
        assert raw[:4] == b"FTEN"
        assert struct.unpack("<3I", raw[4:16]) == (2, 1, 3)
        assert struct.unpack("<3f", raw[16:]) == (1.0, 2.0, 3.0)

    def test_scalar_and_empty(self, tmp_path):
        save_ften(tmp_path / "s.ften", np.float32(2.5))
        assert load_ften(tmp_path / "s.ften").shape == ()
        save_ften(tmp_path / "e.ften", np.zeros((0, 3)))
        assert load_ften(tmp_path / "e.ften").shape == (0, 3)

    def test_corruptions(self, tmp_path):
        path = tmp_path / "t.ften"
        save_ften(path, np.ones((2, 2)))
        raw = path.read_bytes()
        for bad, message in ((b"XTEN" + raw[4:], "magic"), (raw[:6], "truncated"), (raw[:-1], "payload")):
            path.write_bytes(bad)
            with pytest.raises(TensorFileError, match=message):
                load_ften(path)


class TestCheckpoints:
    def params(self, seed):
        rng = np.random.default_rng(seed)
        return {"enc.w": Tensor(rng.normal(size=(3, 2)).astype(np.float32)), "bias": Tensor(rng.normal(size=4).astype(np.float32))}

    def test_round_trip(self, tmp_path):
        src = self.params(0)
        save_checkpoint(tmp_path, src, {"kind": "test"})
        dst = self.params(1)
        assert load_checkpoint(tmp_path, dst) == {"kind": "test"}
        for name in src:
            np.testing.assert_array_equal(dst[name].data, src[name].data)

    def test_manifest_lists_parameters(self, tmp_path):
        save_checkpoint(tmp_path, self.params(0))
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert [(e["name"], e["shape"]) for e in manifest["parameters"]] == [("enc.w", [3, 2]), ("bias", [4])]

    def test_corrupted_file_names_parameter(self, tmp_path):
        save_checkpoint(tmp_path, self.params(0))
        entry = json.loads((tmp_path / "manifest.json").read_text())["parameters"][0]
        (tmp_path / entry["file"]).write_bytes(b"FTEN\x01")
        with pytest.raises(CheckpointError, match="'enc.w'"):
            load_checkpoint(tmp_path, self.params(1))

    def test_shape_mismatch_and_missing(self, tmp_path):
        save_checkpoint(tmp_path, self.params(0))
        with pytest.raises(CheckpointError, match="'bias'"):
            load_checkpoint(tmp_path, {"bias": Tensor(np.zeros(5))})
        with pytest.raises(CheckpointError, match="'other'"):
            load_checkpoint(tmp_path, {"other": Tensor(np.zeros(1))})

    def test_missing_and_corrupt_manifest(self, tmp_path):
        with pytest.raises(CheckpointError, match="missing"):
            load_checkpoint(tmp_path, self.params(0))
        (tmp_path / "manifest.json").write_text("{not json")
        with pytest.raises(CheckpointError, match="corrupted"):
            load_checkpoint(tmp_path, self.params(0))

    def test_saving_twice_is_byte_identical(self, tmp_path):
        save_checkpoint(tmp_path / "a", self.params(0))
        save_checkpoint(tmp_path / "b", self.params(0))
        for f in sorted(p.name for p in (tmp_path / "a").iterdir()):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
