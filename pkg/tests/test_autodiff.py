import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajlab import autodiff as ad
from trajlab.autodiff import (
    CheckpointError, MlpSpec, ParamSet, ShapeError, Tape, TapeError, Tensor,
    adam_step, backward, file_hash, grad_check, init_mlp_params, load_params,
    mlp_apply, mlp_forward, save_params,
)

from conftest import small_params


def identity_net(w0=1.0, b0=0.0):
    """widths (1,1,1): y = w1*relu(w0*x + b0) with w1=1, b1=0."""
    spec = MlpSpec((1, 1, 1), "relu")
    params = ParamSet()
    params.add("w0", np.array([[w0]]))
    params.add("b0", np.array([b0]))
    params.add("w1", np.array([[1.0]]))
    params.add("b1", np.array([0.0]))
    return params, spec


class TestMlpForward:
    def test_zero_net_gives_zero_output(self):
        spec = MlpSpec((3, 4, 2), "relu")
        params = ParamSet()
        for i, (m, n) in enumerate(((3, 4), (4, 2))):
            params.add(f"w{i}", np.zeros((m, n)))
            params.add(f"b{i}", np.zeros(n))
        out, _ = mlp_forward(params, spec, Tensor(np.array([1.0, -2.0, 3.0])))
        assert np.array_equal(out.data, np.zeros(2))

    def test_identity_case(self):
        params, spec = identity_net(w0=1.0, b0=0.0)
        out, _ = mlp_forward(params, spec, Tensor(np.array([2.0])))
        assert out.data[0] == pytest.approx(2.0, abs=0)

    def test_relu_clips_negative_preactivation(self):
        # w=3, b=-1, input 0 -> relu(-1) = 0
        params, spec = identity_net(w0=3.0, b0=-1.0)
        out, _ = mlp_forward(params, spec, Tensor(np.array([0.0])))
        assert out.data[0] == 0.0

    def test_shape_mismatch_reports_dimensions(self):
        params, spec = small_params()
        with pytest.raises(ShapeError, match="width 4"):
            mlp_forward(params, spec, Tensor(np.zeros(4)))

    def test_batched_matches_single(self):
        params, spec = small_params()
        xs = np.random.default_rng(1).normal(size=(5, 3))
        batch, _ = mlp_forward(params, spec, Tensor(xs))
        for i in range(5):
            single, _ = mlp_forward(params, spec, Tensor(xs[i]))
            assert np.allclose(batch.data[i], single.data, atol=0)

    def test_mlp_apply_matches_forward(self):
        params, spec = small_params(activation="tanh")
        x = np.random.default_rng(2).normal(size=(4, 3))
        out, _ = mlp_forward(params, spec, Tensor(x))
        assert np.array_equal(mlp_apply(params, spec, x), out.data)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            MlpSpec((4, 2))           # no hidden layer
        with pytest.raises(ValueError):
            MlpSpec((4, 0, 2))        # nonpositive width
        with pytest.raises(ValueError):
            MlpSpec((4, 3, 2), "gelu")


class TestBackward:
    def test_product_rule_base_case(self):
        # y = w1 * relu(w0 * x): x = 2 -> dy/dw0 = 2
        params, spec = identity_net(w0=3.0)
        out, tape = mlp_forward(params, spec, Tensor(np.array([2.0])))
        grads = backward(tape, np.array([1.0]))
        assert grads["w0"][0, 0] == pytest.approx(2.0, abs=0)

    def test_relu_gate_blocks_gradient(self):
        params, spec = identity_net(w0=3.0, b0=-10.0)
        out, tape = mlp_forward(params, spec, Tensor(np.array([1.0])))
        grads = backward(tape, np.array([1.0]))
        assert grads["w0"][0, 0] == 0.0

    def test_untouched_parameters_get_zero(self):
        params, spec = small_params()
        params.add("unused", np.ones(3))
        out, tape = mlp_forward(params, spec, Tensor(np.ones(3)))
        grads = backward(tape, np.ones(2))
        assert np.array_equal(grads["unused"], np.zeros(3))

    def test_two_layer_net_matches_finite_differences(self):
        params, spec = small_params(seed=3, widths=(4, 8, 3))
        x = np.random.default_rng(4).normal(size=(6, 4))

        def loss_fn():
            out, _ = mlp_forward(params, spec, Tensor(x))
            return ad.tsum(ad.square(out))

        report = grad_check(params, loss_fn, tolerance=1e-4)
        assert report.passed, report.per_param

    def test_tape_reuse_rejected(self):
        params, spec = small_params()
        _, tape = mlp_forward(params, spec, Tensor(np.ones(3)))
        backward(tape, np.ones(2))
        with pytest.raises(TapeError, match="consumed"):
            backward(tape, np.ones(2))

    def test_stale_tape_rejected(self):
        params, spec = small_params()
        _, tape = mlp_forward(params, spec, Tensor(np.ones(3)))
        adam_step(params, {n: np.zeros_like(params[n].data)
                           for n in params.names()}, 1e-3)
        with pytest.raises(TapeError, match="stale"):
            backward(tape, np.ones(2))

    def test_output_grad_shape_checked(self):
        params, spec = small_params()
        _, tape = mlp_forward(params, spec, Tensor(np.ones(3)))
        with pytest.raises(ShapeError):
            backward(tape, np.ones(5))


class TestOps:
    def test_softplus_is_log1p_exp(self):
        x = Tensor(np.array([-30.0, -1.0, 0.0, 1.0, 40.0]))
        out = ad.softplus(x)
        assert np.allclose(out.data, np.logaddexp(0.0, x.data), atol=0)
        assert np.all(np.isfinite(out.data))

    def test_concat_gradient_splits(self):
        a, b = Tensor(np.ones(2)), Tensor(np.ones(3))
        out = ad.concat([a, b])
        grads = ad.backward_graph(out, np.arange(5.0))
        assert np.array_equal(grads[id(a)], [0.0, 1.0])
        assert np.array_equal(grads[id(b)], [2.0, 3.0, 4.0])

    def test_sum_axis_gradient_broadcasts(self):
        a = Tensor(np.arange(6.0).reshape(2, 3))
        out = ad.tsum(a, axis=1)
        grads = ad.backward_graph(out, np.array([2.0, 3.0]))
        assert np.array_equal(grads[id(a)], [[2, 2, 2], [3, 3, 3]])

    def test_broadcast_sub_unbroadcasts(self):
        a = Tensor(np.ones((4, 3)))
        b = Tensor(np.ones(3))
        out = ad.sub(a, b)
        grads = ad.backward_graph(out, np.ones((4, 3)))
        assert np.array_equal(grads[id(b)], [-4.0, -4.0, -4.0])

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
    @settings(max_examples=50, deadline=None)
    def test_ops_preserve_finiteness(self, values):
        x = Tensor(np.asarray(values))
        for op in (ad.relu, ad.tanh, ad.softplus, ad.square):
            assert np.all(np.isfinite(op(x).data))
        assert np.isfinite(ad.tsum(x).data)
        assert np.isfinite(ad.tmean(x).data)


class TestAdam:
    def test_zero_gradient_is_identity(self):
        params, _ = small_params()
        before = {n: params[n].data.copy() for n in params.names()}
        ok = adam_step(params, {n: np.zeros_like(params[n].data)
                                for n in params.names()}, lr=0.1)
        assert ok
        for n in params.names():
            assert np.array_equal(before[n], params[n].data)

    def test_first_step_bias_corrected(self):
        params = ParamSet()
        params.add("theta", np.zeros(1))
        adam_step(params, {"theta": np.ones(1)}, lr=1e-3)
        # m-hat = v-hat = 1 at step 1 -> update = lr / (1 + eps)
        assert params["theta"].data[0] == pytest.approx(-1e-3, abs=1e-10)

    def test_two_runs_bit_for_bit(self):
        runs = []
        for _ in range(2):
            params, _ = small_params(seed=5)
            g = {n: np.full_like(params[n].data, 0.3) for n in params.names()}
            adam_step(params, g, 1e-2)
            adam_step(params, g, 1e-2)
            runs.append({n: params[n].data.copy() for n in params.names()})
        for n in runs[0]:
            assert np.array_equal(runs[0][n], runs[1][n])

    def test_non_finite_gradient_skips_step(self, caplog):
        params, _ = small_params()
        before = {n: params[n].data.copy() for n in params.names()}
        g = {n: np.zeros_like(params[n].data) for n in params.names()}
        g["w0"] = np.full_like(g["w0"], np.nan)
        ok = adam_step(params, g, 1e-2)
        assert not ok
        for n in params.names():
            assert np.array_equal(before[n], params[n].data)

    def test_grad_shape_mismatch_names_param(self):
        params, _ = small_params()
        g = {n: np.zeros_like(params[n].data) for n in params.names()}
        g["b0"] = np.zeros(17)
        with pytest.raises(ShapeError, match="b0"):
            adam_step(params, g, 1e-2)

    def test_step_count_monotone(self):
        params, _ = small_params()
        g = {n: np.zeros_like(params[n].data) for n in params.names()}
        for expect in (1, 2, 3):
            adam_step(params, g, 1e-3)
            assert params.adam_state("w0")[2] == expect


class TestGradCheck:
    def test_quadratic_loss_machine_precision(self):
        params = ParamSet()
        params.add("theta", np.array([0.7, -1.3, 2.2]))

        def loss_fn():
            return ad.tsum(ad.square(params["theta"]))

        report = grad_check(params, loss_fn)
        # central differences are exact for quadratics
        assert report.max_rel_err < 1e-7


class TestCheckpoints:
    def test_round_trip_exact(self, tmp_path):
        params, _ = small_params(seed=9)
        adam_step(params, {n: np.full_like(params[n].data, 0.1)
                           for n in params.names()}, 1e-3)
        path = tmp_path / "p.ckpt"
        save_params(params, path, meta={"kind": "test", "note": [1, 2]})
        loaded, meta = load_params(path)
        assert meta["note"] == [1, 2]
        for n in params.names():
            assert np.array_equal(params[n].data, loaded[n].data)
            for a, b in zip(params.adam_state(n)[:2], loaded.adam_state(n)[:2]):
                assert np.array_equal(a, b)
            assert params.adam_state(n)[2] == loaded.adam_state(n)[2]

    def test_save_is_deterministic(self, tmp_path):
        params, _ = small_params(seed=9)
        save_params(params, tmp_path / "a.ckpt")
        save_params(params, tmp_path / "b.ckpt")
        assert file_hash(tmp_path / "a.ckpt") == file_hash(tmp_path / "b.ckpt")

    def test_shape_mismatch_names_parameter(self, tmp_path):
        params, _ = small_params()
        path = tmp_path / "p.ckpt"
        save_params(params, path)
        expected = params.shapes()
        expected["w0"] = (7, 7)
        with pytest.raises(CheckpointError, match="'w0'"):
            load_params(path, expected_shapes=expected)

    def test_version_mismatch_rejected(self, tmp_path):
        params, _ = small_params()
        path = tmp_path / "p.ckpt"
        save_params(params, path)
        blob = bytearray(path.read_bytes())
        blob[4] = 99
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="version"):
            load_params(path)

    def test_corrupt_file_rejected(self, tmp_path):
        path = tmp_path / "p.ckpt"
        path.write_bytes(b"TLCK" + b"\x01\x00\x00\x00" + b"\xff" * 20)
        with pytest.raises(CheckpointError):
            load_params(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "p.ckpt"
        path.write_bytes(b"hello world")
        with pytest.raises(CheckpointError, match="magic"):
            load_params(path)
