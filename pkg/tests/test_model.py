import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geodiff.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from geodiff.diffusion import build_schedule
from geodiff.errors import DomainError, FormatError, NonFiniteLoss
from geodiff.geometry import DepthMap, align_affine
from geodiff.model import (
    PARAM_NAMES, OptimizerState, adam_step, backprop, forward, forward_with_cache, init_params,
    timestep_embedding,
)
from geodiff.train import Batch, LossKind, batch_loss, loss_and_grad

SCHED = build_schedule()


def small(out_channels=1, seed=0, **kw):
    return init_params(4, 5, out_channels, width=12, embed_dim=6, seed=seed, **kw)


def _rng(seed=0):
    return np.random.default_rng(seed)


class TestForward:
    def test_output_shape(self):
        p = small()
        assert forward(p, np.zeros((4, 5)), np.zeros((4, 5)), 10).shape == (4, 5)
        p3 = small(3)
        assert forward(p3, np.zeros((2, 4, 5, 3)), np.zeros((2, 4, 5)), [1, 2]).shape == (2, 4, 5, 3)

    def test_zero_output_layer(self):
        p = small(zero_output=True)
        r = _rng()
        v = forward(p, r.standard_normal((4, 5)), r.standard_normal((4, 5)), 700)
        assert not v.any()

    def test_deterministic(self):
        p = small()
        r = _rng(1)
        z, x = r.standard_normal((4, 5)), r.standard_normal((4, 5))
        np.testing.assert_array_equal(forward(p, z, x, 3), forward(p, z, x, 3))

    def test_batch_matches_single(self):
        p = small()
        r = _rng(2)
        z, x = r.standard_normal((3, 4, 5)), r.standard_normal((3, 4, 5))
        t = np.array([1, 500, 1000])
        batched = forward(p, z, x, t)
        for i in range(3):
            np.testing.assert_allclose(batched[i], forward(p, z[i], x[i], t[i]), atol=1e-14)

    def test_input_sensitivity(self):
        p = small()
        r = _rng(3)
        z, x = r.standard_normal((4, 5)), r.standard_normal((4, 5))
        base = forward(p, z, x, 100)
        for arr in (z, x):
            arr[1, 2] += 1e-3
            assert np.max(np.abs(forward(p, z, x, 100) - base)) > 1e-8
            arr[1, 2] -= 1e-3
        assert np.max(np.abs(forward(p, z, x, 101) - base)) > 1e-8

    def test_shape_mismatch(self):
        p = small()
        with pytest.raises(DomainError):
            forward(p, np.zeros((4, 5)), np.zeros((5, 4)), 1)
        with pytest.raises(DomainError):
            forward(p, np.zeros((4, 4)), np.zeros((4, 5)), 1)

    def test_embedding(self):
        e = timestep_embedding([0, 1], 6)
        np.testing.assert_allclose(e[0], [0, 0, 0, 1, 1, 1])
        freqs = np.exp(-np.log(1e4) * np.arange(3) / 3)
        np.testing.assert_allclose(e[1], np.concatenate([np.sin(freqs), np.cos(freqs)]))

    def test_param_count(self):
        p = small()
        i = 4 * 5 * 2 + 6
        assert p.layer_sizes == (i, 12, 12, 20)
        assert p.n_params() == i * 12 + 12 + 12 * 12 + 12 + 12 * 20 + 20


def _batch(kind, B=3, seed=0):
    r = _rng(seed)
    if kind is LossKind.ANGULAR_NORMALS:
        shape = (B, 4, 5, 3)
        target = r.standard_normal(shape)
        target /= np.linalg.norm(target, axis=-1, keepdims=True)
    else:
        shape = (B, 4, 5)
        target = r.standard_normal(shape)
    mask = r.random((B, 4, 5)) > 0.15
    if kind is LossKind.V_MATCHING:
        t = r.integers(1, 1001, size=B)
    else:
        t = np.full(B, 1000)
    return Batch(r.standard_normal((B, 4, 5)), r.standard_normal(shape), t, target, mask)


def _frozen_alignments(params, batch):
    v = forward(params, batch.z_t, batch.x, batch.t)
    from geodiff.diffusion import reconstruct_z0
    z0 = reconstruct_z0(batch.z_t, v, batch.t, SCHED)
    return [align_affine(DepthMap(z0[b], batch.mask[b]), DepthMap(batch.target[b], batch.mask[b]))
            for b in range(len(z0))]


def gradient_check(kind, n=120, h=1e-4, seed=0):
    """Max relative error of analytic vs central-difference gradients over n
    parameter entries spread across every tensor."""
    params = small(3 if kind is LossKind.ANGULAR_NORMALS else 1, seed=seed)
    batch = _batch(kind, seed=seed)
    al = _frozen_alignments(params, batch) if kind is LossKind.AFFINE_DEPTH else None
    _, grads = loss_and_grad(params, batch, kind, SCHED, al)
    r = _rng(seed + 100)
    worst = 0.0
    per_tensor = n // len(PARAM_NAMES) + 1
    for name in PARAM_NAMES:
        w = params.tensors[name]
        for flat in r.choice(w.size, size=min(per_tensor, w.size), replace=False):
            idx = np.unravel_index(flat, w.shape)
            orig = w[idx]
            w[idx] = orig + h
            up = batch_loss(params, batch, kind, SCHED, al)
            w[idx] = orig - h
            down = batch_loss(params, batch, kind, SCHED, al)
            w[idx] = orig
            num = (up - down) / (2 * h)
            ana = grads[name][idx]
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-8))
    return worst


@pytest.mark.parametrize("kind", list(LossKind))
def test_gradient_check(kind):
    assert gradient_check(kind) <= 1e-4


class TestBackward:
    def test_zero_loss_zero_gradient(self):
        p = small(seed=4)
        b = _batch(LossKind.V_MATCHING, seed=4)
        b.target = forward(p, b.z_t, b.x, b.t)
        info, g = loss_and_grad(p, b, LossKind.V_MATCHING, SCHED)
        assert info.loss == 0.0
        assert all(not v.any() for v in g.values())

    def test_gradient_linear_in_upstream(self):
        p = small(seed=5)
        r = _rng(5)
        _, cache = forward_with_cache(p, r.standard_normal((2, 4, 5)), r.standard_normal((2, 4, 5)), [3, 4])
        d = r.standard_normal((2, 4, 5))
        g1 = backprop(p, cache, d)
        g3 = backprop(p, cache, 3.0 * d)
        for k in PARAM_NAMES:
            np.testing.assert_allclose(g3[k], 3.0 * g1[k], rtol=1e-12, atol=1e-15)

    def test_gradient_congruent(self):
        p = small()
        _, g = loss_and_grad(p, _batch(LossKind.V_MATCHING), LossKind.V_MATCHING, SCHED)
        assert {k: v.shape for k, v in g.items()} == p.shapes()

    def test_nonfinite_names_sample(self):
        p = small()
        b = _batch(LossKind.V_MATCHING)
        b.target[1, 0, 0] = np.inf
        b.mask[1, 0, 0] = True
        with pytest.raises(NonFiniteLoss) as e:
            loss_and_grad(p, b, LossKind.V_MATCHING, SCHED)
        assert e.value.sample_index == 1

    def test_degenerate_depth_sample_skipped(self):
        p = small(zero_output=True)
        b = _batch(LossKind.AFFINE_DEPTH)
        b.z_t[:] = 0.0  # zero net output and zero z_T => constant prediction
        info, g = loss_and_grad(p, b, LossKind.AFFINE_DEPTH, SCHED)
        assert info.skipped == 3 and info.loss == 0.0
        assert all(not v.any() for v in g.values())


class TestAdam:
    def _grads(self, p, value=0.0):
        return {k: np.full_like(v, value) for k, v in p.tensors.items()}

    def test_zero_gradient_no_change(self):
        p = small()
        s = OptimizerState.zeros_like(p)
        p2, s2 = adam_step(p, self._grads(p), s)
        for k in PARAM_NAMES:
            np.testing.assert_array_equal(p2.tensors[k], p.tensors[k])
        assert s2.step == 1 and s.step == 0

    def test_first_step_closed_form(self):
        p = small()
        r = _rng(9)
        g = {k: r.standard_normal(v.shape) for k, v in p.tensors.items()}
        s = OptimizerState.zeros_like(p, lr=0.01)
        p2, _ = adam_step(p, g, s)
        for k in PARAM_NAMES:
            # bias-corrected moments at step 1 are g and g^2
            expect = p.tensors[k] - 0.01 * g[k] / (np.abs(g[k]) + 1e-8)
            np.testing.assert_allclose(p2.tensors[k], expect, rtol=1e-12, atol=1e-15)

    def test_decoupled_weight_decay(self):
        p = small()
        s = OptimizerState.zeros_like(p, lr=0.1, weight_decay=0.5)
        p2, _ = adam_step(p, self._grads(p), s)
        for k in PARAM_NAMES:
            np.testing.assert_allclose(p2.tensors[k], p.tensors[k] * 0.95)

    def test_deterministic_trajectory(self):
        def run():
            p = small()
            s = OptimizerState.zeros_like(p)
            r = _rng(11)
            for _ in range(5):
                p, s = adam_step(p, {k: r.standard_normal(v.shape) for k, v in p.tensors.items()}, s)
            return p
        a, b = run(), run()
        for k in PARAM_NAMES:
            np.testing.assert_array_equal(a.tensors[k], b.tensors[k])

    def test_shape_mismatch(self):
        p = small()
        g = self._grads(p)
        g["b1"] = np.zeros(3)
        with pytest.raises(DomainError):
            adam_step(p, g, OptimizerState.zeros_like(p))

    @settings(max_examples=25)
    @given(st.floats(-10, 10).filter(lambda x: abs(x) > 1e-3), st.floats(1e-4, 1e-1))
    def test_first_step_magnitude(self, g, lr):
        p = small()
        grads = self._grads(p, g)
        p2, _ = adam_step(p, grads, OptimizerState.zeros_like(p, lr=lr))
        delta = p2.tensors["b1"] - p.tensors["b1"]
        np.testing.assert_allclose(delta, -lr * np.sign(g) * abs(g) / (abs(g) + 1e-8), rtol=1e-9)


class TestCheckpoint:
    def _state(self, p):
        r = _rng(7)
        s = OptimizerState.zeros_like(p, lr=3e-4, weight_decay=0.01)
        s.step = 17
        for k in PARAM_NAMES:
            s.m[k] = r.standard_normal(p.tensors[k].shape)
            s.v[k] = r.random(p.tensors[k].shape)
        return s

    def test_round_trip_bit_exact(self, tmp_path):
        p = small(3, seed=2)
        s = self._state(p)
        path = tmp_path / "m.gdk"
        save_checkpoint(path, p, s)
        p2, s2 = load_checkpoint(path)
        for k in PARAM_NAMES:
            np.testing.assert_array_equal(p2.tensors[k], p.tensors[k].astype(np.float32))
            np.testing.assert_array_equal(s2.m[k], s.m[k].astype(np.float32))
        assert (s2.step, s2.lr, s2.weight_decay) == (17, 3e-4, 0.01)
        assert encode_checkpoint(p2, s2) == path.read_bytes()

    def test_without_optimizer(self):
        p = small()
        p2, s2 = decode_checkpoint(encode_checkpoint(p))
        assert s2 is None and p2.layer_sizes == p.layer_sizes

    def test_bad_magic(self):
        data = bytearray(encode_checkpoint(small()))
        data[:4] = b"XXXX"
        with pytest.raises(FormatError) as e:
            decode_checkpoint(bytes(data))
        assert e.value.offset == 0

    def test_truncation_positioned(self):
        data = encode_checkpoint(small(), self._state(small()))
        for cut in (10, 50, len(data) // 2, len(data) - 1):
            with pytest.raises(FormatError) as e:
                decode_checkpoint(data[:cut])
            assert e.value.offset <= cut
            assert "byte offset" in str(e.value)

    def test_trailing_bytes(self):
        with pytest.raises(FormatError, match="trailing"):
            decode_checkpoint(encode_checkpoint(small()) + b"\x00")

    def test_bad_flag(self):
        data = bytearray(encode_checkpoint(small()))
        data[-1] = 7
        with pytest.raises(FormatError, match="optimizer flag"):
            decode_checkpoint(bytes(data))

    def test_inconsistent_sizes(self):
        data = bytearray(encode_checkpoint(small()))
        data[16:20] = (999).to_bytes(4, "little")
        with pytest.raises(FormatError):
            decode_checkpoint(bytes(data))
