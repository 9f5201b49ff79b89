"""Pull-push exactness, convexity, and adjoint checks."""

import numpy as np
import pytest

from adasample import pullpush as pp, tensorcore as tc
from adasample.pipeline import fd_gradient, max_rel_error


def rand_sparse(rng, c=2, h=8, w=8, density=0.2):
    mask = (rng.uniform(size=(h, w)) < density).astype(np.float32)
    data = rng.normal(size=(c, h, w)).astype(np.float32) * mask[None]
    return pp.SparseImage(mask, data)


class TestForwardExactness:
    def test_dense_mask_is_identity_bit_exact(self):
        rng = np.random.default_rng(0)
        data = rng.normal(size=(3, 8, 8)).astype(np.float32)
        mo, do = pp.pullpush_forward(pp.SparseImage(np.ones((8, 8), np.float32), data))
        np.testing.assert_array_equal(do, data)
        assert np.all(mo == 1.0)

    def test_single_sample_fills_2x2(self):
        mask = np.zeros((2, 2), np.float32)
        mask[0, 0] = 1.0
        data = np.zeros((1, 2, 2), np.float32)
        data[0, 0, 0] = 7.5
        mo, do = pp.pullpush_forward(pp.SparseImage(mask, data))
        np.testing.assert_allclose(do, 7.5)
        np.testing.assert_allclose(mo, 1.0)

    def test_empty_mask_propagates_nothing(self):
        mo, do = pp.pullpush_forward(
            pp.SparseImage(np.zeros((8, 8), np.float32), np.zeros((2, 8, 8), np.float32))
        )
        assert np.all(mo == 0.0) and np.all(do == 0.0)

    def test_exact_pixel_preservation(self):
        rng = np.random.default_rng(1)
        sp = rand_sparse(rng, density=0.3)
        mo, do = pp.pullpush_forward(sp)
        on = sp.mask == 1.0
        np.testing.assert_array_equal(do[:, on], sp.data[:, on])

    @pytest.mark.parametrize("seed", range(20))
    def test_convex_range_binary_masks(self, seed):
        rng = np.random.default_rng(seed)
        sp = rand_sparse(rng, c=2, h=16, w=16, density=0.15)
        if sp.mask.sum() == 0:
            return
        _, do = pp.pullpush_forward(sp)
        on = sp.mask == 1.0
        for c in range(2):
            lo, hi = sp.data[c][on].min(), sp.data[c][on].max()
            assert do[c].min() >= lo - 1e-5
            assert do[c].max() <= hi + 1e-5

    def test_idempotent_on_dense(self):
        rng = np.random.default_rng(2)
        data = rng.normal(size=(2, 8, 8)).astype(np.float32)
        m1, d1 = pp.pullpush_forward(pp.SparseImage(np.ones((8, 8), np.float32), data))
        m2, d2 = pp.pullpush_forward(pp.SparseImage(m1, d1))
        np.testing.assert_array_equal(d2, data)

    def test_recursion_depth_bounded(self):
        def depth(rec):
            return 0 if rec["kind"] == "leaf" else 1 + depth(rec["inner"])

        rng = np.random.default_rng(3)
        for (h, w) in [(8, 8), (16, 16), (7, 5), (64, 64)]:
            mask = (rng.uniform(size=(h, w)) < 0.05).astype(np.float32)
            data = rng.normal(size=(1, h, w)).astype(np.float32)
            _, _, rec = pp.pullpush_with_saved(mask, data)
            assert depth(rec) <= int(np.ceil(np.log2(max(h, w))))

    def test_mask_stays_in_unit_interval(self):
        rng = np.random.default_rng(4)
        mask = rng.uniform(0.0, 1.0, size=(16, 16)).astype(np.float32)
        data = rng.normal(size=(2, 16, 16)).astype(np.float32)
        mo, _ = pp.pullpush_forward(pp.SparseImage(mask, data))
        assert mo.min() >= 0.0 and mo.max() <= 1.0 + 1e-6

    @pytest.mark.parametrize("shape", [(7, 5), (9, 12), (3, 3)])
    def test_non_power_of_two_sizes(self, shape):
        rng = np.random.default_rng(5)
        h, w = shape
        mask = (rng.uniform(size=(h, w)) < 0.3).astype(np.float32)
        mask[0, 0] = 1.0
        data = rng.normal(size=(2, h, w)).astype(np.float32) * mask[None]
        mo, do = pp.pullpush_forward(pp.SparseImage(mask, data))
        assert np.all(np.isfinite(do)) and np.all(np.isfinite(mo))
        on = mask == 1.0
        np.testing.assert_array_equal(do[:, on], data[:, on])


class TestBackward:
    def test_dense_mask_data_gradient_is_identity(self):
        rng = np.random.default_rng(6)
        data = rng.normal(size=(2, 8, 8)).astype(np.float32)
        _, _, rec = pp.pullpush_with_saved(np.ones((8, 8), np.float32), data)
        g = rng.normal(size=(2, 8, 8))
        gm, gd = pp.pullpush_backward(np.zeros((8, 8)), g, rec)
        np.testing.assert_allclose(gd, g, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_data_gradient_matches_fd(self, seed):
        rng = np.random.default_rng(seed)
        mask = rng.uniform(0.2, 0.8, size=(8, 8)).astype(np.float32)
        data = rng.normal(size=(2, 8, 8)).astype(np.float32)
        u = rng.normal(size=(8, 8))
        v = rng.normal(size=(2, 8, 8))

        def f(d):
            mo, do, _ = pp.pullpush_with_saved(mask, d)
            return float((u * mo).sum() + (v * do).sum())

        _, _, rec = pp.pullpush_with_saved(mask, data)
        _, gd = pp.pullpush_backward(u, v, rec)
        assert max_rel_error(gd, fd_gradient(f, data)) < 1e-3

    @pytest.mark.parametrize("seed", range(5))
    def test_mask_gradient_matches_fd(self, seed):
        # interior fractional masks; division terms amplify noise, 1e-2 budget
        rng = np.random.default_rng(100 + seed)
        mask = rng.uniform(0.2, 0.8, size=(8, 8)).astype(np.float32)
        data = rng.normal(size=(2, 8, 8)).astype(np.float32)
        u = rng.normal(size=(8, 8))
        v = rng.normal(size=(2, 8, 8))

        def f(m):
            mo, do, _ = pp.pullpush_with_saved(m, data)
            return float((u * mo).sum() + (v * do).sum())

        _, _, rec = pp.pullpush_with_saved(mask, data)
        gm, _ = pp.pullpush_backward(u, v, rec)
        assert max_rel_error(gm, fd_gradient(f, mask)) < 1e-2

    def test_binary_mask_data_gradient_matches_fd(self):
        # multi-level recursion active
        rng = np.random.default_rng(42)
        mask = (rng.uniform(size=(8, 8)) < 0.15).astype(np.float32)
        mask[2, 2] = 1.0
        data = rng.normal(size=(2, 8, 8)).astype(np.float32)
        v = rng.normal(size=(2, 8, 8))

        def f(d):
            _, do, _ = pp.pullpush_with_saved(mask, d)
            return float((v * do).sum())

        _, _, rec = pp.pullpush_with_saved(mask, data)
        _, gd = pp.pullpush_backward(np.zeros((8, 8)), v, rec)
        assert max_rel_error(gd, fd_gradient(f, data)) < 1e-3

    def test_tape_op_matches_plain_backward(self):
        rng = np.random.default_rng(9)
        mask = rng.uniform(0.2, 0.8, size=(8, 8)).astype(np.float32)
        data = rng.normal(size=(2, 8, 8)).astype(np.float32)

        mo_ref, do_ref, rec = pp.pullpush_with_saved(mask, data)
        gm_ref, gd_ref = pp.pullpush_backward(
            np.zeros((8, 8)), np.ones((2, 8, 8)), rec
        )

        tape = tc.Tape()
        mv, dv = tape.param(mask), tape.param(data)
        mask_out, data_out = pp.pullpush_op(mv, dv)
        np.testing.assert_allclose(mask_out.value[0], mo_ref, atol=1e-6)
        np.testing.assert_allclose(data_out.value, do_ref, atol=1e-5)
        tape.backward(tc.sum_all(data_out))
        np.testing.assert_allclose(tape.grads[mv.node_id], gm_ref, rtol=1e-3, atol=1e-5)
        np.testing.assert_allclose(tape.grads[dv.node_id], gd_ref, rtol=1e-3, atol=1e-5)

    def test_shape_mismatch_rejected(self):
        tape = tc.Tape()
        with pytest.raises(tc.ShapeError):
            pp.pullpush_op(
                tape.param(np.ones((4, 4), np.float32)),
                tape.param(np.ones((2, 5, 5), np.float32)),
            )
