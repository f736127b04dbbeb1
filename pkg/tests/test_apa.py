import numpy as np
import pytest

from pfan import apa
from pfan import datasets as ds
from pfan import ehts
from pfan import numerics as nx
from pfan import trainer as tr


class TestInitGlobal:
    def test_one_sample_per_class(self):
        f = np.array([[1.0, 2.0], [3.0, 4.0]])
        st = apa.init_global(f, [0, 1], f[::-1], [1, 0], 2)
        np.testing.assert_array_equal(st.target.glob, f)
        np.testing.assert_array_equal(st.source.glob, f)
        assert st.active

    def test_missing_class_inactive(self):
        st = apa.init_global(np.eye(3), [0, 1, 2], np.eye(3)[:1], [0], 3)
        np.testing.assert_array_equal(st.active_classes, [True, False, False])

    def test_matches_compute_prototypes(self):
        rng = np.random.default_rng(0)
        f, y = rng.normal(size=(40, 3)), rng.integers(0, 4, 40)
        st = apa.init_global(f, y, f, y, 4)
        np.testing.assert_array_equal(st.source.glob, ehts.compute_prototypes(f, y, 4).centroids)

    def test_empty_selection(self):
        st = apa.init_global(np.eye(2), [0, 1], np.zeros((0, 2)), np.zeros(0, dtype=int), 2)
        assert not st.active


class TestAccumulated:
    def test_mean_of_two(self):
        a = apa.update_accumulated(np.zeros(2), np.array([1.0, 0.0]), 1)
        np.testing.assert_array_equal(apa.update_accumulated(a, np.array([0.0, 1.0]), 2), [0.5, 0.5])

    def test_single(self):
        np.testing.assert_array_equal(apa.update_accumulated(np.full(2, 9.0), np.array([3.0, 4.0]), 1),
                                      [3.0, 4.0])

    def test_brute_force_mean(self):
        locs = np.random.default_rng(1).normal(size=(5, 6))
        acc = np.zeros(6)
        for I, c in enumerate(locs, 1):
            acc = apa.update_accumulated(acc, c, I)
        np.testing.assert_allclose(acc, locs.mean(axis=0), atol=1e-12)

    def test_permutation_invariant(self):
        locs = np.random.default_rng(2).normal(size=(8, 4))
        outs = []
        for order in (np.arange(8), np.random.default_rng(3).permutation(8)):
            acc = np.zeros(4)
            for I, c in enumerate(locs[order], 1):
                acc = apa.update_accumulated(acc, c, I)
            outs.append(acc)
        np.testing.assert_allclose(outs[0], outs[1], atol=1e-12)

    def test_counter_starts_at_one(self):
        with pytest.raises(ValueError):
            apa.update_accumulated(np.zeros(2), np.zeros(2), 0)

    def test_absent_class_counter_does_not_advance(self):
        st = apa.init_global(np.eye(2), [0, 1], np.eye(2), [0, 1], 2)
        res = apa.apa_step(st, np.eye(2)[:1], [0], np.eye(2)[:1], [0])
        np.testing.assert_array_equal(res.state.source.n_local, [1, 0])
        assert np.isnan(res.rho_source[1])


class TestAdaptGlobal:
    def test_fixed_point(self):
        c = np.array([0.3, -1.2])
        new, rho = apa.adapt_global(c, c)
        assert rho == pytest.approx(1.0, abs=1e-9)  # norm guard
        np.testing.assert_allclose(new, c, atol=1e-9)

    def test_orthogonal_rejected(self):
        new, rho = apa.adapt_global(np.array([0.0, 5.0]), np.array([1.0, 0.0]))
        assert rho == 0.0
        np.testing.assert_array_equal(new, [1.0, 0.0])

    def test_hand_value(self):
        new, rho = apa.adapt_global(np.array([1.0, 1.0]), np.array([1.0, 0.0]))
        assert rho * rho == pytest.approx(0.5, abs=1e-9)
        np.testing.assert_allclose(new, [1.0, 0.5], atol=1e-9)

    def test_fuzz_convex_and_damped(self):
        rng = np.random.default_rng(4)
        for _ in range(1000):
            d = rng.integers(1, 8)
            a = rng.normal(size=d) * rng.uniform(0.01, 100)
            b = rng.normal(size=d) * rng.uniform(0.01, 100)
            new, rho = apa.adapt_global(a, b)
            assert -1.0 <= rho <= 1.0
            # on the segment [a, b]: new - b = w (a - b) with w in [0, 1]
            w = rho * rho
            np.testing.assert_allclose(new - b, w * (a - b), rtol=1e-12, atol=1e-12 * np.abs(a - b).max())
            assert 0.0 <= w <= 1.0
            assert np.linalg.norm(new - b) <= np.linalg.norm(a - b) * (1 + 1e-12)

    def test_adversarial_local_is_damped(self):
        prev = np.array([1.0, 0.0])
        acc = np.zeros(2)
        for I, c in enumerate([prev, prev, prev, np.array([-50.0, 40.0])], 1):
            acc = apa.update_accumulated(acc, c, I)
        new, _ = apa.adapt_global(acc, prev)
        assert np.linalg.norm(new - prev) < np.linalg.norm(acc - prev)


class TestLoss:
    def test_equal_globals(self):
        rng = np.random.default_rng(5)
        f, y = rng.normal(size=(8, 3)), np.arange(8) % 2
        st = apa.init_global(f, y, f, y, 2)
        res = apa.apa_step(st, f, y, f, y)
        assert res.loss == 0.0
        assert not res.grad_source.any() and not res.grad_target.any()

    def test_unit_distance(self):
        assert apa.apa_loss(np.array([[1.0, 0.0]]), np.zeros((1, 2)), np.array([True])) == 1.0

    def test_inactive_classes_skipped(self):
        s = np.array([[1.0, 0.0], [5.0, 5.0]])
        t = np.array([[0.0, 0.0], [np.nan, np.nan]])
        assert apa.apa_loss(s, t, np.array([True, False])) == 1.0

    @pytest.mark.parametrize("shared", [False, True])
    def test_gradient_finite_differences(self, shared):
        rng = np.random.default_rng(6)
        C, D = 3, 4
        st = apa.init_global(rng.normal(size=(30, D)), np.arange(30) % C,
                             rng.normal(size=(20, D)), np.arange(20) % C, C, shared_rho=shared)
        # a few iterations of history so the accumulated term is non-trivial
        for _ in range(3):
            st = apa.apa_step(st, rng.normal(size=(6, D)), np.arange(6) % C,
                              rng.normal(size=(6, D)), np.arange(6) % C).state
        fs, ys = rng.normal(size=(6, D)), np.array([0, 0, 1, 2, 2, 2])
        ft, yt = rng.normal(size=(5, D)), np.array([0, 1, 1, 2, 0])
        res = apa.apa_step(st, fs, ys, ft, yt)
        check = nx.grad_check(lambda: apa.apa_step(st, fs, ys, ft, yt).loss,
                              [fs, ft], [res.grad_source, res.grad_target])
        assert check.max_rel_error < 1e-4

    def test_local_alignment_gradient(self):
        rng = np.random.default_rng(7)
        fs, ys = rng.normal(size=(6, 3)), np.array([0, 1, 1, 2, 2, 0])
        ft, yt = rng.normal(size=(4, 3)), np.array([0, 1, 0, 1])
        res = apa.local_alignment(fs, ys, ft, yt, 3)
        check = nx.grad_check(lambda: apa.local_alignment(fs, ys, ft, yt, 3).loss,
                              [fs, ft], [res.grad_source, res.grad_target])
        assert check.max_rel_error < 1e-6
        assert not res.grad_source[ys == 2].any()  # class 2 absent from the target batch

    def test_step_is_pure(self):
        rng = np.random.default_rng(8)
        st = apa.init_global(rng.normal(size=(8, 2)), np.arange(8) % 2,
                             rng.normal(size=(8, 2)), np.arange(8) % 2, 2)
        before = st.copy()
        apa.apa_step(st, rng.normal(size=(4, 2)), [0, 1, 0, 1], rng.normal(size=(4, 2)), [0, 1, 0, 1])
        np.testing.assert_array_equal(st.source.glob, before.source.glob)
        np.testing.assert_array_equal(st.target.n_local, before.target.n_local)


def test_alignment_loss_vanishes_on_identical_domains():
    # target = the source rows with labels hidden, so every pseudo-label is right
    s, _ = ds.standardize(*ds.gen_gaussian_shift(ds.SyntheticShiftSpec(seed=0)))
    cfg = tr.TrainConfig(seed=0, steps=3, iters_per_step=100)
    report = tr.run(cfg, s, s.as_target())
    for m in (1, 2, 3):
        L = [r["L_apa"] for r in report.iterations if r["step"] == m]
        assert L[0] > 0
        assert np.mean(L[-5:]) < 0.05 * L[0]
