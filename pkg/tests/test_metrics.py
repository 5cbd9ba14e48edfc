import math

import numpy as np
import pytest

from apam.metrics import (
    BoundInputs,
    GammaPhiTracker,
    StepRecorder,
    bound_cvx_delay,
    bound_cvx_nodelay,
    bound_ncvx,
    ergodic_average,
    ergodic_weights,
    estimate_inputs,
    invariant_audit,
    ncvx_sample_index,
    vtilde_inv_l1,
)
from apam.optimizer import ConstOverSqrtK, HyperParams
from apam.problems import logistic, mlp2, quadratic, synth_classification
from apam.runtime import RunConfig, UniformInt, run_sim
from apam.staleness import StalenessPolicy


class TestErgodicWeights:
    def test_uniform_when_no_momentum(self):
        w = ergodic_weights(np.ones(7), 0.0)
        np.testing.assert_allclose(w, np.full(7, 1 / 7), rtol=1e-15)

    def test_hand_case_k3(self):
        w = ergodic_weights([1.0, 1.0, 1.0], 0.5)
        np.testing.assert_allclose(w, np.array([7.0, 6.0, 4.0]) / 17.0, rtol=1e-14)

    def test_matches_double_sum_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            K = int(rng.integers(1, 25))
            alphas = rng.uniform(0.1, 2.0, K)
            beta1 = float(rng.uniform(0, 0.95))
            raw = np.array([
                sum(alphas[j] * beta1 ** (j - k) for j in range(k, K))
                for k in range(K)
            ])
            expected = raw / raw.sum()
            np.testing.assert_allclose(ergodic_weights(alphas, beta1), expected, rtol=1e-10)

    def test_sums_to_one_and_positive(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            w = ergodic_weights(rng.uniform(0.01, 3, int(rng.integers(1, 40))),
                                float(rng.uniform(0, 0.99)))
            assert w.sum() == pytest.approx(1.0, rel=1e-12)
            assert np.all(w > 0)

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            ergodic_weights([], 0.5)
        with pytest.raises(ValueError):
            ergodic_weights([1.0, -1.0], 0.5)
        with pytest.raises(ValueError):
            ergodic_weights([1.0], 1.0)


class TestErgodicAverage:
    def test_constant_trajectory(self):
        x = np.array([2.0, -1.0])
        out = ergodic_average([x, x, x], ergodic_weights(np.ones(3), 0.3))
        np.testing.assert_allclose(out, x, rtol=1e-15)

    def test_single_point(self):
        x = np.array([1.0, 2.0])
        np.testing.assert_array_equal(ergodic_average([x], [1.0]), x)

    def test_matches_direct_sum(self):
        rng = np.random.default_rng(2)
        xs = [rng.standard_normal(4) for _ in range(6)]
        w = ergodic_weights(rng.uniform(0.5, 1.5, 6), 0.4)
        direct = sum(wk * xk for wk, xk in zip(w, xs))
        np.testing.assert_allclose(ergodic_average(xs, w), direct, rtol=1e-14)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            ergodic_average([np.zeros(2)], [0.5, 0.5])


class TestNcvxSampleIndex:
    def test_k0_equals_K(self):
        alphas = np.ones(5)
        for seed in range(10):
            assert ncvx_sample_index(alphas, 5, 5, seed) == 5

    def test_range_validation(self):
        with pytest.raises(ValueError):
            ncvx_sample_index(np.ones(5), 1, 5, 0)
        with pytest.raises(ValueError):
            ncvx_sample_index(np.ones(5), 6, 5, 0)

    def test_uniform_frequencies_within_3_sigma(self):
        alphas = np.ones(12)
        k0, K = 4, 12
        m = K - k0 + 1
        n_draws = 100_000
        counts = np.zeros(m)
        for seed in range(n_draws):
            counts[ncvx_sample_index(alphas, k0, K, seed) - k0] += 1
        p = 1.0 / m
        sigma = math.sqrt(n_draws * p * (1 - p))
        assert np.all(np.abs(counts - n_draws * p) <= 3 * sigma)

    def test_weighted_by_previous_alpha(self):
        # alpha_{k-1} weighting: with alphas (1, 3, 0.01, 0.01) and k0=2, K=3,
        # k=2 gets weight alpha_1=1, k=3 weight alpha_2=3
        alphas = np.array([1.0, 3.0, 0.01, 0.01])
        draws = [ncvx_sample_index(alphas, 2, 3, seed) for seed in range(4000)]
        frac3 = np.mean([d == 3 for d in draws])
        assert abs(frac3 - 0.75) < 0.03


def exact_bi(**kw):
    base = dict(n=2, beta1=0.0, beta2=0.0, alpha=1.0, K=4,
                D_inf=1.0, G1=1.0, G_inf=1.0)
    base.update(kw)
    return BoundInputs(**base)


class TestBoundEvaluators:
    def test_cvx_nodelay_hand_values(self):
        assert bound_cvx_nodelay(exact_bi(), "const") == pytest.approx(0.75, rel=1e-12)
        assert bound_cvx_nodelay(exact_bi(K=1), "const") == pytest.approx(1.5, rel=1e-12)

    def test_cvx_nodelay_decays(self):
        lo = bound_cvx_nodelay(exact_bi(K=10**6), "const")
        hi = bound_cvx_nodelay(exact_bi(K=10**2), "const")
        assert 0 < lo < hi
        lo_i = bound_cvx_nodelay(exact_bi(K=10**6), "invsqrt")
        hi_i = bound_cvx_nodelay(exact_bi(K=10**2), "invsqrt")
        assert 0 < lo_i < hi_i

    def test_cvx_delay_hand_value(self):
        bi = exact_bi(L=1.0, s=1, tau=2)
        assert bound_cvx_delay(bi) == pytest.approx(1.25, rel=1e-12)

    def test_delay_zero_equals_nodelay_exactly(self):
        for K in (1, 4, 100, 9999):
            bi = exact_bi(K=K, L=3.0, s=2, tau=0)
            assert bound_cvx_delay(bi) == bound_cvx_nodelay(bi, "const")

    def test_delay_monotone_in_tau(self):
        vals = [bound_cvx_delay(exact_bi(L=1.0, s=1, tau=t)) for t in range(11)]
        assert all(a <= b for a, b in zip(vals, vals[1:]))

    def test_ncvx_setting1_hand_value(self):
        bi = BoundInputs(n=10, beta1=0.0, beta2=0.0, alpha=1.0, K=101, k0=2,
                         G_inf=1.0, L=1.0, s=1, C_F=1.0, c=1.0, tau=0)
        expected = 0.1 + 0.2 + 7.0 / 60.0
        assert bound_ncvx(bi, 1, 10.0) == pytest.approx(expected, rel=1e-12)

    def test_ncvx_tau_zero_reduces_to_c1(self):
        bi = BoundInputs(n=4, beta1=0.5, beta2=0.9, alpha=0.3, K=50, k0=10,
                         G_inf=2.0, L=1.5, s=3, C_F=4.0, c=0.5, tau=0)
        val = bound_ncvx(bi, 1, 3.0)
        # with tau=0, C2=0 so the bound is exactly C1; recompute C1 by hand
        T = 41
        E = min(3.0, 4 / 0.5)
        C1 = (2.0**3 * E / ((1 - 0.5) * T)
              + 2 * 4.0 * 2.0 / (0.3 * math.sqrt(T))
              + 7 * 3 * 1.5 * 2.0 * (1 - 2 * 0.5 + 4 * 0.25) * 0.3
              / (6 * (1 - 0.9) * (1 - 0.5) ** 2 * math.sqrt(T)))
        assert val == pytest.approx(C1, rel=1e-12)

    def test_ncvx_monotone_in_tau_and_L(self):
        def v(tau, L):
            bi = BoundInputs(n=4, beta1=0.5, beta2=0.9, alpha=0.3, K=60, k0=30,
                             G_inf=2.0, L=L, s=3, C_F=4.0, c=0.5, tau=tau)
            return bound_ncvx(bi, 1, 3.0)

        taus = [v(t, 1.5) for t in range(0, 11)]
        assert all(a <= b for a, b in zip(taus, taus[1:]))
        els = [v(2, L) for L in (0.5, 1.0, 2.0, 4.0)]
        assert all(a <= b for a, b in zip(els, els[1:]))

    def test_ncvx_setting2_preconditions(self):
        bi = BoundInputs(n=4, beta1=0.5, beta2=0.9, alpha=0.3, K=60, k0=30,
                         G_inf=2.0, L=1.0, s=3, C_F=4.0, c=0.5, tau=40)
        with pytest.raises(ValueError, match="tau"):
            bound_ncvx(bi, 2, 3.0)
        bi2 = BoundInputs(n=4, beta1=0.5, beta2=0.9, alpha=0.3, K=60, k0=20,
                          G_inf=2.0, L=1.0, s=3, C_F=4.0, c=0.5, tau=0)
        with pytest.raises(ValueError, match="k0"):
            bound_ncvx(bi2, 2, 3.0)

    def test_beta1_one_rejected(self):
        with pytest.raises(ValueError):
            BoundInputs(n=2, beta1=1.0, beta2=0.0, alpha=1.0, K=4)

    def test_missing_field_fails_loudly(self):
        bi = BoundInputs(n=2, beta1=0.0, beta2=0.0, alpha=1.0, K=4)
        with pytest.raises(ValueError, match="D_inf"):
            bound_cvx_nodelay(bi, "const")


class TestGammaPhiTracker:
    def test_monotone_and_floor(self):
        t = GammaPhiTracker(3)
        rng = np.random.default_rng(3)
        prev_gamma = t.Gamma.copy()
        vhat = np.zeros(3)
        for _ in range(50):
            g = rng.standard_normal(3) * rng.integers(0, 2, 3)
            t.observe_gradient(g)
            vhat = np.maximum(vhat, g * g)
            t.observe_vhat(vhat)
            assert np.all(t.Gamma >= prev_gamma)
            assert np.all(t.vtilde(vhat) >= vhat)
            prev_gamma = t.Gamma.copy()

    def test_vtilde_equals_vhat_once_all_positive(self):
        t = GammaPhiTracker(2)
        t.observe_vhat(np.array([0.5, 0.0]))
        t.observe_vhat(np.array([0.7, 0.3]))
        final = np.array([0.9, 0.4])
        t.observe_vhat(final)
        np.testing.assert_array_equal(t.vtilde(final), final)

    def test_vtilde_floors_prepositive_steps(self):
        t = GammaPhiTracker(2)
        t.observe_vhat(np.array([0.5, 0.0]))
        t.observe_vhat(np.array([0.7, 0.3]))
        early = np.array([0.5, 0.0])
        np.testing.assert_array_equal(t.vtilde(early), [0.5, 0.3])

    def test_phi_tracking_through_recorder_is_strided_and_monotone(self):
        ds = synth_classification(80, 6, False, seed=7)
        prob = logistic(ds, l2=1e-3)
        K = 95
        hp = HyperParams(0.9, 0.999, ConstOverSqrtK(0.5, K))
        cfg = RunConfig(mode="sim", workers=1, batch_size=8, total_iterations=K,
                        policy=StalenessPolicy(tau_max=4), master_seed=2)
        rec = StepRecorder(prob.dim, phi_with=prob, phi_stride=10)
        run_sim(prob, hp, cfg, hooks=[rec])
        phi = rec.tracker.Phi
        assert np.any(phi > 0)
        # Phi dominates the full gradient at every audited iterate
        for r in rec.records:
            if r.k % 10 == 0:
                assert np.all(np.abs(prob.full_grad(r.x)) <= phi + 1e-15)


@pytest.fixture(scope="module")
def audited_run():
    ds = synth_classification(150, 12, False, seed=4)
    prob = logistic(ds, l2=1e-3)
    K = 250
    hp = HyperParams(0.9, 0.999, ConstOverSqrtK(1.0, K))
    cfg = RunConfig(mode="sim", workers=3, batch_size=8, total_iterations=K,
                    policy=StalenessPolicy(tau_max=9, mode="inconsistent"),
                    delay_model=UniformInt(9), master_seed=11)
    rec = StepRecorder(prob.dim)
    run_sim(prob, hp, cfg, hooks=[rec])
    return prob, hp, rec


class TestInvariantAudit:
    def test_clean_run_passes(self, audited_run):
        _, hp, rec = audited_run
        report = invariant_audit(rec.records, hp.beta1, hp.beta2)
        assert report.ok(), report.to_text()
        names = {c.name for c in report.checks}
        assert {"vhat_monotone", "iterate_move_nonexpansive", "moment_abs_bound",
                "second_moment_bound", "grad_over_root_bound", "moment_over_root_sq",
                "moment_closed_form", "snapshot_mix_triangle",
                "snapshot_mix_squared"} <= names

    def test_corrupted_vhat_fails_monotonicity(self, audited_run):
        _, hp, rec = audited_run
        import copy

        records = [copy.copy(r) for r in rec.records]
        records[100].vhat = records[100].vhat.copy()
        records[100].vhat[0] -= 0.5 * records[100].vhat[0] + 1e-3
        report = invariant_audit(records, hp.beta1, hp.beta2)
        assert not report.ok()
        assert any(c.name == "vhat_monotone" and not c.ok() for c in report.checks)

    def test_corrupted_iterate_fails_move_bound(self, audited_run):
        _, hp, rec = audited_run
        import copy

        records = [copy.copy(r) for r in rec.records]
        records[50].dx_norm += 1.0
        report = invariant_audit(records, hp.beta1, hp.beta2)
        assert any(c.name == "iterate_move_nonexpansive" and not c.ok()
                   for c in report.checks)

    def test_positive_eps_skips_exact_ratio_checks(self, audited_run):
        _, hp, rec = audited_run
        report = invariant_audit(rec.records, hp.beta1, hp.beta2, eps=1e-8)
        names = {c.name for c in report.checks}
        assert "grad_over_root_bound" not in names
        assert "moment_over_root_sq" not in names
        assert "vhat_monotone" in names

    def test_report_formats(self, audited_run):
        _, hp, rec = audited_run
        report = invariant_audit(rec.records, hp.beta1, hp.beta2)
        text = report.to_text()
        assert "pass" in text
        csv = report.to_csv()
        assert csv.splitlines()[0] == "check,instances,worst_slack,pass"
        assert len(csv.splitlines()) == len(report.checks) + 1

    def test_empty_records_rejected(self):
        with pytest.raises(ValueError):
            invariant_audit([], 0.9, 0.999)


class TestEstimateInputs:
    def test_zero_gradient_run(self):
        prob = quadratic(np.zeros(3), np.zeros(3))
        hp = HyperParams(0.9, 0.999, ConstOverSqrtK(0.1, 20))
        cfg = RunConfig(mode="sim", workers=1, batch_size=1, total_iterations=20,
                        policy=StalenessPolicy(tau_max=4), master_seed=0)
        rec = StepRecorder(3)
        run_sim(prob, hp, cfg, hooks=[rec], x0=np.ones(3))
        bi = estimate_inputs(rec.tracker, n=3, beta1=0.9, beta2=0.999,
                             alpha=0.1, K=20)
        assert bi.G_inf == 0.0 and bi.G1 == 0.0 and bi.s == 0

    def test_supplied_constants_echoed_with_provenance(self, audited_run):
        prob, hp, rec = audited_run
        bi = estimate_inputs(rec.tracker, n=prob.dim, beta1=hp.beta1, beta2=hp.beta2,
                             alpha=hp.alpha, K=250, L=2.5, C_F=7.0)
        assert bi.L == 2.5 and bi.provenance["L"] == "assumed"
        assert bi.C_F == 7.0 and bi.provenance["C_F"] == "assumed"
        assert bi.provenance["D_inf"] == "unavailable"

    def test_g_inf_dominates_every_observed_gradient(self, audited_run):
        prob, hp, rec = audited_run
        bi = estimate_inputs(rec.tracker, n=prob.dim, beta1=hp.beta1, beta2=hp.beta2,
                             alpha=hp.alpha, K=250)
        for r in rec.records:
            assert np.abs(r.g).max() <= bi.G_inf + 1e-15

    def test_vtilde_inv_l1_and_c(self):
        ds = synth_classification(100, 6, False, seed=5, n_classes=3)
        prob = mlp2(ds, hidden=3, seed=0)
        K = 60
        hp = HyperParams(0.9, 0.999, ConstOverSqrtK(0.1, K))
        cfg = RunConfig(mode="sim", workers=1, batch_size=8, total_iterations=K,
                        policy=StalenessPolicy(tau_max=4), master_seed=1)
        rec = StepRecorder(prob.dim, k0=K // 2, keep_states=False)
        run_sim(prob, hp, cfg, hooks=[rec])
        bi = estimate_inputs(rec.tracker, n=prob.dim, beta1=hp.beta1, beta2=hp.beta2,
                             alpha=hp.alpha, K=K, k0=K // 2)
        ev = vtilde_inv_l1(rec.tracker)
        assert bi.c is not None and bi.c > 0
        assert ev is not None and ev <= prob.dim / bi.c + 1e-9
