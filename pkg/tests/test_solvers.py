import numpy as np
import pytest

from semishot import (
    ConfigError,
    DataError,
    LambdaPolicy,
    SolverConfig,
    SolverError,
    SupportSet,
    UnlabeledSet,
    correct_marginal,
    estimate_marginal,
    eval_fewshot_objective,
    eval_semi_objective,
    fit_simpleshot,
    fit_sstext,
    fit_sstextu,
    update_prototypes,
)

from conftest import random_codes, random_support, random_unlabeled, unit_rows


# ---------------------------------------------------------------- marginals


def test_estimate_marginal_counts():
    sup = SupportSet.from_indices(np.eye(3), np.array([0, 0, 1]), 3)
    assert np.allclose(estimate_marginal(sup), [2 / 3, 1 / 3, 0.0], atol=1e-15)


def test_correct_marginal_floors_zero_entries():
    out = correct_marginal(np.array([0.5, 0.5, 0.0]), ratio=0.25)
    assert np.allclose(out, [4 / 9, 4 / 9, 1 / 9], atol=1e-12)
    out2 = correct_marginal(np.array([1.0, 0.0]), ratio=0.25)
    assert np.allclose(out2, [0.8, 0.2], atol=1e-12)
    assert out2.sum() == pytest.approx(1.0, abs=1e-12)


def test_correct_marginal_passthrough_without_zeros():
    m = np.array([0.6, 0.3, 0.1])
    assert np.array_equal(correct_marginal(m, ratio=0.25), m)


def test_correct_marginal_rejects_bad_input():
    with pytest.raises(DataError):
        correct_marginal(np.zeros(3))
    with pytest.raises(DataError):
        correct_marginal(np.array([0.5, -0.5]))
    with pytest.raises(ConfigError):
        correct_marginal(np.array([0.5, 0.5]), ratio=1.0)
    with pytest.raises(ConfigError):
        correct_marginal(np.array([0.5, 0.5]), ratio=0.0)


# ---------------------------------------------------------------- simpleshot


def test_simpleshot_class_means(rng):
    emb = unit_rows(rng, 6, 4)
    idx = np.array([0, 0, 1, 1, 1, 0])
    sup = SupportSet.from_indices(emb, idx, 2)
    result = fit_simpleshot(sup)
    assert np.allclose(result.prototypes[0], emb[idx == 0].mean(axis=0),
                       atol=1e-12)
    assert np.allclose(result.prototypes[1], emb[idx == 1].mean(axis=0),
                       atol=1e-12)
    assert result.missing_classes.size == 0


def test_simpleshot_missing_class_row_is_zero(rng):
    sup = SupportSet.from_indices(unit_rows(rng, 3, 4), np.array([0, 0, 2]), 3)
    result = fit_simpleshot(sup)
    assert np.array_equal(result.prototypes[1], np.zeros(4))
    assert result.missing_classes.tolist() == [1]


# ---------------------------------------------------------------- closed form


def test_update_single_shot_unit_weights(rng):
    # one sample, one class, tau=0.5, unit text weight: w = v + t
    v = unit_rows(rng, 1, 4)
    sup = SupportSet.from_indices(v, np.array([0]), 1)
    t = unit_rows(rng, 1, 4)
    policy = LambdaPolicy.fixed([1.0], [0.0])
    w = update_prototypes(sup, None, None, t, tau=0.5, lambdas=policy)
    assert np.allclose(w, v + t, atol=1e-14)


def test_update_adaptive_coefficients(rng):
    # adaptive weights collapse the scales to K_c/(2 N tau) on the raw
    # labeled class sum and exactly 1/(M tau) on the code-weighted
    # unlabeled sum
    c, d, m = 3, 5, 11
    sup = random_support(rng, 9, c, d, ensure_all_classes=True)
    unl = random_unlabeled(rng, m, d)
    codes = random_codes(rng, m, c)
    t = unit_rows(rng, c, d)
    tau = 0.2
    w = update_prototypes(sup, unl, codes, t, tau, LambdaPolicy.adaptive())
    counts = sup.shot_counts
    lab_sum = sup.labels.T @ sup.embeddings
    unl_sum = codes.T @ unl.embeddings
    naive = (t + (counts[:, None] / (2.0 * sup.n * tau)) * lab_sum
             + unl_sum / (m * tau))
    assert np.allclose(w, naive, atol=1e-13)


def test_update_fixed_weights_literal(rng):
    c, d, m = 2, 4, 6
    sup = random_support(rng, 5, c, d, ensure_all_classes=True)
    unl = random_unlabeled(rng, m, d)
    codes = random_codes(rng, m, c)
    t = unit_rows(rng, c, d)
    tau = 0.3
    lam_t, lam_u = 0.7, 0.4
    policy = LambdaPolicy.fixed(np.full(c, lam_t), np.full(c, lam_u))
    w = update_prototypes(sup, unl, codes, t, tau, policy)
    naive = np.zeros((c, d))
    for k in range(c):
        lab = sum(sup.labels[i, k] * sup.embeddings[i] for i in range(sup.n))
        uns = sum(codes[i, k] * unl.embeddings[i] for i in range(m))
        naive[k] = (t[k] + lab / (2.0 * lam_t * sup.n * tau)
                    + (lam_u / lam_t) * uns / (2.0 * m * tau))
    assert np.allclose(w, naive, atol=1e-13)


def test_update_without_unlabeled_matches_empty_set(rng):
    sup = random_support(rng, 6, 2, 4, ensure_all_classes=True)
    t = unit_rows(rng, 2, 4)
    policy = LambdaPolicy.adaptive()
    a = update_prototypes(sup, None, None, t, 0.1, policy)
    b = update_prototypes(sup, UnlabeledSet.empty(4), None, t, 0.1, policy)
    assert np.array_equal(a, b)


def test_update_unobserved_class_keeps_anchor_plus_codes(rng):
    # K_c = 0: no labeled pull, but pseudo-label mass still moves the row
    d, m = 4, 8
    emb = unit_rows(rng, 4, d)
    sup = SupportSet.from_indices(emb, np.array([0, 0, 1, 1]), 3)
    unl = random_unlabeled(rng, m, d)
    codes = random_codes(rng, m, 3)
    t = unit_rows(rng, 3, d)
    tau = 0.25
    w = update_prototypes(sup, unl, codes, t, tau, LambdaPolicy.adaptive())
    expected = t[2] + (codes[:, 2][:, None] * unl.embeddings).sum(axis=0) / (m * tau)
    assert np.allclose(w[2], expected, atol=1e-13)
    w0 = update_prototypes(sup, None, None, t, tau, LambdaPolicy.adaptive())
    assert np.array_equal(w0[2], t[2])


def test_update_requires_codes_with_unlabeled(rng):
    sup = random_support(rng, 4, 2, 3, ensure_all_classes=True)
    unl = random_unlabeled(rng, 5, 3)
    t = unit_rows(rng, 2, 3)
    with pytest.raises(DataError):
        update_prototypes(sup, unl, None, t, 0.1, LambdaPolicy.adaptive())
    with pytest.raises(DataError):
        update_prototypes(sup, unl, random_codes(rng, 4, 2), t, 0.1,
                          LambdaPolicy.adaptive())


def test_update_minimizes_fixed_code_objective(rng):
    sup = random_support(rng, 8, 3, 5, ensure_all_classes=True)
    unl = random_unlabeled(rng, 7, 5)
    codes = random_codes(rng, 7, 3)
    t = unit_rows(rng, 3, 5)
    tau = 0.15
    policy = LambdaPolicy.adaptive()
    w = update_prototypes(sup, unl, codes, t, tau, policy)
    base = eval_semi_objective(sup, unl, codes, w, t, tau, policy).total
    for _ in range(100):
        delta = rng.standard_normal(w.shape)
        delta *= 0.1 / np.linalg.norm(delta)
        perturbed = eval_semi_objective(sup, unl, codes, w + delta, t, tau,
                                        policy).total
        assert base <= perturbed + 1e-12


# ---------------------------------------------------------------- sstext


def _descend_fewshot(sup, t, tau, policy, tol=1e-8):
    """Plain gradient descent on the labeled-only objective."""
    counts = sup.shot_counts
    lam = policy.text_weights(counts)
    w = t.copy()
    lr = 0.25 / max(2.0 * lam[np.isfinite(lam)].max(), 1.0 / tau)
    for _ in range(200000):
        grad = -(sup.labels.T @ sup.embeddings) / (sup.n * tau)
        grad = grad + 2.0 * lam[:, None] * (w - t)
        if np.linalg.norm(grad) < tol:
            return w
        w = w - lr * grad
    raise AssertionError("descent oracle did not converge")


def test_sstext_matches_descent_oracle(rng):
    for _ in range(3):
        sup = random_support(rng, 9, 3, 8, ensure_all_classes=True)
        t = unit_rows(rng, 3, 8)
        tau = 0.1
        result = fit_sstext(sup, t, SolverConfig(tau=tau))
        oracle = _descend_fewshot(sup, t, tau, LambdaPolicy.adaptive())
        assert np.abs(result.prototypes - oracle).max() < 1e-4


def test_sstext_trace_and_improvement(rng):
    sup = random_support(rng, 10, 3, 6, ensure_all_classes=True)
    t = unit_rows(rng, 3, 6)
    cfg = SolverConfig(tau=0.05)
    result = fit_sstext(sup, t, cfg)
    assert result.objective_trace.shape == (2,)
    assert result.objective_trace[1] <= result.objective_trace[0] + 1e-12
    direct = eval_fewshot_objective(sup, result.prototypes, t, cfg.tau,
                                    cfg.lambdas)
    assert result.objective_trace[1] == pytest.approx(direct, abs=1e-12)


def test_sstext_unobserved_class_pins_to_anchor(rng):
    emb = unit_rows(rng, 4, 5)
    sup = SupportSet.from_indices(emb, np.array([0, 1, 1, 0]), 3)
    t = unit_rows(rng, 3, 5)
    result = fit_sstext(sup, t)
    assert np.array_equal(result.prototypes[2], t[2])


def test_sstext_rejects_shape_mismatch(rng):
    sup = random_support(rng, 4, 2, 3, ensure_all_classes=True)
    with pytest.raises(DataError):
        fit_sstext(sup, unit_rows(rng, 3, 3))


# ---------------------------------------------------------------- sstextu


def test_sstextu_zero_rounds_returns_text(rng):
    sup = random_support(rng, 6, 3, 5, ensure_all_classes=True)
    unl = random_unlabeled(rng, 9, 5)
    t = unit_rows(rng, 3, 5)
    result = fit_sstextu(sup, unl, t, SolverConfig(bcm_iters=0))
    assert np.array_equal(result.prototypes, t)
    assert result.objective_trace.shape == (1,)


def test_sstextu_empty_unlabeled_equals_sstext(rng):
    for _ in range(5):
        sup = random_support(rng, 8, 3, 6, ensure_all_classes=True)
        t = unit_rows(rng, 3, 6)
        cfg = SolverConfig(tau=0.04, bcm_iters=3)
        a = fit_sstextu(sup, UnlabeledSet.empty(6), t, cfg)
        b = fit_sstext(sup, t, cfg)
        assert np.array_equal(a.prototypes, b.prototypes)
        assert a.objective_trace.shape == (4,)
        assert np.array_equal(a.objective_trace[1:], np.full(3, b.objective_trace[1]))


def test_sstextu_trace_shape_and_descent(rng):
    sup = random_support(rng, 10, 4, 8, ensure_all_classes=True)
    unl = random_unlabeled(rng, 40, 8)
    t = unit_rows(rng, 4, 8)
    cfg = SolverConfig(tau=0.05, bcm_iters=3, ot_iters=10)
    result = fit_sstextu(sup, unl, t, cfg)
    assert result.objective_trace.shape == (4,)
    assert result.ot_residuals.shape == (3,)
    assert result.objective_trace[-1] <= result.objective_trace[0] + 1e-9
    assert result.marginal is not None


def test_sstextu_deterministic(rng):
    sup = random_support(rng, 8, 3, 6, ensure_all_classes=True)
    unl = random_unlabeled(rng, 20, 6)
    t = unit_rows(rng, 3, 6)
    cfg = SolverConfig(tau=0.05)
    a = fit_sstextu(sup, unl, t, cfg)
    b = fit_sstextu(sup, unl, t, cfg)
    assert np.array_equal(a.prototypes, b.prototypes)
    assert np.array_equal(a.objective_trace, b.objective_trace)


def test_sstextu_codes_hit_marginal_as_residual(rng):
    # per-class code mass equals the plan's row sums, so its L1 gap to
    # the marginal is exactly the plan residual
    sup = random_support(rng, 8, 3, 6, ensure_all_classes=True)
    unl = random_unlabeled(rng, 30, 6)
    t = unit_rows(rng, 3, 6)
    cfg = SolverConfig(tau=0.05, bcm_iters=2, track_codes=True)
    result = fit_sstextu(sup, unl, t, cfg)
    for codes, residual in zip(result.pseudolabel_trace, result.ot_residuals):
        gap = np.abs(codes.mean(axis=0) - result.marginal).sum()
        assert gap == pytest.approx(residual, abs=1e-12)


def test_sstextu_each_round_minimizes_its_codes(rng):
    sup = random_support(rng, 8, 3, 6, ensure_all_classes=True)
    unl = random_unlabeled(rng, 25, 6)
    t = unit_rows(rng, 3, 6)
    cfg = SolverConfig(tau=0.05, bcm_iters=2, track_codes=True)
    result = fit_sstextu(sup, unl, t, cfg)
    codes = result.pseudolabel_trace[-1]
    w = result.prototypes
    base = eval_semi_objective(sup, unl, codes, w, t, cfg.tau, cfg.lambdas).total
    for _ in range(100):
        delta = rng.standard_normal(w.shape)
        delta *= 0.1 / np.linalg.norm(delta)
        other = eval_semi_objective(sup, unl, codes, w + delta, t, cfg.tau,
                                    cfg.lambdas).total
        assert base <= other + 1e-12


def test_sstextu_marginal_sources(rng):
    emb = unit_rows(rng, 4, 5)
    sup = SupportSet.from_indices(emb, np.array([0, 0, 1, 1]), 3)
    unl = random_unlabeled(rng, 12, 5)
    t = unit_rows(rng, 3, 5)
    corrected = fit_sstextu(sup, unl, t, SolverConfig(tau=0.05))
    assert (corrected.marginal > 0).all()
    raw = fit_sstextu(sup, unl, t,
                      SolverConfig(tau=0.05, marginal_source="support_raw"))
    assert raw.marginal[2] == 0.0
    oracle = fit_sstextu(sup, unl, t,
                         SolverConfig(tau=0.05, marginal_source="oracle"),
                         oracle_marginal=np.array([0.5, 0.25, 0.25]))
    assert np.array_equal(oracle.marginal, [0.5, 0.25, 0.25])


def test_sstextu_oracle_source_requires_marginal(rng):
    sup = random_support(rng, 6, 2, 4, ensure_all_classes=True)
    unl = random_unlabeled(rng, 8, 4)
    t = unit_rows(rng, 2, 4)
    cfg = SolverConfig(tau=0.05, marginal_source="oracle")
    with pytest.raises(ConfigError):
        fit_sstextu(sup, unl, t, cfg)
    with pytest.raises(DataError):
        fit_sstextu(sup, unl, t, cfg, oracle_marginal=np.array([0.9, 0.2]))


@pytest.mark.filterwarnings("ignore:overflow encountered:RuntimeWarning")
def test_sstextu_wraps_degenerate_rounds(rng):
    sup = random_support(rng, 6, 2, 4, ensure_all_classes=True)
    unl = random_unlabeled(rng, 8, 4)
    t = unit_rows(rng, 2, 4) * 1e200
    cfg = SolverConfig(tau=1e-300)  # scores overflow on the first round
    with pytest.raises(SolverError) as info:
        fit_sstextu(sup, unl, t, cfg)
    assert info.value.iteration == 1
    assert "round 1" in str(info.value)


def test_solver_config_validation():
    with pytest.raises(ConfigError):
        SolverConfig(tau=0.0)
    with pytest.raises(ConfigError):
        SolverConfig(bcm_iters=-1)
    with pytest.raises(ConfigError):
        SolverConfig(ot_iters=-1)
    with pytest.raises(ConfigError):
        SolverConfig(marginal_ratio=0.0)
    with pytest.raises(ConfigError):
        SolverConfig(marginal_source="guess")


def test_sstextu_dim_mismatch(rng):
    sup = random_support(rng, 4, 2, 3, ensure_all_classes=True)
    with pytest.raises(DataError):
        fit_sstextu(sup, random_unlabeled(rng, 5, 4), unit_rows(rng, 2, 3))
