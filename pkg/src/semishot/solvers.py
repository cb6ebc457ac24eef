"""Prototype solvers, from class means to transport-guided adaptation.

Four strategies share one prediction rule (scaled dot products, argmax):

* zero-shot: text prototypes used as-is (no solver, see zeroshot module).
* fit_simpleshot: per-class means of the labeled embeddings.
* fit_sstext: closed-form blend of labeled class sums and text anchors.
* fit_sstextu: block-coordinate refinement that alternates transport-based
  pseudo-labeling of unlabeled embeddings with the closed-form blend.

The closed-form step is the exact minimizer of the combined objective at
fixed codes, since that objective is a convex quadratic per prototype
row. fit_sstextu therefore never increases the objective during a
prototype step; the recorded trace tracks the objective across rounds.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import SupportSet, UnlabeledSet
from .errors import ConfigError, DataError, DegeneratePlanError, SolverError
from .objectives import (
    LambdaPolicy,
    eval_fewshot_objective,
    eval_semi_objective,
)
from .sinkhorn import extract_pseudolabels, similarity_matrix, solve_transport
from .zeroshot import check_tau

MARGINAL_SOURCES = ("support_estimate", "support_raw", "oracle")


@dataclass(frozen=True, eq=False)
class SolverConfig:
    """Knobs shared by the adaptation solvers.

    tau: softmax/similarity temperature.
    bcm_iters: block-coordinate rounds (pseudo-label step + prototype step).
    ot_iters: row/column scaling rounds inside each pseudo-label step.
    marginal_ratio: floor ratio for zero entries of the estimated class
        marginal (fraction of the smallest observed entry).
    marginal_source: where the transport row marginal comes from;
        "support_estimate" floors and renormalizes the labeled-set
        frequencies, "support_raw" uses them uncorrected, "oracle" uses
        a caller-supplied vector.
    lambdas: penalty weight policy for the closed-form update.
    track_codes: keep per-round pseudo-label and prototype snapshots on
        the result (memory scales with bcm_iters).
    """

    tau: float = 0.01
    bcm_iters: int = 3
    ot_iters: int = 10
    marginal_ratio: float = 0.25
    marginal_source: str = "support_estimate"
    lambdas: LambdaPolicy = field(default_factory=LambdaPolicy.adaptive)
    track_codes: bool = False

    def __post_init__(self):
        check_tau(self.tau)
        if self.bcm_iters < 0:
            raise ConfigError(f"bcm_iters must be >= 0, got {self.bcm_iters}")
        if self.ot_iters < 0:
            raise ConfigError(f"ot_iters must be >= 0, got {self.ot_iters}")
        if not (0.0 < self.marginal_ratio < 1.0):
            raise ConfigError(
                f"marginal_ratio must be in (0, 1), got {self.marginal_ratio}")
        if self.marginal_source not in MARGINAL_SOURCES:
            raise ConfigError(
                f"marginal_source must be one of {MARGINAL_SOURCES}, "
                f"got {self.marginal_source!r}")


@dataclass(frozen=True, eq=False)
class FitResult:
    """Solver output: adapted prototypes plus diagnostics.

    objective_trace: objective values across rounds. For the transport
    solver the trace has bcm_iters + 1 entries: entry 0 is the objective
    at the text-prototype start (under the first round's codes) and
    entry t follows round t's prototype step. For the labeled-only
    solver the trace is [start, final].
    missing_classes: indices of classes with no labeled sample, when the
    solver treats them specially.
    """

    prototypes: np.ndarray
    objective_trace: np.ndarray
    runtime_ms: float
    marginal: np.ndarray | None = None
    ot_residuals: np.ndarray | None = None
    pseudolabel_trace: tuple[np.ndarray, ...] | None = None
    prototype_trace: tuple[np.ndarray, ...] | None = None
    missing_classes: np.ndarray | None = None


def estimate_marginal(support: SupportSet) -> np.ndarray:
    """Class frequencies of the labeled set (zeros for absent classes)."""
    return support.shot_counts / support.n


def correct_marginal(marginal: np.ndarray, ratio: float = 0.25) -> np.ndarray:
    """Floor zero entries at ratio * (smallest positive entry), then
    renormalize. Estimates with no zeros pass through unchanged; an
    all-zero estimate is rejected."""
    if not (0.0 < ratio < 1.0):
        raise ConfigError(f"ratio must be in (0, 1), got {ratio}")
    m = np.asarray(marginal, dtype=np.float64)
    if m.ndim != 1 or np.any(m < 0) or not np.all(np.isfinite(m)):
        raise DataError("marginal must be a nonnegative finite vector")
    positive = m > 0
    if not positive.any():
        raise DataError("marginal has no positive entries")
    if positive.all():
        return m
    floor = ratio * m[positive].min()
    floored = np.maximum(m, floor)
    return floored / floored.sum()


def fit_simpleshot(support: SupportSet) -> FitResult:
    """Per-class means of the labeled embeddings. Classes with no
    labeled samples get an all-zero row (they score 0 for every point,
    so they are never predicted while any observed class scores > 0)
    and are flagged in missing_classes."""
    start = time.perf_counter()
    counts = support.shot_counts
    sums = support.labels.T @ support.embeddings
    denom = np.where(counts > 0, counts, 1.0)
    prototypes = sums / denom[:, None]
    elapsed = (time.perf_counter() - start) * 1e3
    return FitResult(
        prototypes=prototypes,
        objective_trace=np.array([], dtype=np.float64),
        runtime_ms=elapsed,
        missing_classes=np.flatnonzero(counts == 0),
    )


def _check_text_prototypes(support: SupportSet, text_prototypes: np.ndarray) -> np.ndarray:
    t = np.asarray(text_prototypes, dtype=np.float64)
    expected = (support.class_count, support.dim)
    if t.shape != expected:
        raise DataError(f"text prototypes shape {t.shape}, expected {expected}")
    if not np.all(np.isfinite(t)):
        raise DataError("text prototypes contain non-finite entries")
    return t


def update_prototypes(support: SupportSet, unlabeled: UnlabeledSet | None,
                      codes: np.ndarray | None, text_prototypes: np.ndarray,
                      tau: float, lambdas: LambdaPolicy) -> np.ndarray:
    """Exact minimizer of the combined objective at fixed codes.

    Row c is the text anchor plus the labeled class sum scaled by
    1 / (2 lambda_text_c N tau) plus, when unlabeled points and codes
    are present, the code-weighted unlabeled sum scaled by
    lambda_unl_c / (2 lambda_text_c M tau). Under the adaptive policy
    those scales are K_c / (2 N tau) and 1 / (M tau); the unlabeled
    scale persists for classes with K_c = 0 (its finite limit), so text
    anchor and pseudo-labels still place unobserved classes.
    """
    tau = check_tau(tau)
    t = _check_text_prototypes(support, text_prototypes)
    counts = support.shot_counts
    lam_text = lambdas.text_weights(counts)
    lam_unl = lambdas.unlabeled_weights(counts)

    sup_scale = 1.0 / (2.0 * lam_text * support.n * tau)
    prototypes = t + sup_scale[:, None] * (support.labels.T @ support.embeddings)

    if unlabeled is not None and unlabeled.count > 0:
        if codes is None:
            raise DataError("unlabeled embeddings given without codes")
        z = np.asarray(codes, dtype=np.float64)
        if z.shape != (unlabeled.count, support.class_count):
            raise DataError(
                f"codes shape {z.shape}, expected "
                f"{(unlabeled.count, support.class_count)}")
        finite = np.isfinite(lam_text)
        weight_ratio = np.empty_like(lam_text)
        weight_ratio[finite] = lam_unl[finite] / lam_text[finite]
        weight_ratio[~finite] = 2.0
        unl_scale = weight_ratio / (2.0 * unlabeled.count * tau)
        prototypes = prototypes + unl_scale[:, None] * (z.T @ unlabeled.embeddings)
    return prototypes


def fit_sstext(support: SupportSet, text_prototypes: np.ndarray,
               cfg: SolverConfig | None = None) -> FitResult:
    """One closed-form step from text prototypes using labeled data only."""
    cfg = cfg or SolverConfig()
    start = time.perf_counter()
    t = _check_text_prototypes(support, text_prototypes)
    initial = eval_fewshot_objective(support, t, t, cfg.tau, cfg.lambdas)
    prototypes = update_prototypes(support, None, None, t, cfg.tau, cfg.lambdas)
    final = eval_fewshot_objective(support, prototypes, t, cfg.tau, cfg.lambdas)
    elapsed = (time.perf_counter() - start) * 1e3
    return FitResult(
        prototypes=prototypes,
        objective_trace=np.array([initial, final], dtype=np.float64),
        runtime_ms=elapsed,
    )


def _resolve_marginal(support: SupportSet, cfg: SolverConfig,
                      oracle_marginal: np.ndarray | None) -> np.ndarray:
    if cfg.marginal_source == "oracle":
        if oracle_marginal is None:
            raise ConfigError("marginal_source 'oracle' needs oracle_marginal")
        m = np.asarray(oracle_marginal, dtype=np.float64)
        if m.shape != (support.class_count,):
            raise DataError(
                f"oracle marginal shape {m.shape}, expected ({support.class_count},)")
        if np.any(m < 0) or not np.isclose(m.sum(), 1.0, atol=1e-9):
            raise DataError("oracle marginal must be nonnegative and sum to one")
        return m
    estimate = estimate_marginal(support)
    if cfg.marginal_source == "support_raw":
        return estimate
    return correct_marginal(estimate, cfg.marginal_ratio)


def fit_sstextu(support: SupportSet, unlabeled: UnlabeledSet,
                text_prototypes: np.ndarray, cfg: SolverConfig | None = None,
                oracle_marginal: np.ndarray | None = None) -> FitResult:
    """Block-coordinate adaptation with transport-based pseudo-labels.

    Round t scores unlabeled points against the current prototypes,
    balances the resulting plan toward the class marginal and the
    uniform column marginal, reads per-point codes off the plan, and
    applies the closed-form prototype step under those codes.

    Boundary behavior: zero rounds returns the text prototypes
    untouched; an empty unlabeled set collapses every round to the
    labeled-only closed form, so the prototypes equal fit_sstext's
    output exactly and the trace repeats its final value.
    """
    cfg = cfg or SolverConfig()
    start = time.perf_counter()
    t = _check_text_prototypes(support, text_prototypes)
    if unlabeled.count > 0 and unlabeled.dim != support.dim:
        raise DataError(
            f"unlabeled dim {unlabeled.dim} does not match support dim {support.dim}")

    if cfg.bcm_iters == 0:
        initial = eval_fewshot_objective(support, t, t, cfg.tau, cfg.lambdas)
        elapsed = (time.perf_counter() - start) * 1e3
        return FitResult(
            prototypes=t,
            objective_trace=np.array([initial], dtype=np.float64),
            runtime_ms=elapsed,
        )

    if unlabeled.count == 0:
        initial = eval_fewshot_objective(support, t, t, cfg.tau, cfg.lambdas)
        prototypes = update_prototypes(support, None, None, t, cfg.tau, cfg.lambdas)
        final = eval_fewshot_objective(support, prototypes, t, cfg.tau, cfg.lambdas)
        # prototype step ignores the current prototypes, so every round
        # lands on the same point and the trace is flat after step 1
        trace = [initial] + [final] * cfg.bcm_iters
        elapsed = (time.perf_counter() - start) * 1e3
        return FitResult(
            prototypes=prototypes,
            objective_trace=np.array(trace, dtype=np.float64),
            runtime_ms=elapsed,
        )

    marginal = _resolve_marginal(support, cfg, oracle_marginal)
    prototypes = t
    trace: list[float] = []
    residuals: list[float] = []
    code_snaps: list[np.ndarray] = []
    proto_snaps: list[np.ndarray] = []
    for round_idx in range(1, cfg.bcm_iters + 1):
        try:
            scores = similarity_matrix(prototypes, unlabeled.embeddings, cfg.tau)
            plan = solve_transport(scores, marginal, cfg.ot_iters)
            codes = extract_pseudolabels(plan)
        except (DegeneratePlanError, DataError) as exc:
            raise SolverError(
                f"pseudo-label step failed at round {round_idx}: {exc}",
                iteration=round_idx) from exc
        residuals.append(plan.residual)
        if round_idx == 1:
            trace.append(eval_semi_objective(
                support, unlabeled, codes, prototypes, t, cfg.tau,
                cfg.lambdas).total)
        prototypes = update_prototypes(support, unlabeled, codes, t,
                                       cfg.tau, cfg.lambdas)
        trace.append(eval_semi_objective(
            support, unlabeled, codes, prototypes, t, cfg.tau,
            cfg.lambdas).total)
        if cfg.track_codes:
            code_snaps.append(codes)
            proto_snaps.append(prototypes)
    elapsed = (time.perf_counter() - start) * 1e3
    return FitResult(
        prototypes=prototypes,
        objective_trace=np.array(trace, dtype=np.float64),
        runtime_ms=elapsed,
        marginal=marginal,
        ot_residuals=np.array(residuals, dtype=np.float64),
        pseudolabel_trace=tuple(code_snaps) if cfg.track_codes else None,
        prototype_trace=tuple(proto_snaps) if cfg.track_codes else None,
    )
