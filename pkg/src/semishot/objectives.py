"""Loss evaluators for prototype adaptation.

The supervised cross-entropy over softmax scores splits into two parts:
a tightness term, the negative mean similarity between each sample and
its labeled class prototype, and a contrast term, the mean log-sum-exp
of all prototype similarities. The adaptation objectives used by the
solvers keep only the tightness part, add a per-class squared-distance
penalty anchoring prototypes to their text prototypes, and optionally a
pseudo-labeled tightness term over unlabeled embeddings.

Per-class penalty weights come from a LambdaPolicy. The adaptive policy
sets the text weight to 1/K_c (K_c = labeled count of class c) and the
unlabeled weight to twice that. Classes with K_c = 0 have an infinite
text weight in the limit; their penalty and unlabeled contributions are
excluded from reported objective values, which keeps every reported
number finite and keeps the closed-form update the exact minimizer of
what is reported (the solver still moves those prototypes using the
unlabeled term's finite limit coefficient).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SupportSet, UnlabeledSet
from .errors import ConfigError, DataError
from .zeroshot import check_tau


@dataclass(frozen=True, eq=False)
class LambdaPolicy:
    """Per-class weights for the text penalty and the unlabeled term."""

    mode: str = "adaptive"
    fixed_text: np.ndarray | None = None
    fixed_unlabeled: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in ("adaptive", "fixed"):
            raise ConfigError(f"unknown lambda mode {self.mode!r}")
        if self.mode == "adaptive":
            if self.fixed_text is not None or self.fixed_unlabeled is not None:
                raise ConfigError("adaptive lambda policy must not carry fixed values")
        else:
            if self.fixed_text is None or self.fixed_unlabeled is None:
                raise ConfigError("fixed lambda policy needs both weight vectors")
            for name, arr in (("fixed_text", self.fixed_text),
                              ("fixed_unlabeled", self.fixed_unlabeled)):
                if not np.all(np.isfinite(arr)):
                    raise ConfigError(f"{name} must be finite")
            if np.any(self.fixed_text <= 0):
                raise ConfigError("fixed text weights must be strictly positive")
            if np.any(self.fixed_unlabeled < 0):
                raise ConfigError("fixed unlabeled weights must be nonnegative")

    @classmethod
    def adaptive(cls) -> "LambdaPolicy":
        return cls(mode="adaptive")

    @classmethod
    def fixed(cls, text, unlabeled) -> "LambdaPolicy":
        return cls(
            mode="fixed",
            fixed_text=np.asarray(text, dtype=np.float64),
            fixed_unlabeled=np.asarray(unlabeled, dtype=np.float64),
        )

    def text_weights(self, shot_counts: np.ndarray) -> np.ndarray:
        """Per-class text penalty weights; inf marks unobserved classes."""
        counts = np.asarray(shot_counts, dtype=np.float64)
        if self.mode == "fixed":
            if self.fixed_text.shape != counts.shape:
                raise ConfigError("fixed text weights do not match the class count")
            return self.fixed_text
        with np.errstate(divide="ignore"):
            return np.where(counts > 0, 1.0 / np.maximum(counts, 1e-300), np.inf)

    def unlabeled_weights(self, shot_counts: np.ndarray) -> np.ndarray:
        """Per-class unlabeled weights; inf marks unobserved classes."""
        counts = np.asarray(shot_counts, dtype=np.float64)
        if self.mode == "fixed":
            if self.fixed_unlabeled.shape != counts.shape:
                raise ConfigError("fixed unlabeled weights do not match the class count")
            return self.fixed_unlabeled
        return 2.0 * self.text_weights(shot_counts)


@dataclass(frozen=True)
class ObjectiveValue:
    """Decomposed combined objective; total is the sum of the parts."""

    total: float
    fewshot_term: float
    text_penalty_term: float
    unlabeled_term: float


def _logits(embeddings: np.ndarray, prototypes: np.ndarray, tau: float) -> np.ndarray:
    v = np.asarray(embeddings, dtype=np.float64)
    w = np.asarray(prototypes, dtype=np.float64)
    if v.ndim != 2 or w.ndim != 2 or v.shape[1] != w.shape[1]:
        raise DataError(f"shape mismatch: embeddings {v.shape} vs prototypes {w.shape}")
    return (v @ w.T) / tau


def eval_tightness(weights: np.ndarray, embeddings: np.ndarray,
                   prototypes: np.ndarray, tau: float) -> float:
    """Mean over samples of -sum_c weights[i, c] * (v_i . w_c) / tau.

    ``weights`` rows are one-hot labels or soft assignment codes.
    """
    tau = check_tau(tau)
    s = _logits(embeddings, prototypes, tau)
    wts = np.asarray(weights, dtype=np.float64)
    if wts.shape != s.shape:
        raise DataError(f"weights shape {wts.shape} does not match logits {s.shape}")
    return float(-(wts * s).sum(axis=1).mean())


def eval_contrast(embeddings: np.ndarray, prototypes: np.ndarray, tau: float) -> float:
    """Mean over samples of log sum_c exp((v_i . w_c) / tau)."""
    tau = check_tau(tau)
    s = _logits(embeddings, prototypes, tau)
    mx = s.max(axis=1)
    return float((mx + np.log(np.exp(s - mx[:, None]).sum(axis=1))).mean())


def eval_ce(labels: np.ndarray, embeddings: np.ndarray,
            prototypes: np.ndarray, tau: float) -> float:
    """Mean softmax cross-entropy; equals tightness + contrast."""
    tau = check_tau(tau)
    s = _logits(embeddings, prototypes, tau)
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != s.shape:
        raise DataError(f"labels shape {y.shape} does not match logits {s.shape}")
    mx = s.max(axis=1, keepdims=True)
    logz = mx + np.log(np.exp(s - mx).sum(axis=1, keepdims=True))
    return float(-(y * (s - logz)).sum(axis=1).mean())


def _text_penalty(prototypes: np.ndarray, text_prototypes: np.ndarray,
                  lam_text: np.ndarray) -> float:
    """Weighted squared-distance penalty; infinite-weight classes excluded."""
    diff = np.asarray(prototypes, dtype=np.float64) - np.asarray(text_prototypes,
                                                                 dtype=np.float64)
    sq = (diff * diff).sum(axis=1)
    observed = np.isfinite(lam_text)
    return float((lam_text[observed] * sq[observed]).sum())


def eval_fewshot_objective(support: SupportSet, prototypes: np.ndarray,
                           text_prototypes: np.ndarray, tau: float,
                           lambdas: LambdaPolicy) -> float:
    """Supervised tightness plus the text-anchor penalty."""
    tau = check_tau(tau)
    lam_text = lambdas.text_weights(support.shot_counts)
    tight = eval_tightness(support.labels, support.embeddings, prototypes, tau)
    return tight + _text_penalty(prototypes, text_prototypes, lam_text)


def eval_unlabeled_objective(unlabeled: UnlabeledSet, codes: np.ndarray,
                             prototypes: np.ndarray, tau: float) -> float:
    """Mean tightness of unlabeled embeddings under soft codes.

    ``codes`` has shape (M, C) with simplex rows. Empty unlabeled sets
    evaluate to 0. Linear in the codes.
    """
    if unlabeled.count == 0:
        return 0.0
    return eval_tightness(codes, unlabeled.embeddings, prototypes, tau)


def _unlabeled_term(unlabeled: UnlabeledSet, codes: np.ndarray | None,
                    prototypes: np.ndarray, tau: float,
                    lam_unlabeled: np.ndarray) -> float:
    """Per-class weighted unlabeled tightness; infinite weights excluded."""
    if unlabeled.count == 0 or codes is None:
        return 0.0
    s = _logits(unlabeled.embeddings, prototypes, tau)
    z = np.asarray(codes, dtype=np.float64)
    if z.shape != s.shape:
        raise DataError(f"codes shape {z.shape} does not match logits {s.shape}")
    per_class = -(z * s).mean(axis=0)
    observed = np.isfinite(lam_unlabeled)
    return float((lam_unlabeled[observed] * per_class[observed]).sum())


def eval_semi_objective(support: SupportSet, unlabeled: UnlabeledSet,
                        codes: np.ndarray | None, prototypes: np.ndarray,
                        text_prototypes: np.ndarray, tau: float,
                        lambdas: LambdaPolicy) -> ObjectiveValue:
    """Combined objective: supervised tightness + text penalty + weighted
    unlabeled tightness, with each part reported separately."""
    tau = check_tau(tau)
    counts = support.shot_counts
    lam_text = lambdas.text_weights(counts)
    lam_unl = lambdas.unlabeled_weights(counts)
    tight = eval_tightness(support.labels, support.embeddings, prototypes, tau)
    penalty = _text_penalty(prototypes, text_prototypes, lam_text)
    unl = _unlabeled_term(unlabeled, codes, prototypes, tau, lam_unl)
    return ObjectiveValue(
        total=tight + penalty + unl,
        fewshot_term=tight,
        text_penalty_term=penalty,
        unlabeled_term=unl,
    )


def semi_objective_gradient(support: SupportSet, unlabeled: UnlabeledSet,
                            codes: np.ndarray | None, prototypes: np.ndarray,
                            text_prototypes: np.ndarray, tau: float,
                            lambdas: LambdaPolicy) -> np.ndarray:
    """Analytic gradient of the combined objective w.r.t. each prototype row.

    Rows for classes excluded from the reported objective (adaptive
    policy, K_c = 0) are zero: the reported value does not depend on
    those prototypes.
    """
    tau = check_tau(tau)
    counts = support.shot_counts
    lam_text = lambdas.text_weights(counts)
    lam_unl = lambdas.unlabeled_weights(counts)
    w = np.asarray(prototypes, dtype=np.float64)
    t = np.asarray(text_prototypes, dtype=np.float64)

    grad = -(support.labels.T @ support.embeddings) / (support.n * tau)
    observed = np.isfinite(lam_text)
    pen = np.zeros_like(w)
    pen[observed] = 2.0 * lam_text[observed, None] * (w[observed] - t[observed])
    grad = grad + pen
    if unlabeled.count and codes is not None:
        z = np.asarray(codes, dtype=np.float64)
        unl = -(z.T @ unlabeled.embeddings) / (unlabeled.count * tau)
        weighted = np.zeros_like(w)
        obs_u = np.isfinite(lam_unl)
        weighted[obs_u] = lam_unl[obs_u, None] * unl[obs_u]
        grad = grad + weighted
    grad[~observed] = 0.0
    return grad
