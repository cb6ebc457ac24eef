"""Text-prototype ensembling and softmax prediction over prototype similarities."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DataError

DEFAULT_TAU = 0.01


def check_tau(tau: float) -> float:
    tau = float(tau)
    if not np.isfinite(tau) or tau <= 0:
        raise ConfigError(f"temperature must be a positive finite number, got {tau}")
    return tau


def ensemble_text_prototypes(per_class_templates: np.ndarray) -> np.ndarray:
    """Average per-class template embeddings and renormalize to unit norm.

    ``per_class_templates`` has shape (C, J, D) with J >= 1 templates per
    class. A class whose template mean collapses to (near) zero has no
    usable direction and raises DataError.
    """
    tmpl = np.asarray(per_class_templates, dtype=np.float64)
    if tmpl.ndim != 3:
        raise DataError(f"templates must be (C, J, D), got shape {tmpl.shape}")
    if tmpl.shape[1] == 0:
        raise DataError("at least one template per class is required")
    if not np.all(np.isfinite(tmpl)):
        raise DataError("templates contain NaN or Inf")
    means = tmpl.mean(axis=1)
    norms = np.linalg.norm(means, axis=1)
    degenerate = np.flatnonzero(norms < 1e-8)
    if degenerate.size:
        raise DataError(
            f"template mean for classes {degenerate.tolist()} is (near) zero; "
            "cannot form a prototype"
        )
    return means / norms[:, None]


def predict_probs(embeddings: np.ndarray, prototypes: np.ndarray, tau: float) -> np.ndarray:
    """Softmax class probabilities from prototype similarities.

    Row i is softmax over classes of (v_i . w_c) / tau, computed with
    per-row max subtraction so small temperatures cannot overflow.
    """
    tau = check_tau(tau)
    v = np.asarray(embeddings, dtype=np.float64)
    w = np.asarray(prototypes, dtype=np.float64)
    if v.ndim != 2 or w.ndim != 2 or v.shape[1] != w.shape[1]:
        raise DataError(f"shape mismatch: embeddings {v.shape} vs prototypes {w.shape}")
    logits = (v @ w.T) / tau
    if not np.all(np.isfinite(logits)):
        raise DataError("non-finite logits")
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=1, keepdims=True)


def predict_labels(probs: np.ndarray) -> np.ndarray:
    """Per-row argmax; ties break toward the lowest class index."""
    p = np.asarray(probs)
    if p.ndim != 2:
        raise DataError("probability matrix must be 2-d")
    return np.argmax(p, axis=1).astype(np.int64)
