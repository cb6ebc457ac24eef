"""Core data types, validation, and binary dataset serialization.

On-disk layout is a JSON manifest next to raw little-endian blobs:
float32 for embeddings and prototypes, uint32 for labels. Matrices are
row-major. In memory everything is widened to float64; files keep the
compact 32-bit layout common for embedding dumps.

Embedding rows are expected to be unit-norm. The loader keeps rows that
are already unit-norm to float32 precision byte-stable (so that a
save/load/save cycle is bit-exact) and renormalizes anything further
out, surfacing large deviations as warnings on the returned dataset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError

EMBEDDING_DTYPE = np.dtype("<f4")
LABEL_DTYPE = np.dtype("<u4")

# Rows below this norm cannot be normalized meaningfully.
MIN_ROW_NORM = 1e-8
# Rows whose norm deviates at most this much from 1 are kept verbatim at
# load time; renormalizing them would perturb stored float32 values for
# no numeric benefit and break byte-exact round trips.
NORM_KEEP_TOL = 1e-6
# Deviations beyond this are renormalized AND reported as a warning.
NORM_WARN_TOL = 0.1
# Validation bound on row norms for in-memory datasets.
NORM_VALID_TOL = 1e-4

_REQUIRED_MANIFEST_KEYS = ("n", "d", "c", "dtype", "embeddings", "labels", "prototypes")


def _as_float64(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains NaN or Inf entries")
    return arr


def _readonly(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    out.setflags(write=False)
    return out


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """Scale every row of ``x`` to unit Euclidean norm, in float64.

    Raises DataError on non-finite entries or rows with norm below
    ``MIN_ROW_NORM`` (a zero vector has no direction to keep).
    """
    arr = _as_float64(x, "embeddings")
    if arr.ndim != 2:
        raise DataError(f"expected a 2-d matrix, got shape {arr.shape}")
    norms = np.linalg.norm(arr, axis=1)
    bad = np.flatnonzero(norms < MIN_ROW_NORM)
    if bad.size:
        raise DataError(f"rows {bad[:8].tolist()} have norm below {MIN_ROW_NORM:g}")
    return arr / norms[:, None]


@dataclass(frozen=True, eq=False)
class SupportSet:
    """Labeled adaptation set: embeddings with one-hot labels."""

    embeddings: np.ndarray  # (N, D), unit rows
    labels: np.ndarray  # (N, C), one-hot

    def __post_init__(self):
        if self.embeddings.ndim != 2 or self.labels.ndim != 2:
            raise DataError("support embeddings and labels must be 2-d")
        if self.embeddings.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"support has {self.embeddings.shape[0]} embeddings but "
                f"{self.labels.shape[0]} label rows"
            )
        if self.embeddings.shape[0] < 1:
            raise DataError("support set must contain at least one sample")
        lab = self.labels
        if not np.all((lab == 0.0) | (lab == 1.0)):
            raise DataError("support labels must be one-hot (entries in {0,1})")
        if not np.all(lab.sum(axis=1) == 1.0):
            raise DataError("every support label row must sum to exactly 1")

    @classmethod
    def from_indices(
        cls, embeddings: np.ndarray, class_indices: np.ndarray, class_count: int
    ) -> "SupportSet":
        """Build a support set from integer class labels."""
        emb = _readonly(normalize_rows(embeddings))
        idx = np.asarray(class_indices, dtype=np.int64)
        if idx.ndim != 1 or idx.shape[0] != emb.shape[0]:
            raise DataError("class_indices must be 1-d and match the embedding count")
        if class_count < 1:
            raise DataError("class_count must be >= 1")
        if idx.size and (idx.min() < 0 or idx.max() >= class_count):
            raise DataError("class index out of range")
        onehot = np.zeros((emb.shape[0], class_count), dtype=np.float64)
        onehot[np.arange(emb.shape[0]), idx] = 1.0
        return cls(embeddings=emb, labels=_readonly(onehot))

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def class_count(self) -> int:
        return self.labels.shape[1]

    @property
    def shot_counts(self) -> np.ndarray:
        """Per-class sample counts K_c; zero entries mark unobserved classes."""
        return self.labels.sum(axis=0).astype(np.int64)


@dataclass(frozen=True, eq=False)
class UnlabeledSet:
    """Extra embeddings without labels. May be empty."""

    embeddings: np.ndarray  # (M, D)

    def __post_init__(self):
        if self.embeddings.ndim != 2:
            raise DataError("unlabeled embeddings must be 2-d")

    @classmethod
    def from_embeddings(cls, embeddings: np.ndarray) -> "UnlabeledSet":
        emb = np.asarray(embeddings, dtype=np.float64)
        if emb.shape[0] == 0:
            return cls(embeddings=_readonly(emb.reshape(0, emb.shape[1])))
        return cls(embeddings=_readonly(normalize_rows(emb)))

    @classmethod
    def empty(cls, dim: int) -> "UnlabeledSet":
        return cls(embeddings=_readonly(np.zeros((0, dim), dtype=np.float64)))

    @property
    def count(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass(frozen=True, eq=False)
class EvalSet:
    """Held-out pool: embeddings with integer class labels."""

    embeddings: np.ndarray  # (n, D)
    labels: np.ndarray  # (n,), in [0, class_count)
    class_count: int

    def __post_init__(self):
        if self.embeddings.ndim != 2 or self.labels.ndim != 1:
            raise DataError("eval set needs 2-d embeddings and 1-d labels")
        if self.embeddings.shape[0] != self.labels.shape[0]:
            raise DataError("eval embeddings/labels length mismatch")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError("eval label out of range")

    @property
    def count(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass(frozen=True, eq=False)
class Dataset:
    """A labeled embedding pool plus pre-ensembled text prototypes.

    ``unlabeled`` holds an optional extra pool of unlabeled embeddings
    (may have zero rows). ``tau`` is an optional softmax temperature
    carried by the manifest. ``warnings`` collects load-time notes such
    as rows that needed aggressive renormalization.
    """

    embeddings: np.ndarray  # (N, D), unit rows
    labels: np.ndarray  # (N,), int64 in [0, C)
    prototypes: np.ndarray  # (C, D)
    unlabeled: np.ndarray  # (M, D), possibly M == 0
    tau: float | None = None
    templates: np.ndarray | None = None  # (C, J, D) per-template text embeddings
    warnings: tuple[str, ...] = ()

    @classmethod
    def create(
        cls,
        embeddings: np.ndarray,
        labels: np.ndarray,
        prototypes: np.ndarray,
        unlabeled: np.ndarray | None = None,
        tau: float | None = None,
        templates: np.ndarray | None = None,
        warnings: tuple[str, ...] = (),
    ) -> "Dataset":
        """Validating constructor; renormalizes embedding rows."""
        emb = _readonly(normalize_rows(embeddings))
        lab = np.asarray(labels, dtype=np.int64)
        protos = _readonly(_as_float64(prototypes, "prototypes"))
        if protos.ndim != 2 or protos.shape[1] != emb.shape[1]:
            raise DataError("prototypes must be (C, D) with D matching embeddings")
        c = protos.shape[0]
        if lab.ndim != 1 or lab.shape[0] != emb.shape[0]:
            raise DataError("labels must be 1-d and match the embedding count")
        if lab.size and (lab.min() < 0 or lab.max() >= c):
            raise DataError("label index out of range")
        if unlabeled is None:
            unl = np.zeros((0, emb.shape[1]), dtype=np.float64)
        else:
            unl = np.asarray(unlabeled, dtype=np.float64)
            if unl.shape[0]:
                unl = normalize_rows(unl)
        if unl.shape[1] != emb.shape[1]:
            raise DataError("unlabeled embeddings dimension mismatch")
        if templates is not None:
            templates = _readonly(_as_float64(templates, "templates"))
            if templates.ndim != 3 or templates.shape[0] != c or templates.shape[2] != emb.shape[1]:
                raise DataError("templates must be (C, J, D)")
        return cls(
            embeddings=emb,
            labels=_readonly(lab),
            prototypes=protos,
            unlabeled=_readonly(unl),
            tau=tau,
            templates=templates,
            warnings=tuple(warnings),
        )

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def class_count(self) -> int:
        return self.prototypes.shape[0]

    @property
    def unlabeled_count(self) -> int:
        return self.unlabeled.shape[0]

    def pool(self) -> EvalSet:
        """View the labeled part as an evaluation pool."""
        return EvalSet(
            embeddings=self.embeddings, labels=self.labels, class_count=self.class_count
        )


@dataclass(frozen=True)
class Violation:
    check: str
    index: int | None
    message: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def by_check(self, check: str) -> list[Violation]:
        return [v for v in self.violations if v.check == check]


def validate(dataset: Dataset) -> ValidationReport:
    """Report-only invariant check over a dataset.

    Never raises; each failed invariant yields one violation per
    offending row (or one summary entry for shape-level problems).
    """
    out: list[Violation] = []

    def _finite(name: str, arr: np.ndarray):
        if arr.size and not np.all(np.isfinite(arr)):
            rows = np.flatnonzero(~np.isfinite(arr).all(axis=tuple(range(1, arr.ndim))))
            for i in rows:
                out.append(Violation(f"{name}_finite", int(i), "non-finite entries"))

    _finite("embedding", dataset.embeddings)
    _finite("prototype", dataset.prototypes)
    _finite("unlabeled", dataset.unlabeled)

    emb = dataset.embeddings
    if emb.size and np.all(np.isfinite(emb)):
        norms = np.linalg.norm(emb, axis=1)
        for i in np.flatnonzero(np.abs(norms - 1.0) > NORM_VALID_TOL):
            out.append(
                Violation("embedding_norm", int(i), f"row norm {norms[i]:.6g} not within "
                          f"{NORM_VALID_TOL:g} of 1")
            )

    c = dataset.class_count
    lab = dataset.labels
    for i in np.flatnonzero((lab < 0) | (lab >= c)):
        out.append(Violation("label_range", int(i), f"label {int(lab[i])} outside [0, {c})"))

    if dataset.prototypes.ndim != 2 or dataset.prototypes.shape[1] != dataset.dim:
        out.append(Violation("prototype_shape", None,
                             f"expected (C, {dataset.dim}), got {dataset.prototypes.shape}"))
    if dataset.unlabeled.size:
        unorms = np.linalg.norm(dataset.unlabeled, axis=1)
        for i in np.flatnonzero(np.abs(unorms - 1.0) > NORM_VALID_TOL):
            out.append(Violation("unlabeled_norm", int(i),
                                 f"row norm {unorms[i]:.6g} not within {NORM_VALID_TOL:g} of 1"))
    return ValidationReport(violations=tuple(out))


def _read_blob(path: Path, dtype: np.dtype, count: int, what: str) -> np.ndarray:
    if not path.exists():
        raise FormatError(f"{what} blob missing: {path}")
    raw = path.read_bytes()
    expected = count * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(
            f"{what} blob {path.name}: expected {expected} bytes for {count} "
            f"values, found {len(raw)}"
        )
    return np.frombuffer(raw, dtype=dtype).copy()


def _ingest_unit_rows(raw32: np.ndarray, n: int, d: int, what: str,
                      warnings: list[str]) -> np.ndarray:
    """Widen to float64 and apply the load-time normalization policy."""
    arr = raw32.astype(np.float64).reshape(n, d)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{what} blob contains NaN or Inf")
    if n == 0:
        return arr
    norms = np.linalg.norm(arr, axis=1)
    tiny = np.flatnonzero(norms < MIN_ROW_NORM)
    if tiny.size:
        raise DataError(f"{what} rows {tiny[:8].tolist()} have norm below {MIN_ROW_NORM:g}")
    dev = np.abs(norms - 1.0)
    heavy = np.flatnonzero(dev > NORM_WARN_TOL)
    if heavy.size:
        warnings.append(
            f"{what}: {heavy.size} rows deviated from unit norm by more than "
            f"{NORM_WARN_TOL:g} before renormalization (first: row {int(heavy[0])}, "
            f"norm {norms[heavy[0]]:.4g})"
        )
    fix = dev > NORM_KEEP_TOL
    if np.any(fix):
        arr[fix] = arr[fix] / norms[fix, None]
    return arr


def load_dataset(manifest_path: str | Path) -> Dataset:
    """Load and validate a dataset from its JSON manifest.

    Blob sizes must match the declared shapes exactly. Embedding rows
    far from unit norm are renormalized; deviations beyond
    ``NORM_WARN_TOL`` are reported in ``Dataset.warnings``.
    """
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise FormatError(f"manifest not found: {manifest_path}")
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}")

    missing = [k for k in _REQUIRED_MANIFEST_KEYS if k not in manifest]
    if missing:
        raise FormatError(f"manifest missing keys: {missing}")
    if manifest["dtype"] != "f32le":
        raise FormatError(f"unsupported dtype {manifest['dtype']!r}; expected 'f32le'")
    n, d, c = (int(manifest[k]) for k in ("n", "d", "c"))
    if n < 1 or d < 1 or c < 1:
        raise FormatError(f"manifest shape fields must be positive, got n={n} d={d} c={c}")

    base = manifest_path.parent
    warnings: list[str] = []

    emb_raw = _read_blob(base / manifest["embeddings"], EMBEDDING_DTYPE, n * d, "embeddings")
    embeddings = _ingest_unit_rows(emb_raw, n, d, "embeddings", warnings)

    lab_raw = _read_blob(base / manifest["labels"], LABEL_DTYPE, n, "labels")
    labels = lab_raw.astype(np.int64)
    if labels.size and labels.max() >= c:
        raise DataError(f"label index {int(labels.max())} out of range for c={c}")

    proto_raw = _read_blob(base / manifest["prototypes"], EMBEDDING_DTYPE, c * d, "prototypes")
    prototypes = proto_raw.astype(np.float64).reshape(c, d)
    if not np.all(np.isfinite(prototypes)):
        raise DataError("prototypes blob contains NaN or Inf")

    m = int(manifest.get("m", 0))
    if m < 0:
        raise FormatError("manifest field 'm' must be >= 0")
    if m > 0 or "unlabeled" in manifest:
        unl_raw = _read_blob(base / manifest["unlabeled"], EMBEDDING_DTYPE, m * d, "unlabeled")
        unlabeled = _ingest_unit_rows(unl_raw, m, d, "unlabeled", warnings)
    else:
        unlabeled = np.zeros((0, d), dtype=np.float64)

    tau = manifest.get("tau")
    if tau is not None:
        tau = float(tau)
        if not np.isfinite(tau) or tau <= 0:
            raise FormatError(f"manifest tau must be a positive finite number, got {tau}")

    templates = None
    if "templates" in manifest:
        j = int(manifest.get("j", 0))
        if j < 1:
            raise FormatError("manifest with 'templates' must declare 'j' >= 1")
        tmpl_raw = _read_blob(base / manifest["templates"], EMBEDDING_DTYPE, c * j * d,
                              "templates")
        templates = tmpl_raw.astype(np.float64).reshape(c, j, d)
        if not np.all(np.isfinite(templates)):
            raise DataError("templates blob contains NaN or Inf")

    return Dataset(
        embeddings=_readonly(embeddings),
        labels=_readonly(labels),
        prototypes=_readonly(prototypes),
        unlabeled=_readonly(unlabeled),
        tau=tau,
        templates=_readonly(templates) if templates is not None else None,
        warnings=tuple(warnings),
    )


def save_dataset(dataset: Dataset, manifest_path: str | Path) -> None:
    """Write a dataset as manifest + blobs.

    Output bytes are a deterministic function of the dataset values:
    fixed blob names, sorted manifest keys, float32/uint32 casts.
    """
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    base.mkdir(parents=True, exist_ok=True)

    names = {
        "embeddings": "embeddings.f32",
        "labels": "labels.u32",
        "prototypes": "prototypes.f32",
        "unlabeled": "unlabeled.f32",
    }
    manifest = {
        "n": int(dataset.n),
        "d": int(dataset.dim),
        "c": int(dataset.class_count),
        "m": int(dataset.unlabeled_count),
        "dtype": "f32le",
        **names,
    }
    if dataset.tau is not None:
        manifest["tau"] = float(dataset.tau)
    if dataset.templates is not None:
        manifest["j"] = int(dataset.templates.shape[1])
        manifest["templates"] = "templates.f32"

    np.ascontiguousarray(dataset.embeddings).astype(EMBEDDING_DTYPE).tofile(
        base / names["embeddings"])
    np.ascontiguousarray(dataset.labels).astype(LABEL_DTYPE).tofile(base / names["labels"])
    np.ascontiguousarray(dataset.prototypes).astype(EMBEDDING_DTYPE).tofile(
        base / names["prototypes"])
    np.ascontiguousarray(dataset.unlabeled).astype(EMBEDDING_DTYPE).tofile(
        base / names["unlabeled"])
    if dataset.templates is not None:
        np.ascontiguousarray(dataset.templates).astype(EMBEDDING_DTYPE).tofile(
            base / "templates.f32")

    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def save_prototypes(prototypes: np.ndarray, manifest_path: str | Path,
                    extra: dict | None = None) -> None:
    """Write a prototype matrix as f32le blob + JSON manifest.

    ``extra`` entries (config echo, version) are merged into the
    manifest. Prototypes are not renormalized: learned prototypes are
    not unit vectors in general.
    """
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    base.mkdir(parents=True, exist_ok=True)
    protos = _as_float64(prototypes, "prototypes")
    if protos.ndim != 2:
        raise DataError(f"prototypes must be 2-d, got shape {protos.shape}")
    blob = manifest_path.stem + ".f32"
    manifest = {
        "c": int(protos.shape[0]),
        "d": int(protos.shape[1]),
        "dtype": "f32le",
        "prototypes": blob,
        **(extra or {}),
    }
    np.ascontiguousarray(protos).astype(EMBEDDING_DTYPE).tofile(base / blob)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_prototypes(manifest_path: str | Path) -> np.ndarray:
    """Load a prototype matrix written by save_prototypes."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise FormatError(f"prototype manifest not found: {manifest_path}")
    except json.JSONDecodeError as exc:
        raise FormatError(f"prototype manifest is not valid JSON: {exc}")
    for key in ("c", "d", "dtype", "prototypes"):
        if key not in manifest:
            raise FormatError(f"prototype manifest missing key {key!r}")
    if manifest["dtype"] != "f32le":
        raise FormatError(f"unsupported dtype {manifest['dtype']!r}; expected 'f32le'")
    c, d = int(manifest["c"]), int(manifest["d"])
    if c < 1 or d < 1:
        raise FormatError(f"prototype manifest shape must be positive, got c={c} d={d}")
    raw = _read_blob(manifest_path.parent / manifest["prototypes"], EMBEDDING_DTYPE,
                     c * d, "prototypes")
    protos = raw.astype(np.float64).reshape(c, d)
    if not np.all(np.isfinite(protos)):
        raise DataError("prototypes blob contains NaN or Inf")
    return protos
