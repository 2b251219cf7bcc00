"""Classification metrics, significance testing and interpretability
measures.

Includes the pooled/averaged accuracies, kappa, one-vs-rest sensitivity
and specificity, the continuity-corrected McNemar chi-squared with its
star bands, per-class Shannon entropy over feature activations, the Dunn
cluster-validity index, nine built-in two/three-band reflectance
indices, and the squared Pearson correlation used for post-hoc feature
attribution.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError

# 1-degree-of-freedom chi-squared thresholds for the star bands.
MCNEMAR_BANDS = ((6.635, "***"), (3.841, "**"), (2.706, "*"))


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts[t-1][p-1] of truth t predicted as p."""

    n_class: int
    counts: np.ndarray

    def __post_init__(self):
        if self.counts.shape != (self.n_class, self.n_class):
            raise DataError("confusion matrix shape mismatch")
        if (self.counts < 0).any():
            raise DataError("confusion matrix counts must be non-negative")

    @property
    def total(self):
        return int(self.counts.sum())


def confusion(truth, pred, n_class: int = None) -> ConfusionMatrix:
    """Count matrix over labeled pixels (truth 0 entries are skipped)."""
    t = np.asarray(truth, dtype=np.int64).reshape(-1)
    p = np.asarray(pred, dtype=np.int64).reshape(-1)
    if t.shape != p.shape:
        raise DataError(f"length mismatch: truth {t.size} vs pred {p.size}")
    keep = t > 0
    t, p = t[keep], p[keep]
    if n_class is None:
        n_class = int(max(t.max(initial=0), p.max(initial=0)))
    if n_class < 1:
        raise DataError("no labeled pixels")
    if (t > n_class).any() or (p < 1).any() or (p > n_class).any():
        raise DataError(f"labels outside [1, {n_class}]")
    counts = np.zeros((n_class, n_class), dtype=np.int64)
    np.add.at(counts, (t - 1, p - 1), 1)
    return ConfusionMatrix(n_class, counts)


def oa_aa(cm: ConfusionMatrix):
    """(overall accuracy, average per-class recall).

    Classes with no truth pixels are excluded from the average.
    """
    if cm.total == 0:
        raise DataError("empty confusion matrix")
    oa = float(np.trace(cm.counts) / cm.total)
    row_sums = cm.counts.sum(axis=1)
    present = row_sums > 0
    recalls = np.diag(cm.counts)[present] / row_sums[present]
    return oa, float(np.mean(recalls))


def kappa(cm: ConfusionMatrix) -> float:
    """Chance-corrected agreement (p_o - p_e) / (1 - p_e)."""
    if cm.total == 0:
        raise DataError("empty confusion matrix")
    p_o = np.trace(cm.counts) / cm.total
    rows = cm.counts.sum(axis=1)
    cols = cm.counts.sum(axis=0)
    p_e = float(np.sum(rows * cols)) / (cm.total**2)
    if p_e == 1.0:
        raise DataError("degenerate confusion matrix: chance agreement is 1")
    return float((p_o - p_e) / (1.0 - p_e))


def sens_spec(cm: ConfusionMatrix, cls: int):
    """One-vs-rest (sensitivity, specificity) for a 1-based class.

    A zero denominator yields nan, not an error.
    """
    if not 1 <= cls <= cm.n_class:
        raise DataError(f"class {cls} outside [1, {cm.n_class}]")
    i = cls - 1
    tp = cm.counts[i, i]
    fn = cm.counts[i, :].sum() - tp
    fp = cm.counts[:, i].sum() - tp
    tn = cm.total - tp - fn - fp
    sens = float(tp / (tp + fn)) if (tp + fn) > 0 else float("nan")
    spec = float(tn / (tn + fp)) if (tn + fp) > 0 else float("nan")
    return sens, spec


def mcnemar(truth, pred_a, pred_b):
    """Continuity-corrected McNemar chi-squared plus its star band.

    chi2 = (|f12 - f21| - 1)^2 / (f12 + f21) over discordant pairs,
    skipping unlabeled (truth 0) pixels. Bands: *** chi2 >= 6.635,
    ** >= 3.841, * >= 2.706, else NS.
    """
    t = np.asarray(truth, dtype=np.int64).reshape(-1)
    a = np.asarray(pred_a, dtype=np.int64).reshape(-1)
    b = np.asarray(pred_b, dtype=np.int64).reshape(-1)
    if not (t.shape == a.shape == b.shape):
        raise DataError("mcnemar inputs must have equal lengths")
    keep = t > 0
    t, a, b = t[keep], a[keep], b[keep]
    f12 = int(np.sum((a == t) & (b != t)))
    f21 = int(np.sum((a != t) & (b == t)))
    return mcnemar_from_counts(f12, f21)


def mcnemar_from_counts(f12: int, f21: int):
    if f12 + f21 == 0:
        raise DataError("no discordant pairs")
    chi2 = (abs(f12 - f21) - 1) ** 2 / (f12 + f21)
    band = "NS"
    for threshold, stars in MCNEMAR_BANDS:
        if chi2 >= threshold:
            band = stars
            break
    return float(chi2), band


def shannon_entropy(class_features, base: str = "e") -> float:
    """Entropy of the normalized mean absolute activation per feature.

    ``class_features`` is (samples, M) for one class. All-zero
    activations fall back to the uniform distribution. ``base`` is
    "e" (natural log) or "2".
    """
    feats = np.atleast_2d(np.asarray(class_features, dtype=np.float64))
    if feats.size == 0:
        raise DataError("entropy needs at least one sample")
    p = np.abs(feats).mean(axis=0)
    total = p.sum()
    p = np.full_like(p, 1.0 / p.size) if total == 0 else p / total
    nz = p[p > 0]
    e = float(-(nz * np.log(nz)).sum())
    if base == "2":
        e /= math.log(2.0)
    elif base != "e":
        raise DataError(f"unsupported entropy base {base!r}")
    return e


def dunn_index(features, labels) -> float:
    """Minimum inter-class center distance over maximum intra-class
    diameter. Classes need >= 2 samples to be eligible; at least two
    eligible classes are required."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    labs = np.asarray(labels).reshape(-1)
    if x.shape[0] != labs.size:
        raise DataError("features/labels length mismatch")
    groups = [x[labs == cls] for cls in np.unique(labs) if (labs == cls).sum() >= 2]
    if len(groups) < 2:
        raise DataError("fewer than 2 classes with >= 2 samples")
    diameters = []
    for g in groups:
        d = np.linalg.norm(g[:, None, :] - g[None, :, :], axis=-1)
        diameters.append(d.max())
    max_diameter = max(diameters)
    if max_diameter == 0:
        raise DataError("zero intra-class spread")
    centers = np.array([g.mean(axis=0) for g in groups])
    seps = [
        np.linalg.norm(centers[i] - centers[j])
        for i in range(len(groups))
        for j in range(i + 1, len(groups))
    ]
    return float(min(seps) / max_diameter)


# vegetation indices -----------------------------------------------------


@dataclass(frozen=True)
class VegetationIndexDef:
    """Named reflectance-index formula over specific wavelengths (nm)."""

    name: str
    wavelengths: tuple
    formula: object  # callable(dict wavelength -> reflectance) -> float


def _builtin_indices():
    return (
        VegetationIndexDef("NDVI", (760.0, 560.0),
                           lambda r: (r[760.0] - r[560.0]) / (r[760.0] + r[560.0])),
        VegetationIndexDef("PRI", (570.0, 531.0),
                           lambda r: (r[570.0] - r[531.0]) / (r[570.0] + r[531.0])),
        VegetationIndexDef("CIred-edge", (760.0, 560.0),
                           lambda r: r[760.0] / r[560.0] - 1.0),
        VegetationIndexDef("NDWI", (860.0, 1240.0),
                           lambda r: (r[860.0] - r[1240.0]) / (r[860.0] + r[1240.0])),
        VegetationIndexDef("TVI", (750.0, 550.0, 670.0),
                           lambda r: 0.5 * (120.0 * (r[750.0] - r[550.0])
                                            - 200.0 * (r[670.0] - r[550.0]))),
        VegetationIndexDef("SIPI", (800.0, 445.0, 680.0),
                           lambda r: (r[800.0] - r[445.0]) / (r[800.0] + r[680.0])),
        VegetationIndexDef("PSRI", (678.0, 550.0, 750.0),
                           lambda r: (r[678.0] - r[550.0]) / r[750.0]),
        VegetationIndexDef("NPCI", (680.0, 430.0),
                           lambda r: (r[680.0] - r[430.0]) / (r[680.0] + r[430.0])),
        VegetationIndexDef("OSAVI", (760.0, 560.0),
                           lambda r: (r[760.0] - r[560.0]) / (r[760.0] + r[560.0] + 0.16)),
    )


BUILTIN_INDICES = _builtin_indices()


def index_by_name(name: str) -> VegetationIndexDef:
    for idx in BUILTIN_INDICES:
        if idx.name.lower() == name.lower():
            return idx
    raise DataError(f"unknown vegetation index {name!r}")


def vegetation_index(spectrum, wavelengths, index: VegetationIndexDef,
                     tolerance_nm: float = 10.0) -> float:
    """Evaluate an index on one spectrum using nearest-band lookup.

    Every required wavelength must lie within ``tolerance_nm`` of some
    band center, otherwise a DataError names the index and wavelength.
    """
    spec = np.asarray(spectrum, dtype=np.float64).reshape(-1)
    wl = np.asarray(wavelengths, dtype=np.float64).reshape(-1)
    if spec.size != wl.size:
        raise DataError("spectrum/wavelength length mismatch")
    refl = {}
    for need in index.wavelengths:
        pos = int(np.argmin(np.abs(wl - need)))
        if abs(wl[pos] - need) > tolerance_nm:
            raise DataError(
                f"wavelength unavailable for {index.name}: {need} nm "
                f"(nearest band {wl[pos]} nm)"
            )
        # IEEE semantics at formula poles (e.g. a zero denominator band)
        refl[need] = np.float64(spec[pos])
    with np.errstate(divide="ignore", invalid="ignore"):
        return float(index.formula(refl))


def available_indices(wavelengths, tolerance_nm: float = 10.0):
    """Built-in indices whose wavelengths the sensor covers."""
    wl = np.asarray(wavelengths, dtype=np.float64)
    out = []
    for idx in BUILTIN_INDICES:
        if all(np.abs(wl - need).min() <= tolerance_nm for need in idx.wavelengths):
            out.append(idx)
    return out


def r_squared(x, y) -> float:
    """Squared Pearson correlation between two equal-length samples."""
    a = np.asarray(x, dtype=np.float64).reshape(-1)
    b = np.asarray(y, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise DataError("r_squared inputs must have equal lengths")
    if a.size < 3:
        raise DataError("r_squared needs at least 3 samples")
    da = a - a.mean()
    db = b - b.mean()
    va = float(np.dot(da, da))
    vb = float(np.dot(db, db))
    if va == 0 or vb == 0:
        raise DataError("zero variance")
    r = float(np.dot(da, db)) / math.sqrt(va * vb)
    return min(r * r, 1.0)


# report records -----------------------------------------------------------


@dataclass(frozen=True)
class MetricsReport:
    """Classification metrics bundle for one evaluated pixel set."""

    confusion: ConfusionMatrix
    oa: float
    aa: float
    kappa: float
    per_class: tuple  # of (sensitivity, specificity), nan when undefined
    split: str = "test"
    mcnemar: dict = None

    def to_dict(self) -> dict:
        return {
            "oa": self.oa,
            "aa": self.aa,
            "kappa": self.kappa,
            "confusion": self.confusion.counts.tolist(),
            "n_evaluated": self.confusion.total,
            "split": self.split,
            "per_class": [
                {"class": i + 1, "sensitivity": s, "specificity": p}
                for i, (s, p) in enumerate(self.per_class)
            ],
            **({"mcnemar": self.mcnemar} if self.mcnemar is not None else {}),
        }


def metrics_report(cm: ConfusionMatrix, split: str = "test",
                   mcnemar_result: dict = None) -> MetricsReport:
    """Assemble OA/AA/kappa and one-vs-rest rates from a confusion matrix."""
    oa, aa = oa_aa(cm)
    return MetricsReport(
        cm, oa, aa, kappa(cm),
        tuple(sens_spec(cm, c) for c in range(1, cm.n_class + 1)),
        split, mcnemar_result,
    )


@dataclass(frozen=True)
class InterpretabilityReport:
    """Entropy/Dunn measures plus the post-hoc correlation summary."""

    entropy_per_class: dict  # class id -> entropy (nats)
    capsule_entropy_per_class: dict
    dunn: float  # None when fewer than 2 eligible classes
    r_squared_best: dict  # reference -> {"feature", "r2"}
    references: tuple
    n_pixels: int
    n_features: int

    def __post_init__(self):
        if any(e < 0 for e in self.entropy_per_class.values()):
            raise DataError("entropies must be non-negative")
        if self.dunn is not None and self.dunn < 0:
            raise DataError("Dunn index must be non-negative")
        for ref, entry in self.r_squared_best.items():
            if not 0.0 <= entry["r2"] <= 1.0:
                raise DataError(f"r2 for {ref} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "entropy_per_class": self.entropy_per_class,
            "entropy_mean": float(np.mean(list(self.entropy_per_class.values()))),
            "capsule_entropy_per_class": self.capsule_entropy_per_class,
            "dunn_index": self.dunn,
            "r_squared_best": self.r_squared_best,
            "references": list(self.references),
            "n_pixels": self.n_pixels,
            "n_features": self.n_features,
        }
