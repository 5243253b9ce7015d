"""Synthetic benchmark generation, imbalance subsampling and feature CSV I/O.

The generator realises joint conditional-and-label shift: source classes are
Gaussians, target classes are fresh draws pushed through per-class affine
maps, and the label marginals differ. Construction quality is probed with the
cyclical-monotonicity check so downstream guarantees are testable.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng
from .errors import (
    CsvFormatError,
    DatasetError,
    InfeasibleSchemeError,
    InvalidSpecError,
)
from .ot import MonotonicityReport, check_cyclical_monotonicity, uniform_cloud

IMBALANCE_SCHEMES = ("balanced", "mild", "high", "half-classes-30pct")


@dataclass
class LabeledDataset:
    """Feature matrix plus integer labels; label -1 marks an unlabelled row."""

    features: np.ndarray
    labels: np.ndarray
    domain: str
    n_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise DatasetError("a dataset needs at least one sample")
        if self.labels.shape != (self.features.shape[0],):
            raise DatasetError("need one label per sample (-1 when unknown)")
        if self.labels.max(initial=-1) >= self.n_classes or self.labels.min(initial=0) < -1:
            raise DatasetError(f"labels must lie in [-1, {self.n_classes})")

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def has_labels(self) -> bool:
        return bool((self.labels >= 0).all())

    def class_indices(self, k: int) -> np.ndarray:
        return np.nonzero(self.labels == k)[0]

    def proportions(self) -> np.ndarray:
        if not self.has_labels():
            raise DatasetError("proportions need a fully labelled dataset")
        return np.bincount(self.labels, minlength=self.n_classes) / self.size


@dataclass
class SyntheticSpec:
    """Per-class source Gaussians plus per-class affine target transforms."""

    n_classes: int
    dim: int
    means: np.ndarray            # (K, d)
    covariances: np.ndarray      # (K, d, d), positive definite
    transform_scales: np.ndarray  # (K, d, d) applied to target draws
    transform_shifts: np.ndarray  # (K, d)
    source_proportions: np.ndarray
    target_proportions: np.ndarray
    n_source: int
    n_target: int
    seed: int

    def __post_init__(self):
        for name in ("source_proportions", "target_proportions"):
            p = np.asarray(getattr(self, name), dtype=np.float64)
            if p.shape != (self.n_classes,) or (p < 0).any() or abs(p.sum() - 1) > 1e-9:
                raise InvalidSpecError(f"{name} must be a point on the {self.n_classes}-simplex")
            setattr(self, name, p)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.covariances = np.asarray(self.covariances, dtype=np.float64)
        self.transform_scales = np.asarray(self.transform_scales, dtype=np.float64)
        self.transform_shifts = np.asarray(self.transform_shifts, dtype=np.float64)


@dataclass
class GeneratedBenchmark:
    source: LabeledDataset
    target: LabeledDataset
    monotonicity: MonotonicityReport


def scheme_proportions(scheme: str, n_classes: int) -> np.ndarray:
    """Target label marginals for a named imbalance configuration.

    For 10 classes the mild and high patterns are the reference ones (two
    favoured classes at 0.2 / 0.22); other class counts keep two favoured
    classes and spread the rest uniformly.
    """
    k = n_classes
    if scheme == "balanced":
        return np.full(k, 1.0 / k)
    if scheme not in ("mild", "high"):
        raise InfeasibleSchemeError(f"{scheme!r} is not a proportion scheme")
    if k < 3:
        raise InfeasibleSchemeError(f"scheme {scheme!r} needs at least 3 classes")
    favoured = (4, 5) if k >= 6 else (k - 2, k - 1)
    p = np.zeros(k)
    if scheme == "mild" and k == 10:
        p[[0, 1, 2, 3, 6]] = 0.06
        p[[4, 5]] = 0.2
        p[[7, 8, 9]] = 0.1
        return p
    favoured_mass = 0.22 if scheme == "high" else 0.2
    p[list(favoured)] = favoured_mass
    rest = [i for i in range(k) if i not in favoured]
    p[rest] = (1.0 - 2 * favoured_mass) / len(rest)
    return p


def blobs_k3(imbalance: str = "default", n_source: int = 2000, n_target: int = 2000,
             seed: int = 0, separation: float = 8.0, rotation_deg: float = 15.0,
             translation: float = 0.5) -> SyntheticSpec:
    """Default 3-class 2-D benchmark: unit-variance blobs at mutual distance
    `separation`, target transform = global rotation plus a per-class
    translation of the given norm. Source proportions uniform; target
    proportions (0.6, 0.25, 0.15) by default or a named scheme."""
    k, d = 3, 2
    radius = separation / (2.0 * np.sin(np.pi / k))
    angles = np.pi / 2 + 2 * np.pi * np.arange(k) / k
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    covs = np.tile(np.eye(d), (k, 1, 1))

    theta = np.deg2rad(rotation_deg)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    scales = np.tile(rot, (k, 1, 1))
    shift_angles = 2 * np.pi * np.arange(k) / k
    shifts = translation * np.stack([np.cos(shift_angles), np.sin(shift_angles)], axis=1)

    if imbalance == "default":
        p_t = np.array([0.6, 0.25, 0.15])
    else:
        p_t = scheme_proportions(imbalance, k)
    return SyntheticSpec(
        n_classes=k, dim=d, means=means, covariances=covs,
        transform_scales=scales, transform_shifts=shifts,
        source_proportions=np.full(k, 1.0 / k), target_proportions=p_t,
        n_source=n_source, n_target=n_target, seed=seed,
    )


def _cholesky_factors(spec: SyntheticSpec):
    factors = []
    for k in range(spec.n_classes):
        try:
            factors.append(np.linalg.cholesky(spec.covariances[k]))
        except np.linalg.LinAlgError as exc:
            raise InvalidSpecError(f"covariance of class {k} is not positive definite") from exc
    return factors


def _draw_labels(gen, proportions: np.ndarray, n: int) -> np.ndarray:
    edges = np.cumsum(proportions)
    edges[-1] = 1.0
    return np.searchsorted(edges, gen.random(n), side="right").astype(np.int64)


def _draw_class_features(gen, spec, factors, labels, transform: bool) -> np.ndarray:
    x = np.empty((labels.shape[0], spec.dim))
    noise = rng.normal(gen, (labels.shape[0], spec.dim))
    for k in range(spec.n_classes):
        idx = np.nonzero(labels == k)[0]
        if idx.size == 0:
            continue
        samples = spec.means[k] + noise[idx] @ factors[k].T
        if transform:
            samples = samples @ spec.transform_scales[k].T + spec.transform_shifts[k]
        x[idx] = samples
    return x


def generate(spec: SyntheticSpec, probe_per_class: int = 200) -> GeneratedBenchmark:
    """Sample source and target datasets and probe the construction.

    Target labels are oracle labels: evaluation may use them, training must
    not. The probe draws `probe_per_class` fresh points per class on each side
    and runs the cyclical-monotonicity check in input space.
    """
    factors = _cholesky_factors(spec)

    gen_s = rng.stream(spec.seed, "source")
    labels_s = _draw_labels(gen_s, spec.source_proportions, spec.n_source)
    x_s = _draw_class_features(gen_s, spec, factors, labels_s, transform=False)

    gen_t = rng.stream(spec.seed, "target")
    labels_t = _draw_labels(gen_t, spec.target_proportions, spec.n_target)
    x_t = _draw_class_features(gen_t, spec, factors, labels_t, transform=True)

    gen_p = rng.stream(spec.seed, "probe")
    probe_labels = np.repeat(np.arange(spec.n_classes), probe_per_class)
    probe_src = _draw_class_features(gen_p, spec, factors, probe_labels, transform=False)
    probe_tgt = _draw_class_features(gen_p, spec, factors, probe_labels, transform=True)
    src_clouds = [uniform_cloud(probe_src[probe_labels == k]) for k in range(spec.n_classes)]
    tgt_clouds = [uniform_cloud(probe_tgt[probe_labels == k]) for k in range(spec.n_classes)]
    probe = check_cyclical_monotonicity(src_clouds, tgt_clouds)

    return GeneratedBenchmark(
        LabeledDataset(x_s, labels_s, "source", spec.n_classes),
        LabeledDataset(x_t, labels_t, "target", spec.n_classes),
        probe,
    )


def subsample_imbalance(ds: LabeledDataset, scheme: str, seed: int) -> LabeledDataset:
    """Resample without replacement to a named imbalance configuration.

    Proportion schemes (balanced / mild / high) apply to the label marginal;
    half-classes-30pct keeps 30% of the first half of the classes and all of
    the rest.
    """
    if scheme not in IMBALANCE_SCHEMES:
        raise InfeasibleSchemeError(f"unknown scheme {scheme!r}")
    if not ds.has_labels():
        raise InfeasibleSchemeError("imbalance subsampling needs labels")
    counts = np.bincount(ds.labels, minlength=ds.n_classes)
    gen = rng.stream(seed, "imbalance", scheme)

    if scheme == "half-classes-30pct":
        takes = counts.copy()
        for k in range(ds.n_classes // 2):
            takes[k] = int(round(0.3 * counts[k]))
    else:
        p = scheme_proportions(scheme, ds.n_classes)
        if (counts[p > 0] == 0).any():
            raise InfeasibleSchemeError("a class required by the scheme has no samples")
        with np.errstate(divide="ignore"):
            cap = np.where(p > 0, counts / np.maximum(p, 1e-300), np.inf)
        total = int(np.floor(cap.min()))
        if total < ds.n_classes:
            raise InfeasibleSchemeError("not enough samples to realise the scheme")
        takes = np.floor(total * p).astype(np.int64)
        remainder = total - takes.sum()
        order = np.argsort(-(total * p - takes), kind="stable")
        for k in order:
            if remainder == 0:
                break
            if takes[k] + 1 <= counts[k]:
                takes[k] += 1
                remainder -= 1

    keep = []
    for k in range(ds.n_classes):
        idx = ds.class_indices(k)
        if takes[k] > idx.size:
            raise InfeasibleSchemeError(f"class {k} has {idx.size} samples, need {takes[k]}")
        keep.append(gen.permutation(idx)[: takes[k]])
    keep = np.sort(np.concatenate(keep))
    return LabeledDataset(ds.features[keep], ds.labels[keep], ds.domain, ds.n_classes)


def save_feature_csv(path, ds: LabeledDataset, include_labels: bool = True) -> None:
    """Write header label,f0,f1,... and one row per sample; -1 hides labels."""
    header = "label," + ",".join(f"f{i}" for i in range(ds.dim))
    lines = [header]
    for i in range(ds.size):
        label = ds.labels[i] if include_labels else -1
        lines.append(str(int(label)) + "," + ",".join(repr(v) for v in ds.features[i]))
    Path(path).write_text("\n".join(lines) + "\n")


def save_label_csv(path, ds: LabeledDataset) -> None:
    lines = ["label"] + [str(int(v)) for v in ds.labels]
    Path(path).write_text("\n".join(lines) + "\n")


def load_feature_csv(path, domain: str = "source", n_classes: int | None = None) -> LabeledDataset:
    """Parse a feature CSV; label column -1 marks unlabelled rows.

    Malformed content raises CsvFormatError naming the offending line
    (1-based, header included).
    """
    text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip() != ""]
    if not lines:
        raise CsvFormatError(f"{path}: file is empty")
    header = lines[0].split(",")
    if header[0].strip() != "label" or len(header) < 2:
        raise CsvFormatError(f"{path}: line 1: header must read label,f0,f1,...")
    width = len(header)

    labels, rows = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != width:
            raise CsvFormatError(
                f"{path}: line {lineno}: expected {width} columns, got {len(cells)}"
            )
        try:
            label = int(float(cells[0]))
            row = [float(c) for c in cells[1:]]
        except ValueError as exc:
            raise CsvFormatError(f"{path}: line {lineno}: non-numeric cell") from exc
        labels.append(label)
        rows.append(row)
    if not rows:
        raise CsvFormatError(f"{path}: no data rows")
    labels = np.array(labels, dtype=np.int64)
    if n_classes is None:
        n_classes = max(int(labels.max(initial=0)) + 1, 1)
    return LabeledDataset(np.array(rows), labels, domain, n_classes)


def load_label_csv(path) -> np.ndarray:
    text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip() != ""]
    if not lines or lines[0].strip() != "label":
        raise CsvFormatError(f"{path}: line 1: header must read label")
    try:
        return np.array([int(float(ln)) for ln in lines[1:]], dtype=np.int64)
    except ValueError as exc:
        raise CsvFormatError(f"{path}: non-numeric label cell") from exc
