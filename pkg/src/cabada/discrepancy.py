"""Kernel-based distribution distances with analytic feature gradients.

Implements the squared maximum mean discrepancy (mmd2), its class-aware
contrastive combination (cdd), the within-group block-conditional variant
(caba), and a sorted-coupling 1-Wasserstein diagnostic. All losses operate
on a FeatureBatch (feature rows plus labels and domain keys) and return
exact gradients with respect to every feature entry; the Wasserstein
diagnostic is evaluation-only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .data import DomainKey
from .errors import ConfigError, DataError

MEDIAN = "median"


@dataclass
class KernelConfig:
    """Gaussian kernel mixture: k(u,v) = sum_b w_b exp(-|u-v|^2 / (2 s_b^2)).

    ``bandwidths`` is either the string "median" (resolve the bandwidth from
    data via the median pairwise distance) or an explicit list of positive
    reals. ``weights`` defaults to uniform. With median selection,
    ``median_multi`` expands the single data-driven bandwidth s into
    {s/2, s, 2s}.
    """

    family: str = "gaussian"
    bandwidths: str | list[float] = MEDIAN
    weights: list[float] | None = None
    median_multi: bool = False

    def validate(self) -> None:
        if self.family != "gaussian":
            raise ConfigError(f"unsupported kernel family '{self.family}'")
        if isinstance(self.bandwidths, str):
            if self.bandwidths != MEDIAN:
                raise ConfigError(
                    f"kernel.bandwidth must be 'median' or a list, got {self.bandwidths!r}"
                )
        else:
            if len(self.bandwidths) == 0:
                raise ConfigError("kernel needs at least one bandwidth")
            if any(b <= 0 for b in self.bandwidths):
                raise ConfigError("kernel bandwidths must be positive")
            if self.weights is not None:
                if len(self.weights) != len(self.bandwidths):
                    raise ConfigError("kernel weights/bandwidths length mismatch")
                if any(w <= 0 for w in self.weights):
                    raise ConfigError("kernel weights must be positive")
                if abs(sum(self.weights) - 1.0) > 1e-9:
                    raise ConfigError("kernel weights must sum to 1")

    @property
    def is_resolved(self) -> bool:
        return not isinstance(self.bandwidths, str)

    def resolved_weights(self) -> np.ndarray:
        assert self.is_resolved
        if self.weights is None:
            k = len(self.bandwidths)
            return np.full(k, 1.0 / k)
        return np.asarray(self.weights, dtype=np.float64)


@dataclass
class FeatureBatch:
    """Feature rows (n, P) with optional per-row labels and domain keys.

    ``keys`` rows are (subject, session, block, trial). Labels and keys are
    only required by the class-aware / block-aware losses.
    """

    features: np.ndarray
    labels: np.ndarray | None = None
    keys: np.ndarray | None = None

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 2:
            raise DataError("features must be a 2-D (n, P) array")
        if not np.isfinite(f).all():
            raise DataError("features contain NaN/Inf")
        self.features = f
        n = f.shape[0]
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise DataError("labels length does not match features")
        if self.keys is not None:
            keys = np.asarray(self.keys, dtype=np.int64)
            if keys.ndim == 1 and n == 1:
                keys = keys[None, :]
            if keys.shape != (n, 4):
                raise DataError("keys must have shape (n, 4)")
            self.keys = keys

    def __len__(self) -> int:
        return self.features.shape[0]

    def take(self, indices: np.ndarray) -> "FeatureBatch":
        idx = np.asarray(indices, dtype=np.int64)
        return FeatureBatch(
            features=self.features[idx],
            labels=None if self.labels is None else self.labels[idx],
            keys=None if self.keys is None else self.keys[idx],
        )


def median_bandwidth(batch: FeatureBatch | np.ndarray) -> float:
    """Median pairwise Euclidean distance over the batch, 1.0 fallback.

    Self-distances (the diagonal) are excluded; a non-positive median
    (all points coincident, or a majority of duplicates) falls back to 1.0
    so the kernel stays well defined.
    """
    f = batch.features if isinstance(batch, FeatureBatch) else np.asarray(batch, dtype=np.float64)
    n = f.shape[0]
    if n < 2:
        raise DataError("median_bandwidth needs at least 2 points")
    diff = f[:, None, :] - f[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    iu = np.triu_indices(n, k=1)
    dists = np.sqrt(np.maximum(d2[iu], 0.0))
    med = float(np.median(dists))
    return med if med > 0.0 else 1.0


def resolve_kernel(cfg: KernelConfig, features: np.ndarray) -> KernelConfig:
    """Fix data-driven bandwidths against the given feature stack.

    Returns a KernelConfig with an explicit bandwidth list. The resolved
    bandwidths are treated as constants by all gradient computations
    (the median is not differentiated through).
    """
    cfg.validate()
    if cfg.is_resolved:
        return cfg
    sigma = median_bandwidth(np.asarray(features, dtype=np.float64))
    bands = [0.5 * sigma, sigma, 2.0 * sigma] if cfg.median_multi else [sigma]
    return KernelConfig(family=cfg.family, bandwidths=bands, weights=None)


def gaussian_kernel(u, v, cfg: KernelConfig) -> float:
    """Kernel value for a single pair of vectors."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise DataError(f"dimension mismatch: {u.shape} vs {v.shape}")
    kern = resolve_kernel(cfg, np.stack([u, v]))
    d2 = float(np.dot(u - v, u - v))
    weights = kern.resolved_weights()
    return float(sum(w * np.exp(-d2 / (2.0 * s * s))
                     for w, s in zip(weights, kern.bandwidths)))


def _pair_sum(x: np.ndarray, y: np.ndarray, kern: KernelConfig):
    """Sum of k(x_i, y_j) over all pairs, with grads of that sum.

    Treats x and y as independent variables; when called with the same
    array twice the caller adds both returned gradients.
    """
    diff = x[:, None, :] - y[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    weights = kern.resolved_weights()
    total = 0.0
    gx = np.zeros_like(x)
    gy = np.zeros_like(y)
    for w, sigma in zip(weights, kern.bandwidths):
        e = np.exp(-d2 / (2.0 * sigma * sigma))
        total += float(w * e.sum())
        p = (w / (sigma * sigma)) * e
        gx -= np.einsum("ij,ijk->ik", p, diff)
        gy += np.einsum("ij,ijk->jk", p, diff)
    return total, gx, gy


def mmd2_with_grad(A: FeatureBatch, B: FeatureBatch, cfg: KernelConfig,
                   literal_cross: bool = False):
    """Biased squared-MMD estimator and its gradients.

    value = (1/n^2) sum k(a,a') + (1/m^2) sum k(b,b') - c sum k(a,b) with
    the standard cross coefficient c = 2/(n m). ``literal_cross`` switches
    c to 2/(n^2 m^2) for comparison runs; the default form equals the
    squared RKHS distance between mean embeddings and is clamped at 0
    against rounding noise.
    """
    fa, fb = A.features, B.features
    n, m = fa.shape[0], fb.shape[0]
    if n == 0 or m == 0:
        raise DataError("mmd2 requires non-empty batches")
    if fa.shape[1] != fb.shape[1]:
        raise DataError(f"feature dimension mismatch: {fa.shape[1]} vs {fb.shape[1]}")
    kern = resolve_kernel(cfg, np.concatenate([fa, fb], axis=0))
    saa, gaa_x, gaa_y = _pair_sum(fa, fa, kern)
    sbb, gbb_x, gbb_y = _pair_sum(fb, fb, kern)
    # canonical operand order keeps mmd2(A, B) == mmd2(B, A) bit-exact
    # (the kernel is symmetric; only float reduction order is at stake)
    if fb.tobytes() < fa.tobytes():
        sab, gab_b, gab_a = _pair_sum(fb, fa, kern)
    else:
        sab, gab_a, gab_b = _pair_sum(fa, fb, kern)
    c = 2.0 / (n * n * m * m) if literal_cross else 2.0 / (n * m)
    value = saa / (n * n) + sbb / (m * m) - c * sab
    grad_a = (gaa_x + gaa_y) / (n * n) - c * gab_a
    grad_b = (gbb_x + gbb_y) / (m * m) - c * gab_b
    return max(value, 0.0), grad_a, grad_b


def mmd2(A: FeatureBatch, B: FeatureBatch, cfg: KernelConfig,
         literal_cross: bool = False) -> float:
    value, _, _ = mmd2_with_grad(A, B, cfg, literal_cross=literal_cross)
    return value


def class_mask(y1: int, y2: int, c1: int, c2: int) -> int:
    """Pair indicator: 1 iff the labels equal the requested class pair."""
    return 1 if (y1 == c1 and y2 == c2) else 0


class EmptyClassPairError(DataError):
    """A requested (c1, c2) pair has no samples on one side; skip the pair."""


def _class_indices(batch: FeatureBatch, c: int) -> np.ndarray:
    if batch.labels is None:
        raise DataError("class-aware losses need labels on the batch")
    return np.flatnonzero(batch.labels == c)


def class_domain_discrepancy_with_grad(S: FeatureBatch, T: FeatureBatch,
                                       c1: int, c2: int, cfg: KernelConfig):
    """Class-conditional discrepancy D_{c1 c2}(S, T) and gradients.

    The indicator-masked normalized kernel sums reduce exactly to mmd2 on
    the class-filtered subsets, which is how the value is computed; the
    gradients are scattered back to full-batch shape.
    """
    si = _class_indices(S, c1)
    ti = _class_indices(T, c2)
    if si.size == 0 or ti.size == 0:
        raise EmptyClassPairError(
            f"no samples for class pair ({c1}, {c2}); skip this pair"
        )
    value, gs_sub, gt_sub = mmd2_with_grad(S.take(si), T.take(ti), cfg)
    grad_s = np.zeros_like(S.features)
    grad_t = np.zeros_like(T.features)
    grad_s[si] = gs_sub
    grad_t[ti] = gt_sub
    return value, grad_s, grad_t


def class_domain_discrepancy(S: FeatureBatch, T: FeatureBatch,
                             c1: int, c2: int, cfg: KernelConfig) -> float:
    value, _, _ = class_domain_discrepancy_with_grad(S, T, c1, c2, cfg)
    return value


def cdd_with_grad(S: FeatureBatch, T: FeatureBatch, class_count: int,
                  cfg: KernelConfig):
    """Contrastive discrepancy: mean intra-class minus mean inter-class.

    value = mean_c D_cc - mean_{c != c'} D_cc' where class pairs missing on
    either side are skipped and each mean runs over the pairs actually
    present. Raises when no intra-class pair is computable at all.
    """
    if class_count < 1:
        raise ConfigError("class_count must be >= 1")
    kern = resolve_kernel(cfg, np.concatenate([S.features, T.features], axis=0))
    intra_vals: list[float] = []
    inter_vals: list[float] = []
    intra_grads: list[tuple[np.ndarray, np.ndarray]] = []
    inter_grads: list[tuple[np.ndarray, np.ndarray]] = []
    for c1 in range(class_count):
        for c2 in range(class_count):
            try:
                v, gs, gt = class_domain_discrepancy_with_grad(S, T, c1, c2, kern)
            except EmptyClassPairError:
                continue
            if c1 == c2:
                intra_vals.append(v)
                intra_grads.append((gs, gt))
            else:
                inter_vals.append(v)
                inter_grads.append((gs, gt))
    if not intra_vals:
        raise DataError("cdd: no class present in both batches")
    grad_s = np.zeros_like(S.features)
    grad_t = np.zeros_like(T.features)
    value = 0.0
    for v, (gs, gt) in zip(intra_vals, intra_grads):
        value += v / len(intra_vals)
        grad_s += gs / len(intra_vals)
        grad_t += gt / len(intra_vals)
    for v, (gs, gt) in zip(inter_vals, inter_grads):
        value -= v / len(inter_vals)
        grad_s -= gs / len(inter_vals)
        grad_t -= gt / len(inter_vals)
    return value, grad_s, grad_t


def cdd(S: FeatureBatch, T: FeatureBatch, class_count: int,
        cfg: KernelConfig) -> float:
    value, _, _ = cdd_with_grad(S, T, class_count, cfg)
    return value


@dataclass
class CabaDiagnostics:
    """How many group/block-pair combinations the caba mean ran over."""

    group_count: int = 0
    pair_count: int = 0
    degenerate: bool = True
    pairs: list[tuple] = field(default_factory=list)


def caba_with_grad(batch: FeatureBatch, cfg: KernelConfig,
                   pairing: str = "block"):
    """Within-group block-conditional discrepancy and gradients.

    Groups samples by (subject, session, class) and averages mmd2 over all
    unordered pairs of distinct blocks inside each group. With
    pairing="session" (corpora that have one block per session) grouping is
    (subject, class) and distinct sessions are paired instead. Returns
    (value, grad, diagnostics); a batch with no valid pair yields value 0
    and diagnostics.degenerate = True.
    """
    if pairing not in ("block", "session"):
        raise ConfigError(f"caba pairing must be 'block' or 'session', got {pairing!r}")
    if batch.labels is None or batch.keys is None:
        raise DataError("caba needs labels and keys on the batch")
    if len(batch) == 0:
        raise DataError("caba requires a non-empty batch")
    kern = resolve_kernel(cfg, batch.features)
    keys = batch.keys
    if pairing == "block":
        group_cols = np.stack([keys[:, 0], keys[:, 1], batch.labels], axis=1)
        unit_col = keys[:, 2]
    else:
        group_cols = np.stack([keys[:, 0], batch.labels], axis=1)
        unit_col = keys[:, 1]

    groups: dict[tuple, dict[int, list[int]]] = {}
    for i in range(len(batch)):
        g = tuple(int(x) for x in group_cols[i])
        groups.setdefault(g, {}).setdefault(int(unit_col[i]), []).append(i)

    grad = np.zeros_like(batch.features)
    total = 0.0
    terms: list[tuple[tuple, int, int, np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = []
    diag = CabaDiagnostics(group_count=len(groups))
    for g in sorted(groups):
        units = groups[g]
        for u1, u2 in combinations(sorted(units), 2):
            i1 = np.asarray(units[u1], dtype=np.int64)
            i2 = np.asarray(units[u2], dtype=np.int64)
            v, g1, g2 = mmd2_with_grad(batch.take(i1), batch.take(i2), kern)
            total += v
            terms.append((g, u1, u2, i1, i2, g1, g2))
            diag.pairs.append(g + (u1, u2))
    diag.pair_count = len(terms)
    if not terms:
        return 0.0, grad, diag
    diag.degenerate = False
    value = total / len(terms)
    for _, _, _, i1, i2, g1, g2 in terms:
        grad[i1] += g1 / len(terms)
        grad[i2] += g2 / len(terms)
    return value, grad, diag


def caba(batch: FeatureBatch, cfg: KernelConfig, pairing: str = "block") -> float:
    value, _, _ = caba_with_grad(batch, cfg, pairing=pairing)
    return value


def wasserstein1_diag(A: FeatureBatch, B: FeatureBatch) -> float:
    """Per-dimension sorted-coupling 1-Wasserstein distance, dimension mean.

    Both empirical distributions are read at the quantile grid of the
    smaller batch (i/(n-1) for n >= 2, the median for n = 1), so equal-size
    batches reduce to the mean absolute difference of sorted values.
    Diagnostic only; no gradient.
    """
    fa, fb = A.features, B.features
    if fa.shape[0] == 0 or fb.shape[0] == 0:
        raise DataError("wasserstein1_diag requires non-empty batches")
    if fa.shape[1] != fb.shape[1]:
        raise DataError("feature dimension mismatch")
    n = min(fa.shape[0], fb.shape[0])
    q = np.array([0.5]) if n == 1 else np.arange(n, dtype=np.float64) / (n - 1)
    qa = np.quantile(fa, q, axis=0)
    qb = np.quantile(fb, q, axis=0)
    return float(np.mean(np.abs(qa - qb)))
