"""Image-quality metrics, a deterministic perceptual proxy, and paired tests.

SSIM uses the standard 11x11 Gaussian window (sigma 1.5) with K1=0.01,
K2=0.03 on a data range of 1.0. PSNR is 10*log10(1/MSE), capped at 100 dB
for exact matches. The perceptual score is NOT the pretrained patch metric:
it is a fixed seed-determined multi-scale random convolutional featurizer
(reported as ``lpips_proxy``), chosen so scores are reproducible without
external weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.ndimage import correlate
from scipy.special import betainc

from .errors import DegenerateStatisticsError

METRIC_NAMES = ("ssim", "psnr", "nmse", "lpips_proxy")
HIGHER_IS_BETTER = {"ssim": True, "psnr": True, "nmse": False, "lpips_proxy": False}

PSNR_CAP_DB = 100.0

_SSIM_WIN = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def _as_image(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2D image, got shape {a.shape}")
    return a


def _check_pair(a, b):
    a, b = _as_image(a), _as_image(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


@lru_cache(maxsize=1)
def _ssim_window() -> np.ndarray:
    r = _SSIM_WIN // 2
    g = np.exp(-(np.arange(-r, r + 1) ** 2) / (2.0 * _SSIM_SIGMA**2))
    w = np.outer(g, g)
    return w / w.sum()


def _valid_filter(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    r = w.shape[0] // 2
    return correlate(a, w, mode="constant")[r:-r, r:-r]


def ssim(a, b) -> float:
    """Mean local structural similarity over valid window positions."""
    a, b = _check_pair(a, b)
    if min(a.shape) < _SSIM_WIN:
        raise ValueError(f"image smaller than the {_SSIM_WIN}x{_SSIM_WIN} window")
    w = _ssim_window()
    c1 = _SSIM_K1**2
    c2 = _SSIM_K2**2
    mu_a = _valid_filter(a, w)
    mu_b = _valid_filter(b, w)
    var_a = _valid_filter(a * a, w) - mu_a**2
    var_b = _valid_filter(b * b, w) - mu_b**2
    cov = _valid_filter(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for a unit data range."""
    a, b = _check_pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB))


def nmse(a, ref) -> float:
    """Squared-error energy relative to the reference energy."""
    a, ref = _check_pair(a, ref)
    ref_energy = np.sum(ref**2)
    if ref_energy == 0.0:
        raise ValueError("reference image is all-zero; NMSE undefined")
    return float(np.sum((a - ref) ** 2) / ref_energy)


@lru_cache(maxsize=8)
def _featurizer_filters(seed: int) -> tuple[np.ndarray, ...]:
    rng = np.random.default_rng(seed)
    banks = []
    for _ in range(3):  # one filter bank per scale
        w = rng.standard_normal((8, 3, 3))
        w /= np.sqrt((w**2).sum(axis=(1, 2), keepdims=True))
        banks.append(w)
    return tuple(banks)


def _avg_pool(a: np.ndarray, k: int) -> np.ndarray:
    h, w = (a.shape[0] // k) * k, (a.shape[1] // k) * k
    return a[:h, :w].reshape(h // k, k, w // k, k).mean(axis=(1, 3))


def _features(a: np.ndarray, seed: int) -> list[np.ndarray]:
    # layer 0 is the raw image, so the distance is zero iff inputs are equal
    layers = [a]
    for s, bank in enumerate(_featurizer_filters(seed)):
        x = _avg_pool(a, 2**s) if s else a
        if min(x.shape) < 3:
            break
        maps = [correlate(x, w, mode="constant")[1:-1, 1:-1] for w in bank]
        layers.append(np.tanh(np.stack(maps)))
    return layers


def perceptual_distance(a, b, featurizer_seed: int = 0) -> float:
    """Energy-normalised multi-scale feature distance; 0 iff inputs identical."""
    a, b = _check_pair(a, b)
    fa = _features(a, featurizer_seed)
    fb = _features(b, featurizer_seed)
    dists = []
    for la, lb in zip(fa, fb):
        num = np.sum((la - lb) ** 2)
        den = np.sum(la**2) + np.sum(lb**2) + 1e-12
        dists.append(num / den)
    return float(np.mean(dists))


def paired_ttest(xs, ys) -> tuple[float, float]:
    """Two-tailed paired t-test on per-item differences.

    Returns (t, p) with p from the t distribution on n-1 degrees of freedom
    via the regularized incomplete beta function.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("xs and ys must be 1D vectors of equal length")
    n = len(xs)
    if n < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    d = xs - ys
    sd = d.std(ddof=1)
    if sd == 0.0:
        raise DegenerateStatisticsError(
            "zero-variance differences: t statistic undefined, no p-value emitted"
        )
    t = float(d.mean() / (sd / np.sqrt(n)))
    df = n - 1
    p = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    return t, p


@dataclass(frozen=True)
class SliceMetrics:
    subject: str
    orientation: str
    slice_index: int
    values: dict[str, float]


@dataclass(frozen=True)
class PairedTestResult:
    method_a: str
    method_b: str
    metric: str
    t_statistic: float | None
    p_value: float | None
    degenerate: bool = False


@dataclass
class EvalReport:
    per_slice: dict[str, list[SliceMetrics]]  # method -> rows
    aggregates: dict[str, dict[str, tuple[float, float]]]  # method -> metric -> (mean, std)
    tests: list[PairedTestResult] = field(default_factory=list)


def score_pair(pred: np.ndarray, ref: np.ndarray, featurizer_seed: int = 0) -> dict[str, float]:
    return {
        "ssim": ssim(pred, ref),
        "psnr": psnr(pred, ref),
        "nmse": nmse(pred, ref),
        "lpips_proxy": perceptual_distance(pred, ref, featurizer_seed),
    }


def aggregate(rows: list[SliceMetrics]) -> dict[str, tuple[float, float]]:
    """Mean and sample standard deviation per metric (exactly recomputable)."""
    out = {}
    for m in METRIC_NAMES:
        vals = np.array([r.values[m] for r in rows], dtype=np.float64)
        std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out[m] = (float(vals.mean()), std)
    return out


def build_report(per_method_rows: dict[str, list[SliceMetrics]]) -> EvalReport:
    """Assemble aggregates and pairwise per-slice significance tests."""
    aggregates = {m: aggregate(rows) for m, rows in per_method_rows.items()}
    tests: list[PairedTestResult] = []
    methods = list(per_method_rows)
    for i in range(len(methods)):
        for j in range(i + 1, len(methods)):
            a, b = methods[i], methods[j]
            rows_a = {(r.subject, r.orientation, r.slice_index): r for r in per_method_rows[a]}
            rows_b = {(r.subject, r.orientation, r.slice_index): r for r in per_method_rows[b]}
            shared = sorted(set(rows_a) & set(rows_b))
            if len(shared) < 2:
                continue
            for metric in METRIC_NAMES:
                xs = [rows_a[k].values[metric] for k in shared]
                ys = [rows_b[k].values[metric] for k in shared]
                try:
                    t, p = paired_ttest(xs, ys)
                    tests.append(PairedTestResult(a, b, metric, t, p))
                except DegenerateStatisticsError:
                    tests.append(PairedTestResult(a, b, metric, None, None, degenerate=True))
    return EvalReport(per_slice=per_method_rows, aggregates=aggregates, tests=tests)
