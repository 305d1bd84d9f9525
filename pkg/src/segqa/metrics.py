"""Correlation metrics and the four-parameter logistic mapping.

SROCC uses average ranks for ties; KROCC is tau-a (ties count as neither
concordant nor discordant, denominator n(n-1)/2). PLCC and RMSE in a
:class:`MetricBundle` are computed on 4PL-mapped predictions.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)

TIE_POLICY = {"srocc": "average ranks, Pearson on ranks", "krocc": "tau-a, ties excluded from P and Q"}


class MetricError(ValueError):
    pass


def _pair(x, y, min_n: int = 2) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise MetricError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < min_n:
        raise MetricError(f"need at least {min_n} samples, got {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise MetricError("inputs contain non-finite values")
    return x, y


def plcc(x, y) -> float:
    x, y = _pair(x, y)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = np.dot(dx, dx)
    syy = np.dot(dy, dy)
    if sxx == 0.0 or syy == 0.0:
        raise MetricError("zero variance")
    r = np.dot(dx, dy) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))


def srocc(x, y) -> float:
    """Spearman correlation with average-rank ties.

    Returns 0.0 when either input is constant (no ordering information).
    """
    x, y = _pair(x, y)
    rx = rankdata(x, method="average")
    ry = rankdata(y, method="average")
    if np.ptp(rx) == 0 or np.ptp(ry) == 0:
        return 0.0
    return plcc(rx, ry)


def srocc_closed_form(x, y) -> float:
    """1 - 6 sum d^2 / (n(n^2-1)); only valid for tie-free data."""
    x, y = _pair(x, y)
    n = x.size
    d = rankdata(x) - rankdata(y)
    return float(1.0 - 6.0 * np.dot(d, d) / (n * (n * n - 1.0)))


def krocc(x, y) -> float:
    x, y = _pair(x, y)
    n = x.size
    i, j = np.triu_indices(n, k=1)
    s = np.sign(x[i] - x[j]) * np.sign(y[i] - y[j])
    concordant = int(np.count_nonzero(s > 0))
    discordant = int(np.count_nonzero(s < 0))
    return 2.0 * (concordant - discordant) / (n * (n - 1))


def rmse(x, y) -> float:
    x, y = _pair(x, y, min_n=1)
    d = x - y
    return float(np.sqrt(np.dot(d, d) / d.size))


# -- 4PL mapping -------------------------------------------------------------

@dataclass(frozen=True)
class FourPLParams:
    """y = b2 + (b1 - b2) / (1 + exp(-(x - b3) / |b4|))"""

    beta1: float
    beta2: float
    beta3: float
    beta4: float
    converged: bool = True
    iterations: int = 0
    sse: float = float("nan")

    @property
    def betas(self) -> Tuple[float, float, float, float]:
        return (self.beta1, self.beta2, self.beta3, self.beta4)

    def __call__(self, x) -> np.ndarray:
        return logistic4(np.asarray(x, dtype=np.float64), np.array(self.betas))


def logistic4(x: np.ndarray, beta: np.ndarray) -> np.ndarray:
    b1, b2, b3, b4 = beta
    z = -(x - b3) / abs(b4)
    # 1/(1+exp(z)) without overflow
    s = np.exp(-np.logaddexp(0.0, z))
    return b2 + (b1 - b2) * s


def _logistic4_jacobian(x: np.ndarray, beta: np.ndarray) -> np.ndarray:
    b1, b2, b3, b4 = beta
    a = abs(b4)
    t = (x - b3) / a
    s = np.exp(-np.logaddexp(0.0, -t))  # sigmoid(t)
    ds = s * (1.0 - s)
    amp = b1 - b2
    J = np.empty((x.size, 4))
    J[:, 0] = s
    J[:, 1] = 1.0 - s
    J[:, 2] = -amp * ds / a
    J[:, 3] = -amp * ds * t / a * np.sign(b4 if b4 != 0 else 1.0)
    return J


def _lm(x, y, beta0, max_iter: int, rtol: float):
    beta = np.array(beta0, dtype=np.float64)
    r = y - logistic4(x, beta)
    sse = float(r @ r)
    lam = 1e-3
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        J = _logistic4_jacobian(x, beta)
        JtJ = J.T @ J
        g = J.T @ r
        diag = np.diag(JtJ).copy()
        diag[diag <= 0] = 1e-12
        accepted = False
        while lam < 1e16:
            A = JtJ + lam * np.diag(diag)
            try:
                step = np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            cand = beta + step
            if cand[3] == 0.0:
                cand[3] = 1e-12
            r_new = y - logistic4(x, cand)
            sse_new = float(r_new @ r_new)
            if np.isfinite(sse_new) and sse_new <= sse:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            # no descent direction left at any damping: stationary point
            converged = True
            break
        rel = (sse - sse_new) / sse if sse > 0 else 0.0
        beta, r, sse = cand, r_new, sse_new
        lam = max(lam / 10.0, 1e-15)
        if rel < rtol or sse <= 1e-30:
            converged = True
            break
    return beta, sse, converged, it


def fit_4pl(pred, label, max_iter: int = 500, rtol: float = 1e-10) -> FourPLParams:
    """Least-squares 4PL fit of labels on predictions (Levenberg-Marquardt).

    Starts from b1=max(label), b2=min(label), b3=mean(pred), b4=std(pred) and
    also from the mirrored start (b1, b2 swapped) so decreasing relations are
    reachable; the lower-SSE solution wins.
    """
    x, y = _pair(pred, label, min_n=5)
    if np.ptp(y) == 0:
        raise MetricError("labels are constant")
    std = float(np.std(x))
    if std == 0.0:
        raise MetricError("predictions are constant")
    starts = [
        (y.max(), y.min(), x.mean(), std),
        (y.min(), y.max(), x.mean(), std),
    ]
    best = None
    for b0 in starts:
        beta, sse, conv, it = _lm(x, y, b0, max_iter, rtol)
        if best is None or sse < best[1]:
            best = (beta, sse, conv, it)
    beta, sse, conv, it = best
    if not conv:
        log.info("4PL fit did not converge in %d iterations (sse=%.3g)", max_iter, sse)
    return FourPLParams(float(beta[0]), float(beta[1]), float(beta[2]), float(abs(beta[3])),
                        converged=bool(conv), iterations=int(it), sse=float(sse))


# -- bundle / report -----------------------------------------------------------

@dataclass
class MetricBundle:
    plcc: float
    srocc: float
    krocc: float
    rmse: float
    n: int
    fitted: Optional[FourPLParams] = None
    warnings: List[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "n": self.n, "plcc": self.plcc, "srocc": self.srocc,
            "krocc": self.krocc, "rmse": self.rmse,
            "fitted_betas": list(self.fitted.betas) if self.fitted else None,
            "warnings": list(self.warnings),
        }


def metric_bundle(pred, label) -> MetricBundle:
    """SROCC/KROCC on raw predictions, PLCC/RMSE after 4PL mapping."""
    x, y = _pair(pred, label, min_n=5)
    warnings: List[str] = []
    s = srocc(x, y)
    k = krocc(x, y)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        warnings.append("constant predictions or labels: correlations set to 0, "
                        "mapping is the label mean")
        mapped = np.full_like(y, y.mean())
        return MetricBundle(0.0, s, k, rmse(mapped, y), int(x.size), None, warnings)
    fitted = fit_4pl(x, y)
    if not fitted.converged:
        warnings.append(f"4PL fit not converged after {fitted.iterations} iterations")
    mapped = fitted(x)
    try:
        p = plcc(mapped, y)
    except MetricError:
        warnings.append("4PL mapping collapsed to a constant; PLCC set to 0")
        p = 0.0
    return MetricBundle(p, s, k, rmse(mapped, y), int(x.size), fitted, warnings)


def metric_report(bundle: MetricBundle, method_id: str, split: str) -> dict:
    d = {"method_id": method_id, "split": split}
    d.update(bundle.as_dict())
    d["tie_handling"] = dict(TIE_POLICY)
    return d


def write_metric_report(bundle: MetricBundle, method_id: str, split: str, path) -> dict:
    d = metric_report(bundle, method_id, split)
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return d


def write_scatter_csv(path, patch_ids: Sequence[str], predicted, label) -> None:
    lines = ["patch_id,predicted,label"]
    for pid, p, l in zip(patch_ids, predicted, label):
        lines.append(f"{pid},{float(p)!r},{float(l)!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
