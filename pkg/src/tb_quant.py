"""
Tissue burden quantification.

A univariate Gaussian mixture is fitted to the HU values of the lung mask
with EM; every lung voxel goes to the component with the largest weighted
density. Components are ordered by mean, so with K=3 the classes read
healthy < soft < hard.

    diseased = soft + hard
    relative = diseased / healthy
    change   = log2(relative at week / relative at baseline)
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import stats
from scipy.special import logsumexp
from sklearn.cluster import KMeans

from src.errors import (
    ComponentCollapse,
    DegeneratePartition,
    EmptyRegion,
    InvalidVolume,
    LengthMismatch,
    MissingBaseline,
)
from src.io_formats import write_report
from src.volume import BinaryMask, LabelMap, Volume3D, check_geometry

logger = logging.getLogger(__name__)

CLASS_NAMES = ("healthy", "soft", "hard")
WATERFALL_COLUMNS = ["subject", "week", "relative_diseased", "log2_change", "treatment"]


class GmmParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_components: int = Field(3, ge=1)
    init: Literal["quantile", "kmeans"] = "kmeans"
    tol: float = Field(1e-6, gt=0)
    max_iters: int = Field(500, ge=1)
    variance_floor: float = Field(1.0, gt=0)
    max_restarts: int = Field(3, ge=0)
    max_samples: Optional[int] = Field(200_000, ge=10)
    seed: int = 0


@dataclass
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihood: float
    n_iter: int = 0
    converged: bool = False
    ll_trace: List[float] = field(default_factory=list)

    @property
    def K(self) -> int:
        return int(self.means.size)

    def log_joint(self, x: np.ndarray) -> np.ndarray:
        """log(pi_k) + log N(x; mu_k, var_k), shape (n, K)."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 1)
        return np.log(self.weights) + stats.norm.logpdf(x, loc=self.means, scale=np.sqrt(self.variances))

    def predict(self, x: np.ndarray) -> np.ndarray:
        # argmax keeps the first maximum, so ties go to the lower class
        return np.argmax(self.log_joint(x), axis=1)

    def to_dict(self) -> Dict[str, object]:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "log_likelihood": self.log_likelihood,
            "n_iter": self.n_iter,
            "converged": self.converged,
        }


@dataclass
class TissuePartition:
    labels: LabelMap  # 0 outside the lung, k+1 for component k
    volumes_mm3: Dict[str, float]
    class_names: Sequence[str] = CLASS_NAMES

    @property
    def healthy(self) -> float:
        return self.volumes_mm3[self.class_names[0]]


@dataclass
class LongitudinalRecord:
    subject: str
    week: int
    relative_diseased: float
    treatment: str = ""
    log2_change: Optional[float] = None


@dataclass
class QuantResult:
    model: GmmModel
    partition: TissuePartition
    diseased_mm3: float
    relative_diseased: float

    def to_row(self) -> Dict[str, object]:
        row: Dict[str, object] = {f"{k}_mm3": round(v, 3) for k, v in self.partition.volumes_mm3.items()}
        row["diseased_mm3"] = round(self.diseased_mm3, 3)
        row["relative_diseased"] = self.relative_diseased
        for i, (w, m, v) in enumerate(zip(self.model.weights, self.model.means, self.model.variances)):
            row[f"w{i}"], row[f"mu{i}"], row[f"var{i}"] = float(w), float(m), float(v)
        return row


# ------------------------------------ EM ---------------------------------------


def _class_names(K: int) -> Sequence[str]:
    return CLASS_NAMES if K == len(CLASS_NAMES) else tuple(f"class{k}" for k in range(K))


def _initial_params(x: np.ndarray, K: int, init: str, seed: int):
    if init == "quantile":
        means = np.percentile(x, np.linspace(10, 90, K))
        variances = np.full(K, x.var() / K)
        weights = np.full(K, 1.0 / K)
    elif init == "kmeans":
        km = KMeans(n_clusters=K, n_init=10, random_state=seed).fit(x.reshape(-1, 1))
        labels = km.labels_
        means = km.cluster_centers_.ravel()
        counts = np.bincount(labels, minlength=K).astype(np.float64)
        weights = counts / counts.sum()
        variances = np.array([x[labels == k].var() if counts[k] > 1 else x.var() for k in range(K)])
    else:
        raise ValueError(f"unknown init {init!r}")
    return weights, means.astype(np.float64), variances.astype(np.float64)


def _check_ll_step(prev: float, new: float, it: int) -> bool:
    """False (with a warning) when EM lowered the log-likelihood beyond rounding."""
    if new < prev - 1e-9 * abs(prev):
        logger.warning("EM iteration %d: log-likelihood fell %.6g -> %.6g", it, prev, new)
        return False
    return True


def _em(x: np.ndarray, weights, means, variances, tol: float, max_iters: int, floor: float) -> Optional[GmmModel]:
    """Run EM; None when a component collapses."""
    n = x.size
    xc = x.reshape(-1, 1)
    trace: List[float] = []
    ll = -np.inf
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        log_p = np.log(weights) + stats.norm.logpdf(xc, loc=means, scale=np.sqrt(variances))
        norm = logsumexp(log_p, axis=1)
        new_ll = float(norm.sum())
        if trace:
            _check_ll_step(trace[-1], new_ll, it)
        trace.append(new_ll)
        if np.isfinite(ll) and new_ll - ll < tol * abs(ll):
            converged = True
            break
        ll = new_ll

        resp = np.exp(log_p - norm[:, None])
        nk = resp.sum(axis=0)
        if np.any(nk < 1e-8 * n):
            return None
        weights = nk / n
        means = (resp * xc).sum(axis=0) / nk
        variances = (resp * (xc - means) ** 2).sum(axis=0) / nk
        if np.any(variances < floor):
            return None
    ll = trace[-1]
    return GmmModel(weights, means, variances, ll, n_iter=it, converged=converged, ll_trace=trace)


def fit_gmm_em(
    samples: Iterable[float] | np.ndarray,
    K: int = 3,
    init: str = "quantile",
    tol: float = 1e-6,
    max_iters: int = 500,
    seed: int = 0,
    variance_floor: float = 1.0,
    max_restarts: int = 3,
) -> GmmModel:
    """
    EM for a K-component univariate mixture. Convergence is a relative
    log-likelihood gain below ``tol``. A component whose variance drops below
    ``variance_floor`` triggers a restart with jittered means.
    """
    x = np.asarray(list(samples) if not isinstance(samples, np.ndarray) else samples, dtype=np.float64).ravel()
    if x.size < 10 * K:
        raise EmptyRegion(f"{x.size} samples for {K} components (need {10 * K})")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples contain non-finite values")
    total_var = float(x.var())
    if total_var <= 0.0:
        raise ComponentCollapse("samples have zero variance")

    if K == 1:
        mean = float(x.mean())
        ll = float(stats.norm.logpdf(x, loc=mean, scale=math.sqrt(total_var)).sum())
        return GmmModel(np.ones(1), np.array([mean]), np.array([total_var]), ll, n_iter=1, converged=True, ll_trace=[ll])

    rng = np.random.default_rng(seed)
    weights, means, variances = _initial_params(x, K, init, seed)
    variances = np.maximum(variances, variance_floor)
    for attempt in range(max_restarts + 1):
        model = _em(x, weights, means, variances, tol, max_iters, variance_floor)
        if model is not None:
            break
        if attempt == max_restarts:
            raise ComponentCollapse(f"a component collapsed after {max_restarts} restarts")
        logger.warning("EM component collapsed; restart %d with jittered means", attempt + 1)
        means = means + rng.normal(0.0, 0.1 * math.sqrt(total_var), size=K)
        variances = np.full(K, total_var / K)
        weights = np.full(K, 1.0 / K)

    order = np.argsort(model.means, kind="stable")
    model.weights, model.means, model.variances = model.weights[order], model.means[order], model.variances[order]
    if not model.converged:
        logger.warning("EM stopped at max_iters=%d without converging", max_iters)
    logger.info("GMM means %s after %d iterations", np.round(model.means, 1).tolist(), model.n_iter)
    return model


# --------------------------------- partition ------------------------------------


def partition_tissues(vol: Volume3D, lung_mask: BinaryMask, model: GmmModel) -> TissuePartition:
    check_geometry(vol, lung_mask)
    names = _class_names(model.K)
    labels = np.zeros(vol.dims, dtype=np.int32)
    values = vol.data[lung_mask.data]
    cls = model.predict(values) if values.size else np.empty(0, dtype=np.int64)
    labels[lung_mask.data] = cls + 1
    counts = np.bincount(cls, minlength=model.K)
    vv = vol.voxel_volume_mm3
    volumes = {name: float(c) * vv for name, c in zip(names, counts)}
    return TissuePartition(LabelMap(labels, vol.spacing, vol.origin), volumes, names)


def diseased_volume(p: TissuePartition) -> float:
    return float(sum(v for k, v in p.volumes_mm3.items() if k != p.class_names[0]))


def relative_diseased_volume(p: TissuePartition) -> float:
    healthy = p.healthy
    if healthy <= 0:
        raise DegeneratePartition("healthy volume is zero")
    return diseased_volume(p) / healthy


def log2_fold_change(v_week: float, v_baseline: float) -> float:
    if not (v_week > 0 and v_baseline > 0):
        raise InvalidVolume(f"log2 change needs positive volumes, got {v_week} and {v_baseline}")
    return math.log2(v_week / v_baseline)


# --------------------------------- longitudinal ---------------------------------


def waterfall_table(records: Sequence[LongitudinalRecord], baseline_week: int = 0) -> List[Dict[str, object]]:
    """
    One row per (subject, week) over the union of weeks in the cohort. Weeks a
    subject was not scanned keep empty cells, as does ``log2_change`` when the
    week or baseline volume is zero. Input records are left untouched.
    """
    by_subject: Dict[str, Dict[int, LongitudinalRecord]] = {}
    for r in records:
        by_subject.setdefault(r.subject, {})[r.week] = r
    weeks = sorted({r.week for r in records})

    rows: List[Dict[str, object]] = []
    for subject in sorted(by_subject):
        visits = by_subject[subject]
        if baseline_week not in visits:
            raise MissingBaseline(f"subject {subject!r} has no week {baseline_week} scan")
        base = visits[baseline_week]
        treatment = base.treatment
        for week in weeks:
            rec = visits.get(week)
            if rec is None:
                rows.append(dict(subject=subject, week=week, relative_diseased="", log2_change="", treatment=treatment))
                continue
            change: object = 0.0
            if week != baseline_week:
                try:
                    change = log2_fold_change(rec.relative_diseased, base.relative_diseased)
                except InvalidVolume:
                    logger.info("subject %s week %d: no log2 change for volume %s", subject, week, rec.relative_diseased)
                    change = ""
            rows.append(
                dict(
                    subject=subject,
                    week=week,
                    relative_diseased=rec.relative_diseased,
                    log2_change=change,
                    treatment=rec.treatment or treatment,
                )
            )
    return rows


def write_waterfall_csv(rows: Sequence[Dict[str, object]], path: str | Path) -> Path:
    return write_report(rows, WATERFALL_COLUMNS, path)


def volume_agreement(manual: Sequence[float], automatic: Sequence[float]) -> Dict[str, float]:
    """Regress automatic on manual volumes."""
    if len(manual) != len(automatic):
        raise LengthMismatch(f"{len(manual)} manual vs {len(automatic)} automatic volumes")
    if len(manual) < 3:
        raise ValueError("volume agreement needs at least 3 pairs")
    res = stats.linregress(np.asarray(manual, float), np.asarray(automatic, float))
    return {
        "slope": float(res.slope),
        "intercept": float(res.intercept),
        "r2": float(res.rvalue ** 2),
        "p_value": float(res.pvalue),
        "n": len(manual),
    }


# ----------------------------------- one call -----------------------------------


def quantify_lung(vol: Volume3D, mask: BinaryMask, params: GmmParams | None = None) -> QuantResult:
    p = params or GmmParams()
    check_geometry(vol, mask)
    values = vol.data[mask.data].astype(np.float64)
    if p.max_samples is not None and values.size > p.max_samples:
        rng = np.random.default_rng(p.seed)
        values = rng.choice(values, size=p.max_samples, replace=False)
    model = fit_gmm_em(
        values,
        K=p.n_components,
        init=p.init,
        tol=p.tol,
        max_iters=p.max_iters,
        seed=p.seed,
        variance_floor=p.variance_floor,
        max_restarts=p.max_restarts,
    )
    part = partition_tissues(vol, mask, model)
    diseased = diseased_volume(part)
    relative = relative_diseased_volume(part)
    logger.info("tissue volumes %s mm3, relative diseased %.4f", {k: round(v) for k, v in part.volumes_mm3.items()}, relative)
    return QuantResult(model, part, diseased, relative)
