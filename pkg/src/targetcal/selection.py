"""Data-driven choice of the number of radial distortion terms.

Terms are added one at a time to a self-calibrating adjustment.  A new term is
kept only if it is statistically significant and the Bayesian information
criterion of the fit improves; decentering is tried last under the same rule.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .bundle import CalibrationSolution, NetworkState, ObservationSet, bundle_adjust_free
from .errors import AdjustmentError, InputError

log = logging.getLogger(__name__)

MIN_T = 2.0
RSS_FLOOR = 1e-18  # px^2 per residual; keeps exact data from chasing round-off


@dataclass
class SelectionStep:
    n_radial: int
    decentering: bool
    added: str
    value: float
    std: float
    t: float
    bic: float
    rms: float
    trend: float
    accepted: bool


@dataclass
class TermSelection:
    n_radial: int
    decentering: bool
    solution: CalibrationSolution
    trace: list[SelectionStep] = field(default_factory=list)


def bic(solution: CalibrationSolution) -> float:
    m = solution.observations.weight > 0
    v = solution.residuals[m]
    w = solution.observations.weight[m]
    w = w / np.mean(w)  # uniform weights leave the criterion in pixel units
    n = v.size
    rss = float(np.sum(w[:, None] * v * v))
    u = n - solution.redundancy
    return n * math.log(max(rss / n, RSS_FLOOR)) + u * math.log(n)


def radial_trend(solution: CalibrationSolution) -> float:
    """Mean ``|v_r|`` over the outer third of the radial range divided by the inner third."""
    r, vr = solution.radial_profile()
    if len(r) < 3 or r[-1] <= 0:
        return float("nan")
    rmax = r[-1]
    inner = np.abs(vr[r <= rmax / 3])
    outer = np.abs(vr[r >= 2 * rmax / 3])
    if not len(inner) or not len(outer):
        return float("nan")
    return float(np.mean(outer) / max(np.mean(inner), 1e-300))


def _extend(solution: CalibrationSolution, n_radial: int, decentering: bool) -> NetworkState:
    st = solution.state
    return NetworkState(st.interior.with_terms(n_radial, decentering), st.exteriors, st.points)


def select_distortion_terms(observations: ObservationSet, base: CalibrationSolution, *,
                            max_terms: int = 5, try_decentering: bool = True,
                            min_t: float = MIN_T) -> TermSelection:
    """Grow the radial model from ``base`` until a new term is insignificant or BIC worsens."""
    if not base.converged:
        raise AdjustmentError("base adjustment did not converge")
    if base.interior.n_radial != 0 or base.interior.decentering is not None:
        raise InputError("base adjustment must have no distortion terms")
    current = base
    cur_bic = bic(base)
    trace = [SelectionStep(0, False, "", 0.0, 0.0, math.inf, cur_bic, base.rmse, radial_trend(base), True)]
    n = 0
    while n < max_terms:
        try:
            cand = bundle_adjust_free(observations, _extend(current, n + 1, False))
        except AdjustmentError as exc:
            log.info("adding k%d failed: %s", n + 1, exc)
            break
        name = f"k{n + 1}"
        value = cand.interior.radial[n]
        std = cand.interior_std[name]
        t = abs(value) / std if std > 0 else math.inf
        b = bic(cand)
        ok = cand.converged and t >= min_t and b < cur_bic
        trace.append(SelectionStep(n + 1, False, name, value, std, t, b, cand.rmse, radial_trend(cand), ok))
        log.info("%s = %.6g +- %.3g (t %.2f), BIC %.2f -> %s", name, value, std, t, b,
                 "accepted" if ok else "rejected")
        if not ok:
            break
        current, cur_bic, n = cand, b, n + 1
    dec = False
    if try_decentering:
        try:
            cand = bundle_adjust_free(observations, _extend(current, n, True))
        except AdjustmentError as exc:
            log.info("adding decentering failed: %s", exc)
            cand = None
        if cand is not None:
            p = cand.interior.decentering
            ts = [abs(p[i]) / cand.interior_std[nm] if cand.interior_std[nm] > 0 else math.inf
                  for i, nm in enumerate(("p1", "p2"))]
            t = max(ts)
            b = bic(cand)
            ok = cand.converged and t >= min_t and b < cur_bic
            trace.append(SelectionStep(n, True, "p1,p2", float(np.hypot(*p)), 0.0, t, b, cand.rmse,
                                       radial_trend(cand), ok))
            if ok:
                current, cur_bic, dec = cand, b, True
    return TermSelection(n, dec, current, trace)
