"""用有限个切线逼近目标势函数，得到夹在 mu 与 nu 之间的原子测度"""
import logging
from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.optimize import brentq

from app.core.errors import OrderViolation
from app.services.measures import AtomicMeasure, as_atomic, convex_order_check

logger = logging.getLogger(__name__)

Line = Tuple[float, float]


class AtomicApproximation(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    measure: AtomicMeasure
    window: Tuple[float, float]
    lines: List[Line]


def lower_envelope(lines: List[Line]) -> List[Line]:
    """直线族的逐点最小值，返回按斜率递减排列的有效直线"""
    ordered = sorted(lines, key=lambda l: (-l[0], l[1]))
    dedup: List[Line] = []
    for line in ordered:
        if dedup and abs(dedup[-1][0] - line[0]) <= 1e-15:
            continue
        dedup.append(line)

    hull: List[Line] = []
    for line in dedup:
        while len(hull) >= 2 and _crossing(hull[-2], line) <= _crossing(hull[-2], hull[-1]):
            hull.pop()
        hull.append(line)
    return hull


def _crossing(l1: Line, l2: Line) -> float:
    return (l2[1] - l1[1]) / (l1[0] - l2[0])


def _pin_line(nu, px: float, py: float, side: str) -> Line:
    """过 (px, py) 且与 u_nu 相切的直线；right 侧切点在 px 左边，left 侧切点在 px 右边"""
    found = nu.atoms()
    if found is not None:
        locs = found[0]
        u_locs = nu.potential(locs)
        on_graph = py - float(nu.potential(px)) <= 1e-14
        if side == "right":
            mask = locs < px
            candidates = [1.0]
            candidates += list((py - u_locs[mask]) / (px - locs[mask]))
            if on_graph:
                candidates.append(1.0 - 2.0 * nu.mass_below(px))
            slope = min(candidates)
        else:
            mask = locs > px
            candidates = [-1.0]
            candidates += list((u_locs[mask] - py) / (locs[mask] - px))
            if on_graph:
                candidates.append(float(nu.potential_slope(px)))
            slope = max(candidates)
        return slope, py - slope * px

    def gap(z: float) -> float:
        return float(nu.potential(z) + nu.potential_slope(z) * (px - z) - py)

    if gap(px) >= 0.0:
        z = px
    else:
        step = max(1.0, float(np.sqrt(nu.variance())))
        direction = -1.0 if side == "right" else 1.0
        far = px + direction * step
        while gap(far) <= 0.0:
            step *= 2.0
            far = px + direction * step
            if step > 1e8:
                raise OrderViolation(f"无法在 {px} 处构造切线")
        z = brentq(gap, min(far, px), max(far, px), xtol=1e-13)
    slope = float(nu.potential_slope(z))
    return slope, float(nu.potential(z)) - slope * z


def _tangent_lines(nu, k: int) -> List[Line]:
    found = nu.atoms()
    if found is not None:
        return as_atomic(nu).pieces()
    qs = nu.quantile(np.arange(1, k + 1) / (k + 1.0))
    slopes = nu.potential_slope(qs)
    values = nu.potential(qs)
    return [(float(s), float(v - s * q)) for s, v, q in zip(slopes, values, qs)]


def atomic_approximation(mu, nu, N: float, k: int) -> AtomicApproximation:
    """在窗口 [m-N, m+N] 内用 k 条切线构造 nu_N，窗口外与 mu 一致"""
    if N <= 0:
        raise ValueError(f"窗口半宽必须为正: N={N}")
    if k < 2:
        raise ValueError(f"切线数至少为 2: k={k}")
    mu_atomic = as_atomic(mu)

    m = mu.mean()
    lo, hi = m - N, m + N
    check_grid = np.linspace(lo - 1.0, hi + 1.0, 401)
    order = convex_order_check(mu, nu, check_grid)
    if not order.ordered:
        raise OrderViolation(f"mu 与 nu 不满足凸序，反例点 x={order.witness:.6g}", order.witness)

    left_pin = _pin_line(nu, lo, float(mu.potential(lo)), side="left")
    right_pin = _pin_line(nu, hi, float(mu.potential(hi)), side="right")

    # 切点落在两条钉线切点之间的切线才保留，保证窗口外与 mu 一致
    s_max, s_min = left_pin[0], right_pin[0]
    tangents = [l for l in _tangent_lines(nu, k) if s_min - 1e-12 <= l[0] <= s_max + 1e-12]
    lines = [left_pin] + tangents + [right_pin]

    hull = lower_envelope(mu_atomic.pieces() + lines)
    kinks = np.array([_crossing(hull[i], hull[i + 1]) for i in range(len(hull) - 1)])
    masses = np.array([0.5 * (hull[i][0] - hull[i + 1][0]) for i in range(len(hull) - 1)])
    measure = AtomicMeasure.from_arrays(kinks, masses, min_mass=1e-15)

    logger.debug(f"nu_N 构造完成: {len(tangents)} 条切线, {len(measure.atoms_)} 个原子")
    return AtomicApproximation(measure=measure, window=(lo, hi), lines=lines)
