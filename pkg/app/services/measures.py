"""一维概率测度、势函数、凸序检验与 Breeden-Litzenberger 反演"""
import json
import logging
from functools import cached_property
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, field_validator, model_validator
from scipy import integrate
from scipy.stats import norm
from typing_extensions import Annotated

from app.core.errors import ArbitrageDetected, MeanMismatch, NonFiniteMoment

logger = logging.getLogger(__name__)

MASS_TOL = 1e-12
MEAN_TOL = 1e-9
ORDER_TOL = 1e-12
QUAD_TOL = 1e-10

ArrayLike = Union[float, Sequence[float], np.ndarray]


class _Measure(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    # 子类实现的基本量
    def mean(self) -> float:
        raise NotImplementedError

    def second_moment(self) -> float:
        raise NotImplementedError

    def cdf(self, x: ArrayLike) -> np.ndarray:
        raise NotImplementedError

    def quantile(self, q: ArrayLike) -> np.ndarray:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def support(self) -> Tuple[float, float]:
        return -np.inf, np.inf

    def pdf(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} 没有密度")

    def atoms(self) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        """原子测度返回 (位置, 质量)，连续测度返回 None"""
        return None

    def _potential_closed(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def variance(self) -> float:
        m = self.mean()
        return max(self.second_moment() - m * m, 0.0)

    def potential(self, x: ArrayLike, method: str = "closed") -> Union[float, np.ndarray]:
        """u(x) = -∫|x-y| mu(dy)，标量输入返回 float"""
        if not np.isfinite(self.mean()):
            raise NonFiniteMoment(f"{type(self).__name__} 的一阶矩不是有限值")
        arr = np.asarray(x, dtype=float)
        if method == "quadrature" and self.atoms() is None:
            values = np.vectorize(self._potential_quadrature, otypes=[float])(arr)
        elif method in ("closed", "quadrature"):
            values = self._potential_closed(arr)
        else:
            raise ValueError(f"未知的势函数计算方式: {method}")
        return float(values) if values.ndim == 0 else values

    def potential_slope(self, x: ArrayLike) -> Union[float, np.ndarray]:
        """势函数右导数 1 - 2 mu((-inf, x])"""
        values = 1.0 - 2.0 * np.asarray(self.cdf(x), dtype=float)
        return float(values) if values.ndim == 0 else values

    def _potential_quadrature(self, x: float) -> float:
        lo, hi = self.support()
        left = right = 0.0
        if lo < x:
            left, _ = integrate.quad(lambda y: (x - y) * self.pdf(y), lo, min(x, hi),
                                     epsabs=QUAD_TOL, limit=200)
        if x < hi:
            right, _ = integrate.quad(lambda y: (y - x) * self.pdf(y), max(x, lo), hi,
                                      epsabs=QUAD_TOL, limit=200)
        return -(left + right)

    def mass_below(self, level: float) -> float:
        """mu((-inf, level))"""
        found = self.atoms()
        if found is None:
            return float(self.cdf(level))
        locs, masses = found
        return float(masses[locs < level].sum())

    def to_json(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")


class AtomicMeasure(_Measure):
    """有限个原子的测度，atoms 为 [[位置, 质量], ...]"""
    kind: Literal["atomic"] = "atomic"
    atoms_: List[Tuple[float, float]] = Field(..., alias="atoms")

    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    @field_validator("atoms_")
    @classmethod
    def _check_atoms(cls, value: List[Tuple[float, float]]) -> List[Tuple[float, float]]:
        if not value:
            raise ValueError("原子列表不能为空")
        locs = np.array([a[0] for a in value], dtype=float)
        masses = np.array([a[1] for a in value], dtype=float)
        if not (np.all(np.isfinite(locs)) and np.all(np.isfinite(masses))):
            raise ValueError("原子位置与质量必须为有限值")
        if np.any(masses <= 0):
            raise ValueError("原子质量必须为正")
        if abs(masses.sum() - 1.0) > MASS_TOL:
            raise ValueError(f"原子质量之和为 {masses.sum():.15g}，应为 1")
        if np.any(np.diff(locs) <= 0):
            raise ValueError("原子位置必须严格递增")
        return value

    def model_dump(self, **kwargs) -> Dict[str, Any]:
        kwargs.setdefault("by_alias", True)
        return super().model_dump(**kwargs)

    @classmethod
    def from_arrays(cls, locations: ArrayLike, masses: ArrayLike, min_mass: float = 0.0) -> "AtomicMeasure":
        """排序、合并重复位置、丢弃零质量并归一化"""
        locs = np.asarray(locations, dtype=float).ravel()
        ps = np.asarray(masses, dtype=float).ravel()
        if locs.shape != ps.shape:
            raise ValueError("位置与质量长度不一致")
        if np.any(ps < 0):
            raise ValueError("原子质量不能为负")
        unique, inverse = np.unique(locs, return_inverse=True)
        merged = np.bincount(inverse, weights=ps, minlength=len(unique))
        keep = merged > min_mass
        if not np.any(keep):
            raise ValueError("所有原子质量均为零")
        unique, merged = unique[keep], merged[keep]
        merged = merged / merged.sum()
        return cls(atoms=[(float(x), float(p)) for x, p in zip(unique, merged)])

    @classmethod
    def dirac(cls, location: float) -> "AtomicMeasure":
        return cls(atoms=[(float(location), 1.0)])

    @cached_property
    def packed(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        locs = np.array([a[0] for a in self.atoms_], dtype=float)
        masses = np.array([a[1] for a in self.atoms_], dtype=float)
        cum_mass = np.concatenate(([0.0], np.cumsum(masses)))
        cum_first = np.concatenate(([0.0], np.cumsum(masses * locs)))
        return locs, masses, cum_mass, cum_first

    @property
    def locations(self) -> np.ndarray:
        return self.packed[0]

    @property
    def masses(self) -> np.ndarray:
        return self.packed[1]

    def atoms(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.locations, self.masses

    def mean(self) -> float:
        return float(self.packed[3][-1])

    def second_moment(self) -> float:
        locs, masses, _, _ = self.packed
        return float(np.sum(masses * locs * locs))

    def support(self) -> Tuple[float, float]:
        locs = self.locations
        return float(locs[0]), float(locs[-1])

    def cdf(self, x: ArrayLike) -> np.ndarray:
        locs, _, cum_mass, _ = self.packed
        k = np.searchsorted(locs, np.asarray(x, dtype=float), side="right")
        return np.minimum(cum_mass[k], 1.0)

    def quantile(self, q: ArrayLike) -> np.ndarray:
        locs, _, cum_mass, _ = self.packed
        idx = np.searchsorted(cum_mass[1:], np.asarray(q, dtype=float) - MASS_TOL, side="left")
        return locs[np.clip(idx, 0, len(locs) - 1)]

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        locs, masses, _, _ = self.packed
        if len(locs) == 1:
            return np.full(n, locs[0])
        return rng.choice(locs, size=n, p=masses)

    def _potential_closed(self, x: np.ndarray) -> np.ndarray:
        # sum p|x-y| = x(2F-1) + M - 2M_left，F 与 M_left 为 y<=x 部分的累计量
        locs, _, cum_mass, cum_first = self.packed
        k = np.searchsorted(locs, x, side="right")
        f = cum_mass[k]
        m_left = cum_first[k]
        return -(x * (2.0 * f - 1.0) + cum_first[-1] - 2.0 * m_left)

    def pieces(self) -> List[Tuple[float, float]]:
        """势函数的各线性段 (斜率, 截距)，自左向右"""
        locs, _, cum_mass, _ = self.packed
        slopes = 1.0 - 2.0 * cum_mass
        anchors = np.concatenate(([locs[0]], locs))
        values = self._potential_closed(anchors)
        return [(float(s), float(v - s * a)) for s, v, a in zip(slopes, values, anchors)]


class EmpiricalMeasure(_Measure):
    """等权样本测度，势函数按原子测度精确计算"""
    kind: Literal["empirical"] = "empirical"
    samples: List[float]

    @field_validator("samples")
    @classmethod
    def _check_samples(cls, value: List[float]) -> List[float]:
        if not value:
            raise ValueError("样本不能为空")
        arr = np.asarray(value, dtype=float)
        if not np.all(np.isfinite(arr)):
            raise ValueError("样本必须为有限值")
        return sorted(float(v) for v in arr)

    @cached_property
    def as_atomic(self) -> AtomicMeasure:
        arr = np.asarray(self.samples, dtype=float)
        return AtomicMeasure.from_arrays(arr, np.ones_like(arr))

    def atoms(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.as_atomic.atoms()

    def mean(self) -> float:
        return self.as_atomic.mean()

    def second_moment(self) -> float:
        return self.as_atomic.second_moment()

    def support(self) -> Tuple[float, float]:
        return self.samples[0], self.samples[-1]

    def cdf(self, x: ArrayLike) -> np.ndarray:
        return self.as_atomic.cdf(x)

    def quantile(self, q: ArrayLike) -> np.ndarray:
        return self.as_atomic.quantile(q)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.choice(np.asarray(self.samples), size=n, replace=True)

    def _potential_closed(self, x: np.ndarray) -> np.ndarray:
        return self.as_atomic._potential_closed(x)


class GaussianMeasure(_Measure):
    kind: Literal["gaussian"] = "gaussian"
    mean_: float = Field(..., alias="mean")
    variance_: float = Field(..., alias="variance", ge=0)

    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    def model_dump(self, **kwargs) -> Dict[str, Any]:
        kwargs.setdefault("by_alias", True)
        return super().model_dump(**kwargs)

    @property
    def std(self) -> float:
        return float(np.sqrt(self.variance_))

    def mean(self) -> float:
        return float(self.mean_)

    def second_moment(self) -> float:
        return float(self.variance_ + self.mean_ ** 2)

    def cdf(self, x: ArrayLike) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.std == 0:
            return (x >= self.mean_).astype(float)
        return norm.cdf(x, loc=self.mean_, scale=self.std)

    def quantile(self, q: ArrayLike) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if self.std == 0:
            return np.full_like(q, self.mean_)
        return norm.ppf(q, loc=self.mean_, scale=self.std)

    def pdf(self, y: np.ndarray) -> np.ndarray:
        return norm.pdf(y, loc=self.mean_, scale=self.std)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.mean_ + self.std * rng.standard_normal(n)

    def atoms(self) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        if self.std == 0:
            return np.array([self.mean_]), np.array([1.0])
        return None

    def _potential_closed(self, x: np.ndarray) -> np.ndarray:
        s = self.std
        if s == 0:
            return -np.abs(x - self.mean_)
        d = (x - self.mean_) / s
        return -s * (2.0 * norm.pdf(d) + d * (2.0 * norm.cdf(d) - 1.0))


class LognormalMeasure(_Measure):
    """exp(N(log_mean, log_variance))"""
    kind: Literal["lognormal"] = "lognormal"
    log_mean: float
    log_variance: float = Field(..., ge=0)

    @property
    def log_std(self) -> float:
        return float(np.sqrt(self.log_variance))

    def mean(self) -> float:
        with np.errstate(over="ignore"):
            return float(np.exp(self.log_mean + 0.5 * self.log_variance))

    def second_moment(self) -> float:
        with np.errstate(over="ignore"):
            return float(np.exp(2.0 * self.log_mean + 2.0 * self.log_variance))

    def support(self) -> Tuple[float, float]:
        return 0.0, np.inf

    def cdf(self, x: ArrayLike) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape)
        pos = x > 0
        if self.log_std == 0:
            out[pos] = (np.log(x[pos]) >= self.log_mean).astype(float)
        else:
            out[pos] = norm.cdf((np.log(x[pos]) - self.log_mean) / self.log_std)
        return out

    def quantile(self, q: ArrayLike) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        return np.exp(self.log_mean + self.log_std * norm.ppf(q))

    def pdf(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        out = np.zeros(y.shape)
        pos = y > 0
        z = (np.log(y[pos]) - self.log_mean) / self.log_std
        out[pos] = norm.pdf(z) / (self.log_std * y[pos])
        return out

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.exp(self.log_mean + self.log_std * rng.standard_normal(n))

    def atoms(self) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        if self.log_std == 0:
            return np.array([np.exp(self.log_mean)]), np.array([1.0])
        return None

    def _potential_closed(self, x: np.ndarray) -> np.ndarray:
        m, s = self.log_mean, self.log_std
        ey = self.mean()
        if s == 0:
            return -np.abs(x - np.exp(m))
        out = np.array(x - ey, dtype=float)
        pos = x > 0
        xp = x[pos]
        d = (np.log(xp) - m) / s
        # E|x-Y| = (EY - x) + 2 E(x-Y)^+
        put = xp * norm.cdf(d) - ey * norm.cdf(d - s)
        out[pos] = -((ey - xp) + 2.0 * put)
        return out


class UniformMeasure(_Measure):
    kind: Literal["uniform"] = "uniform"
    lo: float
    hi: float

    @model_validator(mode="after")
    def _check_bounds(self) -> "UniformMeasure":
        if not self.lo < self.hi:
            raise ValueError(f"均匀分布区间无效: [{self.lo}, {self.hi}]")
        return self

    def mean(self) -> float:
        return 0.5 * (self.lo + self.hi)

    def second_moment(self) -> float:
        return (self.lo ** 2 + self.lo * self.hi + self.hi ** 2) / 3.0

    def support(self) -> Tuple[float, float]:
        return self.lo, self.hi

    def cdf(self, x: ArrayLike) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.clip((x - self.lo) / (self.hi - self.lo), 0.0, 1.0)

    def quantile(self, q: ArrayLike) -> np.ndarray:
        return self.lo + np.asarray(q, dtype=float) * (self.hi - self.lo)

    def pdf(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return np.where((y >= self.lo) & (y <= self.hi), 1.0 / (self.hi - self.lo), 0.0)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=n)

    def _potential_closed(self, x: np.ndarray) -> np.ndarray:
        lo, hi = self.lo, self.hi
        inside = ((x - lo) ** 2 + (hi - x) ** 2) / (2.0 * (hi - lo))
        outside = np.abs(x - 0.5 * (lo + hi))
        return -np.where((x >= lo) & (x <= hi), inside, outside)


ComponentMeasure = Annotated[
    Union[AtomicMeasure, GaussianMeasure, LognormalMeasure, UniformMeasure, EmpiricalMeasure],
    Field(discriminator="kind"),
]


class MixtureComponent(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    weight: float = Field(..., gt=0)
    measure: ComponentMeasure


class MixtureMeasure(_Measure):
    """有限混合，例如原子与均匀分布的组合；各量按权重线性组合"""
    kind: Literal["mixture"] = "mixture"
    components: List[MixtureComponent]

    @field_validator("components")
    @classmethod
    def _check_weights(cls, value: List[MixtureComponent]) -> List[MixtureComponent]:
        if not value:
            raise ValueError("混合测度至少需要一个分量")
        total = sum(c.weight for c in value)
        if abs(total - 1.0) > MASS_TOL:
            raise ValueError(f"混合权重之和为 {total:.15g}，应为 1")
        return value

    def _combine(self, fn) -> np.ndarray:
        return sum(c.weight * np.asarray(fn(c.measure), dtype=float) for c in self.components)

    def mean(self) -> float:
        return float(self._combine(lambda m: m.mean()))

    def second_moment(self) -> float:
        return float(self._combine(lambda m: m.second_moment()))

    def support(self) -> Tuple[float, float]:
        bounds = [c.measure.support() for c in self.components]
        return min(b[0] for b in bounds), max(b[1] for b in bounds)

    def cdf(self, x: ArrayLike) -> np.ndarray:
        return self._combine(lambda m: m.cdf(x))

    def quantile(self, q: ArrayLike) -> np.ndarray:
        # 混合分位数夹在各分量分位数之间，向量化二分
        q = np.asarray(q, dtype=float)
        candidates = [np.asarray(c.measure.quantile(q), dtype=float) for c in self.components]
        lo = np.minimum.reduce(candidates)
        hi = np.maximum.reduce(candidates)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            above = self.cdf(mid) >= q - MASS_TOL
            hi = np.where(above, mid, hi)
            lo = np.where(above, lo, mid)
            if np.all(hi - lo <= 1e-14 * (1.0 + np.abs(hi))):
                break
        at_lo = self.cdf(lo) >= q - MASS_TOL
        return np.where(at_lo, lo, hi)

    def pdf(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        out = np.zeros(y.shape)
        for c in self.components:
            if c.measure.atoms() is None:
                out = out + c.weight * c.measure.pdf(y)
        return out

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        weights = np.array([c.weight for c in self.components])
        which = rng.choice(len(weights), size=n, p=weights / weights.sum())
        out = np.empty(n)
        for i, c in enumerate(self.components):
            sel = which == i
            if np.any(sel):
                out[sel] = c.measure.sample(rng, int(sel.sum()))
        return out

    def atoms(self) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        found = [c.measure.atoms() for c in self.components]
        if any(f is None for f in found):
            return None
        locs = np.concatenate([f[0] for f in found])
        masses = np.concatenate([c.weight * f[1] for c, f in zip(self.components, found)])
        merged = AtomicMeasure.from_arrays(locs, masses)
        return merged.atoms()

    def mass_below(self, level: float) -> float:
        return float(sum(c.weight * c.measure.mass_below(level) for c in self.components))

    def _potential_closed(self, x: np.ndarray) -> np.ndarray:
        return self._combine(lambda m: m.potential(x))

    def _potential_quadrature(self, x: float) -> float:
        return float(self._combine(lambda m: m.potential(x, method="quadrature")))


ProbabilityMeasure = Annotated[
    Union[AtomicMeasure, GaussianMeasure, LognormalMeasure, UniformMeasure, EmpiricalMeasure,
          MixtureMeasure],
    Field(discriminator="kind"),
]

_measure_adapter: TypeAdapter = TypeAdapter(ProbabilityMeasure)


def parse_measure(data: Union[Dict[str, Any], str]) -> "_Measure":
    """从 JSON 字符串或字典构造测度"""
    if isinstance(data, str):
        data = json.loads(data)
    return _measure_adapter.validate_python(data)


def dirac(location: float) -> AtomicMeasure:
    return AtomicMeasure.dirac(location)


def is_atomic(measure: "_Measure") -> bool:
    return measure.atoms() is not None


def as_atomic(measure: "_Measure") -> AtomicMeasure:
    found = measure.atoms()
    if found is None:
        raise ValueError(f"{type(measure).__name__} 不是原子测度")
    if isinstance(measure, AtomicMeasure):
        return measure
    return AtomicMeasure.from_arrays(*found)


def default_domain(nu: "_Measure", lo: float = 1e-4, hi: float = 1.0 - 1e-4,
                   mu: Optional["_Measure"] = None) -> Tuple[float, float]:
    """按 nu 的分位数截断计算区域，原子测度直接取支撑并外扩"""
    found = nu.atoms()
    if found is not None:
        a, b = float(found[0][0]), float(found[0][-1])
        pad = max(0.25 * (b - a), 1.0)
        a, b = a - pad, b + pad
    else:
        a, b = float(nu.quantile(lo)), float(nu.quantile(hi))
    if mu is not None and mu.atoms() is not None:
        mu_locs = mu.atoms()[0]
        a, b = min(a, float(mu_locs[0])), max(b, float(mu_locs[-1]))
    return a, b


class ConvexOrderResult(BaseModel):
    ordered: bool
    witness: Optional[float] = None
    max_violation: float = 0.0


def _check_points(mu: "_Measure", nu: "_Measure", grid: ArrayLike) -> np.ndarray:
    points = [np.asarray(grid, dtype=float).ravel()]
    for measure in (mu, nu):
        found = measure.atoms()
        if found is not None:
            points.append(found[0])
    return np.unique(np.concatenate(points))


def convex_order_check(mu: "_Measure", nu: "_Measure", grid: ArrayLike) -> ConvexOrderResult:
    """检验 mu <=_cx nu：均值一致且 u_mu >= u_nu"""
    mean_mu, mean_nu = mu.mean(), nu.mean()
    if not (np.isfinite(mean_mu) and np.isfinite(mean_nu)):
        raise NonFiniteMoment("凸序检验要求有限的一阶矩")
    if abs(mean_mu - mean_nu) > MEAN_TOL:
        raise MeanMismatch(mean_mu, mean_nu)
    xs = _check_points(mu, nu, grid)
    violation = nu.potential(xs) - mu.potential(xs)
    worst = int(np.argmax(violation))
    if violation[worst] > ORDER_TOL:
        return ConvexOrderResult(ordered=False, witness=float(xs[worst]),
                                 max_violation=float(violation[worst]))
    return ConvexOrderResult(ordered=True, max_violation=float(max(violation[worst], 0.0)))


class ContactSet(BaseModel):
    """网格上 u_mu 与 u_nu 重合的点，两端点恒在其中"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    grid: np.ndarray
    mask: np.ndarray

    @property
    def points(self) -> np.ndarray:
        return self.grid[self.mask]

    def __len__(self) -> int:
        return int(self.mask.sum())

    def __contains__(self, x: float) -> bool:
        return bool(np.any(np.abs(self.points - x) <= 1e-12 * (1.0 + abs(x))))


def contact_set(mu: "_Measure", nu: "_Measure", grid: ArrayLike,
                tol: Optional[float] = None) -> ContactSet:
    xs = np.asarray(grid, dtype=float).ravel()
    u_mu = mu.potential(xs)
    u_nu = nu.potential(xs)
    bound = 1e-8 * (1.0 + np.abs(u_nu)) if tol is None else np.full_like(xs, tol)
    mask = np.abs(u_mu - u_nu) <= bound
    if len(mask):
        mask[0] = True
        mask[-1] = True
    return ContactSet(grid=xs, mask=mask)


def breeden_litzenberger(strikes: ArrayLike, call_prices: ArrayLike, forward: float,
                         tol: float = 1e-10) -> AtomicMeasure:
    """由看涨期权价格的二阶差分得到原子测度，并修正均值到远期价格"""
    k = np.asarray(strikes, dtype=float).ravel()
    c = np.asarray(call_prices, dtype=float).ravel()
    if len(k) < 3 or len(k) != len(c):
        raise ValueError("至少需要 3 个行权价，且价格数量一致")
    if np.any(np.diff(k) <= 0):
        raise ValueError("行权价必须严格递增")
    if not (k[0] < forward < k[-1]):
        raise ValueError(f"远期价格 {forward} 不在行权价区间 ({k[0]}, {k[-1]}) 内")

    for i, price in enumerate(c):
        if price < -tol:
            raise ArbitrageDetected(i, f"价格为负 ({price:.6g})")
    for i in range(1, len(c)):
        if c[i] > c[i - 1] + tol:
            raise ArbitrageDetected(i, "价格随行权价上升")
    slopes = np.diff(c) / np.diff(k)
    if slopes[0] < -1.0 - tol:
        raise ArbitrageDetected(1, f"价格斜率 {slopes[0]:.6g} 小于 -1")
    for i in range(1, len(slopes)):
        if slopes[i] < slopes[i - 1] - tol:
            raise ArbitrageDetected(i, "价格关于行权价不是凸的")

    # 区间外斜率分别取 -1 与 0，总质量恰为 1
    masses = np.empty_like(k)
    masses[0] = slopes[0] + 1.0
    masses[1:-1] = np.diff(slopes)
    masses[-1] = -slopes[-1]
    masses = np.clip(masses, 0.0, None)
    masses /= masses.sum()

    masses = _repair_mean(k, masses, forward)
    return AtomicMeasure.from_arrays(k, masses, min_mass=1e-15)


def _repair_mean(k: np.ndarray, masses: np.ndarray, forward: float) -> np.ndarray:
    masses = masses.copy()
    shortfall = forward - float(np.dot(masses, k))
    if abs(shortfall) <= MEAN_TOL:
        return masses
    logger.info(f"远期价格修正: 均值偏差 {shortfall:.3e}")
    if shortfall > 0:
        # 从最低行权价开始把质量移到最高行权价
        order, target = range(len(k) - 1), len(k) - 1
    else:
        order, target = range(len(k) - 1, 0, -1), 0
    for i in order:
        if abs(shortfall) <= MEAN_TOL:
            break
        gain = k[target] - k[i]
        moved = min(masses[i], shortfall / gain)
        masses[i] -= moved
        masses[target] += moved
        shortfall -= moved * gain
    return masses


def load_market_csv(path: str) -> Tuple[np.ndarray, np.ndarray]:
    """读取表头为 strike,price 的行情文件"""
    frame = pd.read_csv(path, encoding="utf-8")
    missing = {"strike", "price"} - set(frame.columns)
    if missing:
        raise ValueError(f"行情文件缺少列: {sorted(missing)}")
    frame = frame.sort_values("strike")
    return frame["strike"].to_numpy(dtype=float), frame["price"].to_numpy(dtype=float)
