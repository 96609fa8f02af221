"""障碍问题 min(u - u_nu, u_t - sigma^2/2 u_xx) = 0 的显式单调差分求解"""
import logging
import math
import time
from abc import ABC, abstractmethod
from typing import Any, Callable, Dict, Literal, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.config import SigmaConfig, get_settings
from app.core.errors import CflViolation, OrderViolation
from app.services.measures import convex_order_check

logger = logging.getLogger(__name__)

SolutionKind = Literal["obstacle", "penalized", "heat", "rost"]


class Sigma(ABC):
    """扩散系数 sigma(t, x)"""
    time_homogeneous: bool = True

    @abstractmethod
    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        pass

    @abstractmethod
    def sup_abs(self, a: float, b: float, T: float) -> float:
        """区间 [a,b] x [0,T] 上 |sigma| 的上确界，用于 CFL 检查"""
        pass

    @abstractmethod
    def describe(self) -> str:
        pass


class ConstantSigma(Sigma):
    def __init__(self, value: float = 1.0):
        self.value = float(value)

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        return np.full(np.shape(x), self.value)

    def sup_abs(self, a: float, b: float, T: float) -> float:
        return abs(self.value)

    def describe(self) -> str:
        return f"constant({self.value:g})"


class IdentitySigma(Sigma):
    """sigma(t, x) = x，对应几何布朗运动"""

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float)

    def sup_abs(self, a: float, b: float, T: float) -> float:
        return max(abs(a), abs(b))

    def describe(self) -> str:
        return "identity"


class TableSigma(Sigma):
    """关于 x 分段线性插值的扩散系数，表外取端点值"""

    def __init__(self, xs: Sequence[float], values: Sequence[float]):
        self.xs = np.asarray(xs, dtype=float)
        self.values = np.asarray(values, dtype=float)
        if self.xs.shape != self.values.shape or np.any(np.diff(self.xs) <= 0):
            raise ValueError("sigma 表的节点必须严格递增且与取值等长")

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        return np.interp(x, self.xs, self.values)

    def sup_abs(self, a: float, b: float, T: float) -> float:
        inside = self.values[(self.xs >= a) & (self.xs <= b)]
        ends = np.interp([a, b], self.xs, self.values)
        return float(np.max(np.abs(np.concatenate([inside, ends]))))

    def describe(self) -> str:
        return f"table({len(self.xs)} nodes)"


class CallableSigma(Sigma):
    """任意向量化函数，上确界在采样网格上估计"""

    def __init__(self, fn: Callable[[float, np.ndarray], np.ndarray], name: str = "callable",
                 time_homogeneous: bool = False):
        self.fn = fn
        self.name = name
        self.time_homogeneous = time_homogeneous

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.fn(t, x), dtype=float), np.shape(x))

    def sup_abs(self, a: float, b: float, T: float) -> float:
        xs = np.linspace(a, b, 401)
        return float(max(np.max(np.abs(self(t, xs))) for t in np.linspace(0.0, T, 21)))

    def describe(self) -> str:
        return self.name


def sigma_from_config(config: SigmaConfig) -> Sigma:
    if config.kind == "constant":
        return ConstantSigma(config.value)
    if config.kind == "identity":
        return IdentitySigma()
    return TableSigma(config.xs, config.values)


class Grid(BaseModel):
    """[a,b] 上 n_x 个内点加两个边界点，[0,T] 上 n_t 个时间步"""
    model_config = ConfigDict(frozen=True)

    a: float
    b: float
    n_x: int = Field(..., ge=3)
    T: float = Field(..., gt=0)
    n_t: int = Field(..., ge=1)

    @model_validator(mode="after")
    def _check_interval(self) -> "Grid":
        if not self.a < self.b:
            raise ValueError(f"区间端点无效: a={self.a}, b={self.b}")
        return self

    @property
    def dx(self) -> float:
        return (self.b - self.a) / (self.n_x + 1)

    @property
    def dt(self) -> float:
        return self.T / self.n_t

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(self.a, self.b, self.n_x + 2)

    @property
    def ts(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_t + 1)

    def cfl_ratio(self, sigma_max: float) -> float:
        return self.dt * sigma_max ** 2 / self.dx ** 2

    @classmethod
    def from_cfl(cls, a: float, b: float, T: float, n_t: int, cfl_ratio: float,
                 sigma_max: float = 1.0) -> "Grid":
        """由时间步数与目标 CFL 比值反推空间步长；区间数取不超过的偶数，使中点落在网格上"""
        dt = T / n_t
        dx = math.sqrt(dt * sigma_max ** 2 / cfl_ratio)
        intervals = int(math.floor((b - a) / dx + 1e-9))
        intervals -= intervals % 2
        intervals = max(intervals, 4)
        return cls(a=a, b=b, n_x=intervals - 1, T=T, n_t=n_t)

    @classmethod
    def from_n_x(cls, a: float, b: float, T: float, n_x: int, cfl_ratio: float,
                 sigma_max: float = 1.0) -> "Grid":
        dx = (b - a) / (n_x + 1)
        dt = cfl_ratio * dx ** 2 / max(sigma_max ** 2, 1e-300)
        return cls(a=a, b=b, n_x=n_x, T=T, n_t=max(1, int(math.ceil(T / dt - 1e-9))))

    @classmethod
    def resolve(cls, a: float, b: float, T: float, n_x: Optional[int] = None,
                n_t: Optional[int] = None, cfl_ratio: Optional[float] = None,
                sigma_max: float = 1.0) -> "Grid":
        if n_x is not None and n_t is not None:
            return cls(a=a, b=b, n_x=n_x, T=T, n_t=n_t)
        if n_t is not None and cfl_ratio is not None:
            return cls.from_cfl(a, b, T, n_t, cfl_ratio, sigma_max)
        if n_x is not None and cfl_ratio is not None:
            return cls.from_n_x(a, b, T, n_x, cfl_ratio, sigma_max)
        raise ValueError("n_x、n_t、cfl_ratio 至少需要给出两个")


class PdeSolution(BaseModel):
    """时空网格上的数值解；stream 模式只保留最后一行与首次接触时间"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    grid: Grid
    kind: SolutionKind
    values: Optional[np.ndarray] = None
    final: np.ndarray
    first_contact: Optional[np.ndarray] = None
    contact_tol: Optional[float] = None
    obstacle: Optional[np.ndarray] = None
    sigma_id: str
    penalty: Optional[float] = None
    cfl_ratio: float

    @property
    def is_dense(self) -> bool:
        return self.values is not None

    def row(self, t: float) -> np.ndarray:
        """离 t 最近的时间层"""
        n = int(round(t / self.grid.dt))
        n = min(max(n, 0), self.grid.n_t)
        if self.values is None:
            if n != self.grid.n_t:
                raise ValueError("stream 模式只保留终止时刻的解")
            return self.final
        return self.values[n]

    def value_at(self, t: float, x: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
        out = np.interp(x, self.grid.xs, self.row(t))
        return float(out) if np.ndim(out) == 0 else out

    def to_frame(self, stride: int = 1) -> pd.DataFrame:
        """长表格式 t,x,u；按时间步抽样，始终包含最后一层"""
        grid = self.grid
        if self.values is None:
            rows = np.array([grid.n_t])
            block = self.final[None, :]
        else:
            rows = np.arange(0, grid.n_t + 1, max(1, stride))
            if rows[-1] != grid.n_t:
                rows = np.append(rows, grid.n_t)
            block = self.values[rows]
        ts = np.repeat(rows * grid.dt, grid.n_x + 2)
        xs = np.tile(grid.xs, len(rows))
        return pd.DataFrame({"t": ts, "x": xs, "u": block.ravel()})

    def meta(self, stride: int = 1) -> Dict[str, Any]:
        data = {
            "kind": self.kind,
            "a": self.grid.a,
            "b": self.grid.b,
            "n_x": self.grid.n_x,
            "n_t": self.grid.n_t,
            "T": self.grid.T,
            "dx": self.grid.dx,
            "dt": self.grid.dt,
            "cfl_ratio": self.cfl_ratio,
            "sigma": self.sigma_id,
            "store": "dense" if self.is_dense else "stream",
            "solution_stride": stride,
        }
        if self.penalty is not None:
            data["penalty"] = self.penalty
        return data


def _second_difference(u: np.ndarray) -> np.ndarray:
    return u[2:] - 2.0 * u[1:-1] + u[:-2]


def _clean_second_difference(h: np.ndarray) -> np.ndarray:
    """障碍的二阶差分，舍入噪声置零，使分段线性障碍上的间隙不会因舍入而触底"""
    d = _second_difference(h)
    scale = np.abs(h[2:]) + 2.0 * np.abs(h[1:-1]) + np.abs(h[:-2])
    d[np.abs(d) <= 64.0 * np.finfo(float).eps * scale] = 0.0
    return d


class _Coefficients:
    """每步的 dt*sigma^2/(2dx^2)，时间齐次时只计算一次"""

    def __init__(self, sigma: Sigma, grid: Grid):
        self._sigma = sigma
        self._grid = grid
        self._interior = grid.xs[1:-1]
        self._factor = grid.dt / (2.0 * grid.dx ** 2)
        self._fixed = None
        if sigma.time_homogeneous:
            self._fixed = self._compute(0.0)

    def _compute(self, t: float) -> np.ndarray:
        s = self._sigma(t, self._interior)
        return self._factor * s * s

    def at(self, n: int) -> np.ndarray:
        if self._fixed is not None:
            return self._fixed
        return self._compute(n * self._grid.dt)


def _check_cfl(sigma: Sigma, grid: Grid, penalty: float = 0.0,
               safety: Optional[float] = None) -> float:
    if safety is None:
        safety = get_settings().DEFAULT_CFL_SAFETY
    sigma_max = sigma.sup_abs(grid.a, grid.b, grid.T)
    ratio = grid.dt * (sigma_max ** 2 / grid.dx ** 2 + penalty)
    if ratio > safety:
        raise CflViolation(ratio, safety)
    return grid.cfl_ratio(sigma_max)


def _check_order(mu, nu, grid: Grid) -> None:
    order = convex_order_check(mu, nu, grid.xs)
    if not order.ordered:
        raise OrderViolation(f"mu 与 nu 不满足凸序，反例点 x={order.witness:.6g}", order.witness)


def _solution(grid: Grid, kind: SolutionKind, history: Optional[np.ndarray], final: np.ndarray,
              sigma: Sigma, ratio: float, **extra) -> PdeSolution:
    return PdeSolution(grid=grid, kind=kind, values=history, final=final,
                       sigma_id=sigma.describe(), cfl_ratio=ratio, **extra)


def _allocate(grid: Grid, store: str, first_row: np.ndarray) -> Optional[np.ndarray]:
    if store not in ("dense", "stream"):
        raise ValueError(f"未知的存储模式: {store}")
    if store == "stream":
        return None
    history = np.empty((grid.n_t + 1, grid.n_x + 2))
    history[0] = first_row
    return history


def march_obstacle(u0: np.ndarray, h: np.ndarray, sigma: Sigma, grid: Grid,
                   store: str = "dense", contact_tol: float = 0.0,
                   cfl_safety: Optional[float] = None) -> PdeSolution:
    """u <- max(h, u + dt sigma^2/(2dx^2) (u_{j+1} - 2u_j + u_{j-1}))，边界列保持初值"""
    u0 = np.asarray(u0, dtype=float)
    h = np.asarray(h, dtype=float)
    ratio = _check_cfl(sigma, grid, safety=cfl_safety)
    coeff = _Coefficients(sigma, grid)
    dt = grid.dt

    # 在间隙 w = u - h 上推进，接触时 w 精确为 0
    w = u0 - h
    dh = _clean_second_difference(h)
    history = _allocate(grid, store, u0)
    first_contact = np.where(w <= contact_tol, 0.0, np.inf)

    started = time.perf_counter()
    for n in range(grid.n_t):
        lam = coeff.at(n)
        interior = np.maximum(0.0, w[1:-1] + lam * (_second_difference(w) + dh))
        previous = w[1:-1]
        fresh = np.isinf(first_contact[1:-1]) & (interior <= contact_tol)
        if np.any(fresh):
            drop = previous[fresh] - interior[fresh]
            frac = np.clip((previous[fresh] - contact_tol) / np.where(drop > 0, drop, 1.0), 0.0, 1.0)
            first_contact[1:-1][fresh] = (n + frac) * dt
        w = np.concatenate(([w[0]], interior, [w[-1]]))
        if history is not None:
            history[n + 1] = w + h

    logger.debug(f"障碍问题推进完成: {grid.n_t} 步, 耗时 {time.perf_counter() - started:.2f}s")
    return _solution(grid, "obstacle", history, w + h, sigma, ratio,
                     first_contact=first_contact, contact_tol=contact_tol, obstacle=h)


def march_heat(u0: np.ndarray, sigma: Sigma, grid: Grid, store: str = "dense",
               h: Optional[np.ndarray] = None, penalty: float = 0.0,
               cfl_safety: Optional[float] = None) -> PdeSolution:
    """热方程推进；给出 h 与 penalty>0 时为罚函数形式 w <- w + dt(L w + n (h - w)^+)"""
    u = np.asarray(u0, dtype=float).copy()
    if penalty < 0:
        raise ValueError(f"罚参数必须非负: {penalty}")
    if penalty > 0 and h is None:
        raise ValueError("罚函数形式需要障碍 h")
    ratio = _check_cfl(sigma, grid, penalty=penalty, safety=cfl_safety)
    coeff = _Coefficients(sigma, grid)
    h_int = None if h is None else np.asarray(h, dtype=float)[1:-1]
    step_penalty = grid.dt * penalty
    history = _allocate(grid, store, u)

    for n in range(grid.n_t):
        interior = u[1:-1] + coeff.at(n) * _second_difference(u)
        if step_penalty > 0:
            interior = interior + step_penalty * np.maximum(h_int - u[1:-1], 0.0)
        u = np.concatenate(([u[0]], interior, [u[-1]]))
        if history is not None:
            history[n + 1] = u

    kind: SolutionKind = "penalized" if h is not None else "heat"
    return _solution(grid, kind, history, u, sigma, ratio,
                     penalty=penalty if h is not None else None,
                     obstacle=None if h is None else np.asarray(h, dtype=float))


def march_rost(u0: np.ndarray, sigma: Sigma, grid: Grid, store: str = "dense",
               clamp: bool = True, cfl_safety: Optional[float] = None) -> PdeSolution:
    """u <- u + dt min(0, sigma^2/2 u_xx)；clamp=False 时退化为热方程"""
    u = np.asarray(u0, dtype=float).copy()
    ratio = _check_cfl(sigma, grid, safety=cfl_safety)
    coeff = _Coefficients(sigma, grid)
    history = _allocate(grid, store, u)

    for n in range(grid.n_t):
        increment = coeff.at(n) * _second_difference(u)
        if clamp:
            increment = np.minimum(increment, 0.0)
        u = np.concatenate(([u[0]], u[1:-1] + increment, [u[-1]]))
        if history is not None:
            history[n + 1] = u

    return _solution(grid, "rost", history, u, sigma, ratio)


def _obstacle_values(h, xs: np.ndarray) -> np.ndarray:
    if hasattr(h, "potential"):
        return np.asarray(h.potential(xs), dtype=float)
    if callable(h):
        return np.asarray(h(xs), dtype=float)
    values = np.asarray(h, dtype=float)
    if values.shape != xs.shape:
        raise ValueError("障碍数组与网格长度不一致")
    return values


def solve_obstacle(sigma: Sigma, mu, nu, grid: Grid, store: str = "dense",
                   contact_tol: float = 0.0, cfl_safety: Optional[float] = None) -> PdeSolution:
    _check_order(mu, nu, grid)
    xs = grid.xs
    logger.info(f"求解障碍问题: [{grid.a:g}, {grid.b:g}], n_x={grid.n_x}, n_t={grid.n_t}, "
                f"sigma={sigma.describe()}")
    solution = march_obstacle(mu.potential(xs), nu.potential(xs), sigma, grid, store=store,
                              contact_tol=contact_tol, cfl_safety=cfl_safety)
    logger.info(f"障碍问题求解完成，CFL 比值 {solution.cfl_ratio:.4f}")
    return solution


def solve_penalized(sigma: Sigma, mu, h, grid: Grid, n: float, store: str = "dense",
                    cfl_safety: Optional[float] = None) -> PdeSolution:
    xs = grid.xs
    return march_heat(mu.potential(xs), sigma, grid, store=store, h=_obstacle_values(h, xs),
                      penalty=float(n), cfl_safety=cfl_safety)


def solve_heat(sigma: Sigma, mu, grid: Grid, store: str = "dense",
               cfl_safety: Optional[float] = None) -> PdeSolution:
    return march_heat(mu.potential(grid.xs), sigma, grid, store=store, cfl_safety=cfl_safety)


def solve_rost(sigma: Sigma, mu, nu, grid: Grid, store: str = "dense",
               cfl_safety: Optional[float] = None) -> PdeSolution:
    _check_order(mu, nu, grid)
    xs = grid.xs
    return march_rost(mu.potential(xs) - nu.potential(xs), sigma, grid, store=store,
                      cfl_safety=cfl_safety)
