"""反射 BSDE（零生成元）的回归蒙特卡洛：Snell 包络作为障碍问题的独立对照"""
import logging
import math
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from pydantic import BaseModel, ConfigDict, Field

from app.core.config import get_settings
from app.core.errors import RegressionSingular
from app.core.task import ChunkRunner, spawn_generators
from app.services.obstacle_pde import Sigma

logger = logging.getLogger(__name__)

Function = Callable[[np.ndarray], np.ndarray]


class RfbsdeConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    T: float = Field(..., gt=0)
    n_steps: int = Field(..., ge=2)
    n_paths: int = Field(10_000, ge=2)
    basis: int = Field(4, ge=1)
    seed: int = Field(default_factory=lambda: get_settings().DEFAULT_SEED)
    regression: Literal["polynomial", "bins"] = "polynomial"
    n_bins: int = Field(16, ge=2)
    quadrature_nodes: int = Field(9, ge=2)

    @property
    def dt(self) -> float:
        return self.T / self.n_steps


class QueryEstimate(BaseModel):
    t: float
    x: float
    value: float
    stderr: float
    skorokhod: float
    min_gap: float
    n_steps: int


class SnellEnvelopeResult(BaseModel):
    config: RfbsdeConfig
    estimates: List[QueryEstimate]

    @property
    def values(self) -> np.ndarray:
        return np.array([e.value for e in self.estimates])

    @property
    def stderrs(self) -> np.ndarray:
        return np.array([e.stderr for e in self.estimates])

    def to_json(self) -> Dict[str, Any]:
        return {
            "config": self.config.model_dump(),
            "estimates": [e.model_dump() for e in self.estimates],
            "skorokhod": skorokhod_condition_check(self),
        }


def _as_function(obj: Union[Function, Any]) -> Function:
    if hasattr(obj, "potential"):
        return lambda x: np.asarray(obj.potential(x), dtype=float)
    if callable(obj):
        return lambda x: np.broadcast_to(np.asarray(obj(x), dtype=float), np.shape(x))
    raise TypeError(f"无法把 {type(obj).__name__} 当作函数使用")


def _polynomial_fit(x: np.ndarray, y: np.ndarray, degree: int) -> np.ndarray:
    scale = float(np.std(x))
    if scale <= 1e-12 * (1.0 + abs(float(np.mean(x)))):
        raise RegressionSingular("回归样本退化为单点，无法估计条件期望")
    z = (x - np.mean(x)) / scale
    design = np.vander(z, degree + 1, increasing=True)
    coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < degree + 1:
        raise RegressionSingular(f"设计矩阵秩 {rank} 小于基函数个数 {degree + 1}")
    return design @ coef


def _bin_fit(x: np.ndarray, y: np.ndarray, n_bins: int) -> np.ndarray:
    edges = np.unique(np.quantile(x, np.linspace(0.0, 1.0, n_bins + 1)))
    if len(edges) < 3:
        raise RegressionSingular("分箱回归的样本点过于集中")
    idx = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, len(edges) - 2)
    counts = np.bincount(idx, minlength=len(edges) - 1)
    sums = np.bincount(idx, weights=y, minlength=len(edges) - 1)
    means = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    return means[idx]


def _query(sigma: Sigma, u0: Function, h: Function, cfg: RfbsdeConfig,
           point: Tuple[float, float], rng: np.random.Generator) -> QueryEstimate:
    t, x = float(point[0]), float(point[1])
    if t <= 0.0:
        value = float(max(u0(np.array([x]))[0], h(np.array([x]))[0]))
        return QueryEstimate(t=t, x=x, value=value, stderr=0.0, skorokhod=0.0, min_gap=0.0, n_steps=0)

    steps = max(1, int(round(t / cfg.dt)))
    d = t / steps
    sqd = math.sqrt(d)
    half = cfg.n_paths // 2
    n = 2 * half

    # 对偶变量：整条路径取相反的增量
    z = rng.standard_normal((steps, half))
    z = np.concatenate([z, -z], axis=1)
    paths = np.empty((steps + 1, n))
    paths[0] = x
    for k in range(steps):
        # 反向时间下的扩散系数 sigma(t - r, x)
        paths[k + 1] = paths[k] + sigma(t - k * d, paths[k]) * sqd * z[k]

    nodes, weights = hermegauss(cfg.quadrature_nodes)
    weights = weights / weights.sum()

    h_next = h(paths[steps])
    realized = u0(paths[steps])
    if np.any(h_next > realized + 1e-12):
        raise ValueError("要求障碍 h 不高于终值 u0")
    y_next = realized.copy()
    skorokhod = np.zeros(n)
    min_gap = np.inf

    for k in range(steps - 1, -1, -1):
        xk = paths[k]
        hk = h(xk)
        if k == 0:
            continuation = np.full(n, realized.mean())
        else:
            spread = sigma(t - k * d, xk) * sqd
            # 障碍的一步条件期望用 Gauss-Hermite 求积，只回归超出部分
            expected_h = np.zeros(n)
            for node, weight in zip(nodes, weights):
                expected_h += weight * h(xk + spread * node)
            excess = realized - h_next
            if cfg.regression == "polynomial":
                fitted = _polynomial_fit(xk, excess, cfg.basis)
            else:
                fitted = _bin_fit(xk, excess, cfg.n_bins)
            continuation = expected_h + fitted

        push = np.maximum(hk - continuation, 0.0)
        skorokhod += (y_next - h_next) * push
        y_k = np.maximum(hk, continuation)
        min_gap = min(min_gap, float(np.min(y_k - hk)))

        realized = np.where(hk >= continuation, hk, realized)
        y_next, h_next = y_k, hk

    pair_values = 0.5 * (realized[:half] + realized[half:])
    value = float(max(h(np.array([x]))[0], realized.mean()))
    stderr = float(np.std(pair_values, ddof=1) / math.sqrt(half)) if half > 1 else 0.0
    return QueryEstimate(t=t, x=x, value=value, stderr=stderr, skorokhod=float(skorokhod.mean()),
                         min_gap=min_gap, n_steps=steps)


def snell_envelope(sigma: Sigma, u0, h, cfg: RfbsdeConfig,
                   query_points: Sequence[Tuple[float, float]],
                   max_workers: Optional[int] = None) -> SnellEnvelopeResult:
    """
    在每个查询点 (t, x) 从 x 出发模拟一团路径，向后递推
    Y = max(h(X), E[Y_next | X])，终值 Y = u0(X)

    Args:
        sigma: 正向时间的扩散系数，内部按 sigma(t - r, x) 反转
        u0: 终值函数或测度（取其势函数）
        h: 障碍函数或测度（取其势函数）
        cfg: 时间步、路径数与回归设置
        query_points: (t, x) 列表，t 不超过 cfg.T

    Returns:
        SnellEnvelopeResult: 各查询点的估计值与标准误
    """
    u0_fn, h_fn = _as_function(u0), _as_function(h)
    points = [(float(t), float(x)) for t, x in query_points]
    for t, _ in points:
        if t < 0 or t > cfg.T + 1e-12:
            raise ValueError(f"查询时间 {t} 超出 [0, {cfg.T}]")

    rngs = spawn_generators(cfg.seed, len(points))
    runner = ChunkRunner(max_workers=max_workers, name="rfbsde")
    estimates = runner.map(lambda job: _query(sigma, u0_fn, h_fn, cfg, job[0], job[1]),
                           list(zip(points, rngs)))
    logger.info(f"Snell 包络估计完成: {len(points)} 个查询点, 每点 {cfg.n_paths} 条路径")
    return SnellEnvelopeResult(config=cfg, estimates=estimates)


def skorokhod_condition_check(result: Union[SnellEnvelopeResult, QueryEstimate]) -> float:
    """各查询点上 sum (Y - h) dK 的路径平均，取最大者"""
    if isinstance(result, QueryEstimate):
        return result.skorokhod
    if not result.estimates:
        return 0.0
    return float(max(abs(e.skorokhod) for e in result.estimates))
