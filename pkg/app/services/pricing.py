"""实现方差期权的模型无关下界：把市场隐含的 S_T 分布嵌入几何布朗运动"""
import logging
import math
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy import integrate

from app.core.config import get_settings
from app.core.errors import OrderViolation, SupportViolation
from app.services.barrier import Lookup, RootBarrier, extract_barrier, regularize
from app.services.embed_mc import (EmbeddingReport, SdeConfig, embedding_distance, simulate_embedding,
                                   stopped_moments)
from app.services.measures import (MEAN_TOL, breeden_litzenberger, contact_set,
                                   convex_order_check, dirac, load_market_csv)
from app.services.obstacle_pde import Grid, IdentitySigma, solve_obstacle

logger = logging.getLogger(__name__)

SUPPORT_TOL = 1e-4
UPPER_QUANTILE = 0.9999


class VariancePayoff(BaseModel):
    """f(x) = max(0, max_i (a_i x + b_i))，a_i >= 0，b_i <= 0，从而 f 凸、不减且 f(0) = 0"""
    model_config = ConfigDict(frozen=True)

    pieces: List[Tuple[float, float]]

    @field_validator("pieces")
    @classmethod
    def _check_pieces(cls, value: List[Tuple[float, float]]) -> List[Tuple[float, float]]:
        if not value:
            raise ValueError("收益函数至少需要一段")
        for a, b in value:
            if a < 0 or b > 0 or not (math.isfinite(a) and math.isfinite(b)):
                raise ValueError(f"仿射段 ({a}, {b}) 不满足斜率非负、截距非正")
        return value

    @classmethod
    def identity(cls) -> "VariancePayoff":
        return cls(pieces=[(1.0, 0.0)])

    @classmethod
    def call(cls, strike: float) -> "VariancePayoff":
        if strike < 0:
            raise ValueError(f"方差看涨的行权价必须非负: {strike}")
        return cls(pieces=[(1.0, -float(strike))])

    @classmethod
    def parse(cls, text: str) -> "VariancePayoff":
        """支持 identity、call:K、affine:a,b;a,b"""
        text = text.strip()
        if text == "identity":
            return cls.identity()
        kind, _, body = text.partition(":")
        try:
            if kind == "call":
                return cls.call(float(body))
            if kind == "affine":
                pieces = []
                for chunk in body.split(";"):
                    a, b = chunk.split(",")
                    pieces.append((float(a), float(b)))
                return cls(pieces=pieces)
        except ValueError as e:
            raise ValueError(f"无法解析收益函数 '{text}': {e}") from e
        raise ValueError(f"未知的收益函数: {text}")

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape)
        for a, b in self.pieces:
            out = np.maximum(out, a * x + b)
        return out

    def describe(self) -> str:
        return ";".join(f"{a:g}x{b:+g}" for a, b in self.pieces)


class VarianceOptionSpec(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    payoff: VariancePayoff = Field(default_factory=VariancePayoff.identity)
    maturity: float = Field(..., gt=0)
    nu: Any
    epsilon: float = Field(..., gt=0)

    @model_validator(mode="after")
    def _check_forward(self) -> "VarianceOptionSpec":
        mean = self.nu.mean()
        if abs(mean - 1.0) > MEAN_TOL:
            raise ValueError(f"目标分布均值应归一化为 1，实际为 {mean:.12g}")
        return self

    def with_payoff(self, payoff: VariancePayoff) -> "VarianceOptionSpec":
        return self.model_copy(update={"payoff": payoff})


class PdeGridParams(BaseModel):
    n_x: int = Field(200, ge=3)
    cfl_ratio: float = Field(0.2, gt=0, le=1)
    horizon_factor: float = Field(4.0, gt=0)
    min_horizon: float = Field(0.05, gt=0)


class McParams(BaseModel):
    n_paths: int = Field(20_000, ge=1)
    dt: float = Field(1e-4, gt=0)
    t_max: Optional[float] = Field(None, gt=0)
    seed: Optional[int] = None
    lookup: Lookup = "crossing"


class VarianceBound(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    bound: float
    stderr: float
    barrier: RootBarrier
    n_paths: int
    grid: Dict[str, Any]
    report: EmbeddingReport

    def to_json(self, barrier_csv_path: Optional[str] = None) -> Dict[str, Any]:
        return {
            "bound": self.bound,
            "stderr": self.stderr,
            "barrier_csv_path": barrier_csv_path,
            "n_paths": self.n_paths,
            "grid": self.grid,
        }


def check_support(spec: VarianceOptionSpec) -> None:
    below = spec.nu.mass_below(spec.epsilon)
    if below > SUPPORT_TOL + 1e-12:
        raise SupportViolation(f"目标分布在 epsilon={spec.epsilon:g} 以下的质量为 {below:.3g}")


def expected_log(nu) -> float:
    """E[ln X]，X ~ nu"""
    found = nu.atoms()
    if found is not None:
        locs, masses = found
        return float(np.dot(masses, np.log(locs)))
    if hasattr(nu, "log_mean"):
        return float(nu.log_mean)
    lo, hi = nu.support()
    value, _ = integrate.quad(lambda y: math.log(y) * float(nu.pdf(np.array(y))), max(lo, 0.0), hi,
                              limit=200)
    return float(value)


def pricing_grid(spec: VarianceOptionSpec, params: PdeGridParams) -> Grid:
    """价格空间区间 [epsilon/2, 2 q_0.9999]，时间跨度取 E[tau] = -2 E[ln X] 的若干倍"""
    a = 0.5 * spec.epsilon
    b = 2.0 * float(spec.nu.quantile(UPPER_QUANTILE))
    horizon = max(params.min_horizon, params.horizon_factor * (-2.0 * expected_log(spec.nu)))
    return Grid.from_n_x(a, b, horizon, params.n_x, params.cfl_ratio, sigma_max=b)


def gbm_barrier(spec: VarianceOptionSpec, params: Optional[PdeGridParams] = None) -> Tuple[RootBarrier, Grid]:
    """sigma(x) = x、mu = delta_1 时的正则 Root 障碍"""
    params = params or PdeGridParams()
    check_support(spec)
    mu = dirac(1.0)
    grid = pricing_grid(spec, params)
    order = convex_order_check(mu, spec.nu, grid.xs)
    if not order.ordered:
        raise OrderViolation(f"delta_1 与目标分布不满足凸序，反例点 x={order.witness:.6g}", order.witness)

    solution = solve_obstacle(IdentitySigma(), mu, spec.nu, grid, store="stream")
    barrier = extract_barrier(solution, spec.nu)
    barrier = regularize(barrier, contact_set(mu, spec.nu, grid.xs))
    return barrier, grid


def _sde_config(mc: McParams, horizon: float) -> SdeConfig:
    seed = get_settings().DEFAULT_SEED if mc.seed is None else mc.seed
    return SdeConfig(sigma=IdentitySigma(), initial=dirac(1.0), dt=mc.dt,
                     t_max=mc.t_max or 2.0 * horizon, n_paths=mc.n_paths, seed=seed,
                     log_space=True, lookup=mc.lookup)


def variance_bound_lower(spec: VarianceOptionSpec, grid_params: Optional[PdeGridParams] = None,
                         mc: Optional[McParams] = None) -> VarianceBound:
    """
    E[f(tau_R)] 作为 E[f([ln S]_T)] 的下界

    Returns:
        VarianceBound: 下界、标准误与所用障碍
    """
    grid_params = grid_params or PdeGridParams()
    mc = mc or McParams()
    barrier, grid = gbm_barrier(spec, grid_params)

    cfg = _sde_config(mc, grid.T)
    report = simulate_embedding(cfg, barrier, nu=spec.nu)
    moments = stopped_moments(report, spec.payoff)
    logger.info(f"方差期权下界: {moments.mean_f:.6f} ± {moments.stderr_f:.2g} "
                f"(收益 {spec.payoff.describe()}, {mc.n_paths} 条路径)")
    meta = {"a": grid.a, "b": grid.b, "n_x": grid.n_x, "n_t": grid.n_t, "T": grid.T,
            "cfl_ratio": grid_params.cfl_ratio}
    return VarianceBound(bound=moments.mean_f, stderr=moments.stderr_f, barrier=barrier,
                         n_paths=mc.n_paths, grid=meta, report=report)


def ingest_market(strikes: Sequence[float], prices: Sequence[float], maturity: float, forward: float,
                  payoff: Optional[VariancePayoff] = None) -> VarianceOptionSpec:
    """按远期价格归一化后做 Breeden-Litzenberger 反演，epsilon 取最小的有质量行权价"""
    if not forward > 0:
        raise ValueError(f"远期价格必须为正: {forward}")
    k = np.asarray(strikes, dtype=float) / forward
    c = np.asarray(prices, dtype=float) / forward
    nu = breeden_litzenberger(k, c, 1.0)
    lowest = float(nu.locations[0])
    if lowest <= 0.0:
        raise SupportViolation(f"隐含分布在 {lowest:g} 处有质量，要求支撑严格为正")
    logger.info(f"市场数据反演得到 {len(nu.atoms_)} 个原子，epsilon={lowest:.6g}")
    return VarianceOptionSpec(payoff=payoff or VariancePayoff.identity(), maturity=maturity,
                              nu=nu, epsilon=lowest)


def ingest_market_csv(path: str, maturity: float, forward: float,
                      payoff: Optional[VariancePayoff] = None) -> VarianceOptionSpec:
    strikes, prices = load_market_csv(path)
    return ingest_market(strikes, prices, maturity, forward, payoff)


class MomentIdentityReport(BaseModel):
    estimate: float
    stderr: float
    printed_target: float
    ito_target: float
    printed_holds: bool
    ito_holds: bool


def gbm_moment_identity_check(report: EmbeddingReport, mu, nu) -> MomentIdentityReport:
    """E[[X]_tau] 同时与 ∫x²mu 和 ∫x²nu - ∫x²mu 比较，前者不成立时只记录警告"""
    qv = report.qv_samples
    estimate = float(qv.mean())
    stderr = float(np.std(qv, ddof=1) / math.sqrt(len(qv))) if len(qv) > 1 else 0.0
    printed = mu.second_moment()
    ito = nu.second_moment() - mu.second_moment()
    band = 3.0 * stderr + 1e-12
    result = MomentIdentityReport(estimate=estimate, stderr=stderr, printed_target=printed, ito_target=ito,
                                  printed_holds=abs(estimate - printed) <= band,
                                  ito_holds=abs(estimate - ito) <= band)
    if not result.printed_holds:
        logger.warning(f"E[[X]_tau]={estimate:.6g} 与 ∫x²mu={printed:.6g} 不一致, "
                       f"与 ∫x²nu-∫x²mu={ito:.6g} 的偏差为 {estimate - ito:.3g}")
    return result


class SharpnessReport(BaseModel):
    embedding_distance: float
    mean_payoff: float
    stderr: float
    n_calendar: int
    unstopped_fraction: float


def sharpness_witness(spec: VarianceOptionSpec, barrier: RootBarrier, mc: Optional[McParams] = None,
                      n_calendar: int = 10_000, horizon: Optional[float] = None) -> SharpnessReport:
    """
    按时间变换 A(t) = t/(T-t) 在日历网格上抽样 S^R_t = X_{tau ∧ A(t)}，
    检查 S_T 的分布与 [ln S^R]_T 上的平均收益
    """
    mc = mc or McParams()
    if n_calendar < 2:
        raise ValueError("日历网格至少需要两个区间")
    k = np.arange(1, n_calendar)
    intrinsic = k / (n_calendar - k)
    if horizon is None:
        horizon = pricing_grid(spec, PdeGridParams()).T
    cfg = _sde_config(mc, horizon)
    report = simulate_embedding(cfg, barrier, nu=spec.nu, sample_times=intrinsic)
    realized = report.sampled_qv_samples
    payoff = spec.payoff(realized)
    distance = embedding_distance(report.x_samples, spec.nu, barrier.xs)
    stderr = float(np.std(payoff, ddof=1) / math.sqrt(len(payoff))) if len(payoff) > 1 else 0.0
    logger.info(f"时间变换模型: S_T 势函数距离 {distance:.4f}, E[f(RV)]={payoff.mean():.6f}")
    return SharpnessReport(embedding_distance=distance, mean_payoff=float(payoff.mean()), stderr=stderr,
                           n_calendar=n_calendar, unstopped_fraction=report.unstopped_fraction)
