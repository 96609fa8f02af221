"""Euler 格式模拟 dX = sigma(t, X) dB，在 Root 障碍处停止并检验嵌入"""
import logging
import math
from typing import Any, Callable, Dict, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.config import get_settings
from app.core.errors import EmptySample, NoConvergence, OrderViolation, TooManyUnstopped
from app.core.task import ChunkRunner, spawn_generators, split_counts
from app.services.barrier import GRID_TOL, BarrierLookup, Lookup, RootBarrier
from app.services.measures import AtomicMeasure, ContactSet, as_atomic, convex_order_check
from app.services.obstacle_pde import IdentitySigma, Sigma

logger = logging.getLogger(__name__)

UNSTOPPED_LIMIT = 0.01


class SdeConfig(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    sigma: Sigma
    initial: Any
    dt: float = Field(..., gt=0)
    t_max: float = Field(..., gt=0)
    n_paths: int = Field(..., ge=1)
    seed: int = Field(default_factory=lambda: get_settings().DEFAULT_SEED)
    log_space: bool = False
    lookup: Lookup = "crossing"
    chunk_size: Optional[int] = Field(None, ge=1)
    common_random_numbers: bool = False

    @model_validator(mode="after")
    def _check(self) -> "SdeConfig":
        if self.t_max < self.dt:
            raise ValueError(f"t_max={self.t_max} 小于步长 dt={self.dt}")
        if self.log_space and not isinstance(self.sigma, IdentitySigma):
            raise ValueError("对数空间模拟只适用于 sigma(t, x) = x")
        return self

    @property
    def n_steps(self) -> int:
        return int(math.ceil(self.t_max / self.dt - 1e-9))


def _mean_or_nan(values: np.ndarray) -> float:
    return float(np.mean(values)) if len(values) else float("nan")


class EmbeddingReport(BaseModel):
    """已停止路径的 (tau, X_tau) 样本；未停止路径只计入 unstopped_fraction"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    tau_samples: np.ndarray
    x_samples: np.ndarray
    qv_samples: np.ndarray
    log_qv_samples: Optional[np.ndarray] = None
    sampled_qv_samples: Optional[np.ndarray] = None
    n_paths: int
    unstopped_fraction: float = Field(..., ge=0.0, le=1.0)
    potential_distance: Optional[float] = None
    mean_tau: float
    second_moment_tau: float

    @model_validator(mode="after")
    def _check_lengths(self) -> "EmbeddingReport":
        n = len(self.tau_samples)
        for name in ("x_samples", "qv_samples", "log_qv_samples", "sampled_qv_samples"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != n:
                raise ValueError(f"{name} 长度 {len(arr)} 与 tau_samples 长度 {n} 不一致")
        return self

    @classmethod
    def from_samples(cls, tau: Sequence[float], x: Sequence[float], n_paths: Optional[int] = None,
                     qv: Optional[Sequence[float]] = None, **extra) -> "EmbeddingReport":
        tau = np.asarray(tau, dtype=float)
        x = np.asarray(x, dtype=float)
        n_paths = len(tau) if n_paths is None else n_paths
        return cls(tau_samples=tau, x_samples=x,
                   qv_samples=np.zeros_like(tau) if qv is None else np.asarray(qv, dtype=float),
                   n_paths=n_paths,
                   unstopped_fraction=1.0 - len(tau) / n_paths if n_paths else 1.0,
                   mean_tau=_mean_or_nan(tau), second_moment_tau=_mean_or_nan(tau * tau), **extra)

    @property
    def n_stopped(self) -> int:
        return len(self.tau_samples)

    def to_json(self) -> Dict[str, Any]:
        def clean(v: Optional[float]) -> Optional[float]:
            return None if v is None or not math.isfinite(v) else float(v)

        return {
            "n_paths": self.n_paths,
            "n_stopped": self.n_stopped,
            "unstopped_fraction": self.unstopped_fraction,
            "potential_distance": clean(self.potential_distance),
            "mean_tau": clean(self.mean_tau),
            "second_moment_tau": clean(self.second_moment_tau),
            "mean_x": clean(_mean_or_nan(self.x_samples)),
            "mean_qv": clean(_mean_or_nan(self.qv_samples)),
        }

    def samples_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"tau": self.tau_samples, "x": self.x_samples})


class _ChunkJob(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    count: int
    rng: np.random.Generator


def _simulate_chunk(cfg: SdeConfig, lookup: BarrierLookup, sample_times: Optional[np.ndarray],
                    job: _ChunkJob) -> Dict[str, np.ndarray]:
    rng, count = job.rng, job.count
    barrier = lookup.barrier
    x0 = np.asarray(cfg.initial.sample(rng, count), dtype=float)
    if cfg.log_space and np.any(x0 <= 0):
        raise ValueError("对数空间模拟要求初始值为正")

    tau = np.full(count, np.nan)
    x_stop = np.full(count, np.nan)
    qv = np.zeros(count)
    log_qv = np.zeros(count) if cfg.log_space else None
    sampled = np.zeros(count) if sample_times is not None else None

    stopped0 = barrier.column_values(x0, "nearest") <= GRID_TOL
    tau[stopped0] = 0.0
    x_stop[stopped0] = x0[stopped0]

    alive = np.flatnonzero(~stopped0)
    x = x0[alive]
    y = np.log(x) if cfg.log_space else x
    qv_run = np.zeros(len(alive))
    log_qv_run = np.zeros(len(alive))
    sampled_run = np.zeros(len(alive))
    last_sample = y.copy()
    next_sample = 0
    sqdt = math.sqrt(cfg.dt)

    for n in range(cfg.n_steps):
        if len(alive) == 0:
            break
        if cfg.common_random_numbers:
            # 每步抽满整块的随机数，障碍变化时各路径仍使用同一组增量
            z = rng.standard_normal(count)[alive]
        else:
            z = rng.standard_normal(len(alive))
        t_now, t_next = n * cfg.dt, (n + 1) * cfg.dt
        if cfg.log_space:
            x_new = np.exp(y - 0.5 * cfg.dt + sqdt * z)
        else:
            x_new = x + cfg.sigma(t_now, x) * sqdt * z

        stop, where = lookup.stop_check(t_next, x, x_new)
        x_end = np.where(stop, where, x_new)
        y_end = np.log(x_end) if cfg.log_space else x_end
        qv_run += (x_end - x) ** 2
        if cfg.log_space:
            log_qv_run += (y_end - y) ** 2
        if sample_times is not None:
            while next_sample < len(sample_times) and t_next + GRID_TOL >= sample_times[next_sample]:
                sampled_run += (y_end - last_sample) ** 2
                last_sample = y_end.copy()
                next_sample += 1

        if np.any(stop):
            ids = alive[stop]
            tau[ids] = t_next
            x_stop[ids] = x_end[stop]
            qv[ids] = qv_run[stop]
            if log_qv is not None:
                log_qv[ids] = log_qv_run[stop]
            if sampled is not None:
                sampled[ids] = sampled_run[stop] + (y_end[stop] - last_sample[stop]) ** 2
            keep = ~stop
            alive = alive[keep]
            x, y = x_end[keep], y_end[keep]
            qv_run, log_qv_run = qv_run[keep], log_qv_run[keep]
            sampled_run, last_sample = sampled_run[keep], last_sample[keep]
        else:
            x, y = x_end, y_end

    done = ~np.isnan(tau)
    out = {"tau": tau[done], "x": x_stop[done], "qv": qv[done], "unstopped": count - int(done.sum())}
    if log_qv is not None:
        out["log_qv"] = log_qv[done]
    if sampled is not None:
        out["sampled_qv"] = sampled[done]
    return out


def simulate_embedding(cfg: SdeConfig, b: RootBarrier, nu=None, grid: Optional[np.ndarray] = None,
                       sample_times: Optional[Sequence[float]] = None,
                       max_workers: Optional[int] = None) -> EmbeddingReport:
    """
    按块模拟路径直至进入障碍

    Args:
        cfg: 模拟参数
        b: Root 障碍
        nu: 给出时计算停止位置与 nu 的势函数距离
        grid: 势函数距离的取点，默认用障碍网格
        sample_times: 给出时另外记录在这些时刻抽样的二次变差（对数空间下为 ln X 的）

    Returns:
        EmbeddingReport: 同一种子下结果与线程数无关
    """
    settings = get_settings()
    counts = split_counts(cfg.n_paths, cfg.chunk_size or settings.MC_CHUNK_SIZE)
    rngs = spawn_generators(cfg.seed, len(counts))
    jobs = [_ChunkJob(count=c, rng=r) for c, r in zip(counts, rngs)]
    lookup = BarrierLookup(b, cfg.lookup)
    times = None if sample_times is None else np.sort(np.asarray(sample_times, dtype=float))

    runner = ChunkRunner(max_workers=max_workers, name="embed")
    parts = runner.map(lambda job: _simulate_chunk(cfg, lookup, times, job), jobs)

    def gather(key: str) -> Optional[np.ndarray]:
        if key not in parts[0]:
            return None
        return np.concatenate([p[key] for p in parts])

    tau = gather("tau")
    unstopped = sum(p["unstopped"] for p in parts)
    fraction = unstopped / cfg.n_paths
    if fraction > 0:
        logger.warning(f"{unstopped} 条路径在 t_max={cfg.t_max:g} 前未停止 ({fraction:.3%})")

    distance = None
    x_samples = gather("x")
    if nu is not None and len(x_samples):
        distance = embedding_distance(x_samples, nu, b.xs if grid is None else grid)

    report = EmbeddingReport(
        tau_samples=tau,
        x_samples=x_samples,
        qv_samples=gather("qv"),
        log_qv_samples=gather("log_qv"),
        sampled_qv_samples=gather("sampled_qv"),
        n_paths=cfg.n_paths,
        unstopped_fraction=fraction,
        potential_distance=distance,
        mean_tau=_mean_or_nan(tau),
        second_moment_tau=_mean_or_nan(tau * tau),
    )
    logger.info(f"嵌入模拟完成: {cfg.n_paths} 条路径, E[tau]={report.mean_tau:.5f}, "
                f"势函数距离 {distance if distance is not None else '-'}")
    return report


def embedding_distance(x_samples: Sequence[float], nu, grid: Sequence[float]) -> float:
    """经验测度与 nu 的势函数在 grid 上的最大偏差"""
    samples = np.asarray(x_samples, dtype=float).ravel()
    if samples.size == 0:
        raise EmptySample("停止位置样本为空")
    empirical = AtomicMeasure.from_arrays(samples, np.ones_like(samples))
    xs = np.asarray(grid, dtype=float)
    return float(np.max(np.abs(empirical.potential(xs) - nu.potential(xs))))


class StoppedMoments(BaseModel):
    mean_tau: float
    second_moment_tau: float
    mean_f: float
    stderr_tau: float
    stderr_second: float
    stderr_f: float


def _stderr(values: np.ndarray) -> float:
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1) / math.sqrt(len(values)))


def stopped_moments(report: EmbeddingReport,
                    f: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> StoppedMoments:
    if report.unstopped_fraction >= UNSTOPPED_LIMIT:
        raise TooManyUnstopped(report.unstopped_fraction, UNSTOPPED_LIMIT)
    tau = report.tau_samples
    if len(tau) == 0:
        raise EmptySample("没有已停止的路径")
    f_tau = tau if f is None else np.asarray(f(tau), dtype=float)
    return StoppedMoments(
        mean_tau=float(tau.mean()),
        second_moment_tau=float(np.mean(tau * tau)),
        mean_f=float(f_tau.mean()),
        stderr_tau=_stderr(tau),
        stderr_second=_stderr(tau * tau),
        stderr_f=_stderr(f_tau),
    )


class IdentityCheck(BaseModel):
    passed: bool
    estimate: float
    target: float
    stderr: float


def _check(estimate: float, target: float, stderr: float, name: str) -> IdentityCheck:
    passed = abs(estimate - target) <= 3.0 * stderr + 1e-12
    if not passed:
        logger.warning(f"{name} 检验未通过: 估计 {estimate:.6g}, 目标 {target:.6g}, 标准误 {stderr:.3g}")
    return IdentityCheck(passed=passed, estimate=estimate, target=target, stderr=stderr)


def martingale_check(report: EmbeddingReport, mu) -> IdentityCheck:
    """E[X_tau] 与 mu 的均值在 3 倍标准误内一致"""
    x = report.x_samples
    if len(x) == 0:
        raise EmptySample("没有已停止的路径")
    return _check(float(x.mean()), mu.mean(), _stderr(x), "鞅性")


def qv_identity_check(report: EmbeddingReport, mu, nu, use: str = "tau") -> IdentityCheck:
    """E[tau]（或实现二次变差）与 ∫x²nu - ∫x²mu 比较"""
    if use == "tau":
        values = report.tau_samples
    elif use == "qv":
        values = report.qv_samples
    else:
        raise ValueError(f"未知的检验量: {use}")
    if len(values) == 0:
        raise EmptySample("没有已停止的路径")
    target = nu.second_moment() - mu.second_moment()
    return _check(float(values.mean()), target, _stderr(values), "二次变差恒等式")


def _classify(x: np.ndarray, locs: np.ndarray) -> np.ndarray:
    """停止位置归入最近的原子"""
    if len(locs) == 1:
        return np.zeros(len(x), dtype=int)
    right = np.clip(np.searchsorted(locs, x), 1, len(locs) - 1)
    left = right - 1
    return np.where(np.abs(x - locs[left]) <= np.abs(locs[right] - x), left, right)


def solve_atomic_barrier(sigma: Sigma, mu, nu, contact: Union[ContactSet, Sequence[float]],
                         mc_budget: int = 100_000, tol_mass: float = 0.01, dt: float = 1e-3,
                         t_max: float = 10.0, max_sweeps: int = 8, seed: Optional[int] = None,
                         time_tol: Optional[float] = None,
                         max_workers: Optional[int] = None) -> RootBarrier:
    """
    原子目标测度的障碍直接求解：接触集上的原子固定在 0，其余原子的障碍时间逐个二分，
    使模拟得到的停止质量与 nu 的原子质量一致

    Returns:
        RootBarrier: 网格为接触网格与 nu 原子的并，非原子非接触列为 inf
    """
    nu_atomic = as_atomic(nu)
    locs, masses = nu_atomic.atoms()
    seed = get_settings().DEFAULT_SEED if seed is None else seed
    time_tol = max(2.0 * dt, 1e-3) if time_tol is None else time_tol

    if isinstance(contact, ContactSet):
        base, points = contact.grid, contact.points
    else:
        points = np.asarray(list(contact), dtype=float).ravel()
        base = points
    xs = np.unique(np.concatenate([base, locs]))
    order = convex_order_check(mu, nu_atomic, xs)
    if not order.ordered:
        raise OrderViolation(f"mu 与 nu 不满足凸序，反例点 x={order.witness:.6g}", order.witness)

    pinned = np.zeros(len(xs), dtype=bool)
    if len(points):
        pos = np.clip(np.searchsorted(xs, points), 0, len(xs) - 1)
        pinned[pos[np.abs(xs[pos] - points) <= GRID_TOL * (1.0 + np.abs(points))]] = True
    atom_cols = np.searchsorted(xs, locs)
    f = np.full(len(xs), np.inf)
    f[pinned] = 0.0

    gaps = np.asarray(mu.potential(locs)) - np.asarray(nu_atomic.potential(locs))
    free = [i for i in np.argsort(-gaps, kind="stable") if not pinned[atom_cols[i]]]
    sigma_at = np.abs(np.asarray(sigma(0.0, locs), dtype=float))
    for i in free:
        f[atom_cols[i]] = gaps[i] / max(sigma_at[i] ** 2, 1e-12)

    cfg = SdeConfig(sigma=sigma, initial=mu, dt=dt, t_max=t_max, n_paths=mc_budget, seed=seed,
                    common_random_numbers=True)

    def stopped_masses(values: np.ndarray) -> np.ndarray:
        barrier = RootBarrier(xs=xs, f=values, provenance="direct")
        report = simulate_embedding(cfg, barrier, max_workers=max_workers)
        hits = np.bincount(_classify(report.x_samples, locs), minlength=len(locs))
        return hits / float(mc_budget)

    logger.info(f"原子障碍求解: {len(locs)} 个原子, 其中 {len(free)} 个待定, 每次估计 {mc_budget} 条路径")
    for sweep in range(1, max_sweeps + 1):
        for i in free:
            col = atom_cols[i]
            f[col] = _bisect_column(lambda v: stopped_masses(_with(f, col, v))[i], masses[i],
                                    f[col], time_tol, t_max)
        current = stopped_masses(f)
        worst = float(np.max(np.abs(current - masses)))
        logger.debug(f"第 {sweep} 轮: 最大质量偏差 {worst:.4g}")
        if worst <= tol_mass:
            logger.info(f"原子障碍在第 {sweep} 轮收敛，最大质量偏差 {worst:.4g}")
            return RootBarrier(xs=xs, f=f, provenance="direct")
    raise NoConvergence(max_sweeps, f"最大质量偏差 {worst:.4g} 超过 {tol_mass:g}")


def _with(f: np.ndarray, col: int, value: float) -> np.ndarray:
    out = f.copy()
    out[col] = value
    return out


def _bisect_column(mass_at: Callable[[float], float], target: float, guess: float,
                   time_tol: float, t_max: float) -> float:
    """停止质量关于该列障碍时间单调不增，二分到区间宽度不超过 time_tol"""
    if mass_at(0.0) <= target:
        return 0.0
    lo, hi = 0.0, max(guess, time_tol)
    while mass_at(hi) > target:
        lo, hi = hi, 2.0 * hi
        if hi > t_max:
            raise NoConvergence(0, f"障碍时间超过 t_max={t_max:g} 仍无法压低停止质量")
    while hi - lo > time_tol:
        mid = 0.5 * (lo + hi)
        if mass_at(mid) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
