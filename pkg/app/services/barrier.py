"""Root 障碍：以障碍函数 f 表示 {(t, x): t >= f(x)}"""
import logging
from typing import Iterable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.spatial.distance import directed_hausdorff

from app.core.errors import GridMismatch
from app.services.measures import ContactSet
from app.services.obstacle_pde import PdeSolution

logger = logging.getLogger(__name__)

Provenance = Literal["from_pde", "direct", "manual"]
Lookup = Literal["nearest", "linear", "conservative", "crossing"]

GRID_TOL = 1e-12
RAY_SAMPLES = 64


class RootBarrier(BaseModel):
    """网格 xs 上的障碍函数，f=inf 表示该列永不停止；两端点固定为 0"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    xs: np.ndarray
    f: np.ndarray
    provenance: Provenance = "manual"

    @model_validator(mode="before")
    @classmethod
    def _normalize(cls, data):
        if not isinstance(data, dict):
            return data
        xs = np.array(data.get("xs"), dtype=float).ravel()
        f = np.array(data.get("f"), dtype=float).ravel()
        if xs.shape != f.shape or len(xs) < 2:
            raise ValueError("障碍网格与取值长度不一致或少于两点")
        if np.any(np.diff(xs) <= 0):
            raise ValueError("障碍网格必须严格递增")
        if np.any(np.isnan(f)) or np.any(f < 0):
            raise ValueError("障碍函数取值必须在 [0, inf] 内")
        f[0] = 0.0
        f[-1] = 0.0
        xs.setflags(write=False)
        f.setflags(write=False)
        return {**data, "xs": xs, "f": f}

    def __len__(self) -> int:
        return len(self.xs)

    def with_values(self, f: np.ndarray, provenance: Optional[Provenance] = None) -> "RootBarrier":
        return RootBarrier(xs=self.xs, f=f, provenance=provenance or self.provenance)

    def column_values(self, x: Union[float, np.ndarray], lookup: Lookup = "linear") -> np.ndarray:
        """
        x 处的障碍时间；端点之外归属端点列

        Args:
            x: 空间位置
            lookup: 列间取值方式。默认 linear 在相邻两列间线性插值（一侧为 inf 时结果为 inf）；
                conservative 取相邻两列的较小者；nearest 与 crossing 取最近的列

        Returns:
            np.ndarray: 与 x 同形状的障碍时间
        """
        x = np.asarray(x, dtype=float)
        xs, f = self.xs, self.f
        right = np.clip(np.searchsorted(xs, x, side="right"), 1, len(xs) - 1)
        left = right - 1
        if lookup in ("nearest", "crossing"):
            closer_left = (x - xs[left]) <= (xs[right] - x)
            return np.where(closer_left, f[left], f[right])
        if lookup == "conservative":
            on_node = np.isclose(x, xs[left], rtol=0.0, atol=GRID_TOL)
            return np.where(on_node, f[left], np.minimum(f[left], f[right]))
        if lookup == "linear":
            w = np.clip((x - xs[left]) / (xs[right] - xs[left]), 0.0, 1.0)
            with np.errstate(invalid="ignore"):
                mixed = (1.0 - w) * f[left] + w * f[right]
            return np.where(w <= 0.0, f[left], np.where(w >= 1.0, f[right], mixed))
        raise ValueError(f"未知的列查找方式: {lookup}")

    def is_member(self, t: float, x: Union[float, np.ndarray], lookup: Lookup = "linear"):
        hit = t >= self.column_values(x, lookup)
        return bool(hit) if np.ndim(hit) == 0 else hit

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"x": self.xs, "f": self.f})

    def to_csv(self) -> str:
        """表头 x,f，无穷写作 inf"""
        lines = ["x,f"]
        for x, f in zip(self.xs, self.f):
            lines.append(f"{x!r},{'inf' if np.isinf(f) else repr(float(f))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def read_csv(cls, path: str, provenance: Provenance = "manual") -> "RootBarrier":
        frame = pd.read_csv(path, encoding="utf-8")
        missing = {"x", "f"} - set(frame.columns)
        if missing:
            raise ValueError(f"障碍文件缺少列: {sorted(missing)}")
        f = frame["f"].astype(str).str.strip().astype(float).to_numpy()
        return cls(xs=frame["x"].to_numpy(dtype=float), f=f, provenance=provenance)


class BarrierLookup:
    """模拟用的列查询，支持 crossing 规则：一步内跨过的列中障碍时间的最小值"""

    def __init__(self, barrier: RootBarrier, lookup: Lookup = "crossing"):
        self.barrier = barrier
        self.lookup = lookup
        self._xs = barrier.xs
        self._table = self._build_table(barrier.f) if lookup == "crossing" else None

    @staticmethod
    def _build_table(f: np.ndarray) -> List[np.ndarray]:
        # 稀疏表，存区间最小值所在的列号
        idx = np.arange(len(f))
        table = [idx]
        width = 1
        while 2 * width <= len(f):
            prev = table[-1]
            a, b = prev[:-width], prev[width:]
            table.append(np.where(f[a] <= f[b], a, b))
            width *= 2
        return table

    def _range_argmin(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        f = self.barrier.f
        span = hi - lo + 1
        level = np.floor(np.log2(np.maximum(span, 1))).astype(int)
        out = np.empty(len(lo), dtype=int)
        for k in np.unique(level):
            sel = level == k
            row = self._table[k]
            a = row[lo[sel]]
            b = row[hi[sel] - (1 << k) + 1]
            out[sel] = np.where(f[a] <= f[b], a, b)
        return out

    def stop_check(self, t: float, x_prev: np.ndarray, x_new: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """返回 (是否停止, 停止位置)；越过端点的路径停在端点上"""
        barrier = self.barrier
        a, b = barrier.xs[0], barrier.xs[-1]
        point_f = barrier.column_values(x_new, "nearest" if self.lookup == "crossing" else self.lookup)
        stopped = t + GRID_TOL >= point_f
        where = np.clip(x_new, a, b)
        if self._table is None:
            return stopped, where

        lo_x = np.minimum(x_prev, x_new)
        hi_x = np.maximum(x_prev, x_new)
        lo = np.searchsorted(self._xs, lo_x - GRID_TOL, side="left")
        hi = np.searchsorted(self._xs, hi_x + GRID_TOL, side="right") - 1
        candidates = ~stopped & (lo <= hi)
        if np.any(candidates):
            cols = self._range_argmin(lo[candidates], hi[candidates])
            crossed = t + GRID_TOL >= barrier.f[cols]
            idx = np.flatnonzero(candidates)[crossed]
            stopped[idx] = True
            where[idx] = self._xs[cols[crossed]]
        return stopped, where


def extract_barrier(sol: PdeSolution, nu, tol: float = 0.0) -> RootBarrier:
    """f(x_j) 取 u(t, x_j) - u_nu(x_j) <= tol 的最早时刻，在相邻时间层间线性插值"""
    if sol.kind != "obstacle":
        raise ValueError(f"只能从障碍问题的解中提取障碍，当前类型: {sol.kind}")
    grid = sol.grid
    xs = grid.xs

    if sol.values is None:
        if sol.contact_tol is not None and abs(sol.contact_tol - tol) > 0.0:
            logger.warning(f"stream 模式的接触阈值为 {sol.contact_tol}，忽略请求的 tol={tol}")
        f = np.array(sol.first_contact, dtype=float)
    else:
        h = sol.obstacle if sol.obstacle is not None else nu.potential(xs)
        gaps = sol.values - h[None, :]
        hit = gaps <= tol
        touched = hit.any(axis=0)
        first = np.argmax(hit, axis=0)
        f = np.full(len(xs), np.inf)
        f[touched & (first == 0)] = 0.0
        later = np.flatnonzero(touched & (first > 0))
        if len(later):
            n = first[later]
            before = gaps[n - 1, later]
            after = gaps[n, later]
            frac = np.clip((before - tol) / (before - after), 0.0, 1.0)
            f[later] = (n - 1 + frac) * grid.dt

    unreached = int(np.isinf(f[1:-1]).sum())
    if unreached:
        logger.info(f"{unreached} 列在 T={grid.T:g} 内未接触障碍，记为 inf")
    return RootBarrier(xs=xs, f=f, provenance="from_pde")


def _contact_points(contact) -> np.ndarray:
    if isinstance(contact, ContactSet):
        return contact.points
    return np.asarray(list(contact) if not isinstance(contact, np.ndarray) else contact,
                      dtype=float).ravel()


def regularize(b: RootBarrier, contact: Union[ContactSet, Sequence[float], np.ndarray]) -> RootBarrier:
    """接触集上的列置为 0，其余不变"""
    points = _contact_points(contact)
    if len(points) == 0:
        return b
    idx = np.searchsorted(b.xs, points)
    idx = np.clip(idx, 0, len(b.xs) - 1)
    left = np.clip(idx - 1, 0, len(b.xs) - 1)
    idx = np.where(np.abs(b.xs[left] - points) < np.abs(b.xs[idx] - points), left, idx)
    off_grid = np.abs(b.xs[idx] - points) > GRID_TOL * (1.0 + np.abs(points))
    if np.any(off_grid):
        raise ValueError(f"接触点 {points[off_grid][0]:.6g} 不在障碍网格上")
    f = np.array(b.f)
    f[idx] = 0.0
    return b.with_values(f)


def combine(b1: RootBarrier, b2: RootBarrier, mode: Literal["union", "intersection"]) -> RootBarrier:
    if b1.xs.shape != b2.xs.shape or not np.allclose(b1.xs, b2.xs, rtol=0.0, atol=GRID_TOL):
        raise GridMismatch("两个障碍的网格不一致")
    if mode == "union":
        f = np.minimum(b1.f, b2.f)
    elif mode == "intersection":
        f = np.maximum(b1.f, b2.f)
    else:
        raise ValueError(f"未知的组合方式: {mode}")
    provenance = b1.provenance if b1.provenance == b2.provenance else "manual"
    return RootBarrier(xs=b1.xs, f=f, provenance=provenance)


def _compact_graph(b: RootBarrier) -> np.ndarray:
    """(t, x) -> (t/(1+t), x/(1+|x|)) 下的闭图像：每列取 f 到 inf 的竖直射线采样"""
    finite = np.isfinite(b.f)
    start = np.divide(b.f, 1.0 + b.f, out=np.ones_like(b.f), where=finite)
    levels = np.linspace(0.0, 1.0, RAY_SAMPLES)
    ts = start[:, None] + (1.0 - start[:, None]) * levels[None, :]
    ys = np.broadcast_to((b.xs / (1.0 + np.abs(b.xs)))[:, None], ts.shape)
    return np.column_stack([ts.ravel(), ys.ravel()])


def barrier_distance(b1: RootBarrier, b2: RootBarrier) -> float:
    """压缩坐标下两个障碍图像的 Hausdorff 距离"""
    p1, p2 = _compact_graph(b1), _compact_graph(b2)
    return float(max(directed_hausdorff(p1, p2)[0], directed_hausdorff(p2, p1)[0]))


def hit_time(b: RootBarrier, path: Iterable[Tuple[float, float]],
             lookup: Lookup = "linear") -> Optional[float]:
    """离散路径首次进入障碍的采样时刻，从未进入返回 None；列间默认线性插值，crossing 检查一步内扫过的列"""
    points = np.asarray(list(path), dtype=float)
    if points.size == 0:
        return None
    ts, xs = points[:, 0], points[:, 1]
    if np.any(np.diff(ts) < 0):
        raise ValueError("路径时间必须递增")
    if lookup == "crossing":
        checker = BarrierLookup(b, "crossing")
        if ts[0] + GRID_TOL >= b.column_values(xs[0])[()]:
            return float(ts[0])
        for i in range(1, len(ts)):
            stopped, _ = checker.stop_check(ts[i], xs[i - 1:i], xs[i:i + 1])
            if stopped[0]:
                return float(ts[i])
        return None
    inside = ts + GRID_TOL >= b.column_values(xs, lookup)
    if not np.any(inside):
        return None
    return float(ts[int(np.argmax(inside))])
