from typing import Optional


class RootBarrierError(Exception):
    """求解流程中所有领域错误的基类"""

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def describe(self) -> str:
        return f"{type(self).__name__}: {self.message}"


class NonFiniteMoment(RootBarrierError):
    """测度的一阶矩发散"""


class OrderViolation(RootBarrierError):
    """输入测度不满足凸序"""

    def __init__(self, message: str, witness: Optional[float] = None):
        super().__init__(message)
        self.witness = witness


class MeanMismatch(OrderViolation):
    """两个测度均值不一致，凸序不可能成立"""

    def __init__(self, mean_mu: float, mean_nu: float):
        super().__init__(f"均值不一致: mean(mu)={mean_mu:.12g}, mean(nu)={mean_nu:.12g}")
        self.mean_mu = mean_mu
        self.mean_nu = mean_nu


class ArbitrageDetected(RootBarrierError):
    """期权价格违反单调性或凸性"""

    def __init__(self, index: int, reason: str):
        super().__init__(f"第 {index} 个行权价处存在套利: {reason}")
        self.index = index
        self.reason = reason


class CflViolation(RootBarrierError):
    """显式格式的稳定性条件不满足"""

    def __init__(self, ratio: float, safety: float):
        super().__init__(f"CFL 比值 {ratio:.6g} 超过安全系数 {safety:.6g}")
        self.ratio = ratio
        self.safety = safety


class GridMismatch(RootBarrierError):
    """两个障碍的空间网格不一致"""


class NoConvergence(RootBarrierError):
    """迭代在最大轮数内未收敛"""

    def __init__(self, sweeps: int, detail: str = ""):
        message = f"{sweeps} 轮迭代后仍未收敛"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)
        self.sweeps = sweeps


class TooManyUnstopped(RootBarrierError):
    """未停止路径比例过高，矩估计不可靠"""

    def __init__(self, fraction: float, limit: float):
        super().__init__(f"未停止路径比例 {fraction:.4%} 不低于上限 {limit:.2%}")
        self.fraction = fraction
        self.limit = limit


class EmptySample(RootBarrierError):
    """样本为空"""


class RegressionSingular(RootBarrierError):
    """回归设计矩阵退化"""


class SupportViolation(RootBarrierError):
    """目标分布在支撑下界以下有质量"""


class ConfigError(RootBarrierError):
    """运行配置无效"""
