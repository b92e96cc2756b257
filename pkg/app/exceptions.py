"""
自定义异常类型
"""
from typing import List, Optional


class SimulatorException(Exception):
    """仿真器基础异常"""
    pass


class ValidationException(SimulatorException):
    """数据验证异常（维度不一致、非有限值、非法扫描参数）"""
    pass


class ChannelGenerationException(SimulatorException):
    """信道生成异常（退化几何重抽次数耗尽）"""
    pass


class DegenerateInputException(SimulatorException):
    """退化输入（分母为零、展开点分子为零等）"""
    pass


class TrustRegionException(SimulatorException):
    """求值点落在信赖域之外"""
    pass


class LoweringException(SimulatorException):
    """模板集合与子问题类型不匹配"""
    pass


class SolverException(SimulatorException):
    """锥规划求解失败导致运行终止"""
    pass


class InfeasibleInstanceException(SimulatorException):
    """可行点搜索轮数耗尽，实例或门限过紧"""

    def __init__(self, message: str, best_mu: float = float("-inf"), mu_history: Optional[List[float]] = None):
        super().__init__(message)
        self.best_mu = best_mu
        self.mu_history = list(mu_history or [])


class ResourceException(SimulatorException):
    """资源管理异常（输出目录不可写等）"""
    pass
