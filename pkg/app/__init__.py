"""
ded2d
IRS 辅助的数据与能量一体化网络（共存 D2D 链路）最大最小吞吐量 SCA 仿真器
"""

__version__ = "1.0.0"
