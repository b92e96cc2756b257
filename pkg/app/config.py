"""
配置管理
"""
import os
import sys
from typing import Any, Dict, Optional

import yaml
from pydantic import Field, ValidationError
from pydantic_settings import BaseSettings

from app.exceptions import ValidationException
from app.models import AlgorithmOptions, ScenarioConfig

# 只有这些段会被展开成环境变量，scenario/algorithm 段由 pydantic 模型直接校验
SERVICE_SECTIONS = ("service", "log", "solver", "sweep")


def resolve_config_path() -> Optional[str]:
    """从环境变量 CONFIG_PATH 或命令行 --config 参数确定配置文件路径"""
    config_path = os.getenv("CONFIG_PATH")

    # 尝试从命令行参数获取
    if "--config" in sys.argv:
        try:
            idx = sys.argv.index("--config")
            if idx + 1 < len(sys.argv):
                config_path = sys.argv[idx + 1]
        except ValueError:
            pass

    if not config_path or not os.path.exists(config_path):
        return None
    return config_path


def read_yaml(path: Optional[str]) -> Dict[str, Any]:
    """读取 YAML 文件，空文件或不存在时返回空字典"""
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f)
    return data or {}


def flatten_dict(d: Dict[str, Any], parent_key: str = "", sep: str = "_") -> Dict[str, str]:
    items = []
    for k, v in d.items():
        new_key = f"{parent_key}{sep}{k}" if parent_key else k
        if isinstance(v, dict):
            items.extend(flatten_dict(v, new_key, sep=sep).items())
        else:
            items.append((new_key.upper(), str(v)))
    return dict(items)


def load_yaml_config():
    """加载YAML配置文件中的服务段到环境变量"""
    config_path = resolve_config_path()
    if not config_path:
        return

    print(f"Loading config from {config_path}")
    try:
        config = read_yaml(config_path)
        service_part = {k: v for k, v in config.items() if k in SERVICE_SECTIONS and isinstance(v, dict)}
        for k, v in flatten_dict(service_part).items():
            # 只有当环境变量未设置时才设置
            if k not in os.environ:
                os.environ[k] = v
    except Exception as e:
        print(f"Error loading config file: {e}")


# 在Settings类定义之前加载配置
load_yaml_config()


class Settings(BaseSettings):
    """应用配置"""

    # 服务配置
    service_name: str = Field(default="ded2d", alias="SERVICE_NAME")
    service_version: str = Field(default="1.0.0", alias="SERVICE_VERSION")

    # 日志配置
    log_level: str = Field(default="INFO", alias="LOG_LEVEL")
    log_format: str = Field(default="text", alias="LOG_FORMAT")  # json or text
    log_file_path: str = Field(default="logs/ded2d.log", alias="LOG_FILE_PATH")
    log_to_file: bool = Field(default=False, alias="LOG_TO_FILE")  # 是否同时输出到文件

    # 求解器配置
    solver_backend: str = Field(default="cvxopt", alias="SOLVER_BACKEND")
    solver_tol: float = Field(default=1e-8, alias="SOLVER_TOL")
    solver_max_iters: int = Field(default=200, alias="SOLVER_MAX_ITERS")

    # 扫描实验配置
    sweep_workers: int = Field(default=0, alias="SWEEP_WORKERS")  # 0 表示使用全部 CPU
    sweep_seeds_per_point: int = Field(default=20, alias="SWEEP_SEEDS_PER_POINT")
    sweep_base_seed: int = Field(default=0, alias="SWEEP_BASE_SEED")
    sweep_output_dir: str = Field(default="results", alias="SWEEP_OUTPUT_DIR")

    class Config:
        env_file = ".env"
        env_file_encoding = "utf-8"
        case_sensitive = False


def load_scenario_config(path: Optional[str] = None, **overrides: Any) -> ScenarioConfig:
    """
    从配置文件的 scenario 段构建场景配置

    Args:
        path: YAML 文件路径，None 时使用 CONFIG_PATH / --config
        overrides: 覆盖字段

    Returns:
        校验后的 ScenarioConfig，缺省字段取表 I 默认值
    """
    section = read_yaml(path or resolve_config_path()).get("scenario") or {}
    try:
        return ScenarioConfig(**{**section, **overrides})
    except ValidationError as e:
        raise ValidationException(f"Invalid scenario config: {e}") from e


def load_algorithm_options(path: Optional[str] = None, **overrides: Any) -> AlgorithmOptions:
    """从配置文件的 algorithm 段构建算法选项"""
    section = read_yaml(path or resolve_config_path()).get("algorithm") or {}
    try:
        return AlgorithmOptions(**{**section, **overrides})
    except ValidationError as e:
        raise ValidationException(f"Invalid algorithm options: {e}") from e


# 全局配置实例
settings = Settings()
