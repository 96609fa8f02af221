import json
import os
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.core.errors import ConfigError

current_file_path = Path(__file__).resolve()
ENV_FILE_PATH = os.path.join(current_file_path.parent.parent.parent, ".env")


class Settings(BaseSettings):
    # 应用基本配置
    APP_NAME: str = "Root Barrier Toolkit"
    APP_VERSION: str = "1.0.0"

    # 可选配置项
    LOG_LEVEL: Optional[str] = "INFO"

    # 并行配置：为空时使用 CPU 核数
    ROOT_BARRIER_THREADS: Optional[int] = None
    MC_CHUNK_SIZE: int = 4096

    # 数值默认值
    DEFAULT_CFL_SAFETY: float = 0.9
    DEFAULT_SEED: int = 20240601

    OUTPUT_DIR: str = "outputs"

    model_config = SettingsConfigDict(
        env_file=ENV_FILE_PATH,
        env_file_encoding="utf-8",
        case_sensitive=True,
        extra="ignore"
    )


# 缓存配置实例，避免重复加载
@lru_cache()
def get_settings() -> Settings:
    return Settings()


class SigmaConfig(BaseModel):
    """扩散系数配置"""
    model_config = ConfigDict(extra="forbid")

    kind: Literal["constant", "identity", "table"] = "constant"
    value: float = 1.0
    xs: Optional[List[float]] = None
    values: Optional[List[float]] = None

    @model_validator(mode="after")
    def _check_table(self) -> "SigmaConfig":
        if self.kind == "table":
            if not self.xs or not self.values or len(self.xs) != len(self.values):
                raise ValueError("table 类型需要等长的 xs 与 values")
        return self


class ProblemConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mu: Union[Dict[str, Any], str]
    nu: Union[Dict[str, Any], str]
    sigma: SigmaConfig = Field(default_factory=SigmaConfig)


class GridConfig(BaseModel):
    """空间区间、时间跨度与分辨率；n_x、n_t、cfl_ratio 三者给出两个即可"""
    model_config = ConfigDict(extra="forbid")

    a: Optional[float] = None
    b: Optional[float] = None
    T: float = Field(..., gt=0)
    n_x: Optional[int] = Field(None, ge=3)
    n_t: Optional[int] = Field(None, ge=1)
    cfl_ratio: Optional[float] = Field(None, gt=0)
    cfl_safety: Optional[float] = Field(None, gt=0, le=1)
    store: Literal["dense", "stream"] = "dense"
    contact_tol: float = Field(0.0, ge=0)

    @model_validator(mode="after")
    def _check_resolution(self) -> "GridConfig":
        given = sum(v is not None for v in (self.n_x, self.n_t, self.cfl_ratio))
        if given < 2:
            raise ValueError("n_x、n_t、cfl_ratio 至少需要给出两个")
        if (self.a is None) != (self.b is None):
            raise ValueError("a 与 b 需同时给出或同时省略")
        if self.a is not None and self.a >= self.b:
            raise ValueError(f"区间端点无效: a={self.a}, b={self.b}")
        return self


class McConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_paths: int = Field(100_000, ge=1)
    dt: float = Field(1e-4, gt=0)
    t_max: float = Field(10.0, gt=0)
    seed: Optional[int] = None
    lookup: Literal["crossing", "nearest", "linear", "conservative"] = "crossing"


class VerifyConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    threshold: float = Field(0.02, gt=0)
    dump_samples: bool = False


class OutputConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dir: Optional[str] = None
    solution_stride: int = Field(1, ge=1)


class RunConfig(BaseModel):
    """一次命令行运行的完整配置"""
    model_config = ConfigDict(extra="forbid")

    problem: ProblemConfig
    grid: GridConfig
    mc: McConfig = Field(default_factory=McConfig)
    verify: VerifyConfig = Field(default_factory=VerifyConfig)
    outputs: OutputConfig = Field(default_factory=OutputConfig)
    base_dir: str = "."

    def measure_payload(self, name: str) -> Dict[str, Any]:
        """返回 mu/nu 的 JSON 数据，字符串视为相对配置文件的路径"""
        raw = getattr(self.problem, name)
        if isinstance(raw, dict):
            return raw
        path = raw if os.path.isabs(raw) else os.path.join(self.base_dir, raw)
        try:
            with open(path, "r", encoding="utf-8") as f:
                return json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"无法读取测度文件 {path}: {e}") from e

    def output_dir(self) -> str:
        return self.outputs.dir or get_settings().OUTPUT_DIR


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text.strip().strip('"').strip("'")


def parse_key_values(text: str) -> Dict[str, Any]:
    """解析 `section.key = value` 形式的扁平配置文本"""
    data: Dict[str, Any] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"第 {lineno} 行缺少 '=': {raw_line}")
        key, value = line.split("=", 1)
        parts = [p.strip() for p in key.strip().split(".") if p.strip()]
        if not parts:
            raise ConfigError(f"第 {lineno} 行的键为空")
        node = data
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"第 {lineno} 行的键 {key.strip()} 与已有值冲突")
            node = child
        node[parts[-1]] = _parse_value(value.strip())
    return data


def load_run_config(path: str) -> RunConfig:
    """读取 JSON 或扁平键值格式的运行配置"""
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"无法读取配置文件 {path}: {e}") from e

    if path.endswith(".json"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"配置文件 JSON 格式错误: {e}") from e
    else:
        data = parse_key_values(text)

    data.setdefault("base_dir", os.path.dirname(os.path.abspath(path)))
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"配置校验失败: {e}") from e
