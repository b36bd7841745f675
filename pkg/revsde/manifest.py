from __future__ import annotations

from typing import Any
from typing import Dict
from typing import List

from pydantic import BaseModel
from pydantic import ConfigDict
from pydantic import Field


class RunManifest(BaseModel):
    """每条命令写出的 manifest.json：命令名 + 完整解析后的配置 + 输出文件列表。"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    command: str
    version: str
    config: Dict[str, Any]
    outputs: List[str] = Field(default_factory=list)
    threads_independent: bool = True
    exit_code: int = 0
