"""
线程池工具（revsde.utils.threading）。

关键目标：
1) 点值计算、轨道批次、慢变量网格积分都是彼此独立的纯函数，可以放进线程池。
2) 归约顺序只取决于提交顺序，与线程数无关，保证结果逐位可复现。

实现方式：
- ThreadManager: ThreadPoolExecutor + map_ordered
- default_thread_count: --threads > 环境变量 REVSDE_THREADS > os.cpu_count()
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import Future
from concurrent.futures import ThreadPoolExecutor
from typing import Any
from typing import Callable
from typing import Iterable
from typing import List
from typing import Optional
from typing import TypeVar


T = TypeVar("T")
R = TypeVar("R")

THREADS_ENV = "REVSDE_THREADS"

logger = logging.getLogger(__name__)


def default_thread_count(override: Optional[int] = None) -> int:
    """解析线程数：显式参数优先，其次环境变量，最后 CPU 数。"""

    if override is not None:
        return max(1, int(override))
    raw = os.environ.get(THREADS_ENV, "").strip()
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            logger.warning("忽略无法解析的 %s=%r", THREADS_ENV, raw)
    return max(1, os.cpu_count() or 1)


class ThreadManager:
    """
    revsde 的后台线程管理器。

    推荐用法：
    - 数值内核用 map_ordered(fn, chunks) 并行计算，再按顺序拼接。
    - max_workers == 1 时直接在调用线程串行执行，不创建线程池。
    """

    def __init__(self, max_workers: Optional[int] = None, thread_name_prefix: str = "revsde") -> None:
        self.max_workers = default_thread_count(max_workers)
        self._executor: Optional[ThreadPoolExecutor] = None
        if self.max_workers > 1:
            self._executor = ThreadPoolExecutor(
                max_workers=self.max_workers,
                thread_name_prefix=thread_name_prefix,
            )

    def submit(self, fn: Callable[..., T], *args: Any, **kwargs: Any) -> Future:
        if self._executor is None:
            fut: Future = Future()
            try:
                fut.set_result(fn(*args, **kwargs))
            except Exception as e:
                fut.set_exception(e)
            return fut
        return self._executor.submit(fn, *args, **kwargs)

    def map_ordered(self, fn: Callable[[T], R], items: Iterable[T]) -> List[R]:
        """
        并行执行 fn(item)，按 items 的顺序返回结果。

        第一个失败的任务（按顺序）会把异常原样抛出。
        """

        futures = [self.submit(fn, item) for item in items]
        return [f.result() for f in futures]

    def shutdown(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None
