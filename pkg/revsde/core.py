"""
revsde 运行时核心对象（RuntimeCore）。

RuntimeCore 是一个轻量级的单例"运行时容器"，主要职责：
- 统一提供：线程池、事件总线、交互提供者
- 数值模块需要并行时从这里拿 ThreadManager，CLI 用 --threads 重新配置

线程约束：
- 数值内核只读共享的 FieldSet，不修改任何状态
- 归约一律走 ThreadManager.map_ordered，保证与线程数无关
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Iterator
from typing import Optional

from .events.bus import EventBus
from .interaction import InteractionProvider
from .interaction import SilentInteraction
from .utils.threading import ThreadManager


class RuntimeCore:
    """revsde 单例核心容器。"""

    _instance: Optional["RuntimeCore"] = None
    _instance_lock = threading.Lock()

    def __new__(cls) -> "RuntimeCore":
        if cls._instance is None:
            with cls._instance_lock:
                if cls._instance is None:
                    inst = super().__new__(cls)
                    inst._lock = threading.RLock()
                    inst._threading = None
                    inst.events = EventBus()
                    inst.interaction = SilentInteraction()
                    cls._instance = inst
        return cls._instance

    @property
    def threading(self) -> ThreadManager:
        """懒创建的线程池；线程数按 default_thread_count() 解析。"""

        with self._lock:
            if self._threading is None:
                self._threading = ThreadManager()
            return self._threading

    def configure_threads(self, max_workers: Optional[int]) -> ThreadManager:
        """按给定线程数重建线程池（None 表示回到环境变量/CPU 数）。"""

        with self._lock:
            old = self._threading
            self._threading = ThreadManager(max_workers)
        if old is not None:
            old.shutdown()
        return self._threading

    def set_interaction(self, provider: InteractionProvider) -> None:
        """显式替换交互提供者（CLI 用 stderr，测试可收集消息）。"""

        self.interaction = provider


@contextmanager
def thread_scope(threads: Optional[int] = None) -> Iterator[ThreadManager]:
    """数值函数的 threads 参数：None 用全局线程池，整数临时建一个并在退出时关闭。"""

    if threads is None:
        yield RuntimeCore().threading
        return
    manager = ThreadManager(threads)
    try:
        yield manager
    finally:
        manager.shutdown()
