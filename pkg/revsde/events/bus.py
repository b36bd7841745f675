"""
事件总线（revsde.events.bus）。

功能：
1) 提供装饰器式订阅接口：@core.events.on(BatchFinished)
2) background=True 的回调派发到线程池，默认同步调用（进度日志要保持顺序）

事件只用于进度与日志，不参与任何数值结果的计算。
"""

from __future__ import annotations

import inspect
import logging
import threading
from collections import defaultdict
from dataclasses import dataclass
from typing import Any
from typing import Callable
from typing import DefaultDict
from typing import List
from typing import Optional
from typing import Type
from typing import TypeVar


TEvent = TypeVar("TEvent", bound=object)
Handler = Callable[[Any], Any]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class _HandlerRef:
    fn: Handler
    background: bool
    priority: int


class EventBus:
    """线程安全事件总线。"""

    def __init__(self) -> None:
        self._handlers: DefaultDict[Type[Any], List[_HandlerRef]] = defaultdict(list)
        self._lock = threading.RLock()

    def on(
        self,
        event_type: Type[TEvent],
        *,
        background: bool = False,
        priority: int = 0,
    ) -> Callable[[Handler], Handler]:
        """
        订阅一个事件类型。

        Args:
            event_type: 事件类（例如 BatchFinished）。
            background: True 表示回调在线程池中执行。
        """

        def decorator(fn: Handler) -> Handler:
            with self._lock:
                self._handlers[event_type].append(
                    _HandlerRef(fn=fn, background=background, priority=int(priority))
                )
            return fn

        return decorator

    def subscribe(
        self,
        fn: Optional[Handler] = None,
        *,
        event_type: Optional[Type[Any]] = None,
        background: bool = False,
        priority: int = 0,
    ):
        def decorator(real_fn: Handler) -> Handler:
            et = event_type
            if et is None:
                et = _infer_event_type(real_fn)
            if et is None:
                raise TypeError("无法推断事件类型：请为事件参数添加类型注解，或显式传入 event_type。")
            return self.on(et, background=background, priority=priority)(real_fn)

        if fn is None:
            return decorator
        return decorator(fn)

    def unsubscribe(self, fn: Handler) -> None:
        with self._lock:
            for et in list(self._handlers):
                self._handlers[et] = [r for r in self._handlers[et] if r.fn is not fn]

    def emit(self, event: Any) -> None:
        from ..core import RuntimeCore

        with self._lock:
            refs = list(self._handlers.get(type(event), []))
        if not refs:
            return
        refs.sort(key=lambda r: r.priority, reverse=True)
        for ref in refs:
            if ref.background:
                RuntimeCore().threading.submit(self._safe_call, ref.fn, event)
            else:
                self._safe_call(ref.fn, event)

    def _safe_call(self, fn: Handler, event: Any) -> None:
        try:
            fn(event)
        except Exception:
            logger.exception("事件回调异常: %s", type(event).__name__)


def _infer_event_type(fn: Handler) -> Optional[Type[Any]]:
    try:
        sig = inspect.signature(fn, eval_str=True)
        params = list(sig.parameters.values())
        if not params:
            return None
        if params[0].name == "self" and len(params) >= 2:
            p = params[1]
        else:
            p = params[0]
        ann = p.annotation
        if ann is inspect.Parameter.empty or isinstance(ann, str):
            return None
        return ann
    except Exception:
        return None
