from __future__ import annotations

import logging
import traceback
from typing import Any
from typing import Callable

from .errors import RevsdeError


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_REVERSIBLE = 2


def _log_error(label: str, err: BaseException) -> None:
    if isinstance(err, RevsdeError):
        logger.error("[revsde:%s] %s", label, err, exc_info=err)
    else:
        logger.error("[revsde:%s] 未预期的异常已被隔离", label, exc_info=err)


def guard(
    label: str,
    fn: Callable[..., int],
    *,
    interaction: Any = None,
) -> Callable[..., int]:
    """
    包装一个 CLI 命令：任何异常都被记录并转成退出码 1。

    RevsdeError 只给用户看一行消息；其他异常附带 traceback。
    """

    def wrapped(*args: Any, **kwargs: Any) -> int:
        try:
            return int(fn(*args, **kwargs))
        except Exception as e:
            _log_error(label, e)
            message = str(e) if isinstance(e, RevsdeError) else traceback.format_exc()

            provider = interaction
            if provider is None:
                try:
                    from .core import RuntimeCore

                    provider = RuntimeCore().interaction
                except Exception:
                    provider = None
            try:
                if provider is not None:
                    provider.notify(message, title=f"{label} 失败", level="error")
            except Exception:
                pass
            return EXIT_ERROR

    return wrapped

