from .bus import EventBus
from ..models import BatchFinished
from ..models import StageFinished

__all__ = [
    "EventBus",
    "BatchFinished",
    "StageFinished",
]
