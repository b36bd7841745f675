from .threading import ThreadManager
from .threading import default_thread_count

__all__ = ["ThreadManager", "default_thread_count"]
