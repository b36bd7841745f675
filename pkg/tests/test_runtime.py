from __future__ import annotations

import threading
import time

import pytest

from revsde.core import RuntimeCore
from revsde.core import thread_scope
from revsde.errors import ConfigError
from revsde.events.bus import EventBus
from revsde.interaction import CallableInteraction
from revsde.models import StageFinished
from revsde.safety import EXIT_ERROR
from revsde.safety import guard
from revsde.utils.threading import THREADS_ENV
from revsde.utils.threading import ThreadManager
from revsde.utils.threading import default_thread_count


def test_map_ordered_keeps_submission_order():
    def slow_square(i: int) -> int:
        time.sleep(0.001 * (10 - i))
        return i * i

    manager = ThreadManager(4)
    try:
        assert manager.map_ordered(slow_square, range(10)) == [i * i for i in range(10)]
    finally:
        manager.shutdown()


def test_single_worker_runs_inline():
    manager = ThreadManager(1)
    seen = manager.map_ordered(lambda _: threading.get_ident(), range(3))
    assert set(seen) == {threading.get_ident()}


def test_map_ordered_raises_first_failure():
    def fail_on_odd(i: int) -> int:
        if i % 2:
            raise ValueError(f"bad {i}")
        return i

    with thread_scope(3) as manager:
        with pytest.raises(ValueError, match="bad 1"):
            manager.map_ordered(fail_on_odd, range(6))


def test_thread_count_resolution(monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "3")
    assert default_thread_count() == 3
    assert default_thread_count(5) == 5
    monkeypatch.setenv(THREADS_ENV, "many")
    assert default_thread_count() >= 1


def test_configure_threads_replaces_pool():
    core = RuntimeCore()
    assert core.configure_threads(2).max_workers == 2
    assert core.threading.max_workers == 2
    core.configure_threads(None)


def test_event_bus_priority_and_unsubscribe():
    bus = EventBus()
    calls = []

    @bus.on(StageFinished, priority=1)
    def first(e: StageFinished) -> None:
        calls.append(("first", e.stage))

    @bus.subscribe
    def second(e: StageFinished) -> None:
        calls.append(("second", e.stage))

    bus.emit(StageFinished(stage="average", detail=""))
    assert calls == [("first", "average"), ("second", "average")]

    bus.unsubscribe(first)
    bus.emit(StageFinished(stage="study", detail=""))
    assert calls[-1] == ("second", "study")
    assert len(calls) == 3


def test_event_handler_errors_are_isolated():
    bus = EventBus()
    calls = []

    def broken(e: StageFinished) -> None:
        raise RuntimeError("boom")

    bus.on(StageFinished)(broken)
    bus.on(StageFinished)(lambda e: calls.append(e.detail))
    bus.emit(StageFinished(stage="check", detail="ok"))
    assert calls == ["ok"]


def test_subscribe_requires_annotation():
    with pytest.raises(TypeError):
        EventBus().subscribe(lambda e: None)


def test_guard_maps_errors_to_exit_code(notifications):
    def broken() -> int:
        raise ConfigError("config.json:1:1: 坏了")

    assert guard("check", broken)() == EXIT_ERROR
    message, title, level = notifications[-1]
    assert "config.json:1:1" in message
    assert title == "check 失败"
    assert level == "error"


def test_guard_includes_traceback_for_unexpected_errors():
    collected = []
    provider = CallableInteraction(lambda m, t, lvl: collected.append(m))

    def broken() -> int:
        raise KeyError("x")

    assert guard("simulate", broken, interaction=provider)() == EXIT_ERROR
    assert "Traceback" in collected[0]
    assert guard("simulate", lambda: 2, interaction=provider)() == 2


def test_package_event_namespace():
    import revsde

    seen = []

    @revsde.Event.on(revsde.Event.StageFinished)
    def on_stage(e: StageFinished) -> None:
        seen.append(e.stage)

    try:
        revsde.core.events.emit(StageFinished(stage="check", detail="1 point"))
    finally:
        revsde.core.events.unsubscribe(on_stage)
    revsde.core.events.emit(StageFinished(stage="check", detail="again"))
    assert seen == ["check"]
