from __future__ import annotations

from typing import List
from typing import Optional
from typing import Tuple

import numpy as np
import pytest

from revsde import catalog
from revsde.averaging import QuadratureSpec
from revsde.core import RuntimeCore
from revsde.interaction import CallableInteraction


FIELD_NAMES = tuple(catalog.FIELDS)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240607)


@pytest.fixture(params=FIELD_NAMES)
def field_name(request) -> str:
    return request.param


@pytest.fixture
def fields(field_name):
    return catalog.field(field_name)


@pytest.fixture
def random_points(rng):
    def make(d: int, count: int = 100, half_width: float = 2.0) -> np.ndarray:
        return rng.uniform(-half_width, half_width, size=(count, d))

    return make


@pytest.fixture
def quad() -> QuadratureSpec:
    return QuadratureSpec()


@pytest.fixture
def simpson_quad() -> QuadratureSpec:
    return QuadratureSpec(rule="simpson", panels=400)


@pytest.fixture
def notifications():
    """把 RuntimeCore 的交互提供者换成收集器，测试结束后还原。"""

    collected: List[Tuple[str, Optional[str], str]] = []
    core = RuntimeCore()
    previous = core.interaction
    core.set_interaction(CallableInteraction(lambda m, t, lvl: collected.append((m, t, lvl))))
    yield collected
    core.set_interaction(previous)
