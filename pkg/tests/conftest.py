from __future__ import annotations

import random

import pytest

from helpers import World


@pytest.fixture
def rng() -> random.Random:
    return random.Random(1234)


@pytest.fixture
def world() -> World:
    return World()
