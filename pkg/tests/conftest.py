import functools

import numpy as np
import pytest

from hdgstokes import mesh as M
from hdgstokes.assembly import AssemblyConfig, assemble_blocks
from hdgstokes.condensation import build_local_projector, build_three_field, build_two_field
from hdgstokes.fespace import SpaceConfig, Variant, build_layout

SQUARE = ((-1.0, 1.0), (-1.0, 1.0))
ACCEPTANCE_LINES = []


def smooth_force(x, y):
    return np.sin(3 * x) * y, np.cos(x + y)


def smooth_boundary(x, y):
    return np.sin(np.pi * x) * y ** 2, x * y


@functools.lru_cache(maxsize=None)
def square_mesh(target_h=0.5, seed=0, refinements=0):
    m = M.generate_unstructured(SQUARE, target_h, seed=seed)
    for _ in range(refinements):
        m = M.refine_uniform(m)
    return m


@functools.lru_cache(maxsize=None)
def discretization(variant="HDG", target_h=0.5, seed=0, refinements=0, data=True, gamma=0.0):
    """(layout, blocks, local, two-field, three-field) on a square mesh."""
    m = square_mesh(target_h, seed, refinements)
    layout = build_layout(m, SpaceConfig(2, Variant(variant)))
    f, g = (smooth_force, smooth_boundary) if data else (None, None)
    blocks = assemble_blocks(layout, AssemblyConfig(gamma=gamma), f, g)
    local = build_local_projector(blocks)
    return layout, blocks, local, build_two_field(local), build_three_field(local)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def two_tri():
    return M.unit_square_two_triangles()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
