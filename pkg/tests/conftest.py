import numpy as np
import pytest

from blender_lab import covering as cv
from blender_lab import crossmap as cm
from blender_lab import nabs
from blender_lab.geometry import BoxXYZ, Interval


def unit_box():
    return BoxXYZ(Interval(-1.0, 1.0), (Interval(-1.0, 1.0),), (Interval(-1.0, 1.0),))


def diag_map(a=0.5, sy=1.0 / 3.0, sz=0.1, offset=(0.0, 0.0, 0.0), psi=()):
    """Self-map of the unit cube: xbar = a x, y = sy ybar, zbar = sz z."""
    b = unit_box()
    L = [[a, 0.0, 0.0], [0.0, sy, 0.0], [0.0, 0.0, sz]]
    return cm.make_linear_map(1, (1,), b, (b,), L, list(offset), psi)


def pair_arrays(p):
    slots = cm.array_slots(p)
    return cv.ArraySet(tuple(((p.maps[i].source_id, t, i), (p.maps[j].source_id, t, j))
                             for t in p.element_ids for i, j in slots), 2)


@pytest.fixture(scope="session")
def affine3_setup():
    p = cm.affine3()
    bcg = cv.BcgStructure(0.9)
    b = cv.compute_budgets(p)
    return p, bcg, b, cv.strip_windows(p, bcg, b)


@pytest.fixture(scope="session")
def array_setup():
    p = cm.affine_array()
    bcg = cv.BcgStructure(0.9, 0.3, 0.7)
    b = cv.compute_budgets(p)
    return p, bcg, b, cv.strip_windows(p, bcg, b), pair_arrays(p)


@pytest.fixture(scope="session")
def dyadic():
    fam = nabs.dyadic_family(0.045)
    plan = nabs.plan_grid(0.045, 0.9, k=2)
    spec = nabs.select_indices(fam, plan)
    p = nabs.build_markov(fam, spec)
    b = cv.compute_budgets(p, plan.alpha, nabs.grid_offsets(p, spec))
    return fam, plan, spec, p, b, cv.strip_windows(p, plan.bcg, b)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
