# tests/test_procgen.py
from collections import Counter

import numpy as np
import pytest

from modules import procgen
from modules.errors import ConfigurationError, DomainError
from modules.procgen import MushroomParams, Tessellation


def test_max_vertex_deviation_default():
    assert procgen.max_vertex_deviation() == pytest.approx(0.125)


def test_cap_diameter_is_linear_in_age():
    assert procgen.cap_diameter(1.0) == pytest.approx(30.0)
    assert procgen.cap_diameter(0.5) == pytest.approx(15.0)
    with pytest.raises(DomainError):
        procgen.cap_diameter(0.01)


@pytest.mark.parametrize("kwargs", [
    {"age": 0.0},
    {"age": 1.2},
    {"age": 0.5, "randomness": 1.5},
    {"age": 0.5, "randomness": -0.1},
    {"age": 0.5, "age_increment": 2.0},
    {"age": 0.5, "seed": -1},
])
def test_params_out_of_domain(kwargs):
    with pytest.raises(DomainError):
        MushroomParams(**kwargs)


def test_tessellation_minimum():
    with pytest.raises(ConfigurationError):
        Tessellation(radial=6, axial=24)
    with pytest.raises(ConfigurationError):
        Tessellation(radial=32, axial=3)


def test_mature_mushroom_dimensions():
    mesh = procgen.generate_mushroom(MushroomParams(1.0))
    assert mesh.cap_diameter == pytest.approx(30.0)
    assert mesh.horizontal_extent() == pytest.approx(0.030)
    assert mesh.height == pytest.approx(0.01875)
    assert mesh.vertices[:, 2].min() == pytest.approx(0.0)


@pytest.mark.parametrize("tess", [Tessellation(8, 4), Tessellation(32, 24), Tessellation(17, 9)])
def test_mesh_is_closed_and_orientable(tess):
    mesh = procgen.generate_mushroom(MushroomParams(0.7, randomness=0.6, seed=11), tess)
    edges = Counter()
    for a, b, c in mesh.triangles:
        for e in ((a, b), (b, c), (c, a)):
            edges[tuple(int(v) for v in e)] += 1
    assert all(n == 1 for n in edges.values())
    assert all((b, a) in edges for a, b in edges)
    assert mesh.triangles.min() == 0
    assert mesh.triangles.max() == len(mesh.vertices) - 1


def test_mesh_has_positive_volume():
    mesh = procgen.generate_mushroom(MushroomParams(0.8))
    v = mesh.vertices[mesh.triangles]
    volume = np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0
    assert volume > 0


def test_zero_randomness_ignores_seed():
    a = procgen.generate_mushroom(MushroomParams(0.5, seed=1))
    b = procgen.generate_mushroom(MushroomParams(0.5, seed=99))
    assert a.to_bytes() == b.to_bytes()


def test_generation_is_deterministic():
    params = MushroomParams(0.4, randomness=0.8, seed=1234)
    assert procgen.generate_mushroom(params).to_bytes() == procgen.generate_mushroom(params).to_bytes()


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("randomness", [0.1, 0.5, 1.0])
def test_vertex_deviation_is_bounded(seed, randomness):
    age = 0.3 + 0.035 * seed
    nominal = procgen.generate_mushroom(MushroomParams(age))
    varied = procgen.generate_mushroom(MushroomParams(age, randomness=randomness, seed=seed))
    bound = randomness * procgen.max_vertex_deviation() * procgen.cap_diameter(age) / 1000.0
    displacement = np.linalg.norm(varied.vertices - nominal.vertices, axis=1)
    assert displacement.max() <= bound + 1e-12


def test_chain_age_values_clamp():
    assert procgen.chain_age_values(0.9, 0.2, 3) == [0.9, 1.0, 1.0]
    with pytest.raises(DomainError):
        procgen.chain_age_values(0.5, 0.1, 0)


def test_chain_shares_shape_and_grows():
    chain = procgen.chain_ages(MushroomParams(0.2, 0.1, randomness=0.5, seed=7), 4)
    assert [m.params.age for m in chain] == [0.2, 0.3, 0.4, 0.5]
    extents = [m.horizontal_extent() for m in chain]
    assert extents == sorted(extents)
    # one seed, so the shape scales uniformly with age
    scaled = chain[0].vertices * (0.5 / 0.2)
    np.testing.assert_allclose(scaled, chain[3].vertices, atol=1e-12)


def test_bank_layout():
    ages = procgen.bank_ages(4, 20)
    assert len(ages) == 80
    assert ages[0] == pytest.approx(0.05)
    assert ages[19] == pytest.approx(1.0)
    assert ages[20] == pytest.approx(0.05)

    bank = procgen.variant_bank(rows=2, per_row=3, tessellation=Tessellation(8, 4))
    assert len(bank) == 6
    assert [m.params.age for m in bank] == procgen.bank_ages(2, 3)
    assert bank[0].params.seed == bank[2].params.seed
    assert bank[0].params.seed != bank[3].params.seed


def test_default_bank_size():
    assert len(procgen.variant_bank(tessellation=Tessellation(8, 4))) == 80


def test_obj_export(tmp_path):
    mesh = procgen.generate_mushroom(MushroomParams(0.5), Tessellation(8, 4))
    path = procgen.export_obj(mesh, tmp_path / "m.obj")
    lines = path.read_text().splitlines()
    assert sum(line.startswith("v ") for line in lines) == len(mesh.vertices)
    assert sum(line.startswith("f ") for line in lines) == len(mesh.triangles)
