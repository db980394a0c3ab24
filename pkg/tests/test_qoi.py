import numpy as np
import pytest

from latticerf.qoi import (
    ElasticitySetup,
    LevelSpec,
    assemble_stiffness,
    coarsen,
    element_stiffness,
    evaluate_qoi,
    solve_homogenized_E,
    solve_homogenized_E_dense,
)
from latticerf.voxelgrid import VoxelGrid


def solid(dims, spacing=(1.0, 1.0, 1.0)):
    return VoxelGrid(np.ones(dims, dtype=np.uint8), spacing)


def sphere_hole(n, radius):
    c = np.indices((n, n, n)) + 0.5 - n / 2
    return VoxelGrid((~((c**2).sum(axis=0) < radius**2)).astype(np.uint8))


class TestCoarsen:
    def test_majority(self):
        data = np.zeros((4, 2, 2), dtype=np.uint8)
        data[:2, 0, 0] = 1  # 2 of 8 in the first block
        data[2:, :, :] = 1
        data[3, 1, 1] = 0  # 7 of 8 in the second block
        g = coarsen(VoxelGrid(data), 2)
        np.testing.assert_array_equal(g.data.ravel(), [0, 1])
        assert g.spacing == (2.0, 2.0, 2.0)

    def test_tie_is_material(self):
        data = np.zeros((2, 2, 2), dtype=np.uint8)
        data[0] = 1
        assert coarsen(VoxelGrid(data), 2).data.item() == 1

    def test_2d_slice(self):
        g = coarsen(VoxelGrid(np.ones((8, 4, 1), dtype=np.uint8)), 4)
        assert g.dims == (2, 1, 1)
        assert g.spacing == (4.0, 4.0, 1.0)

    def test_identity_and_errors(self):
        g = solid((4, 4, 4))
        assert coarsen(g, 1) is g
        with pytest.raises(ValueError):
            coarsen(g, 3)
        with pytest.raises(ValueError):
            coarsen(solid((6, 4, 4)), 4)


class TestElement:
    def test_symmetric_psd_with_rigid_modes(self):
        ke = element_stiffness((1.0, 2.0, 0.5), 0.3)
        np.testing.assert_allclose(ke, ke.T, atol=1e-14)
        w = np.linalg.eigvalsh(ke)
        assert np.sum(np.abs(w) < 1e-10 * w.max()) == 6
        assert w.min() > -1e-12

    def test_translation_free(self):
        ke = element_stiffness((1.0, 1.0, 1.0), 0.25)
        for a in range(3):
            t = np.zeros(24)
            t[a::3] = 1.0
            assert np.max(np.abs(ke @ t)) < 1e-13


class TestSolver:
    @pytest.mark.parametrize("axis", [0, 1, 2])
    def test_all_material(self, axis):
        setup = ElasticitySetup(E_material=210.0, load_axis=axis)
        e = solve_homogenized_E(solid((4, 3, 5), (1.0, 0.5, 2.0)), setup)
        assert e == pytest.approx(210.0, rel=1e-8)

    def test_all_void(self):
        setup = ElasticitySetup(E_material=5.0)
        e = solve_homogenized_E(VoxelGrid(np.zeros((3, 3, 3), dtype=np.uint8)), setup)
        assert e == pytest.approx(setup.void_factor * 5.0, rel=1e-6)

    def test_void_layer_dense(self):
        data = np.ones((4, 4, 4), dtype=np.uint8)
        data[:, :, 1] = 0
        g = VoxelGrid(data)
        e = solve_homogenized_E(g)
        assert e == pytest.approx(solve_homogenized_E_dense(g), rel=1e-8)
        # layer parallel to the load: the remaining material carries it, minus the lost area
        assert e == pytest.approx(0.75, rel=1e-6)

    def test_serial_layers(self):
        # a void layer normal to the load cuts every load path
        data = np.ones((4, 4, 4), dtype=np.uint8)
        data[1] = 0
        assert solve_homogenized_E(VoxelGrid(data)) < 1e-6

    def test_random_dense(self, rng):
        g = VoxelGrid((rng.random((4, 4, 4)) < 0.7).astype(np.uint8))
        setup = ElasticitySetup(rtol=1e-12)
        assert solve_homogenized_E(g, setup) == pytest.approx(solve_homogenized_E_dense(g, setup), rel=1e-8)

    def test_linear_in_modulus(self, rng):
        g = VoxelGrid((rng.random((5, 4, 3)) < 0.6).astype(np.uint8))
        e1 = solve_homogenized_E(g, ElasticitySetup(rtol=1e-12))
        e7 = solve_homogenized_E(g, ElasticitySetup(E_material=7.0, rtol=1e-12))
        assert e7 == pytest.approx(7 * e1, rel=1e-8)

    def test_rotation(self, rng):
        data = (rng.random((4, 5, 6)) < 0.65).astype(np.uint8)
        setup = ElasticitySetup(rtol=1e-12)
        e_x = solve_homogenized_E(VoxelGrid(data), setup)
        # quarter turn about the load axis
        rotated = VoxelGrid(np.ascontiguousarray(np.rot90(data, axes=(1, 2))))
        assert solve_homogenized_E(rotated, setup) == pytest.approx(e_x, rel=1e-6)
        # relabel x as y and load along y
        swapped = VoxelGrid(np.ascontiguousarray(np.swapaxes(data, 0, 1)))
        e_y = solve_homogenized_E(swapped, ElasticitySetup(rtol=1e-12, load_axis="y"))
        assert e_y == pytest.approx(e_x, rel=1e-6)

    def test_stiffness_symmetric(self, rng):
        g = VoxelGrid((rng.random((3, 3, 2)) < 0.5).astype(np.uint8))
        K = assemble_stiffness(g, ElasticitySetup())
        assert abs(K - K.T).max() < 1e-14

    def test_setup_validation(self):
        with pytest.raises(ValueError):
            ElasticitySetup(poisson=0.5)
        with pytest.raises(ValueError):
            ElasticitySetup(void_factor=0.0)
        with pytest.raises(ValueError):
            ElasticitySetup(E_material=-1.0)
        with pytest.raises(ValueError):
            ElasticitySetup(load_axis="w")
        assert ElasticitySetup(load_axis="z").load_axis == 2


class TestLevels:
    def test_spec(self):
        top = LevelSpec(2, 3, (16, 8, 1))
        assert top.factor == 1 and top.dims == (16, 8, 1)
        low = LevelSpec(0, 3, (16, 8, 1))
        assert low.factor == 4 and low.dims == (4, 2, 1)
        assert low.dofs == 3 * 5 * 3 * 2
        dofs = [LevelSpec(k, 4, (32, 32, 32)).dofs for k in range(4)]
        assert dofs == sorted(dofs) and len(set(dofs)) == 4

    def test_porosity_kind(self):
        data = np.ones((4, 4, 1), dtype=np.uint8)
        data[0, 0, 0] = 0
        g = VoxelGrid(data)
        value, seconds = evaluate_qoi(g, None, LevelSpec(1, 2, (4, 4, 1)), "porosity")
        assert value == 1 / 16 and seconds >= 0
        # one void voxel out of four loses the majority vote
        assert evaluate_qoi(g, None, LevelSpec(0, 2, (4, 4, 1)), "porosity")[0] == 0.0

    def test_errors(self):
        g = solid((4, 4, 4))
        with pytest.raises(ValueError):
            evaluate_qoi(g, None, LevelSpec(0, 2, (4, 4, 4)), "density")
        with pytest.raises(ValueError):
            evaluate_qoi(g, None, LevelSpec(0, 2, (8, 4, 4)), "porosity")

    def test_convergence_on_coarsened_hole(self):
        g = sphere_hole(16, 6.5)
        spec = [LevelSpec(k, 3, g.dims) for k in range(3)]
        e = [evaluate_qoi(g, None, s, "youngs_modulus")[0] for s in spec]
        assert abs(e[0] - e[2]) > abs(e[1] - e[2])
        assert 0 < e[2] < 1
