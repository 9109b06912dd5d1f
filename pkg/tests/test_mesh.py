import numpy as np
import pytest

from blendtrack import blendshapes as bs
from blendtrack.mesh import (
    FaceMesh,
    MeshFormatError,
    MmScale,
    canthal_scale,
    default_face_mesh,
    deform,
    load_mesh,
    meshes_equal,
    save_mesh,
)


@pytest.fixture(scope="module")
def mesh():
    return default_face_mesh()


def toy_mesh(canthal_distance=1.0):
    base = np.array([
        [0.0, 0.0, 0.0],
        [canthal_distance, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.5, -1.0, 0.0],
    ])
    deltas = {"jawOpen": np.array([[0.0, 0.0, 0.0]] * 3 + [[0.0, -2.0, 0.0]])}
    evals = tuple([(2, "eye")] * 6 + [(3, "mouth")] * 7)
    return FaceMesh(base_vertices=base, deltas=deltas, inner_canthus_left=1,
                    inner_canthus_right=0, eval_vertices=evals).validate()


class TestDeform:
    def test_zero_weights_is_base(self, mesh):
        out = deform(mesh, np.zeros(52))
        assert np.array_equal(out, mesh.base_vertices)

    def test_single_weight_linearity(self):
        m = toy_mesh()
        w = np.zeros(52)
        w[bs.INDEX["jawOpen"]] = 0.25
        out = deform(m, w)
        assert np.allclose(out[3], m.base_vertices[3] + 0.25 * np.array([0.0, -2.0, 0.0]))
        assert np.array_equal(out[:3], m.base_vertices[:3])

    def test_additivity_over_random_pairs(self, mesh):
        rng = np.random.default_rng(4)
        for _ in range(25):
            w1 = rng.random(52) * 0.5
            w2 = rng.random(52) * 0.5
            lhs = (deform(mesh, w1) - mesh.base_vertices) + (deform(mesh, w2) - mesh.base_vertices)
            rhs = deform(mesh, w1 + w2) - mesh.base_vertices
            assert np.allclose(lhs, rhs, atol=1e-12)

    def test_scaling_linearity(self, mesh):
        rng = np.random.default_rng(9)
        w = rng.random(52)
        for alpha in (0.0, 0.25, 0.5, 1.0):
            lhs = deform(mesh, alpha * w) - mesh.base_vertices
            rhs = alpha * (deform(mesh, w) - mesh.base_vertices)
            assert np.allclose(lhs, rhs, atol=1e-12)

    def test_does_not_mutate_mesh(self, mesh):
        before = mesh.base_vertices.copy()
        deltas_before = {k: v.copy() for k, v in mesh.deltas.items()}
        deform(mesh, np.full(52, 0.7))
        assert np.array_equal(mesh.base_vertices, before)
        assert all(np.array_equal(mesh.deltas[k], deltas_before[k]) for k in deltas_before)


class TestCanthalScale:
    def test_ratio_definition(self):
        assert canthal_scale(toy_mesh(1.0), 32.0).millimeters_per_model_unit == pytest.approx(32.0)
        assert canthal_scale(toy_mesh(2.0), 32.0).millimeters_per_model_unit == pytest.approx(16.0)

    def test_rejects_bad_icd(self, mesh):
        with pytest.raises(ValueError):
            canthal_scale(mesh, 0.0)
        with pytest.raises(ValueError):
            canthal_scale(mesh, -5.0)

    def test_degenerate_mesh_rejected(self):
        with pytest.raises(MeshFormatError):
            base = np.zeros((4, 3))
            FaceMesh(base_vertices=base, deltas={}, inner_canthus_left=0,
                     inner_canthus_right=1,
                     eval_vertices=tuple([(2, "eye")] * 6 + [(3, "mouth")] * 7)).validate()

    def test_uniform_rescale_leaves_mm_error_unchanged(self, mesh):
        from blendtrack.metrics import vertex_error
        rng = np.random.default_rng(12)
        gt, pred = rng.random(52), rng.random(52)
        base_err = vertex_error(mesh, canthal_scale(mesh, 32.0), gt, pred)
        s = 3.7
        scaled = FaceMesh(
            base_vertices=mesh.base_vertices * s,
            deltas={k: v * s for k, v in mesh.deltas.items()},
            inner_canthus_left=mesh.inner_canthus_left,
            inner_canthus_right=mesh.inner_canthus_right,
            eval_vertices=mesh.eval_vertices,
        ).validate()
        scaled_err = vertex_error(scaled, canthal_scale(scaled, 32.0), gt, pred)
        assert np.allclose(base_err, scaled_err, rtol=1e-12)


class TestDefaultMesh:
    def test_structure(self, mesh):
        n = len(mesh.base_vertices)
        assert 200 <= n <= 400
        assert set(mesh.deltas) == set(bs.ALL_NAMES)
        for delta in mesh.deltas.values():
            assert delta.shape == (n, 3)
        regions = [r for _, r in mesh.eval_vertices]
        assert regions.count("eye") == 6
        assert regions.count("mouth") == 7
        assert mesh.canthal_distance() > 0

    def test_every_shape_moves_something(self, mesh):
        for name, delta in mesh.deltas.items():
            assert np.abs(delta).max() > 0, name


class TestMeshFile:
    def test_round_trip(self, mesh, tmp_path):
        path = tmp_path / "face.btmesh"
        save_mesh(mesh, path)
        again = load_mesh(path)
        assert meshes_equal(mesh, again)

    def test_unknown_blendshape_rejected(self, tmp_path):
        path = tmp_path / "bad.btmesh"
        save_mesh(toy_mesh(), path)
        text = path.read_text().replace("delta jawOpen", "delta jawSideways")
        path.write_text(text)
        with pytest.raises(MeshFormatError, match="unknown blend shape"):
            load_mesh(path)

    def test_vertex_count_mismatch_rejected(self, tmp_path):
        path = tmp_path / "bad.btmesh"
        save_mesh(toy_mesh(), path)
        lines = path.read_text().splitlines()
        del lines[-1]  # drop the last delta row
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(MeshFormatError, match="(vertex-count mismatch|end of file)"):
            load_mesh(path)

    def test_unknown_directive_rejected(self, tmp_path):
        path = tmp_path / "bad.btmesh"
        save_mesh(toy_mesh(), path)
        path.write_text(path.read_text() + "normals 4\n")
        with pytest.raises(MeshFormatError, match="unknown directive"):
            load_mesh(path)

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bad.btmesh"
        path.write_text("BTMESH 2\nvertices 0\n")
        with pytest.raises(MeshFormatError, match="header"):
            load_mesh(path)

    def test_truncated_file_rejected(self, tmp_path):
        path = tmp_path / "bad.btmesh"
        save_mesh(toy_mesh(), path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:3]) + "\n")
        with pytest.raises(MeshFormatError):
            load_mesh(path)
