from collections import Counter

import numpy as np
import pytest
from scipy.spatial.distance import pdist
from scipy.stats import truncnorm

from mrtnet.data import (
    CHAIR_PARTS,
    FormatError,
    Mesh,
    augment_scale,
    farthest_point_subsample,
    load_mesh,
    pad_duplicate,
    read_xyz,
    sample_surface,
    sample_triangles,
    synth_dataset,
    synth_shape,
    write_xyz,
)
from mrtnet.spatial import gaussian_scale_sampler, normalize_cloud, uniform_scale_sampler

CUBE_OFF = """OFF
# unit cube
8 12 0
0 0 0
1 0 0
1 1 0
0 1 0
0 0 1
1 0 1
1 1 1
0 1 1
3 0 2 1
3 0 3 2
3 4 5 6
3 4 6 7
3 0 1 5
3 0 5 4
3 2 3 7
3 2 7 6
3 1 2 6
3 1 6 5
3 0 4 7
3 0 7 3
"""


@pytest.fixture
def cube_path(tmp_path):
    p = tmp_path / "cube.off"
    p.write_text(CUBE_OFF)
    return p


def test_off_cube_counts(cube_path):
    mesh = load_mesh(cube_path)
    assert mesh.vertices.shape == (8, 3)
    assert mesh.triangles.shape == (12, 3)
    assert abs(mesh.areas().sum() - 6.0) < 1e-12


def test_off_counts_on_header_line(tmp_path):
    p = tmp_path / "tri.off"
    p.write_text("OFF 3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n")
    assert load_mesh(p).triangles.tolist() == [[0, 1, 2]]


def test_obj_quad_fan(tmp_path):
    p = tmp_path / "quad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvn 0 0 1\nf 1/1/1 2/2/1 3/3/1 4/4/1\n")
    mesh = load_mesh(p)
    assert mesh.triangles.tolist() == [[0, 1, 2], [0, 2, 3]]


@pytest.mark.parametrize("fmt,text,line", [
    ("off", "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n", 6),
    ("obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n", 4),
    ("off", "PLY\n", 1),
    ("off", "OFF\nthree 1 0\n", 2),
])
def test_malformed_mesh_names_line(tmp_path, fmt, text, line):
    p = tmp_path / f"bad.{fmt}"
    p.write_text(text)
    with pytest.raises(FormatError, match=f"line {line}:"):
        load_mesh(p)


def test_cube_samples_lie_on_surface(cube_path):
    pts = sample_surface(load_mesh(cube_path), 1024, seed=0)
    assert pts.shape == (1024, 3)
    assert np.all(pts >= -1e-9) and np.all(pts <= 1 + 1e-9)
    on_face = np.minimum(np.abs(pts), np.abs(pts - 1)).min(axis=1)
    assert on_face.max() < 1e-9


def test_sampling_deterministic(cube_path):
    mesh = load_mesh(cube_path)
    np.testing.assert_array_equal(sample_surface(mesh, 64, seed=3), sample_surface(mesh, 64, seed=3))
    assert not np.array_equal(sample_surface(mesh, 64, seed=3), sample_surface(mesh, 64, seed=4))


def test_sampling_rejects_zero_area_and_bad_n(cube_path):
    flat = Mesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])
    with pytest.raises(ValueError):
        sample_surface(flat, 8)
    with pytest.raises(ValueError):
        sample_surface(load_mesh(cube_path), 100)


def test_area_weighting_chi_square():
    # triangle 0 has area 4.5, triangle 1 has area 0.5
    verts = np.array([[0, 0, 0], [3, 0, 0], [0, 3, 0], [10, 0, 0], [11, 0, 0], [10, 1, 0]], float)
    tris = np.array([[0, 1, 2], [3, 4, 5]])
    _, which = sample_triangles(verts, tris, 10_000, np.random.default_rng(0))
    observed = np.bincount(which, minlength=2)
    expected = np.array([9000.0, 1000.0])
    chi2 = ((observed - expected) ** 2 / expected).sum()
    assert chi2 < 10.83  # 1 dof, p = 0.001


def test_zero_area_triangles_never_sampled():
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5]], float)
    _, which = sample_triangles(verts, np.array([[0, 1, 2], [3, 3, 3]]), 2000, np.random.default_rng(1))
    assert np.all(which == 0)


def test_fps_spreads_better_than_uniform():
    rng = np.random.default_rng(0)
    for _ in range(10):
        verts = rng.normal(size=(12, 3))
        tris = rng.integers(0, 12, size=(8, 3))
        tris = tris[[len(set(t)) == 3 for t in tris]]
        cand, _ = sample_triangles(verts, tris, 256, rng)
        fps = cand[farthest_point_subsample(cand, 64)]
        uni = cand[rng.choice(256, 64, replace=False)]
        assert pdist(fps).min() >= pdist(uni).min()


def test_sphere_radius_before_normalization():
    cloud = synth_shape("sphere", 512, np.random.default_rng(0), normalize=False)
    r = np.linalg.norm(cloud.points / cloud.scale, axis=1)
    assert np.max(np.abs(r - 1.0)) < 1e-6
    assert np.all((cloud.scale >= 0.8) & (cloud.scale <= 1.2))


def test_dataset_balanced_and_deterministic():
    kinds = ["sphere", "cube", "torus"]
    data = synth_dataset(kinds, 300, 32, seed=1)
    assert Counter(s.label for s in data) == {0: 100, 1: 100, 2: 100}
    assert all(s.category == kinds[s.label] for s in data)
    again = synth_dataset(kinds, 300, 32, seed=1)
    assert all(np.array_equal(a.points, b.points) for a, b in zip(data, again))
    for s in data[:10]:
        assert np.all(np.abs(s.points) <= 0.5 + 1e-12)


def test_dataset_rejects_bad_n():
    with pytest.raises(ValueError):
        synth_dataset(["sphere"], 1, 100)


def test_chair_labels_follow_height():
    for seed in range(3):
        c = synth_shape("two-part-chair", 256, np.random.default_rng(seed), normalize=False)
        pts = c.points
        seat_z = pts[c.part_labels == CHAIR_PARTS["seat"], 2]
        back_z = pts[c.part_labels == CHAIR_PARTS["back"], 2]
        assert len(seat_z) and len(back_z)
        assert np.allclose(seat_z, 0.0)
        assert np.all(back_z > 0.0)


def test_pad_duplicate_cases():
    pts = np.arange(12, dtype=float).reshape(4, 3)
    same, _ = pad_duplicate(pts, 4, seed=0)
    np.testing.assert_array_equal(same, pts)
    three = pts[:3]
    out, lab = pad_duplicate(three, 4, seed=0, labels=[7, 8, 9])
    assert out.shape == (4, 3)
    np.testing.assert_array_equal(out[:3], three)
    assert any(np.array_equal(out[3], p) for p in three)
    assert lab[3] == {0: 7, 3: 8, 6: 9}[int(out[3, 0])]
    with pytest.raises(ValueError):
        pad_duplicate(pts, 2)
    with pytest.raises(ValueError):
        pad_duplicate(np.zeros((0, 3)), 4)


def test_pad_never_invents_points():
    rng = np.random.default_rng(0)
    pts = rng.random((37, 3))
    out, _ = pad_duplicate(pts, 64, seed=5)
    src = {tuple(p) for p in pts}
    assert all(tuple(p) in src for p in out)
    assert Counter(map(tuple, out)) >= Counter(map(tuple, pts))


def test_augment_identity_and_modes():
    pts = augment_scale(np.random.default_rng(0).random((64, 3)), mode="none")
    np.testing.assert_allclose(augment_scale(pts, mode="none"), pts, atol=1e-12)
    with pytest.raises(ValueError):
        augment_scale(pts, mode="cubic")


@pytest.mark.parametrize("mode,std", [("gaussian", 0.5), ("gaussian", 0.25), ("uniform", 0.5)])
def test_augment_matches_sampler_draw(mode, std):
    base = np.random.default_rng(1).random((32, 3))
    for seed in range(20):
        rng = np.random.default_rng(seed)
        f = gaussian_scale_sampler(std)(rng) if mode == "gaussian" else uniform_scale_sampler()(rng)
        if mode == "uniform":
            assert np.all((f >= 0.8) & (f <= 1.2))
        expected = normalize_cloud(base * f)
        np.testing.assert_array_equal(augment_scale(base, mode, seed=seed, std=std), expected)


def test_augment_gaussian_factor_std_default():
    rng = np.random.default_rng(0)
    draws = np.array([gaussian_scale_sampler(0.5)(rng) for _ in range(10_000)])
    assert np.all(draws > 0)
    # redrawing non-positive factors truncates N(1, 0.5^2) at zero
    ref = truncnorm(-2.0, np.inf, loc=1.0, scale=0.5)
    assert np.all(np.abs(draws.std(axis=0) - ref.std()) < 0.02)
    assert np.all(np.abs(draws.mean(axis=0) - ref.mean()) < 0.02)


def test_xyz_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1, 1, size=(500, 3))
    labels = np.arange(500)
    write_xyz(tmp_path / "a.xyz", pts, labels)
    back, lab = read_xyz(tmp_path / "a.xyz")
    assert np.max(np.abs(back - pts)) < 1e-8
    np.testing.assert_array_equal(lab, labels)
    write_xyz(tmp_path / "b.xyz", pts)
    back, lab = read_xyz(tmp_path / "b.xyz")
    assert lab is None
    assert np.max(np.abs(back - pts)) < 1e-8


def test_xyz_errors(tmp_path):
    (tmp_path / "empty.xyz").write_text("")
    with pytest.raises(FormatError):
        read_xyz(tmp_path / "empty.xyz")
    (tmp_path / "bad.xyz").write_text("0 0 0\n1 2\n")
    with pytest.raises(FormatError, match="line 2:"):
        read_xyz(tmp_path / "bad.xyz")
