import numpy as np
import pytest

from tissuegnn.errors import ConfigError, IndexSelectionError, InsufficientPointsError
from tissuegnn.geometry import (
    EdgeList,
    PointCloud,
    grid_surface,
    knn_graph,
    mean_nn_distance,
    rotate_z,
    subsample_named,
)


def brute_force_knn(positions, k):
    """Independent oracle: pure-python scan with (distance, index) ordering."""
    n = len(positions)
    edges = []
    for i in range(n):
        cands = []
        for j in range(n):
            if j == i:
                continue
            d2 = sum((positions[i][c] - positions[j][c]) ** 2 for c in range(3))
            cands.append((d2, j))
        cands.sort()
        edges.extend((i, j) for _, j in cands[: k - 1])
    return edges


# --------------------------------------------------------------------- #
# knn_graph


def test_knn_collinear_example():
    pos = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [10, 0, 0]], dtype=float)
    e = knn_graph(pos, k=3)
    by_dst = {i: list(e.src[e.dst == i]) for i in range(4)}
    assert by_dst[0] == [1, 2]
    assert by_dst[3] == [2, 1]


def test_knn_complete_graph_when_n_equals_k(rng):
    pos = rng.normal(size=(4, 3))
    e = knn_graph(pos, k=4)
    for i in range(4):
        assert sorted(e.src[e.dst == i]) == sorted(set(range(4)) - {i})


def test_knn_coincident_points_tie_by_index_no_self_edge():
    pos = np.zeros((5, 3))
    e = knn_graph(pos, k=3)
    by_dst = {i: list(e.src[e.dst == i]) for i in range(5)}
    # all distances tie at 0: lowest indices win, self excluded
    assert by_dst[0] == [1, 2]
    assert by_dst[1] == [0, 2]
    assert by_dst[4] == [0, 1]
    assert all(i not in by_dst[i] for i in range(5))


def test_knn_rejects_too_few_points(rng):
    with pytest.raises(InsufficientPointsError):
        knn_graph(rng.normal(size=(3, 3)), k=5)


def test_knn_matches_brute_force_200_random_clouds():
    for trial in range(200):
        rng = np.random.default_rng(trial)
        n = int(rng.integers(5, 60)) if trial < 190 else int(rng.integers(200, 512))
        pos = np.round(rng.uniform(0, 10, size=(n, 3)), 1)  # rounding forces ties
        if trial % 3 == 0 and n > 6:
            pos[n // 2] = pos[0]  # coincident pair
        e = knn_graph(pos, k=5)
        got = list(zip(e.dst.tolist(), e.src.tolist()))
        assert got == brute_force_knn(pos.tolist(), 5), f"trial {trial}"


def test_knn_chunking_invariant(rng):
    pos = rng.uniform(size=(97, 3))
    a = knn_graph(pos, k=5, chunk=8)
    b = knn_graph(pos, k=5, chunk=1000)
    assert np.array_equal(a.src, b.src) and np.array_equal(a.dst, b.dst)


# --------------------------------------------------------------------- #
# rotate_z


def test_rotate_unit_x_by_90_about_origin():
    out = rotate_z(np.array([1.0, 0.0, 0.0]), 90.0, pivot=np.zeros(3))
    assert np.allclose(out, [0.0, 1.0, 0.0], atol=1e-12)


def test_rotate_360_is_identity(rng):
    pts = rng.normal(size=(40, 3)) * 50
    assert np.allclose(rotate_z(pts, 360.0, pivot=np.zeros(3)), pts, atol=1e-12)


def test_rotate_180_flips_xy():
    out = rotate_z(np.array([1.0, 1.0, 5.0]), 180.0, pivot=np.zeros(3))
    assert np.allclose(out, [-1.0, -1.0, 5.0], atol=1e-12)


def test_rotate_preserves_pairwise_distances_and_composes(rng):
    pts = rng.uniform(0, 100, size=(30, 3))
    pivot = np.array([50.0, 50.0, 0.0])
    for deg in (17.0, 90.0, 133.7):
        rot = rotate_z(pts, deg, pivot=pivot)
        d0 = np.linalg.norm(pts[:, None] - pts[None, :], axis=2)
        d1 = np.linalg.norm(rot[:, None] - rot[None, :], axis=2)
        assert np.allclose(d0, d1, atol=1e-9)
        two_step = rotate_z(rotate_z(pts, deg / 2, pivot=pivot), deg / 2, pivot=pivot)
        assert np.allclose(two_step, rot, atol=1e-9)


def test_rotate_default_pivot_is_centroid(rng):
    pts = rng.uniform(0, 100, size=(25, 3))
    out = rotate_z(pts, 90.0)
    assert np.allclose(out.mean(axis=0), pts.mean(axis=0), atol=1e-9)
    assert np.array_equal(out[:, 2], pts[:, 2])


# --------------------------------------------------------------------- #
# grid_surface


def test_grid_2x2_corners():
    pos = grid_surface(2, 2, extent=(100.0, 100.0), z=32.0)
    got = {tuple(p) for p in pos}
    assert got == {(0, 0, 32), (0, 100, 32), (100, 0, 32), (100, 100, 32)}


def test_grid_32x32_has_1024_points():
    pos = grid_surface(32, 32)
    assert pos.shape == (1024, 3)
    assert np.all(pos[:, 2] == 32.0)


def test_grid_rejects_single_row():
    with pytest.raises(ConfigError):
        grid_surface(1, 8)


def test_grid_height_function():
    pos = grid_surface(3, 3, extent=(10.0, 10.0), z=lambda x, y: x + y)
    assert pos[0, 2] == 0.0 and pos[-1, 2] == 20.0


def test_halving_pitch_halves_mean_nn_distance():
    coarse = grid_surface(16, 16, extent=(100.0, 100.0))
    fine = grid_surface(31, 31, extent=(100.0, 100.0))  # half the pitch
    ratio = mean_nn_distance(coarse).mean() / mean_nn_distance(fine).mean()
    assert ratio == pytest.approx(2.0, rel=1e-9)


# --------------------------------------------------------------------- #
# subsample_named


def _cloud(rng, n=20):
    return PointCloud(positions=rng.uniform(size=(n, 3)),
                      features=rng.uniform(size=(n, 256)))


def test_subsample_identity(rng):
    c = _cloud(rng)
    out = subsample_named(c, np.arange(len(c)))
    assert np.array_equal(out.positions, c.positions)
    assert np.array_equal(out.features, c.features)


def test_subsample_40_from_1024(rng):
    pos = grid_surface(32, 32)
    cloud = PointCloud(positions=pos, features=rng.uniform(size=(1024, 256)))
    idx = rng.choice(1024, size=40, replace=False)
    out = subsample_named(cloud, idx)
    assert len(out) == 40
    assert np.array_equal(out.positions, pos[idx])


def test_subsample_out_of_range_and_duplicate(rng):
    c = _cloud(rng)
    with pytest.raises(IndexSelectionError):
        subsample_named(c, [0, len(c)])
    with pytest.raises(IndexSelectionError):
        subsample_named(c, [1, 1])


def test_edge_list_shape_guard():
    with pytest.raises(ConfigError):
        EdgeList(dst=np.zeros(3, dtype=np.int64), src=np.zeros(2, dtype=np.int64), k=2)
