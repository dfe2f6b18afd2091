import numpy as np
import pytest

from src.errors import DegenerateHistogram, EmptyRegion, OutOfBounds
from src.volume import (
    BinaryMask,
    Histogram,
    LabelMap,
    Volume3D,
    compute_histogram,
    confidence_connected_grow,
    connected_components,
    iterative_midpoint_threshold,
    morphology,
    otsu_threshold,
)


def _brute_otsu(counts, centers):
    best, best_t = -np.inf, None
    for t in range(1, len(counts)):
        c1, c2 = counts[:t], counts[t:]
        if c1.sum() == 0 or c2.sum() == 0:
            continue
        m1 = (c1 * centers[:t]).sum() / c1.sum()
        m2 = (c2 * centers[t:]).sum() / c2.sum()
        v1 = (c1 * (centers[:t] - m1) ** 2).sum() / c1.sum()
        v2 = (c2 * (centers[t:] - m2) ** 2).sum() / c2.sum()
        obj = (m2 - m1) ** 2 / (v1 + v2 + 1e-12)
        if obj > best * (1 + 1e-9) + 1e-12:
            best, best_t = obj, t
    return best_t


def _hist(counts):
    counts = np.asarray(counts, dtype=np.int64)
    return Histogram(bin_edges=np.arange(counts.size + 1, dtype=float), counts=counts)


def test_volume_clamps_hu_range():
    vol = Volume3D(np.array([-3000, 0, 5000], dtype=np.int16).reshape(1, 1, 3))
    assert vol.data.tolist() == [[[-1024, 0, 3071]]]
    assert vol.data.dtype == np.int16


def test_volume_rejects_bad_spacing():
    with pytest.raises(ValueError):
        Volume3D(np.zeros((2, 2, 2)), spacing=(1.0, 0.0, 1.0))


def test_histogram_constant_volume():
    vol = Volume3D(np.full((4, 5, 6), -1000, dtype=np.int16))
    h = compute_histogram(vol, bins=16)
    assert h.total == 4 * 5 * 6
    assert np.count_nonzero(h.counts) == 1


def test_histogram_two_values_split():
    data = np.full((4, 4, 4), -1000, dtype=np.int16)
    data[:1] = 0
    h = compute_histogram(Volume3D(data), bins=2)
    assert h.counts.tolist() == [48, 16]


def test_histogram_matches_naive_tally():
    rng = np.random.default_rng(3)
    data = rng.integers(-1000, 500, size=(8, 8, 8)).astype(np.int16)
    h = compute_histogram(Volume3D(data), bins=10)
    naive = np.zeros(10, dtype=int)
    for v in data.ravel():
        k = min(int(np.searchsorted(h.bin_edges, v, side="right")) - 1, 9)
        naive[k] += 1
    assert h.counts.tolist() == naive.tolist()


def test_histogram_roi_and_empty_roi():
    vol = Volume3D(np.arange(27, dtype=np.int16).reshape(3, 3, 3))
    roi = np.zeros((3, 3, 3), dtype=bool)
    roi[0, 0, :] = True
    assert compute_histogram(vol, BinaryMask(roi), bins=4).total == 3
    with pytest.raises(EmptyRegion):
        compute_histogram(vol, BinaryMask(np.zeros((3, 3, 3), dtype=bool)))


def test_otsu_impulses_lowest_maximizer():
    counts = np.zeros(256, dtype=np.int64)
    counts[10] = counts[200] = 500
    r = otsu_threshold(_hist(counts))
    assert r.bin_index == 11
    assert r.threshold == 11.0


def test_otsu_matches_exhaustive_scan():
    rng = np.random.default_rng(0)
    for _ in range(200):
        counts = rng.integers(0, 50, size=32)
        counts[rng.random(32) < 0.3] = 0
        if np.count_nonzero(counts) < 2:
            continue
        h = _hist(counts)
        assert otsu_threshold(h).bin_index == _brute_otsu(h.counts.astype(float), h.centers)


def test_otsu_single_bin_degenerate():
    with pytest.raises(DegenerateHistogram):
        otsu_threshold(_hist([0, 7, 0, 0]))


def test_midpoint_two_peaks_symmetric():
    counts = np.zeros(100, dtype=np.int64)
    counts[20] = counts[60] = 10
    h = _hist(counts)
    r = iterative_midpoint_threshold(h)
    assert r.threshold == pytest.approx((h.centers[20] + h.centers[60]) / 2)


def test_midpoint_fixed_point_on_random_histograms():
    rng = np.random.default_rng(1)
    for _ in range(50):
        counts = rng.integers(0, 20, size=64)
        if np.count_nonzero(counts) < 2:
            continue
        h = _hist(counts)
        r = iterative_midpoint_threshold(h)
        assert r.iterations <= h.bins + 1
        c, x, t = h.counts.astype(float), h.centers, r.bin_index
        again = 0.5 * ((c[:t] * x[:t]).sum() / c[:t].sum() + (c[t:] * x[t:]).sum() / c[t:].sum())
        assert int(np.clip(np.searchsorted(x, again), 1, h.bins - 1)) == t


def test_components_adjacency():
    m = np.zeros((3, 3, 3), dtype=bool)
    m[0, 0, 0] = m[1, 1, 1] = True
    assert connected_components(BinaryMask(m), 26).n_regions == 1
    assert connected_components(BinaryMask(m), 6).n_regions == 2
    assert connected_components(BinaryMask(np.zeros((3, 3, 3), dtype=bool))).n_regions == 0


def _union_find_count(mask):
    parent = {}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    pts = list(zip(*np.nonzero(mask)))
    for p in pts:
        parent[p] = p
    for p in pts:
        for d in [(1, 0, 0), (0, 1, 0), (0, 0, 1)]:
            q = (p[0] + d[0], p[1] + d[1], p[2] + d[2])
            if q in parent:
                parent[find(p)] = find(q)
    return len({find(p) for p in pts})


def test_components_match_union_find():
    rng = np.random.default_rng(5)
    m = rng.random((16, 16, 16)) < 0.3
    assert connected_components(BinaryMask(m), 6).n_regions == _union_find_count(m)


def test_labelmap_relabel_contiguous():
    lm = LabelMap(np.array([0, 4, 4, 9, 2]).reshape(1, 1, 5)).relabel()
    assert lm.data.ravel().tolist() == [0, 2, 2, 3, 1]
    assert lm.n_regions == 3


def test_morphology_radius_zero_identity():
    m = np.random.default_rng(2).random((6, 6, 6)) < 0.5
    assert np.array_equal(morphology(BinaryMask(m), "close", 0).data, m)


def test_dilate_single_voxel_gives_six_ball():
    m = np.zeros((5, 5, 5), dtype=bool)
    m[2, 2, 2] = True
    out = morphology(BinaryMask(m), "dilate", 1.0)
    assert out.count == 7


def test_dilate_honours_anisotropic_spacing():
    m = np.zeros((9, 9, 9), dtype=bool)
    m[4, 4, 4] = True
    out = morphology(BinaryMask(m, spacing=(1.0, 1.0, 2.0)), "dilate", 2.0)
    assert out.data[4, 4, 5] and not out.data[4, 4, 6]
    assert out.data[6, 4, 4]


def test_erode_dilate_duality_away_from_border():
    rng = np.random.default_rng(4)
    m = rng.random((20, 20, 20)) < 0.6
    eroded = morphology(BinaryMask(m), "erode", 1.5).data
    dual = ~morphology(BinaryMask(~m), "dilate", 1.5).data
    assert np.array_equal(eroded[2:-2, 2:-2, 2:-2], dual[2:-2, 2:-2, 2:-2])


def test_close_keeps_solid_cube():
    m = np.zeros((20, 20, 20), dtype=bool)
    m[5:15, 5:15, 5:15] = True
    assert np.array_equal(morphology(BinaryMask(m), "close", 2.0).data, m)


def test_grow_constant_region_exact():
    data = np.full((12, 12, 12), 100, dtype=np.int16)
    data[3:8, 3:8, 3:8] = -800
    out = confidence_connected_grow(Volume3D(data), [(5, 5, 5)], multiplier=2.5, iterations=4)
    assert out.count == 125
    assert out.data[3:8, 3:8, 3:8].all()


def test_grow_multiplier_zero_only_equal_values():
    data = np.zeros((6, 6, 6), dtype=np.int16)
    data[0, :, :] = 1
    out = confidence_connected_grow(Volume3D(data), [(3, 3, 3)], multiplier=0.0, iterations=2)
    assert out.count == 5 * 6 * 6
    assert not out.data[0].any()


def test_grow_noisy_sphere():
    rng = np.random.default_rng(7)
    n = 40
    g = np.indices((n, n, n)) - n / 2 + 0.5
    sphere = (g ** 2).sum(axis=0) <= 12 ** 2
    data = np.where(sphere, 500.0, 0.0) + rng.normal(0, 20, size=sphere.shape)
    seeds = np.argwhere(sphere)[rng.choice(int(sphere.sum()), 10, replace=False)]
    out = confidence_connected_grow(Volume3D(data), seeds, multiplier=2.5, iterations=4)
    recovered = np.count_nonzero(out.data & sphere) / sphere.sum()
    assert recovered >= 0.95
    assert np.count_nonzero(out.data & ~sphere) == 0
    assert connected_components(out, 26).n_regions == 1


def test_grow_seed_outside_volume():
    with pytest.raises(OutOfBounds):
        confidence_connected_grow(Volume3D(np.zeros((4, 4, 4))), [(4, 0, 0)])
