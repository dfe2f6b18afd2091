import csv
import math

import numpy as np
import pytest

from src.errors import ConstantRoi, EmptyGlcm
from src.radiomics import (
    DIRECTIONS,
    FEATURE_COLUMNS,
    GlcmMatrix,
    QuantizedRoi,
    extract_roi_features,
    feature_rows,
    glcm_averaged,
    glcm_direction,
    lesion_rois,
    quantize,
    srm_segment,
    texture_features,
    write_feature_csv,
)
from src.volume import BinaryMask, Volume3D


def _full(shape):
    return BinaryMask(np.ones(shape, dtype=bool))


def _random_roi(seed=0, shape=(16, 16, 16), L=8):
    rng = np.random.default_rng(seed)
    levels = rng.integers(1, L + 1, size=shape).astype(np.int32)
    return QuantizedRoi(L, levels, 1.0, float(L))


def _naive_counts(q, d):
    L = q.levels
    out = np.zeros((L, L))
    nx, ny, nz = q.data.shape
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                a = q.data[x, y, z]
                x2, y2, z2 = x + d[0], y + d[1], z + d[2]
                if a == 0 or not (0 <= x2 < nx and 0 <= y2 < ny and 0 <= z2 < nz):
                    continue
                b = q.data[x2, y2, z2]
                if b == 0:
                    continue
                out[a - 1, b - 1] += 1
                out[b - 1, a - 1] += 1
    return out


def _naive_features(p):
    """Direct double sums over the tabulated formulas."""
    L = p.shape[0]
    rng = range(1, L + 1)

    def P(i, j):
        return p[i - 1, j - 1]

    def xlog(v):
        return v * math.log(v) if v > 0 else 0.0

    px = [sum(P(i, j) for j in rng) for i in rng]
    py = [sum(P(i, j) for i in rng) for j in rng]
    mux = sum(i * px[i - 1] for i in rng)
    muy = sum(j * py[j - 1] for j in rng)
    sx = math.sqrt(sum((i - mux) ** 2 * px[i - 1] for i in rng))
    sy = math.sqrt(sum((j - muy) ** 2 * py[j - 1] for j in rng))
    psum = {k: sum(P(i, j) for i in rng for j in rng if i + j == k) for k in range(2, 2 * L + 1)}
    pdiff = {k: sum(P(i, j) for i in rng for j in rng if abs(i - j) == k) for k in range(L)}
    hx = -sum(xlog(v) for v in px)
    hy = -sum(xlog(v) for v in py)
    hxy = -sum(xlog(P(i, j)) for i in rng for j in rng)
    hxy1 = -sum(P(i, j) * math.log(px[i - 1] * py[j - 1]) for i in rng for j in rng if P(i, j) > 0)
    hxy2 = -sum(xlog(px[i - 1] * py[j - 1]) for i in rng for j in rng)
    nu = sum(P(i, j) for i in rng for j in rng) / L

    f = {}
    f["f1"] = max(P(i, j) for i in rng for j in rng)
    f["f2"] = sum(P(i, j) for i in rng for j in rng) / (2 * L)
    f["f3"] = min(P(i, j) for i in rng for j in rng)
    f["f4"] = math.sqrt(sum((P(i, j) - f["f2"]) ** 2 for i in rng for j in rng)) / (2 * L)
    f["f5"] = sum(i * j * P(i, j) ** 2 for i in rng for j in rng)
    f["f6"] = sum((i + j - mux - muy) ** 4 * P(i, j) for i in rng for j in rng)
    f["f7"] = sum((i + j - mux - muy) ** 3 * P(i, j) for i in rng for j in rng)
    f["f8"] = sum(abs(i - j) ** 2 * P(i, j) for i in rng for j in rng)
    f["f9"] = sum((i - mux) * (j - muy) * P(i, j) for i in rng for j in rng) / (sx * sy)
    f["f10"] = (sum(i * j * P(i, j) for i in rng for j in rng) - mux * muy) / (sx * sy)
    f["f11"] = -sum(xlog(pdiff[k]) for k in range(L))
    f["f12"] = sum(k * k * pdiff[k] for k in range(L))
    f["f13"] = sum(abs(i - j) * P(i, j) for i in rng for j in rng)
    f["f14"] = sum(P(i, j) ** 2 for i in rng for j in rng)
    f["f15"] = hxy
    f["f16"] = sum(P(i, j) / (1 + abs(i + j)) for i in rng for j in rng)
    f["f17"] = sum(P(i, j) / (1 + abs(i + j) ** 2) for i in rng for j in rng)
    f["f18"] = (f["f9"] - hxy1) / max(hx, hy)
    f["f19"] = math.sqrt(max(0.0, 1 - math.exp(-2 * (hxy2 - f["f9"]))))
    f["f20"] = sum(P(i, j) / (1 + abs(i - j) ** 2 / L) for i in rng for j in rng)
    f["f21"] = sum(P(i, j) / (1 + (i - j) ** 2 / L) for i in rng for j in rng)
    f["f22"] = f["f1"]
    f["f23"] = sum(k * psum[k] for k in psum)
    f["f24"] = -sum(xlog(psum[k]) for k in psum)
    f["f25"] = sum((k - f["f8"]) ** 2 * psum[k] for k in psum)
    f["f26"] = sum((i - nu) ** 2 * P(i, j) for i in rng for j in rng)
    return f


# --------------------------------- region merging ---------------------------------


def test_srm_two_halves_and_constant():
    data = np.zeros((10, 10, 10))
    data[5:] = 1000.0
    labels = srm_segment(Volume3D(data), _full(data.shape), q=32)
    assert labels.n_regions == 2
    assert len(np.unique(labels.data[:5])) == 1

    flat = Volume3D(np.full((8, 8, 8), -700.0))
    for q in (1, 32, 256):
        assert srm_segment(flat, _full((8, 8, 8)), q=q).n_regions == 1


def test_srm_delimits_planted_lesions():
    rng = np.random.default_rng(0)
    shape = (36, 36, 36)
    g = np.indices(shape)
    centres = [(8, 8, 8), (8, 27, 18), (27, 8, 27), (27, 27, 8), (18, 18, 18)]
    spheres = [sum((gi - c) ** 2 for gi, c in zip(g, ctr)) <= 9 for ctr in centres]
    data = np.full(shape, -850.0)
    for s in spheres:
        data[s] = 0.0
    data += rng.normal(0, 20, shape)
    labels = srm_segment(Volume3D(data), _full(shape), q=32)
    assert labels.n_regions >= 5
    for s in spheres:
        ids, counts = np.unique(labels.data[s], return_counts=True)
        region = labels.data == ids[np.argmax(counts)]
        iou = (region & s).sum() / (region | s).sum()
        assert iou >= 0.6


def test_lesion_rois_size_filter():
    data = np.zeros((10, 10, 10))
    data[:3, :3, :3] = 500.0
    data[9, 9, 9] = -1000.0
    labels = srm_segment(Volume3D(data), _full(data.shape))
    rois = lesion_rois(labels, min_voxels=8)
    sizes = sorted(m.count for _, m in rois)
    assert sizes == [27, 1000 - 28]


# ---------------------------------- quantization -----------------------------------


def test_quantize_identity_binning():
    data = np.arange(256, dtype=np.float64).reshape(4, 4, 16)
    q = quantize(Volume3D(data), _full(data.shape), 256)
    assert np.array_equal(q.data, data.astype(np.int32) + 1)


def test_quantize_constant_roi():
    vol = Volume3D(np.full((4, 4, 4), 30.0))
    q = quantize(vol, _full((4, 4, 4)), 8)
    assert q.constant and np.all(q.data == 1)
    with pytest.raises(ConstantRoi):
        quantize(vol, _full((4, 4, 4)), 8, strict=True)


def test_quantize_matches_binning_oracle():
    rng = np.random.default_rng(1)
    data = rng.uniform(-900, 100, (10, 10, 10))
    roi = np.zeros(data.shape, dtype=bool)
    roi[2:8, 1:9, 3:10] = True
    q = quantize(Volume3D(data), BinaryMask(roi), 8)
    vals = data[roi]
    lo, hi = vals.min(), vals.max()
    edges = lo + (hi - lo + 1e-6) * np.arange(1, 8) / 8
    expected = np.searchsorted(edges, vals, side="right") + 1
    got = q.data[roi[2:8, 1:9, 3:10]]
    assert np.array_equal(np.bincount(got, minlength=9), np.bincount(expected, minlength=9))
    assert got.min() >= 1 and got.max() <= 8


# -------------------------------------- GLCM ---------------------------------------


def test_direction_set():
    assert len(DIRECTIONS) == 13
    assert len({tuple(-c for c in d) for d in DIRECTIONS} & set(DIRECTIONS)) == 0


def test_glcm_constant_and_stripes():
    const = QuantizedRoi(4, np.ones((3, 3, 3), dtype=np.int32), 0.0, 0.0, constant=True)
    m = glcm_direction(const, (1, 0, 0))
    assert m[0, 0] == m.sum() > 0

    stripes = np.array([1, 2, 1, 2], dtype=np.int32).reshape(4, 1, 1)
    m = glcm_direction(QuantizedRoi(2, stripes, 0.0, 1.0), (1, 0, 0))
    assert m[0, 1] == m[1, 0] == 3 and m[0, 0] == m[1, 1] == 0


def test_glcm_direction_matches_naive_oracle():
    q = _random_roi(seed=2)
    q.data[q.data == 3] = 0  # holes: pairs must have both voxels inside
    for d in [(1, 0, 0), (0, 1, -1), (1, -1, 1)]:
        assert np.array_equal(glcm_direction(q, d), _naive_counts(q, d))


def test_glcm_rejects_non_unitary_offset():
    with pytest.raises(ValueError):
        glcm_direction(_random_roi(), (2, 0, 0))


def test_glcm_averaged_definitions():
    const = QuantizedRoi(8, np.ones((3, 3, 3), dtype=np.int32), 0.0, 0.0, constant=True)
    g = glcm_averaged(const)
    assert g.p[0, 0] == 1.0
    assert g.hx == 0.0 and g.hy == 0.0

    pair = QuantizedRoi(4, np.array([1, 3], dtype=np.int32).reshape(2, 1, 1), 0.0, 1.0)
    g = glcm_averaged(pair)
    assert g.p[0, 2] == g.p[2, 0] == 0.5
    assert np.array_equal(g.direction_counts.sum(axis=0), glcm_direction(pair, (1, 0, 0)))

    q = _random_roi(seed=3)
    g = glcm_averaged(q)
    mean = np.mean([glcm_direction(q, d) for d in DIRECTIONS], axis=0)
    assert np.allclose(g.p, mean / mean.sum(), rtol=0, atol=1e-15)
    assert g.p.sum() == pytest.approx(1.0)
    assert np.allclose(g.p, g.p.T)
    assert g.mu_x == pytest.approx(g.mu_y) and g.hx == pytest.approx(g.hy)


def test_glcm_isotropic_directions_agree():
    q = _random_roi(seed=4, shape=(24, 24, 24), L=4)
    g = glcm_averaged(q)
    for d in DIRECTIONS:
        m = glcm_direction(q, d)
        assert np.abs(m / m.sum() - g.p).max() < 0.01


def test_single_voxel_roi_has_no_pairs():
    with pytest.raises(EmptyGlcm):
        glcm_averaged(QuantizedRoi(8, np.array([[[5]]], dtype=np.int32), 0.0, 1.0))


# ------------------------------------- features ------------------------------------


def test_features_of_constant_roi():
    g = GlcmMatrix.from_counts(np.diag([4.0, 0, 0, 0]))
    f = texture_features(g, np.full(10, 40.0)).values
    assert f["f14"] == 1.0 and f["f15"] == 0.0 and f["f8"] == 0.0 and f["f22"] == 1.0
    assert f["f18"] == 0.0
    assert f["global_std"] == 0.0 and f["global_mean"] == 40.0


def test_checkerboard_contrast():
    g = GlcmMatrix.from_counts(np.array([[0.0, 6.0], [6.0, 0.0]]))
    assert texture_features(g, np.array([1.0, 2.0])).values["f8"] == pytest.approx(1.0)


def test_features_match_naive_oracle():
    q = _random_roi(seed=5, shape=(10, 10, 10), L=8)
    g = glcm_averaged(q)
    vec = texture_features(g, np.arange(20.0), variant="tabulated")
    oracle = _naive_features(g.p)
    for name, expected in oracle.items():
        assert vec.values[name] == pytest.approx(expected, rel=1e-9, abs=1e-12), name


def test_feature_ranges_and_variants():
    g = glcm_averaged(_random_roi(seed=6))
    tab = texture_features(g, np.arange(5.0)).values
    cls = texture_features(g, np.arange(5.0), variant="classical").values
    assert 0 < tab["f14"] <= 1 and tab["f15"] >= 0 and 0 < tab["f22"] <= 1
    for v in (tab, cls):
        assert 0 < v["f16"] <= 1 and 0 < v["f17"] <= 1
        assert all(math.isfinite(x) for x in v.values())
    assert tab["f18"] != cls["f18"]
    assert cls["f18"] == pytest.approx((g.hxy - g.hxy1) / max(g.hx, g.hy))


def test_features_invariant_under_bin_preserving_transform():
    rng = np.random.default_rng(7)
    data = rng.uniform(-900, 100, (8, 8, 8))
    roi = _full(data.shape)
    a = extract_roi_features(Volume3D(data), roi, levels=[16])[0]
    b = extract_roi_features(Volume3D(2.0 * data + 500.0), roi, levels=[16])[0]
    for i in range(1, 27):
        assert a.values[f"f{i}"] == pytest.approx(b.values[f"f{i}"], rel=1e-12)


def test_feature_rows_csv(tmp_path):
    rng = np.random.default_rng(8)
    data = rng.normal(-500, 100, (6, 6, 6))
    vecs = extract_roi_features(Volume3D(data), _full(data.shape), levels=[8, 16], roi_id="r1", label="nodule")
    assert [v.L for v in vecs] == [8, 16]
    path = write_feature_csv(feature_rows(vecs), tmp_path / "features.csv")
    with path.open() as f:
        rows = list(csv.reader(f))
    assert rows[0] == FEATURE_COLUMNS
    assert rows[0][:3] == ["roi_id", "L", "label"] and rows[0][-4:] == [
        "global_max",
        "global_mean",
        "global_min",
        "global_std",
    ]
    assert rows[1][:3] == ["r1", "8", "nodule"]
