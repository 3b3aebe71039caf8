"""Tile planning and seam-free tiled prediction."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from s2hse import mosaic, net, raster
from s2hse.errors import ContractError, InvalidInputError


def coverage_counts(plan):
    """Paint each tile's valid output window; partition means all ones."""
    paint = np.zeros((plan.height // 2, plan.width // 2), dtype=int)
    for t in plan.tiles:
        (r0, r1), (c0, c1) = t.out
        paint[r0:r1, c0:c1] += 1
    return paint


def test_plan_single_tile():
    plan = mosaic.plan_tiles(128, 128, tile=128, margin=16)
    assert len(plan.tiles) == 1
    assert plan.tiles[0].read == ((0, 128), (0, 128))
    assert plan.tiles[0].out == ((0, 64), (0, 64))


def test_plan_smaller_than_tile_is_degenerate():
    plan = mosaic.plan_tiles(64, 100, tile=128, margin=16)
    assert len(plan.tiles) == 1
    assert plan.tiles[0].read == ((0, 100), (0, 64))


def test_plan_256_partition():
    plan = mosaic.plan_tiles(256, 256, tile=128, margin=16)
    assert (coverage_counts(plan) == 1).all()
    for t in plan.tiles:
        (r0, r1), (c0, c1) = t.read
        assert 0 <= r0 < r1 <= 256 and 0 <= c0 < c1 <= 256
        assert r1 - r0 <= 128 and c1 - c0 <= 128


def test_plan_margin_zero_valid():
    plan = mosaic.plan_tiles(256, 384, tile=128, margin=0)
    assert (coverage_counts(plan) == 1).all()


def test_plan_margin_respected_on_interior_edges():
    plan = mosaic.plan_tiles(512, 512, tile=128, margin=16)
    for t in plan.tiles:
        (r0, r1), (c0, c1) = t.read
        (vr0, vr1), (vc0, vc1) = t.out
        if r0 > 0:
            assert 2 * vr0 - r0 >= 16
        if r1 < 512:
            assert r1 - 2 * vr1 >= 16
        if c0 > 0:
            assert 2 * vc0 - c0 >= 16
        if c1 < 512:
            assert c1 - 2 * vc1 >= 16


def test_plan_validation():
    with pytest.raises(InvalidInputError):
        mosaic.plan_tiles(256, 256, tile=127, margin=16)
    with pytest.raises(InvalidInputError):
        mosaic.plan_tiles(256, 256, tile=128, margin=15)   # odd margin
    with pytest.raises(InvalidInputError):
        mosaic.plan_tiles(256, 256, tile=64, margin=32)
    with pytest.raises(InvalidInputError):
        mosaic.plan_tiles(255, 256)


@settings(max_examples=40, deadline=None)
@given(w=st.integers(2, 400), h=st.integers(2, 400),
       tile=st.sampled_from([64, 128, 192]), margin=st.sampled_from([0, 8, 16]))
def test_plan_partition_property(w, h, tile, margin):
    plan = mosaic.plan_tiles(2 * w, 2 * h, tile=tile, margin=margin)
    assert (coverage_counts(plan) == 1).all()


def norm_image(data, gsd=10.0):
    bands, h, w = data.shape
    return raster.Raster(width=w, height=h, bands=bands, gsd=gsd,
                         origin_x=0.0, origin_y=h * gsd, scale=1.0,
                         nodata=-9999.0, dtype="f32", data=data)


def random_model(f=4, depth=2, seed=0):
    model = net.build(net.ArchSpec(f=f, depth=depth), np.random.default_rng(seed))
    model.set_mode("eval")
    return model


def test_predict_zero_weights_prob_half_ties_to_hse():
    model = random_model()
    for p in model.parameters():
        p[...] = 0.0
    image = norm_image(np.random.default_rng(1).random((10, 64, 64)))
    hse, prob = mosaic.predict_map(model, image)
    assert np.array_equal(prob.data[0], np.full((32, 32), 0.5, np.float32))
    assert np.array_equal(hse.data[0], np.ones((32, 32), np.uint8))


def test_predict_output_geometry():
    model = random_model()
    image = norm_image(np.random.default_rng(2).random((10, 128, 96)))
    hse, prob = mosaic.predict_map(model, image)
    assert (hse.width, hse.height, hse.gsd) == (48, 64, 20.0)
    assert (prob.width, prob.height) == (48, 64)
    assert hse.dtype == "u8" and prob.dtype == "f32"
    assert (hse.origin_x, hse.origin_y) == (image.origin_x, image.origin_y)


def test_predict_seam_invariance():
    model = random_model(seed=3)
    image = norm_image(np.random.default_rng(4).random((10, 256, 256)))
    whole = mosaic.predict_map(model, image, mosaic.plan_tiles(256, 256, tile=256, margin=0))
    tiled = mosaic.predict_map(model, image, mosaic.plan_tiles(256, 256, tile=128, margin=16))
    dp = np.abs(whole[1].data[0].astype(np.float64) - tiled[1].data[0].astype(np.float64))
    m = 8  # margin/2 output px from the raster boundary
    assert dp[m:-m, m:-m].max() <= 1e-12
    assert dp.max() <= 1e-6
    assert np.array_equal(whole[0].data, tiled[0].data)


def test_predict_contract_checks():
    model = random_model()
    bad_bands = norm_image(np.zeros((9, 64, 64), dtype=np.float32))
    with pytest.raises(ContractError):
        mosaic.predict_map(model, bad_bands)
    raw = norm_image(np.zeros((10, 64, 64), dtype=np.float32))
    raw.scale = 10000.0
    with pytest.raises(ContractError):
        mosaic.predict_map(model, raw)
    model.set_mode("train")
    with pytest.raises(ContractError):
        mosaic.predict_map(model, norm_image(np.zeros((10, 64, 64), dtype=np.float32)))


def test_predict_nodata_propagates():
    model = random_model(seed=5)
    data = np.random.default_rng(6).random((10, 64, 64)).astype(np.float64)
    data[3, 10:14, 20:24] = -9999.0  # one band nodata in a 4x4 block
    image = norm_image(data)
    hse, prob = mosaic.predict_map(model, image)
    assert (hse.data[0, 5:7, 10:12] == 255).all()
    assert np.isnan(prob.data[0, 5:7, 10:12]).all()
    assert (hse.data[0, :5] != 255).all()
    assert not np.isnan(prob.data[0, 7:]).any()


def test_predict_threads_equal_serial():
    model = random_model(seed=7)
    image = norm_image(np.random.default_rng(8).random((10, 256, 192)))
    plan = mosaic.plan_tiles(192, 256, tile=128, margin=16)
    a = mosaic.predict_map(model, image, plan, threads=1)
    b = mosaic.predict_map(model, image, plan, threads=3)
    assert np.array_equal(a[0].data, b[0].data)
    assert np.array_equal(a[1].data, b[1].data)


def test_predict_deterministic():
    model = random_model(seed=9)
    image = norm_image(np.random.default_rng(10).random((10, 128, 128)))
    a = mosaic.predict_map(model, image)
    b = mosaic.predict_map(model, image)
    assert np.array_equal(a[1].data, b[1].data)


def test_pgm_export(tmp_path):
    model = random_model(seed=11)
    image = norm_image(np.random.default_rng(12).random((10, 64, 64)))
    hse, _ = mosaic.predict_map(model, image)
    path = tmp_path / "map.pgm"
    mosaic.save_pgm(hse, path)
    data = path.read_bytes()
    assert data.startswith(b"P5\n32 32\n255\n")
    assert len(data) == len(b"P5\n32 32\n255\n") + 32 * 32
