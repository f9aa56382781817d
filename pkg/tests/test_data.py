import logging

import numpy as np
import pytest

from volperceiver import data as D


def _scene(size=16, with_mask=True, sid="s"):
    rng = np.random.default_rng(0)
    bands = {n: rng.uniform(0, 1, (size, size)).astype(np.float32) for n in ("R", "G", "B", "IR")}
    bands["DSM"] = rng.uniform(100, 120, (size, size)).astype(np.float32)
    mask = rng.integers(0, 4, (size, size)).astype(np.uint8) if with_mask else None
    return D.MultimodalScene(sid, bands, mask, num_classes=4)


def test_ndvi_values():
    assert D.derive_ndvi(np.array([0.3]), np.array([0.3]))[0] == 0.0
    assert D.derive_ndvi(np.array([0.8]), np.array([0.2]))[0] == pytest.approx(0.6, abs=1e-5)
    assert D.derive_ndvi(np.array([0.0]), np.array([0.0]))[0] == 0.0
    with pytest.raises(ValueError):
        D.derive_ndvi(np.zeros(2), np.zeros(3))


def test_ndsm_scaling():
    out = D.normalize_ndsm(np.array([0.0, 5.0, 10.0]))
    np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])
    np.testing.assert_array_equal(D.normalize_ndsm(np.full((3, 3), 7.0)), 0.0)


def test_recipes_channel_order():
    scene = _scene()
    v = D.stack_modalities(scene, "vaihingen")
    ir, r = scene.bands["IR"].astype(np.float64), scene.bands["R"].astype(np.float64)
    np.testing.assert_allclose(v[4], D.derive_ndvi(ir, r), atol=1e-6)
    np.testing.assert_allclose(v[2], ir, atol=1e-7)
    p = D.stack_modalities(scene, "potsdam")
    np.testing.assert_allclose(p[4], D.normalize_ndsm(scene.bands["DSM"]), atol=1e-6)
    np.testing.assert_allclose(p[2], scene.bands["B"])


def test_stacked_channel_ranges():
    v = D.stack_modalities(D.synth_dataset(3, 1, 32)[0], "vaihingen")
    assert v[:4].min() >= 0 and v[:4].max() <= 1
    assert v[4].min() >= -1 and v[4].max() <= 1


def test_eight_bit_optical_is_rescaled():
    scene = _scene()
    scene.bands["R"] = np.full((16, 16), 255.0, dtype=np.float32)
    assert D.stack_modalities(scene, "potsdam")[0].max() == 1.0


def test_recipe_errors():
    with pytest.raises(ValueError):
        D.stack_modalities(_scene(), ["IR"])
    scene = _scene()
    del scene.bands["DSM"]
    with pytest.raises(KeyError):
        D.stack_modalities(scene, "potsdam")


def test_scene_validation():
    with pytest.raises(ValueError):
        D.MultimodalScene("x", {"R": np.zeros((2, 2)), "G": np.zeros((3, 2))})
    with pytest.raises(ValueError):
        D.MultimodalScene("x", {"R": np.zeros((2, 2))}, np.full((2, 2), 5, np.uint8), num_classes=4)


def test_tile_grid_counts():
    big = D.MultimodalScene("a", {"R": np.zeros((1024, 1024)), "G": np.zeros((1024, 1024)),
                                  "IR": np.zeros((1024, 1024)), "DSM": np.zeros((1024, 1024))})
    tiles = D.tile_scene(big, 512)
    assert len(tiles) == 4 and not any(t.padded for t in tiles)
    assert tiles[2].origin == ("a", 512, 0)
    odd = D.MultimodalScene("b", {k: np.zeros((1000, 1000)) for k in ("R", "G", "IR", "DSM")})
    tiles = D.tile_scene(odd, 512)
    assert len(tiles) == 4
    assert [t.padded for t in tiles] == [False, True, True, True]
    assert tiles[0].features.shape == (5, 512, 512)


def test_edge_tiles_are_reflected():
    stacked = np.arange(5 * 5 * 5, dtype=np.float32).reshape(5, 5, 5)
    tiles = D.tile_array(stacked, None, 4)
    assert len(tiles) == 4
    corner = tiles[3].features  # rows/cols 4..7, three of which are padding
    np.testing.assert_array_equal(corner[:, 0, 0], stacked[:, 4, 4])
    np.testing.assert_array_equal(corner[:, 1, 1], stacked[:, 3, 3])


@pytest.mark.parametrize("stride", [3, 5, 8])
def test_tiling_is_exhaustive(stride):
    h = w = 21
    stacked = np.zeros((5, h, w), dtype=np.float32)
    covered = np.zeros((h, w), dtype=bool)
    for t in D.tile_array(stacked, None, 8, stride):
        _, r, c = t.origin
        covered[r:r + 8, c:c + 8] = True
    assert covered.all()


def test_tile_larger_than_scene():
    with pytest.raises(ValueError):
        D.tile_scene(_scene(16), 32)


def test_benchmark_split_sizes():
    v = D.SplitSpec.from_dict(D.VAIHINGEN_SPLIT)
    assert (len(v.train), len(v.val), len(v.test)) == (15, 1, 17)
    p = D.SplitSpec.from_dict(D.POTSDAM_SPLIT)
    assert (len(p.train), len(p.val), len(p.test)) == (22, 1, 14)


def test_split_by_ids(caplog):
    scenes = [_scene(sid=s) for s in ("a", "b", "c", "d")]
    with caplog.at_level(logging.WARNING):
        train, val, test = D.split_by_ids(scenes, D.SplitSpec(["a", "zz"], ["b"], ["c"]))
    assert [s.scene_id for s in train + val + test] == ["a", "b", "c"]
    assert "zz" in caplog.text and "d" in caplog.text
    with pytest.raises(ValueError):
        D.SplitSpec(["a"], ["a"], [])
    with pytest.raises(ValueError):
        D.split_by_ids([_scene(sid="a"), _scene(sid="a")], D.SplitSpec(["a"]))


def test_split_text_round_trip():
    spec = D.SplitSpec(["1", "3"], ["30"], ["2"])
    assert D.SplitSpec.parse(spec.dump()) == spec
    assert D.SplitSpec.parse("# comment\ntrain: a, b\n\ntest: c\n") == D.SplitSpec(["a", "b"], [], ["c"])


def test_synthetic_is_deterministic():
    a, b = D.synth_dataset(5, 2, 48), D.synth_dataset(5, 2, 48)
    for s, t in zip(a, b):
        assert s.mask.tobytes() == t.mask.tobytes()
        for k in s.bands:
            assert s.bands[k].tobytes() == t.bands[k].tobytes()
    with pytest.raises(ValueError):
        D.synth_dataset(0, 1, 16)


def test_synthetic_small_class_properties():
    scenes = D.synth_dataset(0, 6, 64)
    masks = np.stack([s.mask for s in scenes])
    car = masks == 3
    assert 0 < car.mean() < 0.03
    background = masks == 0
    for band in ("R", "G", "B", "IR"):
        values = np.stack([s.bands[band] for s in scenes])
        assert abs(values[car].mean() - values[background].mean()) < 0.05, band
    # the height channel is what separates cars from their surroundings
    stacked = np.stack([D.stack_modalities(s) for s in scenes])
    rel = []
    for i, s in enumerate(scenes):
        ndsm = stacked[i, 3]
        ring = np.zeros_like(car[i])
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                ring |= np.roll(np.roll(car[i], dy, 0), dx, 1)
        ring &= masks[i] == 0
        if car[i].any():
            rel.append(ndsm[car[i]].mean() - ndsm[ring].mean())
    assert np.mean(rel) > 0


def test_mmrt_round_trip_bit_exact(tmp_path):
    scene = _scene()
    D.write_mmrt(tmp_path / "s.mmrt", scene)
    back = D.read_mmrt(tmp_path / "s.mmrt")
    assert list(back.bands) == list(scene.bands)
    for k in scene.bands:
        assert back.bands[k].tobytes() == scene.bands[k].tobytes()
    assert back.mask.tobytes() == scene.mask.tobytes()
    size = (tmp_path / "s.mmrt").stat().st_size
    header = 5 + 16 + sum(len(k) + 1 for k in scene.bands)
    assert size == header + 4 * 16 * 16 * 5 + 16 * 16
    D.write_mmrt(tmp_path / "again.mmrt", back)
    assert (tmp_path / "again.mmrt").read_bytes() == (tmp_path / "s.mmrt").read_bytes()


def test_mmrt_without_mask_and_corruption(tmp_path):
    D.write_mmrt(tmp_path / "n.mmrt", _scene(with_mask=False))
    assert D.read_mmrt(tmp_path / "n.mmrt").mask is None
    raw = (tmp_path / "n.mmrt").read_bytes()
    (tmp_path / "bad.mmrt").write_bytes(raw[:-3])
    with pytest.raises(ValueError):
        D.read_mmrt(tmp_path / "bad.mmrt")
    (tmp_path / "magic.mmrt").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        D.read_mmrt(tmp_path / "magic.mmrt")


def test_pgm_ppm_round_trip(tmp_path):
    mask = np.random.default_rng(1).integers(0, 4, (7, 9)).astype(np.uint8)
    D.write_pgm(tmp_path / "m.pgm", mask)
    np.testing.assert_array_equal(D.read_pgm(tmp_path / "m.pgm"), mask)
    D.write_ppm(tmp_path / "m.ppm", mask, D.SYNTH_CLASSES)
    rgb = D.read_ppm(tmp_path / "m.ppm")
    np.testing.assert_array_equal(rgb, D.class_palette(D.SYNTH_CLASSES)[mask])


def test_rgb_label_conversion():
    palette = D.class_palette(D.ISPRS_CLASSES)
    idx = np.array([[0, 4], [1, 5]])
    np.testing.assert_array_equal(D.rgb_labels_to_index(palette[idx]), idx)


def test_convert_images(tmp_path):
    from PIL import Image
    rng = np.random.default_rng(2)
    top = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
    Image.fromarray(top).save(tmp_path / "top.png")
    Image.fromarray(rng.uniform(0, 50, (8, 8)).astype(np.float32), mode="F").save(tmp_path / "dsm.tif")
    scene = D.convert_images("t", tmp_path / "top.png", tmp_path / "dsm.tif", ("IR", "R", "G"))
    np.testing.assert_array_equal(scene.bands["IR"], top[..., 0])
    assert D.stack_modalities(scene, "vaihingen").shape == (5, 8, 8)
