import json

import numpy as np
import pytest

from soundpatch.config import DataConfig
from soundpatch.scenes import (PlacementInfeasibleError, build_dataset,
                               generate_scene, load_manifest, load_scene,
                               load_split, manifest_hash)
from soundpatch.textures import SAMPLE_RATE, render_texture, texture_table


def band_energy(x, lo, hi):
    spec = np.abs(np.fft.rfft(x)) ** 2
    freqs = np.fft.rfftfreq(len(x), 1 / SAMPLE_RATE)
    return spec[(freqs >= lo) & (freqs <= hi)].sum()


def test_single_object_single_patch():
    cfg = DataConfig(min_objects=1, max_objects=1, min_extent=1, max_extent=1)
    scene = generate_scene(0, cfg)
    assert len(scene.objects) == 1
    obj = scene.objects[0]
    assert obj.extent == 1
    mask = scene.masks[0]
    assert mask[obj.patches[0]] == 1.0 and mask.sum() == 1.0
    expected = render_texture(obj.class_id, obj.gain, cfg.clip_seconds, seed=0)
    assert np.allclose(scene.audio_ref, expected)


def test_determinism():
    cfg = DataConfig()
    a = generate_scene(123, cfg)
    b = generate_scene(123, cfg)
    assert np.array_equal(a.image, b.image)
    assert np.array_equal(a.audio_ref, b.audio_ref)
    assert a.caption == b.caption
    assert np.array_equal(a.masks, b.masks)


def test_mask_invariants_and_disjoint_support():
    cfg = DataConfig()
    for seed in range(40):
        scene = generate_scene(seed, cfg)
        occupied = set()
        for i, obj in enumerate(scene.objects):
            mask = scene.masks[i]
            assert abs(mask.sum() - 1.0) < 1e-9
            assert np.all(mask >= 0)
            assert set(np.flatnonzero(mask)) == set(obj.patches)
            assert not occupied & set(obj.patches)
            occupied |= set(obj.patches)
            assert 0 < obj.gain <= 1.0


def test_caption_matches_objects_canonical_order():
    cfg = DataConfig()
    for seed in range(20):
        scene = generate_scene(seed, cfg)
        assert scene.caption == sorted(scene.caption)
        assert set(scene.caption) == {o.class_name for o in scene.objects}


def test_gain_monotone_in_extent():
    cfg = DataConfig()
    from soundpatch.scenes import gain_for_extent
    gains = [gain_for_extent(e, cfg.n_patches) for e in range(1, 17)]
    assert all(g2 > g1 for g1, g2 in zip(gains, gains[1:]))
    assert all(0 < g <= 1 for g in gains)


def test_two_equal_objects_mixture_bands():
    cfg = DataConfig(min_objects=2, max_objects=2, min_extent=2, max_extent=2)
    scene = generate_scene(7, cfg)
    table = texture_table(cfg.num_classes)
    present = {o.class_id for o in scene.objects}
    floor = None
    energies = {}
    for tex in table:
        energies[tex.class_id] = band_energy(scene.audio_ref, tex.band_lo_hz,
                                             tex.band_hi_hz)
    top = max(energies.values())
    for cid, e in energies.items():
        if cid in present:
            assert e > top * 1e-4
        else:
            assert e < top * 1e-4


def test_zeroing_gain_removes_band(rng):
    # mask/audio consistency: rebuild the mixture without one object and its
    # band energy drops to the noise floor
    from soundpatch.textures import mix_textures
    cfg = DataConfig(min_objects=2, max_objects=3)
    for seed in (3, 11, 19):
        scene = generate_scene(seed, cfg)
        table = texture_table(cfg.num_classes)
        removed = scene.objects[0]
        parts = [render_texture(o.class_id, o.gain, cfg.clip_seconds, seed=seed)
                 for o in scene.objects[1:]]
        without = mix_textures(parts)
        tex = table[removed.class_id]
        e_with = band_energy(scene.audio_ref, tex.band_lo_hz, tex.band_hi_hz)
        e_without = band_energy(without, tex.band_lo_hz, tex.band_hi_hz)
        # >= 40 dB below the occupied-band energy (other textures' spectral
        # tails set the floor)
        assert e_without < 1e-4 * e_with


def test_placement_infeasible():
    with pytest.raises(PlacementInfeasibleError):
        generate_scene(0, DataConfig(min_objects=5, max_objects=5, num_classes=4))
    with pytest.raises(PlacementInfeasibleError):
        generate_scene(0, DataConfig(min_objects=4, max_objects=4,
                                     min_extent=5, max_extent=5))


def test_rejects_single_class_inventory():
    with pytest.raises(ValueError):
        generate_scene(0, DataConfig(num_classes=1))


def test_class_histogram_uniform():
    cfg = DataConfig()
    counts = np.zeros(cfg.num_classes)
    n = 1000
    for seed in range(n):
        for obj in generate_scene(seed, cfg).objects:
            counts[obj.class_id] += 1
    total = counts.sum()
    expected = total / cfg.num_classes
    # 3 sigma of the multinomial per-class count
    sigma = np.sqrt(total * (1 / cfg.num_classes) * (1 - 1 / cfg.num_classes))
    assert np.all(np.abs(counts - expected) < 3 * sigma)


def test_build_dataset_roundtrip(small_dataset):
    root, cfg = small_dataset
    train = load_manifest(root, "train")
    test = load_manifest(root, "test")
    assert len(train.scene_ids) == 8 and len(test.scene_ids) == 2
    assert not set(train.scene_ids) & set(test.scene_ids)
    files = list((root / "scenes").iterdir())
    assert len([f for f in files if f.suffix == ".wav"]) == 10
    scene = load_scene(train.scene_ids[0], root)
    assert abs(scene.masks[0].sum() - 1.0) < 1e-9
    assert scene.audio_ref.shape[0] == cfg.data.clip_samples
    meta = json.loads((root / "scenes" / f"{scene.scene_id}.json").read_text())
    assert meta["caption"] == scene.caption


def test_rebuild_identical_manifest(tmp_path):
    cfg = DataConfig(n_train=4, n_test=2)
    build_dataset(cfg, 4, 2, tmp_path / "a", seed=42)
    build_dataset(cfg, 4, 2, tmp_path / "b", seed=42)
    for split in ("train", "test"):
        assert manifest_hash(tmp_path / "a", split) == manifest_hash(tmp_path / "b", split)
    # scene payloads identical too
    a = load_split(tmp_path / "a", "train")
    b = load_split(tmp_path / "b", "train")
    for sa, sb in zip(a, b):
        assert np.array_equal(sa.audio_ref, sb.audio_ref)
        assert np.array_equal(sa.image, sb.image)


def test_bad_counts(tmp_path):
    with pytest.raises(ValueError):
        build_dataset(DataConfig(), 0, 1, tmp_path)
