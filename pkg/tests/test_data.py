import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rmsdepth.data import (
    SceneConfig,
    generate_dataset,
    generate_scene,
    manifest_path,
    read_dataset,
    regenerate_from_manifest,
    scene_seeds,
    write_dataset,
)
from rmsdepth.errors import ConfigError, DatasetFormatError

SMALL = SceneConfig(H=32, W=32, n_returns=12)


def test_generation_is_deterministic():
    a, b = generate_scene(11), generate_scene(11)
    assert a.equals(b)
    assert a.depth_gt.tobytes() == b.depth_gt.tobytes()
    assert not a.equals(generate_scene(12))


def test_default_scene_shapes_and_ranges():
    sc = generate_scene(3)
    assert sc.depth_gt.shape == (64, 64) and sc.depth_gt.dtype == np.float32
    assert sc.image.shape == (64, 64, 1)
    assert len(sc.returns) == 40
    assert sc.depth_gt.min() >= 0.5 and sc.depth_gt.max() <= 80.0
    sc.check(0.5, 80.0)
    assert np.all(sc.main_gt[sc.main_mask] > 0)
    assert np.array_equal(sc.sparse_gt[sc.sparse_mask], sc.depth_gt[sc.sparse_mask])


def test_zero_returns_allowed():
    sc = generate_scene(5, SceneConfig(n_returns=0))
    assert sc.returns == []


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_noise_free_returns_match_depth_at_source_row(seed):
    cfg = SceneConfig(H=32, W=32, radar_noise_m=0.0, n_returns=10)
    sc = generate_scene(seed, cfg)
    for r in sc.returns:
        assert r.d == float(sc.depth_gt[r.v_src, r.u])
        assert abs(r.v - r.v_src) <= 10


def test_radar_noise_level():
    cfg = SceneConfig(radar_noise_m=0.2)
    errs = [r.d - float(sc.depth_gt[r.v_src, r.u]) for sc in generate_dataset(30, 1, cfg)
            for r in sc.returns if 1.0 < sc.depth_gt[r.v_src, r.u] < 79.0]
    assert 0.15 < np.std(errs) < 0.25
    assert abs(np.mean(errs)) < 0.05


def test_metric_scale_varies_across_scenes():
    meds = [float(np.median(s.depth_gt)) for s in generate_dataset(20, 2)]
    assert max(meds) / min(meds) > 2.0


def test_seeds_reproducible_and_distinct():
    assert scene_seeds(0, 5) == scene_seeds(0, 5)
    assert len(set(scene_seeds(0, 50))) == 50


def test_invalid_config():
    with pytest.raises(ConfigError):
        generate_scene(0, SceneConfig(H=30))
    with pytest.raises(ConfigError):
        generate_scene(0, SceneConfig(n_returns=10_000))


def test_round_trip(tmp_path):
    scenes = generate_dataset(4, 7, SMALL)
    path = tmp_path / "set.bin"
    mpath = write_dataset(path, scenes, SMALL)
    assert mpath == manifest_path(path)
    back, cfg = read_dataset(path)
    assert cfg == SMALL
    assert len(back) == 4
    assert all(a.equals(b) for a, b in zip(scenes, back))


def test_write_is_byte_stable(tmp_path):
    scenes = generate_dataset(2, 7, SMALL)
    write_dataset(tmp_path / "a.bin", scenes, SMALL)
    write_dataset(tmp_path / "b.bin", scenes, SMALL)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "set.bin"
    write_dataset(path, generate_dataset(2, 0, SMALL), SMALL)
    buf = path.read_bytes()
    for cut in (4, 30, len(buf) // 2, len(buf) - 3):
        path.write_bytes(buf[:cut])
        with pytest.raises(DatasetFormatError):
            read_dataset(path)


def test_version_mismatch_rejected(tmp_path):
    path = tmp_path / "set.bin"
    write_dataset(path, generate_dataset(1, 0, SMALL), SMALL)
    buf = bytearray(path.read_bytes())
    buf[8] = 99
    path.write_bytes(bytes(buf))
    with pytest.raises(DatasetFormatError, match="version"):
        read_dataset(path)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"not a dataset at all")
    with pytest.raises(DatasetFormatError):
        read_dataset(path)


def test_manifest_regenerates_identical_scenes(tmp_path):
    scenes = generate_dataset(3, 9, SMALL)
    mpath = write_dataset(tmp_path / "set.bin", scenes, SMALL)
    m = json.loads(mpath.read_text())
    assert m["seeds"] == [s.seed for s in scenes]
    regen, cfg = regenerate_from_manifest(mpath)
    assert cfg == SMALL
    assert all(a.equals(b) for a, b in zip(scenes, regen))
