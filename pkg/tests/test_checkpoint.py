import struct

import numpy as np
import pytest

from clearsplat.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from clearsplat.config import RunConfig
from clearsplat.synthcam import TrajectoryConfig, make_dataset
from clearsplat.training import create_state, gather_params, render_frame

_TINY = dict(n_frames=4, trajectory=TrajectoryConfig(width=24, height=24))


def _state(ablation="lim", seed=0):
    cfg = RunConfig(ablation=ablation, width=24, height=24, frames=4,
                    n_init_points=200, omap_size=16, hash_levels=4, seed=seed)
    dataset = make_dataset(seed, **_TINY)
    state = create_state(dataset, cfg, np.random.Generator(np.random.PCG64(seed)))
    state.iteration = 57
    return dataset, state


def test_roundtrip_is_bit_identical(tmp_path):
    _, state = _state()
    p = tmp_path / "a.ckpt"
    save_checkpoint(p, state)
    loaded = load_checkpoint(p)
    a, b = gather_params(state), gather_params(loaded)
    assert sorted(a) == sorted(b)
    for name in a:
        assert a[name].dtype == b[name].dtype, name
        np.testing.assert_array_equal(a[name], b[name], err_msg=name)
    assert loaded.config == state.config
    assert loaded.iteration == 57
    assert loaded.scene_extent == pytest.approx(state.scene_extent)


def test_roundtrip_renders_identically(tmp_path):
    dataset, state = _state()
    p = tmp_path / "a.ckpt"
    save_checkpoint(p, state)
    loaded = load_checkpoint(p)
    cam = dataset.frames[1].camera
    want = render_frame(state, cam)
    got = render_frame(loaded, cam)
    np.testing.assert_array_equal(got.image, want.image)
    np.testing.assert_array_equal(got.phi, want.phi)
    np.testing.assert_array_equal(got.obstruction, want.obstruction)


@pytest.mark.parametrize("ablation", ["baseline", "nom", "ad"])
def test_roundtrip_per_ablation_structure(tmp_path, ablation):
    # baseline has no field/omap, nom an ungated field, ad adds the opacity map
    _, state = _state(ablation=ablation)
    p = tmp_path / "a.ckpt"
    save_checkpoint(p, state)
    loaded = load_checkpoint(p)
    assert (loaded.field is None) == (state.field is None)
    assert (loaded.omap is None) == (state.omap is None)
    if state.field is not None:
        assert loaded.field.gated == state.field.gated
        np.testing.assert_array_equal(loaded.field.bbox_min, state.field.bbox_min)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="missing"):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_bad_magic(tmp_path):
    p = tmp_path / "junk.ckpt"
    p.write_bytes(b"PNG\x00" + b"\x00" * 64)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p)


def test_version_mismatch_reports_both_versions(tmp_path):
    _, state = _state(ablation="baseline")
    p = tmp_path / "a.ckpt"
    save_checkpoint(p, state)
    raw = bytearray(p.read_bytes())
    raw[4:8] = struct.pack("<I", 999)
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version 999"):
        load_checkpoint(p)


def test_truncated_payload(tmp_path):
    _, state = _state(ablation="baseline")
    p = tmp_path / "a.ckpt"
    save_checkpoint(p, state)
    raw = p.read_bytes()
    p.write_bytes(raw[: len(raw) - len(raw) // 3])
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
