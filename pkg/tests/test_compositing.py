import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from popgrowth.compositing import (
    CompositingError,
    SceneStack,
    composite_directory,
    composite_stack,
    mask_clouds,
    median_composite,
    write_scene_stack,
)
from popgrowth.geodata import load_dataset


def pixel_stack(values, probs):
    """Stack of n scenes with a single 1x1 pixel, same value in every band."""
    bands = np.array(values, dtype=np.float32)[:, None, None, None] * np.ones((1, 4, 1, 1), np.float32)
    return SceneStack(bands, np.array(probs, dtype=float)[:, None, None])


def sorted_median(values):
    """Oracle: sort the valid values and take the middle (or the mean of the two middles)."""
    v = sorted(float(x) for x in values)
    if not v:
        return 0.0
    n = len(v)
    return v[n // 2] if n % 2 else (v[n // 2 - 1] + v[n // 2]) / 2.0


def test_no_clouds_nothing_masked():
    s = mask_clouds(SceneStack(np.random.rand(3, 4, 5, 5), np.zeros((3, 5, 5))))
    assert s.valid.all()


def test_single_pixel_above_threshold_masked():
    prob = np.zeros((2, 4, 4))
    prob[1, 2, 3] = 0.51
    s = mask_clouds(SceneStack(np.random.rand(2, 4, 4, 4), prob), 0.5)
    assert (~s.valid).sum() == 1 and not s.valid[1, 2, 3]
    # every band of that scene-pixel is ignored by the composite
    bands = np.full((2, 4, 4, 4), 0.2, np.float32)
    bands[1, :, 2, 3] = 0.9
    comp, _ = composite_stack(SceneStack(bands, prob), 0.5)
    assert np.all(comp[:, 2, 3] == np.float32(0.2))


def test_threshold_boundary_not_masked():
    s = mask_clouds(pixel_stack([0.3], [0.50]), 0.5)
    assert s.valid.all()
    s = mask_clouds(pixel_stack([0.3], [np.nextafter(0.5, 1)]), 0.5)
    assert not s.valid.any()


def test_odd_count_median():
    comp, nodata = median_composite(mask_clouds(pixel_stack([0.1, 0.2, 0.9], [0, 0, 0])))
    assert comp[0, 0, 0] == np.float32(0.2) and not nodata.any()


def test_even_count_averages_central_values():
    comp, _ = median_composite(mask_clouds(pixel_stack([0.1, 0.2, 0.9], [0, 0, 1.0])))
    assert comp[0, 0, 0] == np.float32(sorted_median([np.float32(0.1), np.float32(0.2)]))
    assert comp[0, 0, 0] == pytest.approx(0.15, abs=1e-7)


def test_all_masked_is_nodata():
    comp, nodata = median_composite(mask_clouds(pixel_stack([0.1, 0.2, 0.9], [1, 1, 1])))
    assert np.all(comp == 0) and nodata.all()


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_matches_sort_oracle(data):
    n = data.draw(st.integers(1, 6))
    rng = np.random.default_rng(data.draw(st.integers(0, 2**31)))
    bands = rng.random((n, 4, 3, 3), dtype=np.float32)
    prob = rng.choice([0.0, 0.5, 0.7, 1.0], size=(n, 3, 3))
    comp, nodata = composite_stack(SceneStack(bands, prob))
    for b in range(4):
        for i in range(3):
            for j in range(3):
                vals = [bands[k, b, i, j] for k in range(n) if prob[k, i, j] <= 0.5]
                assert comp[b, i, j] == np.float32(sorted_median(vals))
                assert nodata[i, j] == (not vals)


def test_stack_validation():
    with pytest.raises(CompositingError):
        SceneStack(np.zeros((2, 3, 4, 4)), np.zeros((2, 4, 4)))
    with pytest.raises(CompositingError):
        SceneStack(np.zeros((2, 4, 4, 4)), np.zeros((3, 4, 4)))
    with pytest.raises(CompositingError):
        SceneStack.from_scenes([])
    with pytest.raises(CompositingError):
        mask_clouds(pixel_stack([0.1], [0.0]), 1.5)


def test_composite_directory(tmp_path):
    src, dst = tmp_path / "stacks", tmp_path / "tiles"
    src.mkdir()
    rng = np.random.default_rng(0)
    (src / "index.json").write_text(json.dumps({
        "patch_size": 4, "patches": [{"id": "p_0000", "row": 0, "col": 0}, {"id": "p_0001", "row": 0, "col": 1}]}))
    for pid in ("p_0000", "p_0001"):
        for epoch in ("t1", "t2"):
            prob = np.zeros((3, 4, 4))
            prob[:, 0, 0] = 1.0  # fully clouded pixel
            write_scene_stack(SceneStack(rng.random((3, 4, 4, 4)), prob, epoch), src / f"{pid}_{epoch}.npz")
    names = composite_directory(src, dst)
    assert len(names) == 4
    ds = load_dataset(dst)
    assert ds.patch_ids == ["p_0000", "p_0001"] and not ds.units
    patch = ds.patch("p_0001", "t2")
    assert patch.nodata_mask[0, 0] and patch.nodata_mask.sum() == 1
