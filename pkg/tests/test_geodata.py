import json

import numpy as np
import pytest

from popgrowth.geodata import (
    CensusUnit,
    Dataset,
    DatasetError,
    DatasetSplit,
    RasterPatch,
    decode_tile,
    encode_tile,
    load_dataset,
    split_units,
    unit_patches,
    write_dataset,
)
from popgrowth.synthcity import SynthConfig, generate_city

from .conftest import flat_patch, make_dataset


@pytest.fixture(scope="module")
def three_units():
    return generate_city(SynthConfig(seed=1, grid_rows=3, grid_cols=3, n_units=3))


def test_three_unit_round_trip(three_units, tmp_path):
    write_dataset(three_units, tmp_path)
    ds = load_dataset(tmp_path)
    assert len(ds.units) == 3
    ds.validate()
    for key, patch in three_units.patches.items():
        assert np.array_equal(ds.patches[key].bands, patch.bands)
    for uid, unit in three_units.units.items():
        assert ds.unit(uid) == unit
    assert ds.oracle == three_units.oracle


def test_missing_tile_named(three_units, tmp_path):
    write_dataset(three_units, tmp_path)
    (tmp_path / "tiles" / "p_0007_t2.raw").unlink()
    with pytest.raises(DatasetError, match="p_0007_t2"):
        load_dataset(tmp_path)


def test_out_of_range_reflectance_rejected(three_units, tmp_path):
    write_dataset(three_units, tmp_path, checksums=False)
    path = tmp_path / "tiles" / "p_0004_t1.raw"
    arr = decode_tile(path.read_bytes(), 10).copy()
    arr[2, 3, 3] = 1.7
    path.write_bytes(encode_tile(arr))
    with pytest.raises(DatasetError, match=r"\[0,1\]"):
        load_dataset(tmp_path)


def test_checksum_mismatch(three_units, tmp_path):
    write_dataset(three_units, tmp_path)
    path = tmp_path / "tiles" / "p_0001_t1.raw"
    arr = decode_tile(path.read_bytes(), 10).copy()
    arr[0, 0, 0] = 0.5 if arr[0, 0, 0] != 0.5 else 0.25
    path.write_bytes(encode_tile(arr))
    with pytest.raises(DatasetError, match="checksum"):
        load_dataset(tmp_path)


def test_tile_bytes_little_endian_band_major():
    arr = np.arange(4 * 2 * 2, dtype=np.float32).reshape(4, 2, 2) / 100
    raw = encode_tile(arr)
    assert raw == arr.astype("<f4").tobytes()
    assert np.frombuffer(raw[:4], "<f4")[0] == arr[0, 0, 0]
    assert np.frombuffer(raw[16:20], "<f4")[0] == arr[1, 0, 0]
    with pytest.raises(DatasetError):
        decode_tile(raw[:-4], 2)


def test_write_is_byte_deterministic(three_units, tmp_path):
    write_dataset(three_units, tmp_path / "a")
    write_dataset(three_units, tmp_path / "b")
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_patch_shape_and_range():
    with pytest.raises(DatasetError):
        RasterPatch("p", 0, 0, "t1", np.zeros((3, 10, 10)))
    with pytest.raises(DatasetError):
        RasterPatch("p", 0, 0, "t1", np.zeros((4, 10, 8)))
    with pytest.raises(DatasetError, match="non-finite"):
        RasterPatch("p", 0, 0, "t1", np.full((4, 2, 2), np.nan))
    with pytest.raises(DatasetError):
        RasterPatch("p", 0, 0, "t3", np.zeros((4, 2, 2)))
    p = flat_patch("p", "t1", 0.3)
    assert not p.bands.flags.writeable


def test_unit_invariants():
    with pytest.raises(DatasetError):
        CensusUnit("u", (), 1.0, 2.0)
    with pytest.raises(DatasetError):
        CensusUnit("u", ("a", "a"), 1.0, 2.0)
    with pytest.raises(DatasetError):
        CensusUnit("u", ("a",), -1.0, 2.0)
    assert CensusUnit("u", ("a",), 10.0, 4.0).growth == -6.0


def test_patch_in_two_units_rejected():
    with pytest.raises(DatasetError, match="patch_ids"):
        make_dataset({"a": (0.1, 0.1), "b": (0.1, 0.1)}, {"u1": ["a", "b"], "u2": ["b"]})


def test_unit_patches_sorted_and_aligned():
    ds = make_dataset({"a": (0.1, 0.2), "b": (0.1, 0.2), "c": (0.1, 0.2), "d": (0.3, 0.3)},
                      {"u1": ["c", "a", "b"], "u2": ["d"]})
    t1 = unit_patches(ds, "u1", "t1")
    t2 = unit_patches(ds, "u1", "t2")
    assert [p.patch_id for p in t1] == ["a", "b", "c"]
    assert [p.patch_id for p in t2] == ["a", "b", "c"]
    assert {p.epoch for p in t1} == {"t1"} and {p.epoch for p in t2} == {"t2"}
    assert [p.patch_id for p in unit_patches(ds, "u2", "t1")] == ["d"]


@pytest.mark.parametrize("seed", [0, 1, 42, 2024])
def test_split_161_units(seed):
    s = split_units([f"u{i:03d}" for i in range(161)], seed)
    assert (len(s.train), len(s.val), len(s.test)) == (97, 32, 32)
    assert len(set(s.train) | set(s.val) | set(s.test)) == 161


def test_split_small_and_deterministic():
    s = split_units([f"u{i}" for i in range(5)], 3)
    assert (len(s.train), len(s.val), len(s.test)) == (3, 1, 1)
    ids = [f"u{i:03d}" for i in range(50)]
    assert split_units(ids, 9) == split_units(list(reversed(ids)), 9)
    assert split_units(ids, 9) != split_units(ids, 10)
    with pytest.raises(DatasetError):
        split_units(["a", "b", "c", "d"], 0)


def test_split_overlap_rejected_and_round_trip():
    with pytest.raises(DatasetError):
        DatasetSplit(("a",), ("a",), ("b",))
    s = DatasetSplit(("b", "a"), ("c",), ("d",))
    assert s.train == ("a", "b")
    assert DatasetSplit.from_dict(json.loads(json.dumps(s.to_dict()))) == s


def test_manifest_missing_field(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps({"patch_size": 10}))
    with pytest.raises(DatasetError, match="grid_shape"):
        load_dataset(tmp_path)
    with pytest.raises(DatasetError, match="not found"):
        load_dataset(tmp_path / "nowhere")


def test_dataset_without_oracle_requires(three_units):
    ds = Dataset(three_units.patch_size, three_units.grid_shape, three_units.patches, three_units.units)
    with pytest.raises(DatasetError):
        ds.require_oracle()
