import numpy as np
import pytest

from editprobe import hiddendump as hd
from editprobe.common import stable_id_hash
from editprobe.errors import DataError


def small_dump(rng, n=3, layers=2, dim=4):
    ids = [f"s{i:04d}" for i in range(n)]
    feats = rng.normal(size=(n, layers, 2, dim)).astype(np.float32)
    return hd.HiddenDump(ids=ids, features=feats)


def test_round_trip_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    dump = small_dump(rng)
    path = str(tmp_path / "x.ephs")
    hd.write_dump(path, dump)
    loaded = hd.read_dump(path)
    assert loaded.features.tobytes() == dump.features.tobytes()
    assert hd.dump_id_hashes(loaded) == [stable_id_hash(s) for s in dump.ids]
    assert loaded.n_samples == 3 and loaded.n_layers == 2 and loaded.dim == 4


def test_file_length_formula(tmp_path):
    rng = np.random.default_rng(1)
    dump = small_dump(rng, n=5, layers=3, dim=8)
    path = str(tmp_path / "x.ephs")
    hd.write_dump(path, dump)
    import os

    assert os.path.getsize(path) == hd.expected_size(5, 3, 8)
    assert hd.expected_size(5, 3, 8) == hd.HEADER_SIZE + 5 * (8 + 3 * 2 * 8 * 4)


def test_truncated_file_reports_expected_vs_actual(tmp_path):
    rng = np.random.default_rng(2)
    dump = small_dump(rng)
    path = str(tmp_path / "x.ephs")
    hd.write_dump(path, dump)
    blob = open(path, "rb").read()
    open(path, "wb").write(blob[:-7])
    with pytest.raises(DataError) as err:
        hd.read_dump(path)
    msg = str(err.value)
    assert str(len(blob)) in msg and str(len(blob) - 7) in msg


def test_bad_magic_and_version(tmp_path):
    rng = np.random.default_rng(3)
    dump = small_dump(rng)
    path = str(tmp_path / "x.ephs")
    hd.write_dump(path, dump)
    blob = bytearray(open(path, "rb").read())
    blob[0:4] = b"NOPE"
    open(path, "wb").write(bytes(blob))
    with pytest.raises(DataError, match="magic"):
        hd.read_dump(path)

    hd.write_dump(path, dump)
    blob = bytearray(open(path, "rb").read())
    blob[4] = 9
    open(path, "wb").write(bytes(blob))
    with pytest.raises(DataError, match="version"):
        hd.read_dump(path)


def test_duplicate_ids_rejected_at_write(tmp_path):
    rng = np.random.default_rng(4)
    feats = rng.normal(size=(2, 2, 2, 4)).astype(np.float32)
    dump = hd.HiddenDump(ids=["same", "same"], features=feats)
    with pytest.raises(DataError, match="duplicate"):
        hd.write_dump(str(tmp_path / "x.ephs"), dump)


def test_manifest_alignment_and_diff(tmp_path):
    rng = np.random.default_rng(5)
    dump = small_dump(rng)
    path = str(tmp_path / "x.ephs")
    hd.write_dump(path, dump)
    loaded = hd.read_dump(path)

    manifest = hd.build_manifest(dump.ids, None, None, {"kind": "toy"}, {})
    assert hd.align_manifest(loaded, manifest) == dump.ids

    bad = hd.build_manifest(["s0000", "s0001", "other"], None, None, {"kind": "toy"}, {})
    with pytest.raises(DataError) as err:
        hd.align_manifest(loaded, bad)
    assert "other" in str(err.value)

    short = hd.build_manifest(["s0000"], None, None, {"kind": "toy"}, {})
    with pytest.raises(DataError, match="records"):
        hd.align_manifest(loaded, short)


def test_mos_vector_lookup_and_missing():
    ids = ["a", "b"]
    manifest = {
        "mos": {
            "a": {"mos_q": 10.0, "mos_e": 20.0, "mos_p": 30.0, "mos_o": 20.0},
            "b": {"mos_q": 40.0, "mos_e": 50.0, "mos_p": 60.0, "mos_o": 50.0},
        }
    }
    np.testing.assert_array_equal(hd.mos_vector(manifest, ids, "quality"), [10.0, 40.0])
    np.testing.assert_array_equal(hd.mos_vector(manifest, ids, "overall"), [20.0, 50.0])
    with pytest.raises(DataError, match="missing"):
        hd.mos_vector({"mos": {"a": manifest["mos"]["a"]}}, ids, "quality")


def test_validate_dump_summary(tmp_path):
    rng = np.random.default_rng(6)
    dump = small_dump(rng, n=4, layers=3, dim=6)
    path = str(tmp_path / "x.ephs")
    hd.write_dump(path, dump)
    summary = hd.validate_dump(path)
    assert summary["n_samples"] == 4
    assert summary["n_layers"] == 3
    assert summary["dim"] == 6

    manifest = hd.build_manifest(dump.ids, None, None, {"kind": "toy"}, {})
    mpath = tmp_path / "m.json"
    import json

    mpath.write_text(json.dumps(manifest))
    summary = hd.validate_dump(path, str(mpath))
    assert summary["manifest_ids"] == 4


def test_same_dump_written_twice_is_byte_identical(tmp_path):
    rng = np.random.default_rng(7)
    dump = small_dump(rng)
    p1, p2 = str(tmp_path / "a.ephs"), str(tmp_path / "b.ephs")
    hd.write_dump(p1, dump)
    hd.write_dump(p2, dump)
    assert open(p1, "rb").read() == open(p2, "rb").read()
