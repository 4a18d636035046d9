import struct
import zlib

import numpy as np
import pytest

from aaaseg import hed3d
from aaaseg.metrics import evaluate_case
from aaaseg.volcore import BinaryMask3D, Volume3D
from aaaseg.volio import (
    BadMagicError,
    ChecksumError,
    MissingDataFileError,
    ShapeMismatchError,
    TruncatedPayloadError,
    UnsupportedElementTypeError,
    VersionMismatchError,
    load_checkpoint,
    read_history,
    read_metaimage,
    read_report,
    save_checkpoint,
    write_history,
    write_metaimage,
    write_report,
)


def _header(dims, etype, datafile, msb=False, spacing="1 1 1"):
    return (
        "ObjectType = Image\nNDims = 3\n"
        f"DimSize = {dims}\nElementSpacing = {spacing}\nOffset = 0 0 0\n"
        f"BinaryDataByteOrderMSB = {'True' if msb else 'False'}\n"
        f"ElementType = {etype}\nElementDataFile = {datafile}\n"
    )


@pytest.mark.parametrize("suffix", [".mhd", ".mha"])
def test_volume_round_trip_bit_exact(tmp_path, suffix):
    rng = np.random.default_rng(0)
    v = Volume3D(rng.normal(size=(8, 8, 8)).astype(np.float32), (0.72, 0.97, 0.625), (-3.5, 12.25, 100.0))
    p = tmp_path / f"v{suffix}"
    write_metaimage(v, p)
    back = read_metaimage(p)
    assert isinstance(back, Volume3D)
    assert back.data.tobytes() == v.data.tobytes()
    assert back.spacing == v.spacing and back.origin == v.origin


def test_mask_round_trip(tmp_path):
    m = BinaryMask3D(np.random.default_rng(1).random((3, 4, 5)) < 0.5, (0.8, 0.8, 2.0))
    write_metaimage(m, tmp_path / "m.mhd")
    back = read_metaimage(tmp_path / "m.mhd")
    assert isinstance(back, BinaryMask3D)
    np.testing.assert_array_equal(back.data, m.data)


def test_anisotropic_spacing_preserved_to_six_decimals(tmp_path):
    v = Volume3D(np.zeros((2, 2, 2)), (0.72, 0.97, 0.625))
    write_metaimage(v, tmp_path / "a.mhd")
    assert np.round(read_metaimage(tmp_path / "a.mhd").spacing, 6).tolist() == [0.72, 0.97, 0.625]


def test_float_file_size(tmp_path):
    v = Volume3D(np.zeros((64, 128, 128), np.float32))
    p = tmp_path / "big.mha"
    write_metaimage(v, p)
    header_len = p.read_bytes().index(b"ElementDataFile = LOCAL\n") + len(b"ElementDataFile = LOCAL\n")
    assert p.stat().st_size == header_len + 128 * 128 * 64 * 4
    write_metaimage(v, tmp_path / "big.mhd")
    assert (tmp_path / "big.raw").stat().st_size == 128 * 128 * 64 * 4


def test_uchar_255_reads_as_true(tmp_path):
    vals = np.array([0, 255, 0, 255, 255, 0, 0, 0], np.uint8)
    (tmp_path / "m.raw").write_bytes(vals.tobytes())
    (tmp_path / "m.mhd").write_text(_header("2 2 2", "MET_UCHAR", "m.raw"))
    m = read_metaimage(tmp_path / "m.mhd")
    assert isinstance(m, BinaryMask3D)
    assert m.data.ravel().tolist() == [v == 255 for v in vals]


def test_short_big_endian(tmp_path):
    vals = np.array([-1000, 40, 300, 1500, 0, -50, 7, 8], np.int16)
    (tmp_path / "s.raw").write_bytes(vals.astype(">i2").tobytes())
    (tmp_path / "s.mhd").write_text(_header("2 2 2", "MET_SHORT", "s.raw", msb=True))
    v = read_metaimage(tmp_path / "s.mhd")
    assert v.data.dtype == np.float32
    assert v.data.ravel().tolist() == vals.astype(float).tolist()


def test_truncated_payload(tmp_path):
    (tmp_path / "t.raw").write_bytes(b"\x00" * 7)
    (tmp_path / "t.mhd").write_text(_header("2 2 2", "MET_UCHAR", "t.raw"))
    with pytest.raises(TruncatedPayloadError, match="ElementDataFile"):
        read_metaimage(tmp_path / "t.mhd")


def test_unsupported_type_and_missing_raw(tmp_path):
    (tmp_path / "d.mhd").write_text(_header("2 2 2", "MET_DOUBLE", "d.raw"))
    with pytest.raises(UnsupportedElementTypeError, match="ElementType"):
        read_metaimage(tmp_path / "d.mhd")
    (tmp_path / "r.mhd").write_text(_header("2 2 2", "MET_FLOAT", "nowhere.raw"))
    with pytest.raises(MissingDataFileError, match="ElementDataFile"):
        read_metaimage(tmp_path / "r.mhd")


def test_distinct_error_types():
    kinds = {TruncatedPayloadError, UnsupportedElementTypeError, MissingDataFileError}
    for a in kinds:
        for b in kinds - {a}:
            assert not issubclass(a, b)


# --- checkpoints ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def desk_net():
    return hed3d.build(hed3d.Hed3DConfig.desk(), seed=3)


def test_checkpoint_round_trip(tmp_path, desk_net):
    p = tmp_path / "net.ckpt"
    save_checkpoint(desk_net, p)
    back = load_checkpoint(p)
    assert back.config == desk_net.config
    assert list(back.params) == list(desk_net.params)
    for name, prm in desk_net.params.items():
        assert back.params[name].value.tobytes() == prm.value.tobytes()


def test_checkpoint_layout(tmp_path, desk_net):
    p = tmp_path / "net.ckpt"
    save_checkpoint(desk_net, p)
    raw = p.read_bytes()
    assert raw[:8] == b"HED3DSG1"
    assert struct.unpack("<I", raw[8:12])[0] == 1
    assert struct.unpack("<I", raw[-4:])[0] == zlib.crc32(raw[:-4])


def test_checkpoint_corruption_detected(tmp_path, desk_net):
    p = tmp_path / "net.ckpt"
    save_checkpoint(desk_net, p)
    raw = bytearray(p.read_bytes())
    raw[len(raw) // 2] ^= 0x01
    p.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        load_checkpoint(p)


def test_checkpoint_bad_magic_and_version(tmp_path, desk_net):
    p = tmp_path / "net.ckpt"
    save_checkpoint(desk_net, p)
    raw = bytearray(p.read_bytes())
    bad = bytearray(raw)
    bad[0:8] = b"NOTACKPT"
    (tmp_path / "m.ckpt").write_bytes(bytes(bad))
    with pytest.raises(BadMagicError):
        load_checkpoint(tmp_path / "m.ckpt")
    ver = bytearray(raw)
    ver[8:12] = struct.pack("<I", 2)
    body = bytes(ver[:-4])
    (tmp_path / "v.ckpt").write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    with pytest.raises(VersionMismatchError):
        load_checkpoint(tmp_path / "v.ckpt")


def test_checkpoint_shape_mismatch_names_tensor(tmp_path):
    net = hed3d.build(hed3d.Hed3DConfig.desk(), seed=0)
    # hand-build a fixture whose config says widths[0] = 4 but carries an 5-channel tensor
    wrong = net.params["stage1.conv1.bias"]
    wrong.value = np.zeros(5, np.float32)
    p = tmp_path / "bad.ckpt"
    save_checkpoint(net, p)
    with pytest.raises(ShapeMismatchError, match="stage1.conv1.bias"):
        load_checkpoint(p)


def test_truncated_checkpoint_is_typed_error(tmp_path, desk_net):
    from aaaseg.volio import CheckpointError

    p = tmp_path / "net.ckpt"
    save_checkpoint(desk_net, p)
    raw = p.read_bytes()
    for cut in (4, 11, 40, len(raw) // 2):
        (tmp_path / "c.ckpt").write_bytes(raw[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "c.ckpt")


# --- reports -----------------------------------------------------------------------------

def _report(case, dice_target):
    """A report whose dice is ``dice_target`` on a 20-voxel line (needs |a|=|b|=10, overlap 10*d)."""
    gt = np.zeros((1, 1, 20), bool)
    gt[0, 0, :10] = True
    k = int(round(10 * dice_target))
    pred = np.zeros_like(gt)
    pred[0, 0, 10 - k:20 - k] = True
    return evaluate_case(BinaryMask3D(pred), BinaryMask3D(gt), case, "pre")


def test_report_summary_population_std(tmp_path):
    rows = [_report("a", 0.8), _report("b", 0.9)]
    assert [r.dice for r in rows] == [0.8, 0.9]
    write_report(rows, tmp_path / "r.csv")
    text = (tmp_path / "r.csv").read_text()
    assert text.startswith("#") and "population" in text.splitlines()[0]
    per, summary = read_report(tmp_path / "r.csv")
    assert [r["case_id"] for r in per] == ["a", "b"]
    m, s = summary["dice"]
    assert m == pytest.approx(0.85) and s == pytest.approx(0.05)


def test_report_single_and_empty(tmp_path):
    write_report([_report("a", 1.0)], tmp_path / "one.csv")
    _, summary = read_report(tmp_path / "one.csv")
    assert summary["dice"] == (1.0, 0.0)
    write_report([], tmp_path / "none.csv")
    per, summary = read_report(tmp_path / "none.csv")
    assert per == [] and all(v is None for v in summary.values())
    header = (tmp_path / "none.csv").read_text().splitlines()[1].split(",")
    assert header == [
        "case_id", "stage", "dice", "jaccard", "max_diameter_mm", "gt_max_diameter_mm",
        "diameter_abs_err_mm", "slice_index", "gt_slice_index", "volume_mm3", "gt_volume_mm3", "rel_vol_diff",
    ]


def test_history_round_trip(tmp_path):
    rows = [hed3d.HistoryRow(1, 0.5, 0.25, 1e-4), hed3d.HistoryRow(2, 0.1 + 0.2, 0.2, 2e-5)]
    write_history(rows, tmp_path / "h.csv")
    assert read_history(tmp_path / "h.csv") == [(1, 0.5, 0.25, 1e-4), (2, 0.1 + 0.2, 0.2, 2e-5)]
