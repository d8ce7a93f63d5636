import gzip
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from jpmap.dataio import (
    CSV_FIELDS,
    FormatError,
    encode_idx,
    load_mnist,
    montage,
    parse_idx,
    parse_idx_header,
    quantize,
    read_csv,
    read_idx,
    read_pgm,
    write_csv,
    write_idx,
    write_pgm,
)

DATA = Path(__file__).parent / "data"


def test_parse_idx_handcrafted():
    blob = bytes([0, 0, 8, 1, 0, 0, 0, 3, 1, 2, 3])
    t = parse_idx(blob)
    assert t.dtype_code == 8 and t.dims == [3]
    np.testing.assert_array_equal(t.data, [1, 2, 3])


def test_parse_idx_errors():
    with pytest.raises(FormatError):
        parse_idx(bytes([0, 0, 8, 1, 0, 0, 0, 3, 1, 2]))
    with pytest.raises(FormatError):
        parse_idx(bytes([1, 0, 8, 1, 0, 0, 0, 1, 1]))
    with pytest.raises(FormatError):
        parse_idx(bytes([0, 0, 0x42, 1, 0, 0, 0, 1, 1]))
    with pytest.raises(FormatError):
        parse_idx(bytes([0, 0, 8, 3, 0, 0]))


def test_official_mnist_headers():
    # the published headers: magic 2051, then counts and 28 x 28
    train = struct.pack(">IIII", 2051, 60000, 28, 28)
    test = struct.pack(">IIII", 2051, 10000, 28, 28)
    assert parse_idx_header(train)[:2] == (8, [60000, 28, 28])
    assert parse_idx_header(test)[:2] == (8, [10000, 28, 28])
    assert parse_idx_header(struct.pack(">II", 2049, 60000))[:2] == (8, [60000])


@settings(max_examples=40, deadline=None)
@given(
    st.sampled_from([0x08, 0x09, 0x0B, 0x0C, 0x0D, 0x0E]).flatmap(
        lambda code: st.tuples(
            st.just(code),
            hnp.arrays(
                {0x08: np.uint8, 0x09: np.int8, 0x0B: np.int16, 0x0C: np.int32, 0x0D: np.float32, 0x0E: np.float64}[code],
                hnp.array_shapes(min_dims=1, max_dims=3, max_side=5),
            ),
        )
    )
)
def test_idx_round_trip(case):
    code, arr = case
    t = parse_idx(encode_idx(arr, code))
    assert t.dims == list(arr.shape)
    assert t.data.tobytes() == arr.astype(t.data.dtype).tobytes()


def test_idx_gzip_files(tmp_path):
    arr = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    write_idx(arr, tmp_path / "a-idx3-ubyte.gz")
    write_idx(arr, tmp_path / "a-idx3-ubyte")
    np.testing.assert_array_equal(read_idx(tmp_path / "a-idx3-ubyte.gz").data, arr)
    np.testing.assert_array_equal(read_idx(tmp_path / "a-idx3-ubyte").data, arr)
    assert gzip.decompress((tmp_path / "a-idx3-ubyte.gz").read_bytes()) == (tmp_path / "a-idx3-ubyte").read_bytes()


def test_bundled_subset_loads():
    x, y = load_mnist(DATA / "mnist5k", "test", with_labels=True)
    assert x.shape == (500, 784) and y.shape == (500,)
    assert x.min() == 0.0 and x.max() == 1.0
    assert set(np.unique(y)) <= set(range(10))


def test_load_mnist_env_fallback(monkeypatch):
    monkeypatch.setenv("JPMAP_DATA_DIR", str(DATA / "mnist5k"))
    assert load_mnist(split="test").shape == (500, 784)
    monkeypatch.delenv("JPMAP_DATA_DIR")
    with pytest.raises(FileNotFoundError):
        load_mnist(split="test")


def test_quantize_round_half_up(tmp_path):
    write_pgm(np.full(6, 0.5), 3, 2, tmp_path / "h.pgm")
    assert (tmp_path / "h.pgm").read_bytes() == b"P5\n3 2\n255\n" + bytes([128] * 6)
    np.testing.assert_array_equal(quantize([-1.0, 0.0, 1.0, 2.0, 1.5 / 255]), [0, 0, 255, 255, 2])


@given(hnp.arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9))))
@settings(deadline=None)
def test_pgm_round_trip_exact(pix):
    import tempfile

    with tempfile.TemporaryDirectory() as d:
        h, w = pix.shape
        img = pix.ravel() / 255.0
        write_pgm(img, w, h, Path(d) / "a.pgm")
        back, shape = read_pgm(Path(d) / "a.pgm", shape=True)
        assert shape == (h, w)
        assert back.tobytes() == img.tobytes()


def test_pgm_orientation_fixtures(tmp_path):
    bar = read_pgm(DATA / "top_bar.pgm").reshape(28, 28)
    assert np.all(bar[0] == 1.0) and not np.any(bar[1:])
    digit = read_pgm(DATA / "digit0.pgm")
    np.testing.assert_array_equal(digit, load_mnist(DATA / "mnist5k", "test")[0])
    write_pgm(digit, 28, 28, tmp_path / "d.pgm")
    assert (tmp_path / "d.pgm").read_bytes()[-784:] == (DATA / "digit0.pgm").read_bytes()[-784:]


def test_pgm_rejects_other_formats(tmp_path):
    (tmp_path / "p2.pgm").write_bytes(b"P2\n1 1\n255\n0\n")
    with pytest.raises(FormatError):
        read_pgm(tmp_path / "p2.pgm")
    (tmp_path / "short.pgm").write_bytes(b"P5\n4 4\n255\n\x00\x00")
    with pytest.raises(FormatError):
        read_pgm(tmp_path / "short.pgm")


def test_montage_layout():
    imgs = [np.full(4, v) for v in (0.1, 0.2, 0.3)]
    grid, (h, w) = montage(imgs, 2, 2, (2, 2), pad=1, fill=1.0)
    assert (h, w) == (7, 7)
    g = grid.reshape(7, 7)
    assert np.all(g[1:3, 1:3] == 0.1) and np.all(g[1:3, 4:6] == 0.2) and np.all(g[4:6, 1:3] == 0.3)
    assert np.all(g[4:6, 4:6] == 1.0) and np.all(g[0] == 1.0) and np.all(g[:, 3] == 1.0)


def test_csv_empty_table(tmp_path):
    write_csv([], tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_bytes() == (",".join(CSV_FIELDS) + "\r\n").encode()


def test_csv_round_trip_and_quoting(tmp_path):
    row = {"problem": 'interp, "p=0.8"', "method": "jpmap", "seed": 3, "psnr_db": 0.1 + 0.2}
    write_csv([row], tmp_path / "r.csv")
    back = read_csv(tmp_path / "r.csv")[0]
    assert back["problem"] == row["problem"] and back["seed"] == "3"
    assert float(back["psnr_db"]) == 0.1 + 0.2
    assert back["wall_ms"] == ""


@given(st.floats(allow_nan=False, allow_infinity=False))
@settings(deadline=None)
def test_csv_floats_reparse_exactly(v):
    import tempfile

    with tempfile.TemporaryDirectory() as d:
        write_csv([{"psnr_db": v}], Path(d) / "f.csv")
        assert float(read_csv(Path(d) / "f.csv")[0]["psnr_db"]) == v
