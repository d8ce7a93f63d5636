"""IDX (MNIST) decoding, binary PGM images and metric CSV files."""

import csv
import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# IDX type code -> (big-endian numpy dtype, item size)
IDX_TYPES = {
    0x08: (">u1", 1),
    0x09: (">i1", 1),
    0x0B: (">i2", 2),
    0x0C: (">i4", 4),
    0x0D: (">f4", 4),
    0x0E: (">f8", 8),
}

CSV_FIELDS = ["problem", "method", "seed", "psnr_db", "j1_final", "iterations", "wall_ms", "constraint_residual"]

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class FormatError(ValueError):
    pass


@dataclass
class IdxTensor:
    dtype_code: int
    dims: list
    data: np.ndarray


def parse_idx_header(blob):
    """Return ``(dtype_code, dims, header_length)`` without touching the payload."""
    if len(blob) < 4:
        raise FormatError("IDX data shorter than its 4-byte magic")
    if blob[0] != 0 or blob[1] != 0:
        raise FormatError(f"bad IDX magic {blob[:4].hex()}")
    code, rank = blob[2], blob[3]
    if code not in IDX_TYPES:
        raise FormatError(f"unsupported IDX dtype 0x{code:02x}")
    end = 4 + 4 * rank
    if len(blob) < end:
        raise FormatError("truncated IDX dimension table")
    dims = list(struct.unpack(f">{rank}I", blob[4:end]))
    return code, dims, end


def parse_idx(blob):
    code, dims, start = parse_idx_header(blob)
    dtype, size = IDX_TYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    if len(blob) - start < count * size:
        raise FormatError(f"truncated IDX payload: need {count * size} bytes, have {len(blob) - start}")
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=start).reshape(dims)
    return IdxTensor(code, dims, data.astype(dtype[1:]))


def encode_idx(array, dtype_code=0x08):
    dtype, _ = IDX_TYPES[dtype_code]
    array = np.asarray(array)
    header = bytes([0, 0, dtype_code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype=dtype).tobytes()


def _read_maybe_gz(path):
    path = Path(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] == b"\x1f\x8b":
        blob = gzip.decompress(blob)
    return blob


def read_idx(path):
    return parse_idx(_read_maybe_gz(path))


def write_idx(array, path, dtype_code=0x08, compress=None):
    blob = encode_idx(array, dtype_code)
    compress = str(path).endswith(".gz") if compress is None else compress
    if compress:
        blob = gzip.compress(blob, mtime=0)
    with open(path, "wb") as fh:
        fh.write(blob)


def _find(data_dir, stem):
    for name in (stem, stem + ".gz"):
        p = Path(data_dir) / name
        if p.exists():
            return p
    raise FileNotFoundError(f"no {stem}[.gz] in {data_dir}")


def resolve_data_dir(data_dir=None):
    data_dir = data_dir or os.environ.get("JPMAP_DATA_DIR")
    if not data_dir:
        raise FileNotFoundError("no data directory given and JPMAP_DATA_DIR is unset")
    return Path(data_dir)


def load_mnist(data_dir=None, split="train", with_labels=False):
    """Images as an ``(n, 784)`` float64 array scaled to [0, 1]."""
    data_dir = resolve_data_dir(data_dir)
    img_name, lbl_name = MNIST_FILES[split]
    images = read_idx(_find(data_dir, img_name)).data
    if images.ndim != 3:
        raise FormatError(f"expected rank-3 image tensor, got dims {images.shape}")
    x = images.reshape(len(images), -1).astype(np.float64) / 255.0
    if not with_labels:
        return x
    return x, read_idx(_find(data_dir, lbl_name)).data.astype(np.int64)


def quantize(img):
    """Round-half-up to 8 bits after clamping to [0, 1]."""
    return np.floor(255.0 * np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) + 0.5).astype(np.uint8)


def write_pgm(img, width, height, path):
    q = quantize(img).reshape(height, width)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(q.tobytes())


def _pgm_tokens(blob, count):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(blob[start:pos])
    return tokens, pos + 1


def read_pgm(path, shape=False):
    """Pixel values divided by 255, flattened row-major (top row first).

    With ``shape=True`` returns ``(img, (height, width))``.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens, pos = _pgm_tokens(blob, 4)
    if tokens[0] != b"P5":
        raise FormatError(f"not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError("malformed PGM header") from exc
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    pixels = np.frombuffer(blob, dtype=np.uint8, count=width * height, offset=pos) if len(blob) - pos >= width * height else None
    if pixels is None:
        raise FormatError("truncated PGM pixel data")
    img = pixels.astype(np.float64) / 255.0
    return (img, (height, width)) if shape else img


def montage(images, rows, cols, shape=(28, 28), pad=1, fill=1.0):
    """Tile images into one grid image, returned with its ``(height, width)``."""
    h, w = shape
    H, W = rows * h + (rows + 1) * pad, cols * w + (cols + 1) * pad
    grid = np.full((H, W), fill)
    for k, img in enumerate(images[: rows * cols]):
        r, c = divmod(k, cols)
        top, left = pad + r * (h + pad), pad + c * (w + pad)
        grid[top : top + h, left : left + w] = np.asarray(img).reshape(h, w)
    return grid.ravel(), (H, W)


def _fmt(value):
    if isinstance(value, float):
        return "%.17g" % value
    return value


def write_csv(rows, path, fields=CSV_FIELDS):
    """Write dict rows with RFC 4180 quoting; floats keep 17 significant digits."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(fields)
        for row in rows:
            writer.writerow([_fmt(row.get(k, "")) for k in fields])


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
