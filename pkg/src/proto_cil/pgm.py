"""Minimal PGM (P2/P5) reader/writer.

Pixels are normalized to [0,1] on read by the file's max gray level and
quantized back on write. 8-bit files use one byte per pixel, 16-bit files
two bytes big-endian, per the netpbm convention.
"""

import numpy as np


class PgmError(ValueError):
    pass


def _tokens(data: bytes):
    """Yield whitespace-separated header tokens, skipping '#' comments."""
    i = 0
    n = len(data)
    while i < n:
        c = data[i : i + 1]
        if c.isspace():
            i += 1
        elif c == b"#":
            while i < n and data[i : i + 1] != b"\n":
                i += 1
        else:
            j = i
            while j < n and not data[j : j + 1].isspace() and data[j : j + 1] != b"#":
                j += 1
            yield i, data[i:j]
            i = j


def read_pgm(path) -> np.ndarray:
    """Read a P2 or P5 file into a float64 array with values in [0,1]."""
    with open(path, "rb") as f:
        data = f.read()
    toks = _tokens(data)
    try:
        _, magic = next(toks)
        if magic not in (b"P2", b"P5"):
            raise PgmError(f"{path}: not a PGM file (magic {magic!r})")
        (_, w_tok), (_, h_tok), (end, maxval_tok) = next(toks), next(toks), next(toks)
        width, height, maxval = int(w_tok), int(h_tok), int(maxval_tok)
    except (StopIteration, ValueError) as exc:
        raise PgmError(f"{path}: malformed PGM header") from exc
    if width <= 0 or height <= 0 or not (0 < maxval < 65536):
        raise PgmError(f"{path}: bad PGM dimensions {width}x{height} maxval {maxval}")

    if magic == b"P2":
        rest = data[end + len(maxval_tok) :].split()
        if len(rest) != width * height:
            raise PgmError(f"{path}: expected {width * height} pixels, got {len(rest)}")
        pixels = np.array([int(t) for t in rest], dtype=np.float64)
    else:
        # single whitespace byte separates maxval from raster
        start = end + len(maxval_tok) + 1
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
        count = width * height
        raster = data[start : start + count * dtype.itemsize]
        if len(raster) != count * dtype.itemsize:
            raise PgmError(f"{path}: truncated raster")
        pixels = np.frombuffer(raster, dtype=dtype).astype(np.float64)
    if pixels.max(initial=0) > maxval:
        raise PgmError(f"{path}: pixel value exceeds maxval {maxval}")
    return (pixels / maxval).reshape(height, width)


def write_pgm(path, image: np.ndarray, maxval: int = 255) -> None:
    """Write a [0,1] float array as a binary (P5) PGM."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise PgmError("image must be 2-D")
    if not np.isfinite(img).all() or img.min() < 0 or img.max() > 1:
        raise PgmError("image values must be finite and in [0,1]")
    if not (0 < maxval < 65536):
        raise PgmError(f"bad maxval {maxval}")
    quant = np.rint(img * maxval).astype(np.dtype(">u2") if maxval > 255 else np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(quant.tobytes())
