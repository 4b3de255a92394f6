"""Binary PGM (P5, 8-bit) reading and writing for frames and activation dumps."""

import numpy as np


def write_pgm(path, image: np.ndarray) -> None:
    """Write a 2-D image as binary PGM. Float inputs are taken in [0, 1]."""
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise ValueError(f"PGM image must be 2-D, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        arr = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into a uint8 array of shape (H, W)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    # header: magic, width, height, maxval; whitespace separated, '#' comments
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported, maxval={maxval}")
    data = np.frombuffer(blob, dtype=np.uint8, offset=pos, count=h * w)
    if data.size != h * w:
        raise ValueError(f"{path}: truncated pixel payload")
    return data.reshape(h, w).copy()


def read_pgm_float(path) -> np.ndarray:
    """Read a PGM and scale intensities to [0, 1] via /255."""
    return read_pgm(path).astype(np.float64) / 255.0
