"""File formats: headered CSV matrices, binary PGM images, key=value metadata.

All writers go through an atomic write-temp-then-rename so that partially
written files are never observed by concurrent readers.
"""

import configparser
import os
import tempfile

import numpy as np

# %.17g round-trips any float64 exactly, which keeps CSV outputs bit-stable
# across re-runs with the same seed.
_FMT = "%.17g"


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write ``data`` to ``path`` via a temp file in the same directory."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_matrix_csv(path: str, mat: np.ndarray) -> None:
    """Persist a matrix as CSV with a leading "rows,cols" header line."""
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    lines = ["%d,%d" % mat.shape]
    for row in mat:
        lines.append(",".join(_FMT % v for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_matrix_csv(path: str) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        try:
            rows, cols = (int(t) for t in header.split(","))
        except ValueError:
            raise ValueError(f"{path}: malformed header {header!r}, expected 'rows,cols'")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.shape != (rows, cols):
        raise ValueError(f"{path}: header says {(rows, cols)}, data is {data.shape}")
    return data


def save_vector_csv(path: str, vec: np.ndarray) -> None:
    """Vectors are stored as single-column matrices."""
    save_matrix_csv(path, np.asarray(vec, dtype=float).reshape(-1, 1))


def load_vector_csv(path: str) -> np.ndarray:
    return load_matrix_csv(path).ravel()


def save_pgm(path: str, image: np.ndarray) -> None:
    """Write a 2-D image with values in [0, 1] as binary PGM (P5, maxval 255)."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise ValueError(f"PGM image must be 2-D, got shape {img.shape}")
    pix = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + pix.tobytes())


def load_pgm(path: str) -> np.ndarray:
    """Read a binary PGM; returns floats in [0, 1] (linear mapping by maxval)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    # Header tokens may be separated by arbitrary whitespace and comments.
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    width, height, maxval = (int(t) for t in tokens)
    if maxval <= 0 or maxval > 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    raw = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos)
    return raw.reshape(height, width).astype(float) / float(maxval)


def save_keyvalue(path: str, mapping: dict) -> None:
    lines = [f"{k}={v}" for k, v in mapping.items()]
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_keyvalue(path: str) -> dict:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def read_config(path: str) -> dict:
    """Parse a key = value config file with [solver]/[model]/[cgnet]/[train] sections."""
    parser = configparser.ConfigParser()
    with open(path, "r", encoding="utf-8") as fh:
        parser.read_file(fh)
    return {name: dict(parser[name]) for name in parser.sections()}
