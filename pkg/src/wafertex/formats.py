"""File formats: PGM / PFM images, run-length masks, binary tensors, configs.

All formats are byte-exact and documented here:

* PGM: binary ``P5``, maxval 255 (1 byte/pixel) or 65535 (2 bytes, big
  endian).  Written tensors must be integer-valued and in range.
* PFM: grayscale ``Pf``; the sign of the scale line selects endianness
  (negative = little endian, the written form).  Rows are stored bottom to
  top per the PFM convention.  Lossless for float32.
* Tensor container: ``WTB1`` magic, ascii dims line, little-endian float32
  payload (row-major).  The named variant (``WTBD1``) stores a list of
  (name, shape, payload) entries for block weights.
* RLE: row-major alternating run lengths starting with a background(0) run;
  a leading 0 is the only permitted zero-length run.
* Config: ``key=value`` lines, ``#`` comments, UTF-8.

Malformed input raises :class:`FormatError` carrying the byte offset.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass

import numpy as np

from wafertex.tensor import Tensor


class FormatError(Exception):
    """Malformed file content (reported with a byte offset where sensible)."""


class _ByteReader:
    def __init__(self, data: bytes, name: str):
        self.data = data
        self.name = name
        self.pos = 0

    def fail(self, msg: str):
        raise FormatError(f"{self.name}: {msg} at byte offset {self.pos}")

    def read_line(self) -> str:
        end = self.data.find(b"\n", self.pos)
        if end < 0:
            self.fail("unterminated header line")
        line = self.data[self.pos:end]
        self.pos = end + 1
        return line.decode("ascii", errors="replace")

    def skip_header_space(self):
        # whitespace and '#' comments, PGM style
        while self.pos < len(self.data):
            c = self.data[self.pos:self.pos + 1]
            if c in b" \t\r\n":
                self.pos += 1
            elif c == b"#":
                end = self.data.find(b"\n", self.pos)
                if end < 0:
                    self.fail("unterminated comment")
                self.pos = end + 1
            else:
                return

    def read_token(self) -> str:
        self.skip_header_space()
        start = self.pos
        while self.pos < len(self.data) and self.data[self.pos:self.pos + 1] not in b" \t\r\n#":
            self.pos += 1
        if self.pos == start:
            self.fail("expected header token")
        return self.data[start:self.pos].decode("ascii", errors="replace")

    def read_int(self, what: str) -> int:
        tok = self.read_token()
        try:
            return int(tok)
        except ValueError:
            self.fail(f"invalid {what} {tok!r}")

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            self.fail(f"truncated payload (need {n} more bytes)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out


# ---------------------------------------------------------------------------
# PGM

def decode_pgm(data: bytes, name: str = "<pgm>") -> np.ndarray:
    r = _ByteReader(data, name)
    if r.read_token() != "P5":
        r.fail("not a binary PGM (expected magic P5)")
    width = r.read_int("width")
    height = r.read_int("height")
    maxval = r.read_int("maxval")
    if width < 1 or height < 1:
        r.fail(f"bad dimensions {width}x{height}")
    if not (0 < maxval < 65536):
        r.fail(f"maxval {maxval} out of range")
    # exactly one whitespace byte separates header and payload
    if r.pos >= len(data) or data[r.pos:r.pos + 1] not in b" \t\r\n":
        r.fail("missing whitespace before payload")
    r.pos += 1
    if maxval < 256:
        raw = r.take(width * height)
        arr = np.frombuffer(raw, dtype=np.uint8)
    else:
        raw = r.take(2 * width * height)
        arr = np.frombuffer(raw, dtype=">u2")
    return arr.reshape(height, width).astype(np.uint16 if maxval >= 256 else np.uint8)


def encode_pgm(values: np.ndarray, maxval: int = 255) -> bytes:
    if maxval not in (255, 65535):
        raise ValueError(f"maxval must be 255 or 65535, got {maxval}")
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ValueError(f"PGM data must be 2-D, got shape {arr.shape}")
    rounded = np.rint(arr)
    if not np.array_equal(rounded, arr) or arr.min() < 0 or arr.max() > maxval:
        raise ValueError(f"PGM values must be integers in [0, {maxval}]")
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n".encode("ascii")
    payload = rounded.astype(np.uint8 if maxval == 255 else ">u2").tobytes()
    return header + payload


# ---------------------------------------------------------------------------
# PFM (grayscale)

def decode_pfm(data: bytes, name: str = "<pfm>") -> np.ndarray:
    r = _ByteReader(data, name)
    magic = r.read_line().strip()
    if magic == "PF":
        r.fail("color PFM is not supported (grayscale Pf only)")
    if magic != "Pf":
        r.fail(f"not a grayscale PFM (expected magic Pf, got {magic!r})")
    dims = r.read_line().split()
    if len(dims) != 2:
        r.fail("dimensions line must hold width and height")
    try:
        width, height = int(dims[0]), int(dims[1])
    except ValueError:
        r.fail(f"invalid dimensions {dims!r}")
    if width < 1 or height < 1:
        r.fail(f"bad dimensions {width}x{height}")
    try:
        scale = float(r.read_line().strip())
    except ValueError:
        r.fail("invalid scale line")
    if scale == 0:
        r.fail("scale must be nonzero")
    raw = r.take(4 * width * height)
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(raw, dtype=dtype).reshape(height, width)
    # rows are stored bottom-to-top
    return np.ascontiguousarray(arr[::-1]).astype(np.float32)


def encode_pfm(values: np.ndarray) -> bytes:
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"PFM data must be 2-D, got shape {arr.shape}")
    header = f"Pf\n{arr.shape[1]} {arr.shape[0]}\n-1.0\n".encode("ascii")
    return header + arr[::-1].astype("<f4").tobytes()


def read_image(path) -> Tensor:
    """Read a PGM or PFM file (dispatch on magic) as a single-channel tensor."""
    with open(path, "rb") as fh:
        data = fh.read()
    name = os.fspath(path)
    if data[:2] == b"P5":
        return Tensor(decode_pgm(data, name).astype(np.float32))
    if data[:2] in (b"Pf", b"PF"):
        return Tensor(decode_pfm(data, name))
    raise FormatError(f"{name}: unknown image magic {data[:2]!r} at byte offset 0")


def write_image(path, x: Tensor, fmt: str, maxval: int = 255) -> None:
    """Write a single-channel tensor as ``pgm`` or ``pfm`` (atomic)."""
    if x.channels != 1:
        raise ValueError(f"image files hold one channel, tensor has {x.channels}")
    if fmt == "pfm":
        payload = encode_pfm(x.data[0])
    elif fmt == "pgm":
        payload = encode_pgm(x.data[0], maxval=maxval)
    else:
        raise ValueError(f"format must be pgm or pfm, got {fmt!r}")
    atomic_write(path, payload)


# ---------------------------------------------------------------------------
# Run-length masks

@dataclass(frozen=True)
class RleMask:
    """Row-major run lengths, alternating and starting with a background(0)
    run; only the leading run may be zero."""

    height: int
    width: int
    runs: tuple[int, ...]

    def __post_init__(self):
        runs = tuple(int(r) for r in self.runs)
        object.__setattr__(self, "runs", runs)
        if not runs:
            raise ValueError("empty run list")
        if runs[0] < 0 or any(r <= 0 for r in runs[1:]):
            raise ValueError(f"runs must be positive (leading zero permitted): {runs}")
        total = sum(runs)
        if total != self.height * self.width:
            raise ValueError(
                f"run total {total} != {self.height}x{self.width} pixels"
            )

    def decode(self) -> np.ndarray:
        values = np.arange(len(self.runs)) % 2
        flat = np.repeat(values.astype(bool), self.runs)
        return flat.reshape(self.height, self.width)


def rle_encode(mask: np.ndarray) -> RleMask:
    """Canonical run-length encoding of a binary map."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {arr.shape}")
    flat = arr.ravel().astype(bool)
    changes = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return RleMask(arr.shape[0], arr.shape[1], tuple(runs))


def rle_to_token(m: RleMask) -> str:
    return f"{m.height}x{m.width}:" + ",".join(str(r) for r in m.runs)


def rle_from_token(token: str) -> RleMask:
    try:
        dims, runs_part = token.split(":", 1)
        h_s, w_s = dims.split("x")
        runs = tuple(int(r) for r in runs_part.split(","))
        return RleMask(int(h_s), int(w_s), runs)
    except (ValueError, TypeError) as exc:
        raise FormatError(f"malformed rle token {token!r}: {exc}") from exc


# ---------------------------------------------------------------------------
# Flat binary tensor containers

_TENSOR_MAGIC = b"WTB1\n"
_NAMED_MAGIC = b"WTBD1\n"


def encode_tensor(x: Tensor) -> bytes:
    dims = f"{x.channels} {x.height} {x.width}\n".encode("ascii")
    return _TENSOR_MAGIC + dims + x.data.astype("<f4").tobytes()


def decode_tensor(data: bytes, name: str = "<tensor>") -> Tensor:
    r = _ByteReader(data, name)
    if r.take(len(_TENSOR_MAGIC)) != _TENSOR_MAGIC:
        r.pos = 0
        r.fail("bad tensor magic")
    c, h, w = (r.read_int(k) for k in ("channels", "height", "width"))
    r.skip_header_space()
    raw = r.take(4 * c * h * w)
    return Tensor(np.frombuffer(raw, dtype="<f4").reshape(c, h, w).copy())


def save_tensor(path, x: Tensor) -> None:
    atomic_write(path, encode_tensor(x))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read(), os.fspath(path))


def save_named_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    parts = [_NAMED_MAGIC, f"{len(arrays)}\n".encode("ascii")]
    for name, arr in arrays.items():
        if any(ch.isspace() for ch in name):
            raise ValueError(f"array name may not contain whitespace: {name!r}")
        a = np.asarray(arr, dtype=np.float32)
        dims = " ".join(str(d) for d in a.shape)
        parts.append(f"{name} {a.ndim} {dims}\n".encode("ascii"))
        parts.append(a.astype("<f4").tobytes())
    atomic_write(path, b"".join(parts))


def load_named_arrays(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    r = _ByteReader(data, os.fspath(path))
    if r.take(len(_NAMED_MAGIC)) != _NAMED_MAGIC:
        r.pos = 0
        r.fail("bad container magic")
    count = int(r.read_line())
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        fields = r.read_line().split()
        if len(fields) < 2:
            r.fail("malformed array header")
        name = fields[0]
        ndim = int(fields[1])
        if len(fields) != 2 + ndim:
            r.fail(f"array {name}: expected {ndim} dims")
        shape = tuple(int(d) for d in fields[2:])
        n = int(np.prod(shape)) if shape else 1
        raw = r.take(4 * n)
        out[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return out


# ---------------------------------------------------------------------------
# key=value configs and atomic output

def parse_config(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment; keys are unique."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise FormatError(f"line {lineno}: expected key=value, got {stripped!r}")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if key in out:
            raise FormatError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def render_config(pairs: dict[str, str]) -> str:
    return "".join(f"{k}={v}\n" for k, v in pairs.items())


def format_float(x: float) -> str:
    """Fixed 6-decimal rendering (round-half-even) for diffable reports."""
    return f"{float(x):.6f}"


def atomic_write(path, data: bytes) -> None:
    """Write via a temp file in the same directory plus rename."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-wafertex-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write(path, text.encode("utf-8"))
