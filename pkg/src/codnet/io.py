"""Grayscale map files, the binary weight archive, and metric reports.

Maps are PGM (binary P5 or ASCII P2) or 8-bit PNG. The weight archive is a
small little-endian container::

    b"MCIF" | u32 version | u32 count | count x entry
    entry = u32 name_len | name (UTF-8) | u8 dtype tag | u32 rank | rank x u32 dim | payload
"""
from __future__ import annotations

import csv
import io as _io
import json
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

ARCHIVE_MAGIC = b"MCIF"
ARCHIVE_VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}
REPORT_COLUMNS = ("image", "s_alpha", "e_phi", "f_beta_w", "mae", "skipped")
MAP_EXTENSIONS = (".pgm", ".pnm", ".png")
LUMA = (0.299, 0.587, 0.114)


class FormatError(ValueError):
    """A file that cannot be decoded; the message carries path and reason."""

    def __init__(self, path, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)
        self.reason = reason


@dataclass(frozen=True)
class MapImage:
    samples: np.ndarray  # (H, W), integer samples or float values
    maxval: int = 255

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    def normalized(self) -> np.ndarray:
        if self.samples.dtype.kind == "f":
            return self.samples.astype(np.float64)
        return self.samples.astype(np.float64) / self.maxval


# -- maps ---------------------------------------------------------------------


def _pnm_tokens(data: bytes, path, count: int):
    """First ``count`` header tokens and the offset just past the last one."""
    tokens, i, n = [], 0, len(data)
    while len(tokens) < count:
        while i < n and data[i : i + 1].isspace():
            i += 1
        if i < n and data[i : i + 1] == b"#":
            while i < n and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not data[i : i + 1].isspace() and data[i : i + 1] != b"#":
            i += 1
        if start == i:
            raise FormatError(path, "truncated header")
        tokens.append(data[start:i])
    return tokens, i


def _parse_pgm(data: bytes, path) -> MapImage:
    tokens, offset = _pnm_tokens(data, path, 4)
    magic = tokens[0]
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(path, "non-numeric header field") from None
    if width <= 0 or height <= 0:
        raise FormatError(path, f"invalid size {width}x{height}")
    if not 0 < maxval < 65536:
        raise FormatError(path, f"unsupported maxval {maxval}")
    count = width * height
    if magic == b"P5":
        body = data[offset + 1 :]  # exactly one whitespace byte after maxval
        dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
        need = count * dtype.itemsize
        if len(body) < need:
            raise FormatError(path, f"truncated raster: {len(body)} of {need} bytes")
        samples = np.frombuffer(body[:need], dtype=dtype).reshape(height, width)
    else:
        fields = data[offset:].split()
        if len(fields) < count:
            raise FormatError(path, f"truncated raster: {len(fields)} of {count} samples")
        try:
            samples = np.array([int(f) for f in fields[:count]], dtype=np.int64).reshape(height, width)
        except ValueError:
            raise FormatError(path, "non-numeric sample") from None
    if samples.max() > maxval:
        raise FormatError(path, f"sample exceeds maxval {maxval}")
    return MapImage(samples.astype(np.uint8 if maxval < 256 else np.uint16), maxval)


def _parse_png(data: bytes, path) -> MapImage:
    from PIL import Image

    try:
        with Image.open(_io.BytesIO(data)) as img:
            img.load()
            mode = img.mode
            arr = np.asarray(img)
    except (OSError, SyntaxError) as exc:
        raise FormatError(path, f"unreadable PNG ({exc})") from None
    if mode == "L":
        return MapImage(arr.astype(np.uint8), 255)
    if mode in ("RGB", "RGBA"):
        log.warning("%s: %s PNG converted to grayscale luma", path, mode)
        rgb = arr[..., :3].astype(np.float64)
        return MapImage(rgb @ np.array(LUMA) / 255.0, 255)
    raise FormatError(path, f"unsupported PNG mode {mode!r}; expected 8-bit grayscale or RGB")


def read_map(path) -> MapImage:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FormatError(path, f"cannot read ({exc.strerror})") from None
    if data[:2] in (b"P5", b"P2"):
        return _parse_pgm(data, path)
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        return _parse_png(data, path)
    raise FormatError(path, "not a PGM (P2/P5) or PNG file")


def read_normalized(path) -> np.ndarray:
    return read_map(path).normalized()


def quantize(values) -> np.ndarray:
    """Values in [0, 1] to 8-bit samples, rounding halves up."""
    v = np.asarray(values, dtype=np.float64)
    return np.clip(np.floor(v * 255 + 0.5), 0, 255).astype(np.uint8)


def _leading_squeeze(x: np.ndarray) -> np.ndarray:
    while x.ndim > 2 and x.shape[0] == 1:
        x = x[0]
    return x


def encode_pgm(values) -> bytes:
    if isinstance(values, MapImage):
        exact = values.maxval == 255 and values.samples.dtype == np.uint8
        samples = values.samples if exact else quantize(values.normalized())
    else:
        samples = quantize(_leading_squeeze(np.asarray(values)))
    if samples.ndim != 2:
        raise ValueError(f"expected a 2-D map, got shape {samples.shape}")
    h, w = samples.shape
    return b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(samples, dtype=np.uint8).tobytes()


def write_map(values, path) -> None:
    """Write a [0, 1] map (or a MapImage) as an 8-bit binary PGM."""
    _write_bytes(path, encode_pgm(values))


def _write_bytes(path, data: bytes) -> None:
    path = Path(path)
    try:
        path.write_bytes(data)
    except OSError as exc:
        raise OSError(f"{path}: cannot write ({exc.strerror})") from exc


# -- weight archive ---------------------------------------------------------


def encode_weights(state: dict) -> bytes:
    """Serialize ``name -> array`` in sorted name order."""
    out = [ARCHIVE_MAGIC, struct.pack("<II", ARCHIVE_VERSION, len(state))]
    for name in sorted(state):
        arr = np.asarray(state[name])
        dtype = arr.dtype.newbyteorder("<")
        if dtype not in _DTYPE_TAGS:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}; archive holds float32/float64")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<BI", _DTYPE_TAGS[dtype], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    return b"".join(out)


def decode_weights(data: bytes, path="<bytes>") -> dict:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(path, f"truncated archive at byte {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != ARCHIVE_MAGIC:
        raise FormatError(path, "bad magic; not a weight archive")
    version, count = struct.unpack("<II", take(8))
    if version != ARCHIVE_VERSION:
        raise FormatError(path, f"unsupported archive version {version}")
    state = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        tag, rank = struct.unpack("<BI", take(5))
        if tag not in _TAG_DTYPES:
            raise FormatError(path, f"{name}: unknown dtype tag {tag}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dtype = _TAG_DTYPES[tag]
        size = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(bytes(take(size)), dtype=dtype).reshape(dims)
        if name in state:
            raise FormatError(path, f"duplicate entry {name!r}")
        state[name] = arr.astype(dtype.newbyteorder("="))
    if pos != len(view):
        raise FormatError(path, f"{len(view) - pos} trailing bytes")
    return state


def save_weights(net_or_state, path) -> None:
    from .network import state_dict

    state = net_or_state if isinstance(net_or_state, dict) else state_dict(net_or_state)
    _write_bytes(path, encode_weights(state))


def load_weights(path) -> dict:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FormatError(path, f"cannot read ({exc.strerror})") from None
    return decode_weights(data, path)


# -- reports ----------------------------------------------------------------


def _sig(x):
    """Round to 9 significant digits; None stays None."""
    if x is None:
        return None
    return float(f"{x:.9g}")


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        return f"{x:.9g}"
    return str(x)


def report_document(report, version: str) -> dict:
    """JSON-ready view of a ``DatasetReport`` with every float at 9 significant digits."""
    doc = report.as_dict()
    doc["tool_version"] = version
    doc["rows"] = [{k: (_sig(v) if isinstance(v, float) else v) for k, v in row.items()} for row in doc["rows"]]
    doc["aggregate"] = {k: _sig(v) for k, v in doc["aggregate"].items()}
    doc["params"] = {k: (_sig(v) if isinstance(v, float) else v) for k, v in doc["params"].items()}
    return doc


def encode_report(report, fmt: str = "json", version: str = "0") -> bytes:
    doc = report_document(report, version)
    if fmt == "json":
        return (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode("utf-8")
    if fmt == "csv":
        buf = _io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in doc["rows"]:
            writer.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])
        agg = doc["aggregate"]
        writer.writerow(["__mean__"] + [_fmt(agg[c]) for c in REPORT_COLUMNS[1:-1]] + [""])
        return buf.getvalue().encode("utf-8")
    raise ValueError(f"unknown report format {fmt!r}; use json or csv")


def write_report(report, path, fmt: str = "json", version: str = "0") -> None:
    _write_bytes(path, encode_report(report, fmt, version))


def encode_curve(curve) -> bytes:
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("threshold", "precision", "recall", "f_measure"))
    for row in zip(curve.thresholds, curve.precision, curve.recall, curve.f_measure):
        writer.writerow([f"{float(v):.9g}" for v in row])
    return buf.getvalue().encode("utf-8")


# -- dataset pairing -----------------------------------------------------------


def _maps_by_stem(directory: Path) -> dict:
    found = {}
    for entry in sorted(os.listdir(directory)):
        path = directory / entry
        stem, ext = os.path.splitext(entry)
        if not path.is_file() or ext.lower() not in MAP_EXTENSIONS:
            continue
        if stem in found:
            log.warning("%s: several files share stem %r; using %s", directory, stem, found[stem].name)
            continue
        found[stem] = path
    return found


def pair_dataset(pred_dir, gt_dir) -> list:
    """Match prediction and ground-truth files by stem; returns sorted ``(stem, pred, gt)``."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"{d}: not a directory")
    preds, gts = _maps_by_stem(pred_dir), _maps_by_stem(gt_dir)
    for stem in sorted(set(preds) - set(gts)):
        log.warning("no ground truth for prediction %s", preds[stem])
    for stem in sorted(set(gts) - set(preds)):
        log.warning("no prediction for ground truth %s", gts[stem])
    stems = sorted(set(preds) & set(gts))
    if not stems:
        raise LookupError(f"no matching file stems between {pred_dir} and {gt_dir}")
    return [(s, preds[s], gts[s]) for s in stems]


def read_image(path) -> np.ndarray:
    """Network input as a (3, H, W) float64 array in [0, 1].

    Grayscale maps are replicated across channels; RGB PNGs keep their colour.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FormatError(path, f"cannot read ({exc.strerror})") from None
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        from PIL import Image

        try:
            with Image.open(_io.BytesIO(data)) as img:
                img.load()
                if img.mode in ("RGB", "RGBA"):
                    arr = np.asarray(img)[..., :3].astype(np.float64) / 255.0
                    return np.ascontiguousarray(arr.transpose(2, 0, 1))
        except (OSError, SyntaxError) as exc:
            raise FormatError(path, f"unreadable PNG ({exc})") from None
    gray = read_map(path).normalized()
    return np.repeat(gray[None], 3, axis=0)
