"""File formats: ``.pts`` annotations, PGM images, box files, configs and model files."""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .cascade import Expert, MixModel
from .errors import CorruptModel, InvalidArg, MismatchedCount, ParseError, UnsupportedFormat, VersionMismatch
from .features import DescriptorParams
from .geometry import as_image, as_shape
from .regression import RegressionStage
from .training import TrainConfig

MODEL_MAGIC = b"MIXMODEL"
MODEL_VERSION = 1


# ---------------------------------------------------------------- .pts files

def parse_pts(text: str, path=None) -> np.ndarray:
    """Parse ``.pts`` text; coordinates are converted from 1-based to 0-based."""
    lines = text.splitlines()
    pos = 0

    def next_line():
        nonlocal pos
        while pos < len(lines) and not lines[pos].strip():
            pos += 1
        if pos >= len(lines):
            return None, pos + 1
        pos += 1
        return lines[pos - 1].strip(), pos

    line, no = next_line()
    if line is None or not line.startswith("version:"):
        raise ParseError("expected 'version: 1'", no, path)
    line, no = next_line()
    if line is None or not line.startswith("n_points:"):
        raise ParseError("expected 'n_points: <p>'", no, path)
    try:
        n_points = int(line.split(":", 1)[1])
    except ValueError as exc:
        raise ParseError(f"bad point count {line!r}", no, path) from exc
    if n_points < 0:
        raise ParseError(f"negative point count {n_points}", no, path)
    line, no = next_line()
    if line != "{":
        raise ParseError("expected '{'", no, path)
    pts = []
    while True:
        line, no = next_line()
        if line is None:
            raise ParseError("missing closing '}'", no, path)
        if line == "}":
            break
        parts = line.split()
        if len(parts) != 2:
            raise ParseError(f"expected '<x> <y>', got {line!r}", no, path)
        try:
            pts.append((float(parts[0]) - 1.0, float(parts[1]) - 1.0))
        except ValueError as exc:
            raise ParseError(f"non-numeric coordinate in {line!r}", no, path) from exc
    if len(pts) != n_points:
        raise MismatchedCount(f"header says {n_points} points, found {len(pts)}", no, path)
    arr = np.array(pts, dtype=float).reshape(-1, 2)
    if not np.all(np.isfinite(arr)):
        raise ParseError("non-finite coordinate", None, path)
    return arr


def load_pts(path) -> np.ndarray:
    path = Path(path)
    return as_shape(parse_pts(path.read_text(), path))


def format_pts(s) -> str:
    s = np.asarray(s, dtype=float).reshape(-1, 2) + 1.0
    body = "".join(f"{x:.6f} {y:.6f}\n" for x, y in s)
    return f"version: 1\nn_points: {len(s)}\n{{\n{body}}}\n"


def _atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_pts(path, s):
    _atomic_write(path, format_pts(s).encode())


# ---------------------------------------------------------------- images and boxes

def _pgm_tokens(data: bytes, n: int):
    """First ``n`` whitespace-separated header tokens (``#`` comments skipped) and the data offset."""
    tokens = []
    i = 0
    while len(tokens) < n:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if i < len(data) and data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j : j + 1].isspace() and data[j : j + 1] != b"#":
            j += 1
        if j == i:
            raise ParseError("truncated PGM header")
        tokens.append(data[i:j])
        i = j
    # exactly one whitespace byte separates the header from the raster
    return tokens, i + 1


def decode_pgm(data: bytes, path=None) -> np.ndarray:
    if data[:2] != b"P5":
        raise UnsupportedFormat(f"{path or 'image'}: only binary PGM (P5) is supported, magic {data[:2]!r}")
    try:
        tokens, offset = _pgm_tokens(data, 4)
        width, height, maxval = (int(t) for t in tokens[1:])
    except (ParseError, ValueError) as exc:
        raise ParseError(f"bad PGM header: {exc}", None, path) from exc
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ParseError(f"bad PGM dimensions {width}x{height} maxval {maxval}", None, path)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dtype.itemsize
    raster = data[offset : offset + need]
    if len(raster) < need:
        raise ParseError(f"PGM raster truncated ({len(raster)} of {need} bytes)", None, path)
    return np.frombuffer(raster, dtype=dtype).reshape(height, width).astype(float) / maxval


def load_image(path) -> np.ndarray:
    path = Path(path)
    return decode_pgm(path.read_bytes(), path)


def encode_pgm(img) -> bytes:
    img = as_image(img)
    h, w = img.shape
    raster = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode() + raster.tobytes()


def write_pgm(path, img):
    _atomic_write(path, encode_pgm(img))


def parse_bbox(text: str, path=None) -> tuple:
    parts = text.replace(",", " ").split()
    if len(parts) != 4:
        raise ParseError(f"expected 4 numbers 'left top right bottom', got {len(parts)}", 1, path)
    try:
        box = tuple(float(v) for v in parts)
    except ValueError as exc:
        raise ParseError(f"non-numeric box value in {text.strip()!r}", 1, path) from exc
    if not np.all(np.isfinite(box)):
        raise ParseError("non-finite box value", 1, path)
    return box


def load_bbox(path) -> tuple:
    path = Path(path)
    return parse_bbox(path.read_text(), path)


def write_bbox(path, box):
    _atomic_write(path, (" ".join(f"{float(v):.6f}" for v in box) + "\n").encode())


# ---------------------------------------------------------------- corpora

@dataclass(eq=False)
class AnnotatedSample:
    image_path: Path
    shape: np.ndarray
    bbox: tuple | None = None
    source: str = ""

    def load_image(self) -> np.ndarray:
        return load_image(self.image_path)


def load_corpus(directory, source: str | None = None) -> list[AnnotatedSample]:
    """Every ``<stem>.pts`` with a matching ``<stem>.pgm`` (and optional ``<stem>.bbox``), sorted by name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise InvalidArg(f"{directory} is not a directory")
    samples = []
    p = None
    for pts in sorted(directory.glob("*.pts")):
        img = pts.with_suffix(".pgm")
        if not img.exists():
            raise InvalidArg(f"no image {img.name} for annotation {pts.name}")
        shape = load_pts(pts)
        if p is not None and shape.shape[0] != p:
            raise MismatchedCount(f"{pts.name} has {shape.shape[0]} points, corpus has {p}", None, pts)
        p = shape.shape[0]
        box_path = pts.with_suffix(".bbox")
        box = load_bbox(box_path) if box_path.exists() else None
        samples.append(AnnotatedSample(img, shape, box, source or directory.name))
    return samples


def load_manifest(directory) -> dict | None:
    """The benchmark manifest next to (or one level above) a corpus directory."""
    directory = Path(directory)
    for cand in (directory / "manifest.json", directory.parent / "manifest.json"):
        if cand.exists():
            return json.loads(cand.read_text())
    return None


def default_pupils(p: int, manifest: dict | None = None):
    """Landmark index sets of the two eyes for common markups."""
    if manifest and "left_pupil" in manifest:
        return list(manifest["left_pupil"]), list(manifest["right_pupil"])
    if p == 68:
        return list(range(36, 42)), list(range(42, 48))
    if p == 49:
        return list(range(19, 25)), list(range(25, 31))
    if p == 20:
        return [0, 1, 2, 3], [4, 5, 6, 7]
    raise InvalidArg(f"no default pupil landmarks for p={p}; pass them explicitly")


# ---------------------------------------------------------------- config files

def parse_config(text: str, path=None) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {line!r}", no, path)
        key, value = (t.strip() for t in line.split("=", 1))
        if not key:
            raise ParseError("empty key", no, path)
        if key in out:
            raise ParseError(f"duplicate key {key!r}", no, path)
        out[key] = value
    return out


def load_config(path) -> dict:
    path = Path(path)
    return parse_config(path.read_text(), path)


def parse_groups(value: str) -> list:
    """``"8,9,10:xy; 16,17:y"`` -> ``[([8, 9, 10], "xy"), ([16, 17], "y")]``."""
    groups = []
    for chunk in value.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        idx, _, axes = chunk.partition(":")
        axes = axes.strip() or "xy"
        if set(axes) - set("xy"):
            raise InvalidArg(f"constraint axes must be from 'xy', got {axes!r}")
        groups.append(([int(v) for v in idx.replace(",", " ").split()], axes))
    return groups


def format_groups(groups) -> str:
    return "; ".join(",".join(str(int(i)) for i in idx) + ":" + axes for idx, axes in groups)


_DESCRIPTOR_KEYS = {f.name for f in fields(DescriptorParams)}


def _convert(kind, value: str):
    if kind is bool:
        return value.lower() in ("1", "true", "yes", "on")
    return kind(value)


def train_config_from_dict(d: dict, base: TrainConfig | None = None) -> TrainConfig:
    """Build a :class:`TrainConfig` from string values; unknown keys raise ``InvalidArg``."""
    cfg = TrainConfig() if base is None else base
    updates, desc = {}, {}
    defaults = {f.name: getattr(cfg, f.name) for f in fields(TrainConfig)}
    for key, value in d.items():
        try:
            if key in _DESCRIPTOR_KEYS:
                desc[key] = _convert(type(getattr(cfg.descriptor, key)), value)
            elif key == "gamma_grid":
                updates[key] = tuple(float(v) for v in value.replace(",", " ").split())
            elif key == "constraint_groups":
                updates[key] = parse_groups(value) if value.lower() not in ("", "none", "default") else None
            elif key in ("transform",):
                updates[key] = value
            elif key in defaults and key != "descriptor":
                updates[key] = _convert(type(defaults[key]), value)
            else:
                raise InvalidArg(f"unknown training config key {key!r}")
        except ValueError as exc:
            if isinstance(exc, InvalidArg):
                raise
            raise InvalidArg(f"bad value for {key!r}: {value!r}") from exc
    if desc:
        updates["descriptor"] = replace(cfg.descriptor, **desc)
    return replace(cfg, **updates)


def format_train_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        v = getattr(cfg, f.name)
        if f.name == "descriptor":
            for df in fields(DescriptorParams):
                lines.append(f"{df.name} = {getattr(v, df.name)!r}")
            continue
        if f.name == "gamma_grid":
            v = ", ".join(repr(g) for g in v)
        elif f.name == "constraint_groups":
            v = "default" if v is None else format_groups(v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- model files

class _Writer:
    def __init__(self):
        self.parts = []

    def u32(self, v):
        self.parts.append(struct.pack("<I", int(v)))

    def f64(self, v):
        self.parts.append(struct.pack("<d", float(v)))

    def string(self, s: str):
        b = s.encode("utf-8")
        self.u32(len(b))
        self.parts.append(b)

    def array(self, a):
        a = np.ascontiguousarray(a, dtype="<f8")
        self.u32(a.ndim)
        self.parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        self.parts.append(a.tobytes())

    def bytes(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CorruptModel("model file is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def string(self) -> str:
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptModel("invalid string in model file") from exc

    def array(self) -> np.ndarray:
        ndim = self.u32()
        if ndim > 8:
            raise CorruptModel(f"array rank {ndim} is implausible")
        shape = struct.unpack(f"<{ndim}Q", self.take(8 * ndim))
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        return np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape).astype(float)


def encode_model(model: MixModel) -> bytes:
    model.validate()
    w = _Writer()
    w.string(model.transform)
    w.string(model.feature_mode)
    dp = model.descriptor_params
    for v in (dp.patch_cells, dp.orientation_bins, dp.patch_radius):
        w.u32(v)
    w.f64(dp.clip_threshold)
    w.f64(model.lam)
    w.f64(model.gating_temperature)
    w.u32(model.frame_size[0])
    w.u32(model.frame_size[1])
    w.f64(model.frame_scale)
    w.f64(model.bbox_scale)
    w.array(model.mean_shape)
    w.u32(model.n_experts)
    w.u32(model.n_stages)
    for e in model.experts:
        w.array(e.prototype)
        for st in e.stages:
            w.array(st.W)
            w.array(st.b)
            w.f64(st.gamma)
            w.f64(st.lam)
    w.string(model.config_text)
    body = MODEL_MAGIC + struct.pack("<I", MODEL_VERSION) + w.bytes()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_model(data: bytes) -> MixModel:
    if len(data) < len(MODEL_MAGIC) + 8 or data[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise CorruptModel("not a model file (bad magic or too short)")
    version = struct.unpack("<I", data[len(MODEL_MAGIC) : len(MODEL_MAGIC) + 4])[0]
    if version != MODEL_VERSION:
        raise VersionMismatch(version, MODEL_VERSION)
    body, crc = data[:-4], struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(body) != crc:
        raise CorruptModel("checksum mismatch (file truncated or modified)")
    r = _Reader(body)
    r.pos = len(MODEL_MAGIC) + 4
    try:
        transform = r.string()
        feature_mode = r.string()
        cells, bins, radius = r.u32(), r.u32(), r.u32()
        params = DescriptorParams(cells, bins, radius, r.f64())
        lam = r.f64()
        tau = r.f64()
        frame_size = (r.u32(), r.u32())
        frame_scale = r.f64()
        bbox_scale = r.f64()
        mean_shape = r.array()
        n_experts, n_stages = r.u32(), r.u32()
        experts = []
        for _ in range(n_experts):
            proto = r.array()
            stages = []
            for _ in range(n_stages):
                W, b = r.array(), r.array()
                stages.append(RegressionStage(W, b, gamma=r.f64(), lam=r.f64()))
            experts.append(Expert(proto, stages))
        config_text = r.string()
        if r.pos != len(body):
            raise CorruptModel(f"{len(body) - r.pos} trailing bytes in model file")
        model = MixModel(experts, params, mean_shape, lam, tau, transform, frame_size, frame_scale, bbox_scale,
                         config_text)
    except CorruptModel:
        raise
    except (InvalidArg, ValueError) as exc:
        raise CorruptModel(f"model file fails validation: {exc}") from exc
    if model.feature_mode != feature_mode:
        raise CorruptModel(f"feature mode {feature_mode!r} disagrees with lam={lam}")
    return model


def save_model(path, model: MixModel):
    _atomic_write(path, encode_model(model))


def load_model(path) -> MixModel:
    return decode_model(Path(path).read_bytes())


def models_equal(a: MixModel, b: MixModel) -> bool:
    """Field-by-field exact comparison."""
    if (a.transform, a.lam, a.gating_temperature, a.frame_size, a.frame_scale, a.bbox_scale, a.config_text,
            a.descriptor_params, a.n_experts, a.n_stages) != (
            b.transform, b.lam, b.gating_temperature, b.frame_size, b.frame_scale, b.bbox_scale, b.config_text,
            b.descriptor_params, b.n_experts, b.n_stages):
        return False
    if not np.array_equal(a.mean_shape, b.mean_shape):
        return False
    for ea, eb in zip(a.experts, b.experts):
        if not np.array_equal(ea.prototype, eb.prototype):
            return False
        for sa, sb in zip(ea.stages, eb.stages):
            if not (np.array_equal(sa.W, sb.W) and np.array_equal(sa.b, sb.b)
                    and sa.gamma == sb.gamma and sa.lam == sb.lam):
                return False
    return True
