"""Match-set text files and appearance-grid sidecars.

Match-set file (UTF-8, line oriented, lines starting with ``#`` are comments)::

    LPMATCH 1
    image_size <W> <H>
    gt <qw> <qx> <qy> <qz> <tx> <ty> <tz> <unit|metric>      (optional)
    appearance grid <sidecar file name>                       (optional)
    appearance procedural <JSON object on one line>           (optional)
    points <N>
    <x_r> <y_r> <x_t> <y_t>                                   (N rows)
    lines <M>
    <x_rL> <y_rL> <x2_rL> <y2_rL> <x_tL> <y_tL> <x2_tL> <y2_tL>  (M rows)
    end

Floats are written with ``repr`` so float64 values round-trip exactly.

Grid sidecar (binary, little-endian): magic ``b"LPAG"``, u32 version,
u32 ndim, ndim * u32 dims (always ``2, H, W, C``), float32 payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..geometry import GeometryError, RelativePose
from .matchset import LINE_COLS, POINT_COLS, GridAppearance, MatchSet
from .scene import ProceduralAppearance

MAGIC = "LPMATCH"
VERSION = 1
GRID_MAGIC = b"LPAG"
GRID_VERSION = 1


class MatchSetParseError(ValueError):
    def __init__(self, path, lineno, field, message):
        self.path, self.lineno, self.field = str(path), lineno, field
        super().__init__(f"{path}:{lineno}: field {field!r}: {message}")


def _fmt(values):
    return " ".join(repr(float(v)) for v in values)


def save_grids(path, grids) -> None:
    g = np.ascontiguousarray(grids, dtype="<f4")
    head = GRID_MAGIC + struct.pack("<II", GRID_VERSION, g.ndim) + struct.pack(f"<{g.ndim}I", *g.shape)
    Path(path).write_bytes(head + g.tobytes())


def load_grids(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != GRID_MAGIC:
        raise ValueError(f"{path}: not an appearance grid file")
    version, ndim = struct.unpack_from("<II", buf, 4)
    if version != GRID_VERSION:
        raise ValueError(f"{path}: unsupported grid version {version}")
    shape = struct.unpack_from(f"<{ndim}I", buf, 12)
    off = 12 + 4 * ndim
    n = int(np.prod(shape))
    if len(buf) - off != 4 * n:
        raise ValueError(f"{path}: payload size does not match shape {shape}")
    return np.frombuffer(buf, dtype="<f4", offset=off, count=n).reshape(shape).astype(np.float32)


def save_matchset(m: MatchSet, path, grid_sidecar: bool = False) -> None:
    """Write ``m``. Procedural appearance is stored inline unless
    ``grid_sidecar`` asks for rendered grids next to the file."""
    path = Path(path)
    out = [f"{MAGIC} {VERSION}", f"image_size {m.image_size[0]} {m.image_size[1]}"]
    if m.gt is not None:
        out.append(f"gt {_fmt(m.gt.vector())} {m.gt.scale_mode}")
    app = m.appearance
    if app is not None:
        if grid_sidecar and isinstance(app, ProceduralAppearance):
            app = app.render()
        if isinstance(app, GridAppearance):
            side = path.with_suffix(".grid")
            save_grids(side, app.grids)
            out.append(f"appearance grid {side.name}")
        elif isinstance(app, ProceduralAppearance):
            out.append("appearance procedural " + json.dumps(app.to_dict(), separators=(",", ":")))
        else:
            raise TypeError(f"cannot serialize appearance source {type(app).__name__}")
    out.append(f"points {m.n_points}")
    out.extend(_fmt(row) for row in m.points)
    out.append(f"lines {m.n_lines}")
    out.extend(_fmt(row) for row in m.lines)
    out.append("end")
    path.write_text("\n".join(out) + "\n", encoding="utf-8")


def _floats(path, lineno, tokens, names):
    if len(tokens) != len(names):
        raise MatchSetParseError(path, lineno, names[0], f"expected {len(names)} values, got {len(tokens)}")
    vals = []
    for tok, name in zip(tokens, names):
        try:
            v = float(tok)
        except ValueError:
            raise MatchSetParseError(path, lineno, name, f"cannot parse {tok!r} as a number") from None
        if not np.isfinite(v):
            raise MatchSetParseError(path, lineno, name, f"non-finite value {tok!r}")
        vals.append(v)
    return vals


def _count(path, lineno, tokens, name):
    if len(tokens) != 2 or tokens[0] != name:
        raise MatchSetParseError(path, lineno, name, f"expected '{name} <count>'")
    try:
        n = int(tokens[1])
    except ValueError:
        raise MatchSetParseError(path, lineno, name, f"bad count {tokens[1]!r}") from None
    if n < 0:
        raise MatchSetParseError(path, lineno, name, "negative count")
    return n


def load_matchset(path) -> MatchSet:
    path = Path(path)
    rows = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        text = raw.strip()
        if text and not text.startswith("#"):
            rows.append((lineno, text))
    it = iter(rows)

    def nxt(expect):
        try:
            return next(it)
        except StopIteration:
            raise MatchSetParseError(path, len(rows), expect, "unexpected end of file") from None

    lineno, text = nxt("header")
    head = text.split()
    if len(head) != 2 or head[0] != MAGIC:
        raise MatchSetParseError(path, lineno, "header", f"expected '{MAGIC} <version>'")
    if head[1] != str(VERSION):
        raise MatchSetParseError(path, lineno, "header", f"unsupported version {head[1]}")

    lineno, text = nxt("image_size")
    tok = text.split()
    if tok[0] != "image_size" or len(tok) != 3:
        raise MatchSetParseError(path, lineno, "image_size", "expected 'image_size <W> <H>'")
    try:
        size = (int(tok[1]), int(tok[2]))
    except ValueError:
        raise MatchSetParseError(path, lineno, "image_size", "width/height must be integers") from None

    gt = appearance = None
    lineno, text = nxt("points")
    while not text.startswith("points"):
        tok = text.split(None, 2)
        if tok[0] == "gt":
            parts = text.split()
            if len(parts) != 9:
                raise MatchSetParseError(path, lineno, "gt", "expected 7 numbers and a scale mode")
            v = _floats(path, lineno, parts[1:8], ["qw", "qx", "qy", "qz", "tx", "ty", "tz"])
            try:
                gt = RelativePose(np.array(v[:4]), np.array(v[4:]), parts[8])
            except GeometryError as exc:
                raise MatchSetParseError(path, lineno, "gt", str(exc)) from None
        elif tok[0] == "appearance" and len(tok) == 3 and tok[1] == "grid":
            side = path.parent / tok[2]
            try:
                appearance = GridAppearance(load_grids(side))
            except (OSError, ValueError) as exc:
                raise MatchSetParseError(path, lineno, "appearance", str(exc)) from None
        elif tok[0] == "appearance" and len(tok) == 3 and tok[1] == "procedural":
            try:
                appearance = ProceduralAppearance.from_dict(json.loads(tok[2]))
            except (ValueError, KeyError, TypeError) as exc:
                raise MatchSetParseError(path, lineno, "appearance", f"bad procedural description: {exc}") from None
        else:
            raise MatchSetParseError(path, lineno, tok[0], "unknown header field")
        lineno, text = nxt("points")

    n = _count(path, lineno, text.split(), "points")
    points = []
    for _ in range(n):
        ln, t = nxt("points")
        points.append(_floats(path, ln, t.split(), POINT_COLS))
    lineno, text = nxt("lines")
    m = _count(path, lineno, text.split(), "lines")
    lines = []
    for _ in range(m):
        ln, t = nxt("lines")
        lines.append(_floats(path, ln, t.split(), LINE_COLS))
    lineno, text = nxt("end")
    if text != "end":
        raise MatchSetParseError(path, lineno, "end", f"expected 'end', got {text[:40]!r}")
    try:
        return MatchSet(np.array(points).reshape(-1, 4), np.array(lines).reshape(-1, 8), size, appearance, gt)
    except ValueError as exc:
        raise MatchSetParseError(path, lineno, "appearance", str(exc)) from None
