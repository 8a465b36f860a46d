"""SVG overlays of box sets on a grayscale image.

The image is embedded as a base64 PNG written with ``zlib`` and ``struct``
only, so no imaging library is needed.
"""
from __future__ import annotations

import base64
import struct
import zlib
from dataclasses import dataclass
from html import escape
from pathlib import Path
from typing import Sequence

import numpy as np

from .annotations import LabeledBox, _read_json, load_dataset, parse_fused

PALETTE = ("#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#42d4f4", "#f032e6", "#bfef45")


@dataclass
class BoxSet:
    name: str
    boxes: list[LabeledBox]
    classes: list[str]


def _chunk(kind: bytes, data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + kind + data + struct.pack(">I", zlib.crc32(kind + data) & 0xFFFFFFFF)


def png_bytes(pixels: np.ndarray) -> bytes:
    """Encode an 8-bit grayscale grid as PNG (no filtering)."""
    arr = np.asarray(pixels, dtype=np.uint8)
    if arr.ndim != 2:
        raise ValueError("need a 2-D grid")
    h, w = arr.shape
    raw = b"".join(b"\x00" + arr[y].tobytes() for y in range(h))
    header = struct.pack(">IIBBBBB", w, h, 8, 0, 0, 0, 0)
    return b"\x89PNG\r\n\x1a\n" + _chunk(b"IHDR", header) + _chunk(b"IDAT", zlib.compress(raw, 9)) + _chunk(b"IEND", b"")


def box_label(lb: LabeledBox, classes: Sequence[str]) -> str:
    name = classes[lb.class_id] if lb.class_id < len(classes) else str(lb.class_id)
    return f"{name} c={lb.score:.2f}"


def render_svg(pixels: np.ndarray, box_sets: Sequence[BoxSet], scale: int = 8) -> str:
    """One stroke colour per non-empty set, with a legend entry for each."""
    h, w = np.asarray(pixels).shape
    png = base64.b64encode(png_bytes(pixels)).decode("ascii")
    shown = [s for s in box_sets if s.boxes]
    legend_h = 18 * len(shown)
    W, H = w * scale, h * scale
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H + legend_h}" '
        f'viewBox="0 0 {W} {H + legend_h}">',
        f'<image x="0" y="0" width="{W}" height="{H}" style="image-rendering:pixelated" '
        f'href="data:image/png;base64,{png}"/>',
    ]
    for k, s in enumerate(shown):
        colour = PALETTE[k % len(PALETTE)]
        out.append(f'<g class="boxset" data-name="{escape(s.name)}" stroke="{colour}" fill="none">')
        for lb in s.boxes:
            b = lb.box
            out.append(
                f'<rect x="{b.x_min * scale:.2f}" y="{b.y_min * scale:.2f}" '
                f'width="{b.width * scale:.2f}" height="{b.height * scale:.2f}" stroke-width="2"/>'
            )
            out.append(
                f'<text x="{b.x_min * scale + 2:.2f}" y="{b.y_min * scale + 12:.2f}" fill="{colour}" '
                f'stroke="none" font-family="monospace" font-size="11">{escape(box_label(lb, s.classes))}</text>'
            )
        out.append("</g>")
    if shown:
        out.append('<g class="legend" font-family="monospace" font-size="12">')
        for k, s in enumerate(shown):
            colour = PALETTE[k % len(PALETTE)]
            y = H + 18 * k
            out.append(f'<rect x="4" y="{y + 4}" width="10" height="10" fill="{colour}"/>')
            out.append(f'<text x="20" y="{y + 13}">{escape(s.name)}</text>')
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def load_box_sets(path, image_id: str) -> list[BoxSet]:
    """Box sets for one image from an annotation or fused file.

    A multi-annotator file yields one set per annotator; a fused file yields
    one set whose scores are the fused confidences.
    """
    path = Path(path)
    doc = _read_json(path)
    if doc.get("format") == "annjson-fused":
        fd = parse_fused(doc, path)
        return [BoxSet(path.stem, [f.as_labeled() for f in fd.fused.get(image_id, [])], list(fd.classes))]
    ds = load_dataset(path)
    return [BoxSet(a, list(ds.boxes(image_id, a)), list(ds.classes)) for a in ds.annotators]
