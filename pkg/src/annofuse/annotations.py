"""Dataset model and on-disk formats.

Two dataset formats are understood:

``annjson``
    Native JSON: ``classes``, ``annotators``, ``images`` (``id``, ``width``,
    ``height``, optional ``pixels`` path relative to the file, optional
    ``split``) and a flat ``annotations`` list of records
    ``{image_id, annotator_id, class, x_min, y_min, x_max, y_max, score}``.

``vindr-csv``
    Per-radiologist rows ``image_id,rad_id,class_name,x_min,y_min,x_max,y_max``
    plus an ``images.csv`` sidecar (``image_id,width,height``). A row whose
    class is ``No finding`` with empty coordinates marks an empty annotation
    set for that (image, annotator) pair.

Fused label sets use annjson with per-box ``confidence``, ``support`` and
``contributors`` fields and an echo of the fusion config.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

import numpy as np

from .geometry import Box, InvalidInputError, clip_to_image

if TYPE_CHECKING:
    from .fusion import FusedDataset

NO_FINDING = "No finding"
ANNJSON_VERSION = 1
VINDR_HEADER = ["image_id", "rad_id", "class_name", "x_min", "y_min", "x_max", "y_max"]


class AnnotationError(ValueError):
    pass


class ParseError(AnnotationError):
    """Malformed input; the message carries the file location."""


class SchemaError(AnnotationError):
    pass


class PgmError(AnnotationError):
    pass


class DimensionMismatchError(PgmError):
    pass


class UnsupportedFormatError(PgmError):
    pass


@dataclass(frozen=True)
class LabeledBox:
    box: Box
    class_id: int
    score: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise InvalidInputError(f"score {self.score} outside [0, 1]")
        if self.class_id < 0:
            raise InvalidInputError(f"negative class id {self.class_id}")


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    width: int
    height: int
    pixel_path: str | None = None
    split: str | None = None

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise InvalidInputError(f"image {self.image_id!r} has non-positive size")


@dataclass
class MultiAnnotatorDataset:
    """Images plus one (possibly empty) box list per (image, annotator) pair.

    Missing pairs are filled with empty lists on construction, so an absent
    key and an explicit "no finding" mean the same thing.
    """

    classes: list[str]
    images: list[ImageRecord]
    annotators: list[str]
    annotations: dict[tuple[str, str], list[LabeledBox]] = field(default_factory=dict)
    root: Path | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        self.validate()
        for rec in self.images:
            for ann in self.annotators:
                self.annotations.setdefault((rec.image_id, ann), [])

    def validate(self) -> None:
        ids = [r.image_id for r in self.images]
        if len(set(ids)) != len(ids):
            raise SchemaError("duplicate image ids")
        if len(set(self.annotators)) != len(self.annotators):
            raise SchemaError("duplicate annotator ids")
        known_images = set(ids)
        known_annotators = set(self.annotators)
        sizes = {r.image_id: (r.width, r.height) for r in self.images}
        k = len(self.classes)
        for (image_id, ann), boxes in self.annotations.items():
            if image_id not in known_images:
                raise SchemaError(f"annotation references unknown image {image_id!r}")
            if ann not in known_annotators:
                raise SchemaError(f"annotation references unknown annotator {ann!r}")
            w, h = sizes[image_id]
            for lb in boxes:
                if lb.class_id >= k:
                    raise SchemaError(f"class id {lb.class_id} out of range for {k} classes")
                b = lb.box
                if b.x_min < 0 or b.y_min < 0 or b.x_max > w or b.y_max > h:
                    raise SchemaError(f"box {b.as_tuple()} outside image {image_id!r}")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def image(self, image_id: str) -> ImageRecord:
        for rec in self.images:
            if rec.image_id == image_id:
                return rec
        raise KeyError(image_id)

    def boxes(self, image_id: str, annotator_id: str) -> list[LabeledBox]:
        return self.annotations.get((image_id, annotator_id), [])

    def by_annotator(self, image_id: str) -> dict[str, list[LabeledBox]]:
        return {a: self.boxes(image_id, a) for a in self.annotators}

    def subset(self, image_ids: Iterable[str]) -> "MultiAnnotatorDataset":
        keep = set(image_ids)
        images = [r for r in self.images if r.image_id in keep]
        anns = {key: list(v) for key, v in self.annotations.items() if key[0] in keep}
        return MultiAnnotatorDataset(list(self.classes), images, list(self.annotators), anns, self.root)

    def split_ids(self, split: str) -> list[str]:
        return [r.image_id for r in self.images if r.split == split]


def _coerce_box(rec: Mapping, width: int, height: int, where: str) -> Box:
    try:
        coords = [float(rec[k]) for k in ("x_min", "y_min", "x_max", "y_max")]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{where}: bad or missing coordinate ({exc})") from None
    if not all(math.isfinite(c) for c in coords):
        raise ParseError(f"{where}: non-finite coordinate")
    if coords[2] <= coords[0] or coords[3] <= coords[1]:
        raise ParseError(f"{where}: x_max/y_max must exceed x_min/y_min, got {coords}")
    box = clip_to_image(Box(*coords), width, height)
    if box.area <= 0.0:
        raise ParseError(f"{where}: box lies outside image {width}x{height}")
    return box


def _class_index(name, classes: Sequence[str], where: str) -> int:
    try:
        return classes.index(name)
    except ValueError:
        raise ParseError(f"{where}: unknown class {name!r}") from None


def _parse_score(raw, where: str) -> float:
    if raw is None:
        return 1.0
    try:
        score = float(raw)
    except (TypeError, ValueError):
        raise ParseError(f"{where}: score {raw!r} is not a number") from None
    if not (0.0 <= score <= 1.0):
        raise ParseError(f"{where}: score {score} outside [0, 1]")
    return score


# ---------------------------------------------------------------------------
# annjson


def _read_json(path: Path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: top level must be an object")
    return doc


def _require(doc: Mapping, key: str, path, kind=list):
    if key not in doc:
        raise SchemaError(f"{path}: missing field {key!r}")
    if not isinstance(doc[key], kind):
        raise SchemaError(f"{path}: field {key!r} has wrong type")
    return doc[key]


def _parse_images(doc: Mapping, path) -> list[ImageRecord]:
    images = []
    for i, raw in enumerate(_require(doc, "images", path)):
        where = f"{path}: images[{i}]"
        try:
            images.append(
                ImageRecord(
                    str(raw["id"]),
                    int(raw["width"]),
                    int(raw["height"]),
                    raw.get("pixels"),
                    raw.get("split"),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{where}: {exc}") from None
    return images


def _images_json(images: Sequence[ImageRecord]) -> list[dict]:
    out = []
    for r in images:
        d = {"id": r.image_id, "width": r.width, "height": r.height}
        if r.pixel_path is not None:
            d["pixels"] = r.pixel_path
        if r.split is not None:
            d["split"] = r.split
        out.append(d)
    return out


def _dump(doc: dict, path) -> None:
    text = json.dumps(doc, indent=1, allow_nan=False) + "\n"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def read_config(path) -> dict | None:
    """The ``config`` echo stored in an annjson or fused file, if any."""
    return _read_json(Path(path)).get("config")


def parse_annjson(doc: Mapping, path="<annjson>", root: Path | None = None) -> MultiAnnotatorDataset:
    classes = [str(c) for c in _require(doc, "classes", path)]
    annotators = [str(a) for a in _require(doc, "annotators", path)]
    images = _parse_images(doc, path)
    sizes = {r.image_id: (r.width, r.height) for r in images}
    anns: dict[tuple[str, str], list[LabeledBox]] = {}
    for i, rec in enumerate(_require(doc, "annotations", path)):
        where = f"{path}: annotations[{i}]"
        if not isinstance(rec, dict):
            raise ParseError(f"{where}: record must be an object")
        image_id = str(rec.get("image_id"))
        ann = str(rec.get("annotator_id"))
        if image_id not in sizes:
            raise ParseError(f"{where}: unknown image {image_id!r}")
        if ann not in annotators:
            raise ParseError(f"{where}: unknown annotator {ann!r}")
        cls = _class_index(rec.get("class"), classes, where)
        box = _coerce_box(rec, *sizes[image_id], where)
        score = _parse_score(rec.get("score"), where)
        anns.setdefault((image_id, ann), []).append(LabeledBox(box, cls, score))
    try:
        return MultiAnnotatorDataset(classes, images, annotators, anns, root)
    except InvalidInputError as exc:
        raise SchemaError(f"{path}: {exc}") from None


def dataset_to_annjson(ds: MultiAnnotatorDataset, config: Mapping | None = None) -> dict:
    """Serialise ``ds``; ``config`` is echoed verbatim for provenance."""
    records = []
    for r in ds.images:
        for a in ds.annotators:
            for lb in ds.boxes(r.image_id, a):
                b = lb.box
                records.append(
                    {
                        "image_id": r.image_id,
                        "annotator_id": a,
                        "class": ds.classes[lb.class_id],
                        "x_min": b.x_min,
                        "y_min": b.y_min,
                        "x_max": b.x_max,
                        "y_max": b.y_max,
                        "score": lb.score,
                    }
                )
    doc = {
        "format": "annjson",
        "version": ANNJSON_VERSION,
        "classes": list(ds.classes),
        "annotators": list(ds.annotators),
        "images": _images_json(ds.images),
        "annotations": records,
    }
    if config is not None:
        doc["config"] = dict(config)
    return doc


# ---------------------------------------------------------------------------
# vindr-csv


def _read_sidecar(path: Path) -> list[ImageRecord]:
    if not path.exists():
        raise ParseError(f"{path}: image size sidecar not found")
    images = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            try:
                images.append(ImageRecord(row["image_id"], int(row["width"]), int(row["height"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    return images


def parse_vindr_csv(
    path: Path,
    images_csv: Path | None = None,
    classes: Sequence[str] | None = None,
) -> MultiAnnotatorDataset:
    path = Path(path)
    images = _read_sidecar(Path(images_csv) if images_csv else path.parent / "images.csv")
    sizes = {r.image_id: (r.width, r.height) for r in images}
    fixed_classes = classes is not None
    class_list = list(classes) if fixed_classes else []
    annotators: list[str] = []
    anns: dict[tuple[str, str], list[LabeledBox]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in VINDR_HEADER if c not in (reader.fieldnames or [])]
        if missing:
            raise ParseError(f"{path}:1: missing columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            where = f"{path}:{lineno}"
            image_id, rad = row["image_id"], row["rad_id"]
            if image_id not in sizes:
                raise ParseError(f"{where}: unknown image {image_id!r}")
            if rad not in annotators:
                annotators.append(rad)
            key = (image_id, rad)
            name = row["class_name"]
            coords = [row[k] for k in ("x_min", "y_min", "x_max", "y_max")]
            if name == NO_FINDING:
                if any(c.strip() for c in coords):
                    raise ParseError(f"{where}: '{NO_FINDING}' row must have empty coordinates")
                anns.setdefault(key, [])
                continue
            if name not in class_list:
                if fixed_classes:
                    raise ParseError(f"{where}: unknown class {name!r}")
                class_list.append(name)
            box = _coerce_box(row, *sizes[image_id], where)
            anns.setdefault(key, []).append(LabeledBox(box, class_list.index(name)))
    return MultiAnnotatorDataset(class_list, images, annotators, anns, path.parent)


def _fmt_num(v: float) -> str:
    return repr(float(v))


def save_vindr_csv(ds: MultiAnnotatorDataset, path, images_csv=None) -> None:
    path = Path(path)
    side = Path(images_csv) if images_csv else path.parent / "images.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(VINDR_HEADER)
        for r in ds.images:
            for a in ds.annotators:
                boxes = ds.boxes(r.image_id, a)
                if not boxes:
                    w.writerow([r.image_id, a, NO_FINDING, "", "", "", ""])
                for lb in boxes:
                    w.writerow([r.image_id, a, ds.classes[lb.class_id], *map(_fmt_num, lb.box.as_tuple())])
    with open(side, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "width", "height"])
        for r in ds.images:
            w.writerow([r.image_id, r.width, r.height])


# ---------------------------------------------------------------------------
# public entry points


def load_dataset(path, format: str = "annjson", **kwargs) -> MultiAnnotatorDataset:
    """Load and validate a multi-annotator dataset.

    ``format`` is ``"annjson"`` or ``"vindr-csv"``; the latter accepts
    ``images_csv=`` and ``classes=`` keyword arguments.
    """
    path = Path(path)
    if format == "annjson":
        return parse_annjson(_read_json(path), path, path.parent)
    if format == "vindr-csv":
        return parse_vindr_csv(path, **kwargs)
    raise ValueError(f"unknown dataset format {format!r}")


def save_dataset(ds: MultiAnnotatorDataset, path, format: str = "annjson", config: Mapping | None = None, **kwargs) -> None:
    if format == "annjson":
        _dump(dataset_to_annjson(ds, config), path)
    elif format == "vindr-csv":
        save_vindr_csv(ds, path, **kwargs)
    else:
        raise ValueError(f"unknown dataset format {format!r}")


def fused_to_annjson(fd: "FusedDataset") -> dict:
    records = []
    for r in fd.images:
        for fb in fd.fused.get(r.image_id, []):
            b = fb.box
            records.append(
                {
                    "image_id": r.image_id,
                    "class": fd.classes[fb.class_id],
                    "x_min": b.x_min,
                    "y_min": b.y_min,
                    "x_max": b.x_max,
                    "y_max": b.y_max,
                    "confidence": fb.confidence,
                    "support": fb.support,
                    "contributors": list(fb.contributors),
                }
            )
    return {
        "format": "annjson-fused",
        "version": ANNJSON_VERSION,
        "classes": list(fd.classes),
        "images": _images_json(fd.images),
        "config": fd.config.to_dict(),
        "annotations": records,
    }


def save_fused(fd: "FusedDataset", path) -> None:
    _dump(fused_to_annjson(fd), path)


def parse_fused(doc: Mapping, path="<fused>", root: Path | None = None) -> "FusedDataset":
    from .fusion import FusedBox, FusedDataset, WbfConfig

    classes = [str(c) for c in _require(doc, "classes", path)]
    images = _parse_images(doc, path)
    try:
        config = WbfConfig.from_dict(_require(doc, "config", path, dict))
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: bad config ({exc})") from None
    sizes = {r.image_id: (r.width, r.height) for r in images}
    fused: dict[str, list] = {r.image_id: [] for r in images}
    for i, rec in enumerate(_require(doc, "annotations", path)):
        where = f"{path}: annotations[{i}]"
        image_id = str(rec.get("image_id"))
        if image_id not in sizes:
            raise ParseError(f"{where}: unknown image {image_id!r}")
        cls = _class_index(rec.get("class"), classes, where)
        box = _coerce_box(rec, *sizes[image_id], where)
        try:
            fb = FusedBox(
                box,
                cls,
                float(rec["confidence"]),
                int(rec["support"]),
                tuple(str(c) for c in rec["contributors"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{where}: {exc}") from None
        fused[image_id].append(fb)
    return FusedDataset(classes, images, fused, config, root)


def load_fused(path) -> "FusedDataset":
    path = Path(path)
    return parse_fused(_read_json(path), path, path.parent)


# ---------------------------------------------------------------------------
# PGM


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) 8-bit PGM into a ``(height, width)`` uint8 array."""
    data = Path(path).read_bytes()
    pos = 0
    tokens: list[bytes] = []
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PgmError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    magic = tokens[0]
    if magic != b"P5":
        raise UnsupportedFormatError(f"{path}: unsupported PGM variant {magic.decode(errors='replace')!r}, need P5")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise PgmError(f"{path}: malformed PGM header") from None
    if maxval != 255:
        raise UnsupportedFormatError(f"{path}: maxval {maxval} unsupported, need 255")
    pos += 1  # single whitespace byte ends the header
    pixels = data[pos : pos + width * height]
    if len(pixels) != width * height:
        raise PgmError(f"{path}: expected {width * height} pixel bytes, got {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width).copy()


def write_pgm(path, pixels: np.ndarray) -> None:
    arr = np.asarray(pixels)
    if arr.ndim != 2:
        raise ValueError("PGM pixels must be a 2-D grid")
    arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def load_image_pixels(record: ImageRecord, root=None) -> np.ndarray:
    if record.pixel_path is None:
        raise PgmError(f"image {record.image_id!r} has no pixel file")
    path = Path(record.pixel_path)
    if root is not None and not path.is_absolute():
        path = Path(root) / path
    grid = read_pgm(path)
    if grid.shape != (record.height, record.width):
        raise DimensionMismatchError(
            f"{path}: PGM is {grid.shape[1]}x{grid.shape[0]}, record says {record.width}x{record.height}"
        )
    return grid


def relpath(path, start) -> str:
    return Path(os.path.relpath(path, start)).as_posix()
