"""File formats: depth/intrinsics input, annotations, detections, raw tensors, PLY.

Annotation
    ``<stem>.png``  16-bit single-channel instance ids, 0 = non-planar
    ``<stem>.json`` sidecar with one record per id (plane, bbox, area_px)

Detections
    JSON object ``{"k": int, "image_size": [w, h], "detections": [...]}``
    where each record is ``{"box": [x0, y0, x1, y1], "score": s,
    "class": c, "coeffs": [...]}``. A bare array of records is accepted on
    read.

Raw tensor
    ``b"PSTN"``, uint32 ndim, ndim x uint32 dims, then float32 data, all
    little-endian, C order.

All writers are byte-deterministic: fixed key order and ``repr`` floats.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import CapacityError, ConfigurationError, DatasetIOError, FormatError, IntegrityError
from .geometry import BoundingBox, CameraIntrinsics, DepthImage, Plane, mask_to_box
from .nms import Detection

__all__ = [
    "load_depth",
    "save_depth",
    "load_intrinsics",
    "save_intrinsics",
    "Annotation",
    "AnnotatedInstance",
    "save_annotation",
    "load_annotation",
    "DetectionFile",
    "read_detections",
    "write_detections",
    "write_tensor",
    "read_tensor",
    "write_tensors",
    "read_tensors",
    "write_ply",
]

SIDECAR_VERSION = 1
TENSOR_MAGIC = b"PSTN"


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, ensure_ascii=True, allow_nan=False) + "\n"


def _read_json(path: Path):
    try:
        text = Path(path).read_text()
    except FileNotFoundError as exc:
        raise DatasetIOError(f"no such file: {path}") from exc
    except OSError as exc:
        raise DatasetIOError(str(exc)) from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc


def _read_uint16_png(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DatasetIOError(f"no such file: {path}")
    try:
        with Image.open(path) as img:
            if img.format != "PNG":
                raise FormatError(f"{path}: not a PNG")
            if img.mode not in ("I;16", "I;16L", "I;16B"):
                raise FormatError(f"{path}: expected 16-bit single-channel PNG, got mode {img.mode}")
            return np.array(img, dtype=np.uint16)
    except FormatError:
        raise
    except OSError as exc:
        raise FormatError(f"{path}: cannot decode image ({exc})") from exc


def _write_uint16_png(path, values: np.ndarray):
    values = np.ascontiguousarray(values, dtype=np.uint16)
    Image.fromarray(values).save(Path(path), format="PNG")


def load_depth(path) -> DepthImage:
    """Depth from a 16-bit grayscale PNG in millimeters."""
    return DepthImage(_read_uint16_png(path))


def save_depth(path, depth: DepthImage):
    vals = np.asarray(depth.values)
    if vals.min(initial=0) < 0 or vals.max(initial=0) > 65535:
        raise CapacityError("depth outside the 16-bit millimeter range")
    _write_uint16_png(path, np.rint(vals))


def load_intrinsics(path) -> CameraIntrinsics:
    try:
        data = _read_json(path)
    except FormatError as exc:
        raise ConfigurationError(str(exc)) from exc
    return CameraIntrinsics.from_dict(data)


def save_intrinsics(path, intr: CameraIntrinsics):
    Path(path).write_text(_dump_json(intr.to_dict()))


@dataclass
class AnnotatedInstance:
    id: int
    plane: Plane | None
    bbox: BoundingBox
    area_px: int
    score: float | None = None

    def to_dict(self) -> dict:
        d = {"id": self.id}
        if self.plane is not None:
            d["plane"] = {"normal": list(self.plane.normal), "offset": self.plane.offset}
        d["bbox"] = [self.bbox.x_min, self.bbox.y_min, self.bbox.x_max, self.bbox.y_max]
        d["area_px"] = self.area_px
        if self.score is not None:
            d["score"] = self.score
        return d


@dataclass
class Annotation:
    labels: np.ndarray
    instances: list
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_labels(cls, labels: np.ndarray, planes: list | None = None,
                    scores: dict | None = None, meta: dict | None = None) -> "Annotation":
        """Build sidecar records from a label map; ``planes[i]`` belongs to id ``i + 1``."""
        labels = np.asarray(labels)
        if labels.size and labels.max() > 65535:
            raise CapacityError("instance id above 65535 does not fit a 16-bit PNG")
        ids = [int(i) for i in np.unique(labels) if i != 0]
        insts = []
        for i in ids:
            m = labels == i
            plane = planes[i - 1] if planes is not None and i - 1 < len(planes) else None
            score = None if scores is None else scores.get(i)
            insts.append(AnnotatedInstance(i, plane, mask_to_box(m), int(np.count_nonzero(m)), score))
        return cls(labels.astype(np.uint16), insts, dict(meta or {}))

    @property
    def scores(self) -> dict:
        return {inst.id: inst.score for inst in self.instances if inst.score is not None}


def _annotation_paths(path) -> tuple:
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".png", ".json") else path
    return stem.with_suffix(".png"), stem.with_suffix(".json")


def save_annotation(ann: Annotation, path):
    """Write ``<stem>.png`` and ``<stem>.json``; ``path`` may name either file or the stem."""
    labels = np.asarray(ann.labels)
    if labels.size and (labels.min() < 0 or labels.max() > 65535):
        raise CapacityError("instance ids must fit in 16 bits")
    png, sidecar = _annotation_paths(path)
    _check_consistency(labels, ann.instances, png)
    _write_uint16_png(png, labels)
    doc = {
        "version": SIDECAR_VERSION,
        "width": int(labels.shape[1]),
        "height": int(labels.shape[0]),
        "meta": ann.meta,
        "instances": [inst.to_dict() for inst in sorted(ann.instances, key=lambda x: x.id)],
    }
    sidecar.write_text(_dump_json(doc))


def _check_consistency(labels: np.ndarray, instances: list, where):
    ids = [inst.id for inst in instances]
    if len(set(ids)) != len(ids):
        raise IntegrityError(f"{where}: duplicate instance ids in sidecar")
    present = {int(i) for i in np.unique(labels) if i != 0}
    if present != set(ids):
        missing = sorted(present - set(ids))
        extra = sorted(set(ids) - present)
        raise IntegrityError(f"{where}: ids in image but not sidecar {missing}, in sidecar only {extra}")
    for inst in instances:
        m = labels == inst.id
        if int(np.count_nonzero(m)) != inst.area_px:
            raise IntegrityError(f"{where}: id {inst.id} area {inst.area_px} != {np.count_nonzero(m)}")
        tight = mask_to_box(m)
        b = inst.bbox
        if not (b.x_min <= tight.x_min and b.y_min <= tight.y_min
                and b.x_max >= tight.x_max and b.y_max >= tight.y_max):
            raise IntegrityError(f"{where}: bbox of id {inst.id} does not bound its mask")


def load_annotation(path) -> Annotation:
    png, sidecar = _annotation_paths(path)
    labels = _read_uint16_png(png)
    doc = _read_json(sidecar)
    try:
        if (doc["width"], doc["height"]) != (labels.shape[1], labels.shape[0]):
            raise IntegrityError(f"{sidecar}: size disagrees with {png}")
        instances = []
        for rec in doc["instances"]:
            plane = None
            if "plane" in rec:
                plane = Plane(tuple(rec["plane"]["normal"]), float(rec["plane"]["offset"]))
            instances.append(AnnotatedInstance(
                id=int(rec["id"]),
                plane=plane,
                bbox=BoundingBox.from_array(rec["bbox"]),
                area_px=int(rec["area_px"]),
                score=rec.get("score"),
            ))
        meta = doc.get("meta", {})
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, IntegrityError):
            raise
        raise FormatError(f"{sidecar}: malformed sidecar ({exc!r})") from exc
    _check_consistency(labels, instances, sidecar)
    return Annotation(labels, instances, meta)


@dataclass
class DetectionFile:
    detections: list
    k: int | None = None
    image_size: tuple | None = None

    def __post_init__(self):
        lengths = {d.coeffs.size for d in self.detections}
        if len(lengths) > 1:
            raise FormatError(f"mixed coefficient lengths {sorted(lengths)}")
        if self.k is None:
            self.k = lengths.pop() if lengths else 0
        elif lengths and lengths != {self.k}:
            raise FormatError(f"records have k={sorted(lengths)} but header says k={self.k}")


def _detection_record(d: Detection) -> dict:
    return {
        "box": [d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max],
        "score": d.score,
        "class": d.class_id,
        "coeffs": [float(v) for v in d.coeffs],
    }


def write_detections(path, dfile: DetectionFile):
    doc = {
        "k": dfile.k,
        "image_size": None if dfile.image_size is None else [int(v) for v in dfile.image_size],
        "detections": [_detection_record(d) for d in dfile.detections],
    }
    Path(path).write_text(_dump_json(doc))


def read_detections(path) -> DetectionFile:
    doc = _read_json(path)
    if isinstance(doc, list):
        records, k, size = doc, None, None
    elif isinstance(doc, dict) and "detections" in doc:
        records, k, size = doc["detections"], doc.get("k"), doc.get("image_size")
    else:
        raise FormatError(f"{path}: expected a detection array or object with 'detections'")
    dets = []
    try:
        for rec in records:
            dets.append(Detection(
                box=BoundingBox.from_array(rec["box"]),
                score=rec["score"],
                class_id=rec.get("class", 0),
                coeffs=np.array(rec.get("coeffs", []), dtype=np.float64),
            ))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad detection record ({exc})") from exc
    return DetectionFile(dets, k, None if size is None else tuple(size))


def write_tensor(path, array: np.ndarray):
    array = np.asarray(array, dtype="<f4")
    header = TENSOR_MAGIC + struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(array).tobytes())


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError as exc:
        raise DatasetIOError(f"no such file: {path}") from exc
    if raw[:4] != TENSOR_MAGIC or len(raw) < 8:
        raise FormatError(f"{path}: not a raw tensor file")
    (ndim,) = struct.unpack_from("<I", raw, 4)
    offset = 8 + 4 * ndim
    if len(raw) < offset:
        raise FormatError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{ndim}I", raw, 8)
    count = int(np.prod(shape, dtype=np.int64))
    if len(raw) != offset + 4 * count:
        raise FormatError(f"{path}: payload size does not match shape {shape}")
    return np.frombuffer(raw, dtype="<f4", offset=offset).reshape(shape).astype(np.float32)


def write_tensors(directory, tensors: dict):
    """One ``<name>.tensor`` file per entry."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, arr in sorted(tensors.items()):
        write_tensor(directory / f"{name}.tensor", arr)


def read_tensors(directory) -> dict:
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetIOError(f"no such directory: {directory}")
    return {p.stem: read_tensor(p) for p in sorted(directory.glob("*.tensor"))}


def palette_color(label: int) -> tuple:
    """Stable, well-spread RGB color per instance id; id 0 is gray."""
    if label == 0:
        return (128, 128, 128)
    hue = (label * 0.618033988749895) % 1.0
    h6 = hue * 6.0
    i = int(h6) % 6
    f = h6 - int(h6)
    v, s = 0.95, 0.75
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return tuple(int(round(255 * c)) for c in rgb)


def write_ply(path, points: np.ndarray, labels: np.ndarray | None = None):
    """ASCII PLY of points, colored by instance label when given."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if labels is None:
        labels = np.zeros(len(points), dtype=np.int64)
    labels = np.asarray(labels).reshape(-1)
    if len(labels) != len(points):
        raise ConfigurationError("one label per point is required")
    colors = {int(lab): palette_color(int(lab)) for lab in np.unique(labels)}
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(points)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "property ushort label",
        "end_header",
    ]
    for (x, y, z), lab in zip(points, labels):
        r, g, b = colors[int(lab)]
        lines.append(f"{x:.6f} {y:.6f} {z:.6f} {r} {g} {b} {int(lab)}")
    Path(path).write_text("\n".join(lines) + "\n")
