"""Per-image records, binary feature tensors, and model checkpoints.

Records are JSON Lines (one image per line). Feature tensors and checkpoint
blobs share one binary layout::

    b"NFHF1" | u32 rows | u32 dim | rows*dim float32 (little-endian) | u32 crc32(payload)
"""
from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .geometry import Box
from .taxonomy import Taxonomy

NUM_KEYPOINTS = 18
MAGIC = b"NFHF1"
CHECKPOINT_FORMAT = "nofrills-checkpoint"
CHECKPOINT_VERSION = 1

RECORD_FIELDS = ("image_id", "width", "height", "detections", "poses", "gt_pairs")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class FormatError(DataError):
    """Binary file that does not follow the NFHF1 layout or fails its checksum."""


class CheckpointError(DataError):
    pass


@dataclass(frozen=True, eq=False)
class PoseSkeleton:
    """18 keypoints as rows of ``(x, y, confidence)``; confidence 0 means undetected."""

    keypoints: np.ndarray
    box: Box | None = None

    def __post_init__(self):
        kp = np.array(self.keypoints, dtype=np.float64)
        if kp.shape != (NUM_KEYPOINTS, 3):
            raise ValueError(f"skeleton needs {NUM_KEYPOINTS}x3 keypoints, got shape {kp.shape}")
        if not np.all(np.isfinite(kp)):
            raise ValueError("skeleton keypoints must be finite")
        if np.any(kp[:, 2] < 0) or np.any(kp[:, 2] > 1):
            raise ValueError("keypoint confidence must lie in [0, 1]")
        kp.setflags(write=False)
        object.__setattr__(self, "keypoints", kp)

    def __eq__(self, other):
        if not isinstance(other, PoseSkeleton):
            return NotImplemented
        return self.box == other.box and np.array_equal(self.keypoints, other.keypoints)

    def __hash__(self):
        return hash((self.box, self.keypoints.tobytes()))

    @property
    def confident(self) -> np.ndarray:
        return self.keypoints[:, 2] > 0

    def tight_box(self) -> Box | None:
        """Smallest box around confident keypoints, or None if it has zero area."""
        pts = self.keypoints[self.confident]
        if len(pts) < 2:
            return None
        x1, y1 = pts[:, 0].min(), pts[:, 1].min()
        x2, y2 = pts[:, 0].max(), pts[:, 1].max()
        if not (x2 > x1 and y2 > y1):
            return None
        return Box(float(x1), float(y1), float(x2), float(y2))

    def total_confidence(self) -> float:
        return float(self.keypoints[:, 2].sum())


@dataclass(frozen=True)
class Detection:
    box: Box
    object: int
    score: float
    feature_row: int


@dataclass(frozen=True)
class GtPair:
    human_box: Box
    object_box: Box
    hoi: int


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    width: float
    height: float
    detections: tuple[Detection, ...] = ()
    poses: tuple[PoseSkeleton, ...] = ()
    gt_pairs: tuple[GtPair, ...] = ()


@dataclass
class Dataset:
    """Validated records plus the feature tensor their ``feature_row`` fields index."""

    records: list[ImageRecord]
    features: np.ndarray
    taxonomy: Taxonomy
    _index: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index = {r.image_id: k for k, r in enumerate(self.records)}

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ImageRecord]:
        return iter(self.records)

    def __getitem__(self, k: int) -> ImageRecord:
        return self.records[k]

    def by_id(self, image_id: str) -> ImageRecord:
        return self.records[self._index[image_id]]

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset([self.records[k] for k in indices], self.features, self.taxonomy)


# ---------------------------------------------------------------------------
# binary tensors

def encode_tensor(values: np.ndarray) -> bytes:
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-d array, got shape {arr.shape}")
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    header = MAGIC + struct.pack("<II", arr.shape[0], arr.shape[1])
    return header + payload + struct.pack("<I", zlib.crc32(payload))


def decode_tensor(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    hdr = len(MAGIC) + 8
    if len(blob) < hdr + 4 or blob[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{source}: not an NFHF1 file")
    rows, dim = struct.unpack("<II", blob[len(MAGIC):hdr])
    expected = hdr + 4 * rows * dim + 4
    if len(blob) != expected:
        raise FormatError(f"{source}: size {len(blob)} does not match header ({rows}x{dim}, want {expected} bytes)")
    payload = blob[hdr:-4]
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise FormatError(f"{source}: CRC32 mismatch, payload corrupted")
    arr = np.frombuffer(payload, dtype="<f4").reshape(rows, dim).astype(np.float32)
    return arr


def write_features(path: str | Path, values: np.ndarray) -> None:
    arr = np.asarray(values, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise DataError("feature values must be finite")
    Path(path).write_bytes(encode_tensor(arr))


def read_features(path: str | Path) -> np.ndarray:
    arr = decode_tensor(Path(path).read_bytes(), str(path))
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path}: non-finite feature values")
    return arr


# ---------------------------------------------------------------------------
# records

def record_to_dict(r: ImageRecord) -> dict:
    return {
        "image_id": r.image_id,
        "width": r.width,
        "height": r.height,
        "detections": [
            {"box": d.box.to_list(), "object": d.object, "score": d.score, "feature_row": d.feature_row}
            for d in r.detections
        ],
        "poses": [
            {"box": p.box.to_list() if p.box is not None else None, "keypoints": p.keypoints.tolist()}
            for p in r.poses
        ],
        "gt_pairs": [
            {"human_box": g.human_box.to_list(), "object_box": g.object_box.to_list(), "hoi": g.hoi}
            for g in r.gt_pairs
        ],
    }


def _fail(image_id, fld, msg):
    raise DataError(f"image {image_id!r}: field {fld}: {msg}")


def _num(v, image_id, fld):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        _fail(image_id, fld, f"expected a finite number, got {v!r}")
    return float(v)


def _int(v, image_id, fld):
    if isinstance(v, bool) or not isinstance(v, int):
        _fail(image_id, fld, f"expected an integer, got {v!r}")
    return v


def _box(v, image_id, fld, width, height):
    if not isinstance(v, (list, tuple)) or len(v) != 4:
        _fail(image_id, fld, f"expected [x1, y1, x2, y2], got {v!r}")
    xs = [_num(x, image_id, fld) for x in v]
    try:
        b = Box(*xs)
    except ValueError as e:
        _fail(image_id, fld, str(e))
    if width is not None and not b.inside(width, height):
        _fail(image_id, fld, f"box {xs} outside image {width}x{height}")
    return b


def record_from_dict(d: dict, taxonomy: Taxonomy, feature_rows: int | None) -> ImageRecord:
    """Validate one parsed JSON object and build an :class:`ImageRecord`."""
    if not isinstance(d, dict):
        raise DataError(f"record must be a JSON object, got {type(d).__name__}")
    image_id = d.get("image_id")
    if not isinstance(image_id, str) or not image_id:
        raise DataError(f"record has missing or invalid image_id {image_id!r}")
    keys = set(d)
    missing = [k for k in RECORD_FIELDS if k not in keys]
    if missing:
        _fail(image_id, missing[0], "missing")
    extra = sorted(keys - set(RECORD_FIELDS))
    if extra:
        _fail(image_id, extra[0], "unexpected field")
    width = _num(d["width"], image_id, "width")
    height = _num(d["height"], image_id, "height")
    if width <= 0 or height <= 0:
        _fail(image_id, "width/height", "must be positive")

    dets = []
    if not isinstance(d["detections"], list):
        _fail(image_id, "detections", "expected a list")
    for k, det in enumerate(d["detections"]):
        fld = f"detections[{k}]"
        if not isinstance(det, dict) or set(det) != {"box", "object", "score", "feature_row"}:
            _fail(image_id, fld, "expected keys box, object, score, feature_row")
        box = _box(det["box"], image_id, fld + ".box", width, height)
        obj = _int(det["object"], image_id, fld + ".object")
        if not 0 <= obj < taxonomy.num_objects:
            _fail(image_id, fld + ".object", f"object index {obj} out of range")
        score = _num(det["score"], image_id, fld + ".score")
        if not 0.0 <= score <= 1.0:
            _fail(image_id, fld + ".score", f"score {score} outside [0, 1]")
        row = _int(det["feature_row"], image_id, fld + ".feature_row")
        if row < 0 or (feature_rows is not None and row >= feature_rows):
            _fail(image_id, fld + ".feature_row", f"row {row} not in feature tensor with {feature_rows} rows")
        dets.append(Detection(box, obj, score, row))

    poses = []
    if not isinstance(d["poses"], list):
        _fail(image_id, "poses", "expected a list")
    for k, p in enumerate(d["poses"]):
        fld = f"poses[{k}]"
        if not isinstance(p, dict) or set(p) != {"box", "keypoints"}:
            _fail(image_id, fld, "expected keys box, keypoints")
        anchor = None if p["box"] is None else _box(p["box"], image_id, fld + ".box", None, None)
        kps = p["keypoints"]
        if (not isinstance(kps, list) or len(kps) != NUM_KEYPOINTS
                or any(not isinstance(t, list) or len(t) != 3 for t in kps)):
            _fail(image_id, fld + ".keypoints", f"expected {NUM_KEYPOINTS} [x, y, conf] triples")
        vals = [[_num(x, image_id, fld + ".keypoints") for x in t] for t in kps]
        try:
            poses.append(PoseSkeleton(np.array(vals), anchor))
        except ValueError as e:
            _fail(image_id, fld + ".keypoints", str(e))

    gts = []
    if not isinstance(d["gt_pairs"], list):
        _fail(image_id, "gt_pairs", "expected a list")
    for k, g in enumerate(d["gt_pairs"]):
        fld = f"gt_pairs[{k}]"
        if not isinstance(g, dict) or set(g) != {"human_box", "object_box", "hoi"}:
            _fail(image_id, fld, "expected keys human_box, object_box, hoi")
        hb = _box(g["human_box"], image_id, fld + ".human_box", width, height)
        ob = _box(g["object_box"], image_id, fld + ".object_box", width, height)
        hoi = _int(g["hoi"], image_id, fld + ".hoi")
        if not 0 <= hoi < taxonomy.num_hoi:
            _fail(image_id, fld + ".hoi", f"hoi index {hoi} out of range")
        gts.append(GtPair(hb, ob, hoi))

    return ImageRecord(image_id, width, height, tuple(dets), tuple(poses), tuple(gts))


def dump_record(r: ImageRecord) -> str:
    return json.dumps(record_to_dict(r), separators=(",", ":"))


def save_records(records: Iterable[ImageRecord], path: str | Path) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(dump_record(r))
            f.write("\n")


def load_records(path: str | Path, taxonomy: Taxonomy, feature_rows: int | None = None) -> list[ImageRecord]:
    records = []
    seen = set()
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON: {e}") from None
            try:
                r = record_from_dict(d, taxonomy, feature_rows)
            except DataError as e:
                raise DataError(f"{path}:{lineno}: {e}") from None
            if r.image_id in seen:
                raise DataError(f"{path}:{lineno}: duplicate image_id {r.image_id!r}")
            seen.add(r.image_id)
            records.append(r)
    return records


def load_dataset(records_path: str | Path, features_path: str | Path, taxonomy: Taxonomy) -> Dataset:
    features = read_features(features_path)
    records = load_records(records_path, taxonomy, features.shape[0])
    return Dataset(records, features, taxonomy)


def save_dataset(ds: Dataset, records_path: str | Path, features_path: str | Path) -> None:
    save_records(ds.records, records_path)
    write_features(features_path, ds.features)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(params: dict[str, np.ndarray], path: str | Path, meta: dict | None = None) -> None:
    """Write ``manifest.json`` and ``params.nfhf`` into directory ``path``.

    Tensors are stored back to back as one float32 row in the NFHF1 layout,
    so reloading reproduces every value bit-exactly.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, arr in params.items():
        a = np.asarray(arr, dtype=np.float32)
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.reshape(-1))
        offset += a.size
    flat = np.concatenate(chunks) if chunks else np.zeros(0, np.float32)
    blob = encode_tensor(flat.reshape(1, -1))
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "tensors": entries,
        "total": int(offset),
        "blob_crc32": struct.unpack("<I", blob[-4:])[0],
    }
    manifest.update(meta or {})
    (path / "params.nfhf").write_bytes(blob)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no manifest.json") from None
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}/manifest.json: invalid JSON: {e}") from None
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a checkpoint manifest")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {manifest.get('version')} unsupported (want {CHECKPOINT_VERSION})")
    flat = decode_tensor((path / "params.nfhf").read_bytes(), str(path / "params.nfhf")).reshape(-1)
    if flat.size != manifest["total"]:
        raise CheckpointError(f"{path}: blob holds {flat.size} values, manifest says {manifest['total']}")
    params = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        params[e["name"]] = flat[e["offset"]: e["offset"] + n].reshape(e["shape"]).copy()
    return params, manifest


def dataset_equal(a: Sequence[ImageRecord], b: Sequence[ImageRecord]) -> bool:
    return len(a) == len(b) and all(x == y for x, y in zip(a, b))
