"""File formats: binary tensors, MOT CSV tables, run configs, dataset dirs.

Tensor file layout (little-endian)::

    b"AEDC" | u32 version=1 | u32 count |
    count x ( u32 name_len | utf-8 name | u32 rank | rank x u32 dim | f64 data )
"""

from __future__ import annotations

import dataclasses
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Optional

import numpy as np
import yaml

from .geometry import BBox, ConfigError

MAGIC = b"AEDC"
VERSION = 1
CONFIG_ENV = "SIMASSOC_CONFIG"


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class MotFormatError(ValueError):
    pass


def encode_tensors(tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d arrays to 1-d
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def decode_tensors(buf: bytes) -> dict:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedError(f"file ends at byte {len(buf)}, needed {pos + n}")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise BadMagicError("not a tensor file (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise VersionError(f"unsupported version {version}, expected {VERSION}")
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        out[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes")
    return out


def write_tensors(path, tensors: dict) -> None:
    Path(path).write_bytes(encode_tensors(tensors))


def read_tensors(path) -> dict:
    return decode_tensors(Path(path).read_bytes())


# -- MOT tables ---------------------------------------------------------------

class MotRow(NamedTuple):
    frame: int
    id: int
    left: float
    top: float
    width: float
    height: float
    score: float

    def bbox(self, size: tuple[int, int]) -> BBox:
        W, H = size
        return BBox((self.left + self.width / 2) / W, (self.top + self.height / 2) / H,
                    self.width / W, self.height / H)


@dataclass
class MotTable:
    size: tuple[int, int]
    rows: list = field(default_factory=list)

    def track_rows(self):
        """``(frame, id, BBox, score)`` tuples in normalized coordinates."""
        return [(r.frame, r.id, r.bbox(self.size), r.score) for r in self.rows]


def to_mot_row(frame: int, tid: int, box: BBox, score: float, size: tuple[int, int]) -> MotRow:
    W, H = size
    return MotRow(int(frame), int(tid), (box.cx - box.w / 2) * W, (box.cy - box.h / 2) * H,
                  box.w * W, box.h * H, float(score))


def format_mot(table: MotTable) -> str:
    lines = [f"# size {table.size[0]} {table.size[1]}"]
    for r in table.rows:
        lines.append(f"{r.frame},{r.id},{r.left:.6f},{r.top:.6f},{r.width:.6f},{r.height:.6f},"
                     f"{r.score:.6f},-1,-1,-1")
    return "\n".join(lines) + "\n"


def parse_mot(text: str, source: str = "<string>") -> MotTable:
    size = None
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            parts = s[1:].split()
            if len(parts) == 3 and parts[0] == "size":
                try:
                    size = (int(parts[1]), int(parts[2]))
                except ValueError:
                    raise MotFormatError(f"{source}:{lineno}: bad size header") from None
            continue
        fields = s.split(",")
        if len(fields) != 10:
            raise MotFormatError(f"{source}:{lineno}: expected 10 fields, got {len(fields)}")
        try:
            frame, tid = int(fields[0]), int(fields[1])
            l, t, w, h, score = (float(x) for x in fields[2:7])
        except ValueError:
            raise MotFormatError(f"{source}:{lineno}: unparsable value in {s!r}") from None
        rows.append(MotRow(frame, tid, l, t, w, h, score))
    if size is None:
        raise MotFormatError(f"{source}: missing '# size W H' header")
    return MotTable(size, rows)


def read_mot(path) -> MotTable:
    return parse_mot(Path(path).read_text(), str(path))


def write_mot(path, table: MotTable) -> None:
    Path(path).write_text(format_mot(table))


# -- run configuration ----------------------------------------------------------

@dataclass
class DataConfig:
    train_sequences: int = 50
    eval_sequences: int = 10
    frame_size: tuple = (640, 640)
    seed: int = 0


def _sections():
    from .assoc import MatchConfig
    from .loss import LossWeights
    from .net import ModelConfig
    from .synth import SceneConfig
    from .train import TrainConfig
    return {"scene": SceneConfig, "train": TrainConfig, "match": MatchConfig, "loss": LossWeights,
            "model": ModelConfig, "data": DataConfig}


@dataclass
class RunConfig:
    scene: object = None
    train: object = None
    match: object = None
    loss: object = None
    model: object = None
    data: object = None

    def __post_init__(self):
        for name, cls in _sections().items():
            if getattr(self, name) is None:
                setattr(self, name, cls())

    def to_dict(self) -> dict:
        out = {}
        for name in _sections():
            sec = dataclasses.asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in sec.items()}
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        doc = doc or {}
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a mapping")
        sections = _sections()
        unknown = set(doc) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        built = {}
        for name, klass in sections.items():
            values = doc.get(name) or {}
            if not isinstance(values, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            known = {f.name: f for f in dataclasses.fields(klass)}
            bad = set(values) - set(known)
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
            defaults = klass()
            kwargs = {}
            for k, v in values.items():
                kwargs[k] = _coerce(v, getattr(defaults, k), f"{name}.{k}")
            built[name] = klass(**kwargs)
        cfg = cls(**built)
        cfg.validate()
        return cfg

    def validate(self) -> "RunConfig":
        for name in ("scene", "train", "match", "loss", "model"):
            getattr(self, name).validate()
        if self.scene.d_feat != self.model.d_feat:
            raise ConfigError("scene.d_feat and model.d_feat must agree")
        return self

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def override(self, dotted: str, raw: str) -> "RunConfig":
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must be section.key")
        sec, key = dotted.split(".", 1)
        doc = self.to_dict()
        if sec not in doc or key not in doc[sec]:
            raise ConfigError(f"unknown config key {dotted!r}")
        doc[sec][key] = yaml.safe_load(raw)
        return RunConfig.from_dict(doc)


def _coerce(value, default, where: str):
    if value is None:
        if default is None:
            return None
        raise ConfigError(f"{where} may not be null")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigError(f"{where} must be a list of {len(default)}")
        return tuple(_coerce(v, d, where) for v, d in zip(value, default))
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{where} must be a string")
    if default is None and not isinstance(value, (int, float)):
        raise ConfigError(f"{where} must be a number or null")
    return value


def parse_config(text: str) -> RunConfig:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"config is not valid YAML: {e}") from None
    return RunConfig.from_dict(doc)


def load_config(path: Optional[str] = None) -> RunConfig:
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return RunConfig()
    try:
        return parse_config(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None


# -- dataset directories ------------------------------------------------------

def sequence_dirs(root) -> list[Path]:
    return sorted(p for p in Path(root).iterdir() if p.is_dir() and p.name.startswith("seq_"))


def save_sequence(seq, path, size: tuple[int, int]) -> None:
    """Write one synthetic sequence as ``gt.txt``, ``det.txt`` and ``grids.bin``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    gt_rows, det_rows = [], []
    for t, (frame, det) in enumerate(zip(seq.gt_frames(), seq.detections), start=1):
        for box, gid, vis in zip(frame.boxes, frame.ids, frame.visibility):
            gt_rows.append(to_mot_row(t, int(gid), BBox.from_array(box), float(vis), size))
        for box, score in zip(det.boxes, det.scores):
            det_rows.append(to_mot_row(t, -1, BBox.from_array(box), float(score), size))
    write_mot(path / "gt.txt", MotTable(size, gt_rows))
    write_mot(path / "det.txt", MotTable(size, det_rows))
    write_tensors(path / "grids.bin", {f"frame/{t:06d}": g.data for t, g in enumerate(seq.gt.grids, start=1)})


def load_sequence(path):
    """Rebuild a ``SyntheticSequence`` from a directory written by ``save_sequence``."""
    from .net import FeatureGrid
    from .synth import DetectionFrame, FrameGT, GtSequence, SceneConfig, SyntheticSequence

    path = Path(path)
    grids_raw = read_tensors(path / "grids.bin")
    names = sorted(grids_raw)
    grids = [FeatureGrid(grids_raw[n]) for n in names]
    T = len(grids)
    gt = read_mot(path / "gt.txt")
    det = read_mot(path / "det.txt")
    frames, dets = [], []
    for t in range(1, T + 1):
        g = [r for r in gt.rows if r.frame == t]
        boxes = np.array([r.bbox(gt.size).as_array() for r in g]).reshape(-1, 4)
        frames.append(FrameGT(boxes, np.array([r.id for r in g], dtype=np.int64),
                              np.array([r.score for r in g]), np.zeros(len(g))))
        d = [r for r in det.rows if r.frame == t]
        dets.append(DetectionFrame(np.array([r.bbox(det.size).as_array() for r in d]).reshape(-1, 4),
                                   np.array([r.score for r in d])))
    scene = SceneConfig(d_feat=grids[0].d_feat if grids else 8, min_visibility=0.0)
    return SyntheticSequence(GtSequence(frames, grids, np.zeros((0, scene.d_feat)), scene), dets)


def track_table(rows: Iterable, size: tuple[int, int], frame_offset: int = 1) -> MotTable:
    return MotTable(size, [to_mot_row(r[0] + frame_offset, r[1], r[2], r[3], size) for r in rows])
