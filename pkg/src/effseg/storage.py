"""Disk formats: binary PGM images, the EFSG weights file, CSV artifacts.

Everything here is deterministic: fixed column orders, '.' decimals via
repr(), sorted tensor order in weights files, so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import math
import struct
from pathlib import Path

import numpy as np

from .evaluate import MetricsRecord
from .numerics import Tensor
from .phantom import Sample
from .train import TrainLog

WEIGHTS_MAGIC = b"EFSG"
WEIGHTS_VERSION = 1

META_COLUMNS = ["id", "probe", "apex_row", "apex_col",
                "cross1_row", "cross1_col", "cross2_row", "cross2_col"]
METRICS_COLUMNS = ["id", "variant", "fold", "dsc", "abs_area_error_pct", "area_bias_pct"]
PREPROC_COLUMNS = ["id", "n_detections", "detections",
                   "crop_r0", "crop_r1", "crop_c0", "crop_c1",
                   "pad_top", "pad_bottom", "pad_left", "pad_right",
                   "residual_mean", "residual_max"]


# ---------------------------------------------------------------- PGM images

def write_pgm(path, image) -> None:
    """Binary PGM (P5, maxval 255). Float input in [0,1] is quantized."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {img.shape}")
    if img.dtype != np.uint8:
        if img.min() < 0 or img.max() > 1:
            raise ValueError("float image must lie in [0, 1] for 8-bit quantization")
        img = np.rint(img.astype(np.float64) * 255.0).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    """Parse a binary PGM into uint8 (H, W); malformed files raise ValueError."""
    data = Path(path).read_bytes()
    pos = 0

    def token():
        nonlocal pos
        while pos < len(data):
            if data[pos : pos + 1].isspace():
                pos += 1
            elif data[pos : pos + 1] == b"#":
                while pos < len(data) and data[pos : pos + 1] != b"\n":
                    pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        return data[start:pos]

    if token() != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5)")
    try:
        w, h, maxval = int(token()), int(token()), int(token())
    except ValueError as e:
        raise ValueError(f"{path}: bad PGM header") from e
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    raster = data[pos : pos + w * h]
    if len(raster) != w * h:
        raise ValueError(f"{path}: raster has {len(raster)} bytes, expected {w * h}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w)


# ------------------------------------------------------------- dataset layout

def save_dataset(root, samples: list[Sample]) -> None:
    """images/<id>.pgm + masks/<id>.pgm + meta.csv."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    with open(root / "meta.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(META_COLUMNS)
        for s in samples:
            write_pgm(root / "images" / f"{s.id}.pgm", s.image)
            write_pgm(root / "masks" / f"{s.id}.pgm", s.mask.astype(np.uint8) * 255)
            apex_r = "" if s.apex is None else repr(float(s.apex[0]))
            apex_c = "" if s.apex is None else repr(float(s.apex[1]))
            cross = [str(v) for rc in s.cross_positions for v in rc]
            cross += [""] * (4 - len(cross))
            writer.writerow([s.id, s.probe, apex_r, apex_c, *cross])


def read_meta(root) -> list[list[str]]:
    root = Path(root)
    meta = root / "meta.csv"
    if not meta.exists():
        raise ValueError(f"{root}: missing meta.csv")
    with open(meta, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != META_COLUMNS:
            raise ValueError(f"{meta}: unexpected columns {header}")
        return list(reader)


def load_sample(root, row: list[str]) -> Sample:
    root = Path(root)
    sid, probe, apex_r, apex_c, *cross = row
    img = read_pgm(root / "images" / f"{sid}.pgm").astype(np.float32) / 255.0
    mask = (read_pgm(root / "masks" / f"{sid}.pgm") > 127).astype(np.uint8)
    apex = None if apex_r == "" else (float(apex_r), float(apex_c))
    positions = []
    for i in (0, 2):
        if cross[i] != "":
            positions.append((int(cross[i]), int(cross[i + 1])))
    return Sample(image=img, mask=mask, probe=probe, apex=apex,
                  cross_positions=positions, id=sid)


def load_dataset(root) -> list[Sample]:
    return [load_sample(root, row) for row in read_meta(root)]


# ------------------------------------------------------------- weights file

def _tensor_data(value) -> np.ndarray:
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    return np.ascontiguousarray(arr, dtype="<f4")


def save_weights(path, params: dict) -> None:
    """EFSG container: magic, version, count, then per tensor (sorted by
    name): name length/bytes, rank, dims, raw float32 little-endian data."""
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<II", WEIGHTS_VERSION, len(params)))
        for name in sorted(params):
            arr = _tensor_data(params[name])
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_weights(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}")
    pos = 4

    def unpack(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise ValueError(f"{path}: truncated weights file")
        out = struct.unpack_from(fmt, data, pos)
        pos += size
        return out

    version, count = unpack("<II")
    if version != WEIGHTS_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    params = {}
    for _ in range(count):
        (nlen,) = unpack("<I")
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = unpack("<I")
        dims = unpack(f"<{rank}I")
        n = int(np.prod(dims)) if rank else 1
        end = pos + 4 * n
        if end > len(data):
            raise ValueError(f"{path}: tensor {name} data truncated")
        params[name] = np.frombuffer(data[pos:end], dtype="<f4").reshape(dims).copy()
        pos = end
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return params


# ---------------------------------------------------------------- CSV files

def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(x)
    return str(x)


def write_metrics_csv(path, records: list[MetricsRecord]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_COLUMNS)
        for r in records:
            writer.writerow([r.id, r.variant, r.fold, _fmt(r.dsc),
                             _fmt(r.abs_area_error_pct), _fmt(r.area_bias_pct)])


def read_metrics_csv(path) -> list[MetricsRecord]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty CSV")
        for col in METRICS_COLUMNS:
            if col not in reader.fieldnames:
                raise ValueError(f"{path}: missing column {col!r}")
        records = []
        for row in reader:
            records.append(MetricsRecord(
                id=row["id"], variant=row["variant"], fold=int(row["fold"]),
                dsc=float(row["dsc"]),
                abs_area_error_pct=float(row["abs_area_error_pct"]),
                area_bias_pct=float(row["area_bias_pct"]),
            ))
    if not records:
        raise ValueError(f"{path}: no records")
    return records


def write_train_log_csv(path, log: TrainLog) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "mean_loss", "lr"])
        for e in log.entries:
            writer.writerow([e.epoch, _fmt(e.mean_loss), _fmt(e.lr)])


def write_preproc_log_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(PREPROC_COLUMNS)
        for r in rows:
            writer.writerow([_fmt(r[c]) for c in PREPROC_COLUMNS])


def write_hist_csv(path, counts: list[int], edges: list[float]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_left", "bin_right", "count"])
        for i, c in enumerate(counts):
            writer.writerow([_fmt(float(edges[i])), _fmt(float(edges[i + 1])), c])
