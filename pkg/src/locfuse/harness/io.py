"""File formats: PPM/PGM images, JSONL dataset manifests and flat checkpoints.

Checkpoint layout (version 1)::

    LOCFUSE-CKPT 1\\n
    <json header>\\n
    <payload>

The JSON header holds ``{"params": [{"name", "shape", "offset"}], "meta": {...}}``.
Offsets are byte offsets into the payload, which stores every tensor as
little-endian float64 in C order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .scenes import MODALITIES, Example, QASample

MAGIC = b"LOCFUSE-CKPT"
VERSION = 1
_PAYLOAD_DTYPE = np.dtype("<f8")
_IMAGE_MAGIC = {b"P6": 3, b"P5": 1}
MANIFEST_FIELDS = ("id", "rgb_path", "ir_path", "question", "answer", "modality_tag")


class FormatError(ValueError):
    pass


# -- images


def read_image(path) -> np.ndarray:
    """Binary PPM (P6) -> (H, W, 3), PGM (P5) -> (H, W, 1), values ``/255``."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(2)
    if magic not in _IMAGE_MAGIC:
        raise FormatError(f"{path}: expected binary PPM (P6) or PGM (P5), got magic {magic!r}")
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype != np.uint8:
        raise FormatError(f"{path}: only 8-bit images are supported, got {arr.dtype}")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.shape[2] != _IMAGE_MAGIC[magic]:
        raise FormatError(f"{path}: channel count {arr.shape[2]} does not match {magic!r}")
    return arr.astype(np.float64) / 255.0


def to_bytes(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"expected (H, W, 1|3) image, got shape {img.shape}")
    raw = to_bytes(img)
    mode = "RGB" if raw.shape[2] == 3 else "L"
    Image.fromarray(raw if mode == "RGB" else raw[:, :, 0], mode=mode).save(
        path, format="PPM")


# -- manifests


def read_manifest(path) -> list[dict]:
    records = []
    base = Path(path).parent
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
            missing = [k for k in MANIFEST_FIELDS if k not in rec]
            if missing:
                raise FormatError(f"{path}:{lineno}: missing fields {missing}")
            if rec["modality_tag"] not in MODALITIES:
                raise FormatError(f"{path}:{lineno}: modality_tag must be one of {MODALITIES}")
            for k in ("rgb_path", "ir_path"):
                rec[k] = str(base / rec[k])
            records.append(rec)
    return records


def load_manifest_dataset(path) -> list[Example]:
    out = []
    for rec in read_manifest(path):
        qa = QASample(rec["question"], rec["answer"], rec["modality_tag"],
                      rec["answer"] in ("yes", "no"))
        out.append(Example(read_image(rec["rgb_path"]), read_image(rec["ir_path"]), qa))
    return out


def write_manifest(path, dataset: list[Example], image_dir=None) -> None:
    """Writes images next to the manifest (or under ``image_dir``) plus one record per example."""
    path = Path(path)
    image_dir = Path(image_dir) if image_dir else path.parent / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for i, ex in enumerate(dataset):
            rgb, ir = image_dir / f"{i:06d}_rgb.ppm", image_dir / f"{i:06d}_ir.pgm"
            write_image(rgb, ex.rgb)
            write_image(ir, ex.ir)
            rec = dict(id=f"{i:06d}", rgb_path=str(rgb.relative_to(path.parent)),
                       ir_path=str(ir.relative_to(path.parent)), question=ex.qa.question,
                       answer=ex.qa.answer, modality_tag=ex.qa.modality)
            f.write(json.dumps(rec) + "\n")


# -- checkpoints


def save_checkpoint(path, state: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype=_PAYLOAD_DTYPE)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"params": entries, "meta": meta or {}}, sort_keys=True)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC + b" " + str(VERSION).encode() + b"\n")
        f.write(header.encode() + b"\n")
        for c in chunks:
            f.write(c)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        first = f.readline().split()
        if len(first) != 2 or first[0] != MAGIC:
            raise FormatError(f"{path}: not a checkpoint file")
        if int(first[1]) != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {first[1].decode()}")
        header = json.loads(f.readline())
        payload = f.read()
    state = {}
    for e in header["params"]:
        n = int(np.prod(e["shape"], dtype=np.int64)) * _PAYLOAD_DTYPE.itemsize
        if e["offset"] + n > len(payload):
            raise FormatError(f"{path}: truncated payload for {e['name']}")
        buf = payload[e["offset"]: e["offset"] + n]
        state[e["name"]] = np.frombuffer(buf, dtype=_PAYLOAD_DTYPE).reshape(e["shape"]).astype(np.float64)
    return state, header["meta"]
