"""Dataset plumbing: manifests, image I/O, splits, and a synthetic eye-crop
generator that stands in for licensed datasets.

A dataset on disk is a directory with ``images/``, ``masks/`` and
``manifest.jsonl``. The manifest holds one JSON object per line with the
SampleRecord fields (``center`` as ``{"x": ..., "y": ...}``, optional fields
omitted); image paths are relative to the manifest's directory.

The generator draws a dark iris disc with a radial gradient on a light
sclera, then optionally clips it with a parabolic eyelid, multiplies in a
linear shadow ramp, stamps a saturated specular highlight and adds Gaussian
pixel noise. The recorded ground-truth centre is always the geometric disc
centre, even when the eyelid hides part of the disc, while the mask keeps
only the visible iris pixels. That gap is exactly what makes centroid-based
localisation biased on occluded eyes.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace

import numpy as np

from . import rng
from .localise import PixelPoint


class ManifestError(ValueError):
    """Manifest parse/validation failure; message carries line numbers."""


class ImageFormatError(ValueError):
    """Malformed or unsupported image file."""


SIDES = ("L", "R")
TASKS = ("segmentation", "regression")


@dataclass
class SampleRecord:
    id: str
    face_id: str
    side: str
    image_path: str
    mask_path: str | None = None
    center: PixelPoint | None = None
    interocular_px: float | None = None


_RECORD_KEYS = ("id", "face_id", "side", "image_path", "mask_path", "center", "interocular_px")


def record_to_json(rec: SampleRecord) -> str:
    doc: dict = {
        "id": rec.id,
        "face_id": rec.face_id,
        "side": rec.side,
        "image_path": rec.image_path,
    }
    if rec.mask_path is not None:
        doc["mask_path"] = rec.mask_path
    if rec.center is not None:
        doc["center"] = {"x": rec.center.x, "y": rec.center.y}
    if rec.interocular_px is not None:
        doc["interocular_px"] = rec.interocular_px
    return json.dumps(doc)


def save_manifest(records: list[SampleRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(record_to_json(rec) + "\n")


def _parse_record(doc: dict, line_no: int) -> SampleRecord:
    unknown = set(doc) - set(_RECORD_KEYS)
    if unknown:
        raise ManifestError(f"line {line_no}: unknown fields {sorted(unknown)}")
    for key in ("id", "face_id", "side", "image_path"):
        if key not in doc:
            raise ManifestError(f"line {line_no}: missing required field '{key}'")
    if doc["side"] not in SIDES:
        raise ManifestError(f"line {line_no}: side must be L or R, got {doc['side']!r}")
    center = None
    if "center" in doc:
        c = doc["center"]
        if not isinstance(c, dict) or set(c) != {"x", "y"}:
            raise ManifestError(f"line {line_no}: center must be an object with x and y")
        center = PixelPoint(float(c["x"]), float(c["y"]))
    interocular = doc.get("interocular_px")
    if interocular is not None and not interocular > 0:
        raise ManifestError(f"line {line_no}: interocular_px must be positive")
    return SampleRecord(
        id=str(doc["id"]),
        face_id=str(doc["face_id"]),
        side=doc["side"],
        image_path=doc["image_path"],
        mask_path=doc.get("mask_path"),
        center=center,
        interocular_px=None if interocular is None else float(interocular),
    )


def validate_for_task(records: list[SampleRecord], task: str, line_of: dict[str, int] | None = None) -> None:
    """Segmentation needs mask_path, regression needs center."""
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}, got {task!r}")
    field_name = "mask_path" if task == "segmentation" else "center"
    for rec in records:
        if getattr(rec, field_name) is None:
            where = f"line {line_of[rec.id]}" if line_of and rec.id in line_of else f"record '{rec.id}'"
            raise ManifestError(f"{where}: missing field '{field_name}' required for {task}")


def load_manifest(path, task: str | None = None, check_paths: bool = True) -> list[SampleRecord]:
    """Parse and validate a JSONL manifest.

    Duplicate ids, missing task-required fields and dangling image paths are
    all reported here, not mid-training.
    """
    records: list[SampleRecord] = []
    line_of: dict[str, int] = {}
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {line_no}: invalid JSON ({exc.msg})") from None
            if not isinstance(doc, dict):
                raise ManifestError(f"line {line_no}: expected a JSON object")
            rec = _parse_record(doc, line_no)
            if rec.id in line_of:
                raise ManifestError(
                    f"line {line_no}: duplicate id '{rec.id}' (first seen on line {line_of[rec.id]})"
                )
            line_of[rec.id] = line_no
            records.append(rec)
    if task is not None:
        validate_for_task(records, task, line_of)
    if check_paths:
        for rec in records:
            for p in (rec.image_path, rec.mask_path):
                if p is not None and not os.path.isfile(resolve_path(p, base)):
                    raise ManifestError(
                        f"line {line_of[rec.id]}: record '{rec.id}' references missing file {p}"
                    )
    return records


def resolve_path(p: str, base: str) -> str:
    return p if os.path.isabs(p) else os.path.join(base, p)


# -- image I/O ----------------------------------------------------------------


def _read_pgm(data: bytes, path) -> np.ndarray:
    pos = 2  # past magic

    def token() -> bytes:
        nonlocal pos
        while pos < len(data):
            ch = data[pos : pos + 1]
            if ch == b"#":
                nl = data.find(b"\n", pos)
                if nl < 0:
                    raise ImageFormatError(f"{path}: unterminated comment in header")
                pos = nl + 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: truncated header")
        return data[start:pos]

    try:
        w, h, maxval = int(token()), int(token()), int(token())
    except ValueError:
        raise ImageFormatError(f"{path}: non-numeric header field") from None
    if maxval != 255:
        raise ImageFormatError(f"{path}: only maxval 255 supported, got {maxval}")
    if w < 1 or h < 1:
        raise ImageFormatError(f"{path}: bad dimensions {w}x{h}")
    pos += 1  # single whitespace byte between header and payload
    payload = data[pos : pos + w * h]
    if len(payload) != w * h:
        raise ImageFormatError(f"{path}: payload has {len(payload)} bytes, expected {w * h}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w)


def load_image(path) -> np.ndarray:
    """Grayscale HxW float32 in [0,1]; 8-bit value v maps to v/255 exactly.

    PGM (P5, maxval 255) is the native format; 8-bit grayscale PNG is read
    through Pillow when it is installed.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] == b"P5":
        raw = _read_pgm(data, path)
    elif data[:8] == b"\x89PNG\r\n\x1a\n":
        try:
            from PIL import Image
        except ImportError:
            raise ImageFormatError(f"{path}: PNG support requires Pillow") from None
        import io

        with Image.open(io.BytesIO(data)) as im:
            if im.mode != "L":
                raise ImageFormatError(f"{path}: PNG must be 8-bit grayscale, got mode {im.mode}")
            raw = np.asarray(im, dtype=np.uint8)
    else:
        raise ImageFormatError(f"{path}: unknown magic {data[:2]!r}")
    return raw.astype(np.float32) / np.float32(255.0)


def _to_bytes(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_image(img: np.ndarray, path) -> None:
    """Write [0,1] floats as 8-bit grayscale; PGM, or PNG by extension."""
    raw = _to_bytes(img)
    if str(path).lower().endswith(".png"):
        from PIL import Image

        Image.fromarray(raw, mode="L").save(path)
        return
    h, w = raw.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(raw.tobytes())


def save_mask(mask: np.ndarray, path) -> None:
    """Boolean mask as 0/255 bytes."""
    save_image(np.asarray(mask).astype(np.float32), path)


def load_mask(path) -> np.ndarray:
    return load_image(path) >= 0.5


# -- synthetic generator -------------------------------------------------------


@dataclass
class SynthConfig:
    count: int
    seed: int
    image_size: tuple[int, int] = (64, 64)
    iris_radius: tuple[float, float] = (10.0, 16.0)
    center_jitter: tuple[float, float] = (-6.0, 6.0)
    occlusion_prob: float = 0.5
    occlusion_coverage: tuple[float, float] = (0.1, 0.5)
    shadow_strength: tuple[float, float] = (0.0, 0.3)
    highlight_prob: float = 0.3
    noise_sigma: float = 0.02
    interocular_px: float = 120.0

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("count must be >= 0")
        for name in ("iris_radius", "center_jitter", "occlusion_coverage", "shadow_strength"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is inverted: {lo} > {hi}")
        for name in ("occlusion_prob", "highlight_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0,1], got {p}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not self.interocular_px > 0:
            raise ValueError("interocular_px must be positive")
        h, w = self.image_size
        reach = self.iris_radius[1] + max(abs(self.center_jitter[0]), abs(self.center_jitter[1]))
        if reach > min(h, w) / 2:
            raise ValueError(
                f"iris radius + jitter ({reach:.1f}px) exceeds half the {h}x{w} image"
            )


def _render_sample(cfg: SynthConfig, index: int) -> tuple[np.ndarray, np.ndarray, PixelPoint]:
    # per-sample stream: seed XOR index, so parallel generation matches serial
    stream = (cfg.seed ^ index) & 0xFFFFFFFFFFFFFFFF
    u = rng.uniform(stream, 13)
    h, w = cfg.image_size
    cx = w / 2.0 + cfg.center_jitter[0] + u[0] * (cfg.center_jitter[1] - cfg.center_jitter[0])
    cy = h / 2.0 + cfg.center_jitter[0] + u[1] * (cfg.center_jitter[1] - cfg.center_jitter[0])
    radius = cfg.iris_radius[0] + u[2] * (cfg.iris_radius[1] - cfg.iris_radius[0])

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    d2 = (xx - cx) ** 2 + (yy - cy) ** 2
    disc = d2 <= radius * radius

    base = 0.70 + 0.15 * u[11]
    img = np.full((h, w), base, dtype=np.float64)
    ramp = np.sqrt(d2) / radius
    img[disc] = (0.08 + 0.22 * ramp * ramp)[disc]

    mask = disc.copy()
    if u[3] < cfg.occlusion_prob:
        lo, hi = cfg.occlusion_coverage
        coverage = lo + u[4] * (hi - lo)
        edge = cy + (2.0 * coverage - 1.0) * radius - ((xx[0] - cx) ** 2) / (2.0 * radius)
        occluded = yy < edge[None, :]
        img[occluded] = base * 0.82 - 0.03 * u[12]
        mask &= ~occluded

    strength = cfg.shadow_strength[0] + u[5] * (cfg.shadow_strength[1] - cfg.shadow_strength[0])
    angle = 2.0 * math.pi * u[6]
    proj = (xx / max(w - 1, 1) - 0.5) * math.cos(angle) + (yy / max(h - 1, 1) - 0.5) * math.sin(angle)
    img *= 1.0 - strength * (proj + 0.5)

    if u[7] < cfg.highlight_prob:
        hd = u[8] * 0.5 * radius
        ha = 2.0 * math.pi * u[9]
        hx, hy = cx + hd * math.cos(ha), cy + hd * math.sin(ha)
        hr = 1.0 + 1.5 * u[10]
        img[(xx - hx) ** 2 + (yy - hy) ** 2 <= hr * hr] = 0.97

    if cfg.noise_sigma > 0:
        noise = rng.normal(rng.mix64(stream, 1), h * w, std=cfg.noise_sigma).reshape(h, w)
        img = img + noise
    return np.clip(img, 0.0, 1.0).astype(np.float32), mask, PixelPoint(cx, cy)


def synth_generate(cfg: SynthConfig, out_dir) -> list[SampleRecord]:
    """Render the dataset under ``out_dir`` and write its manifest.

    Samples are paired L/R per face id so the d metric has complete faces.
    Output is bit-identical for identical (cfg, seed).
    """
    out_dir = str(out_dir)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    records: list[SampleRecord] = []
    for i in range(cfg.count):
        img, mask, center = _render_sample(cfg, i)
        sid = f"s{i:05d}"
        image_rel = f"images/{sid}.pgm"
        mask_rel = f"masks/{sid}.pgm"
        save_image(img, os.path.join(out_dir, image_rel))
        save_mask(mask, os.path.join(out_dir, mask_rel))
        records.append(
            SampleRecord(
                id=sid,
                face_id=f"f{i // 2:05d}",
                side="L" if i % 2 == 0 else "R",
                image_path=image_rel,
                mask_path=mask_rel,
                center=center,
                interocular_px=cfg.interocular_px,
            )
        )
    save_manifest(records, os.path.join(out_dir, "manifest.jsonl"))
    return records


# -- splitting and augmentation ------------------------------------------------


def split(
    records: list[SampleRecord],
    fractions: tuple[float, float, float] = (0.75, 0.10, 0.15),
    seed: int = 0,
) -> tuple[list[SampleRecord], list[SampleRecord], list[SampleRecord]]:
    """Deterministic face-grouped split; records of one face never separate.

    Partition sizes match the fractions up to the granularity face groups
    force.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    if not records:
        raise ValueError("cannot split an empty record list")
    groups: dict[str, list[SampleRecord]] = {}
    for rec in records:
        groups.setdefault(rec.face_id, []).append(rec)
    face_ids = sorted(groups)
    order = rng.shuffled(len(face_ids), seed)
    n = len(records)
    c1 = round(n * fractions[0])
    c2 = round(n * (fractions[0] + fractions[1]))
    train: list[SampleRecord] = []
    val: list[SampleRecord] = []
    test: list[SampleRecord] = []
    for gi in order:
        group = groups[face_ids[gi]]
        if len(train) < c1:
            train.extend(group)
        elif len(train) + len(val) < c2:
            val.extend(group)
        else:
            test.extend(group)
    return train, val, test


@dataclass
class LoadedSample:
    """A record with its pixel data in memory."""

    record: SampleRecord
    image: np.ndarray
    mask: np.ndarray | None = None
    center: PixelPoint | None = None


def load_sample(rec: SampleRecord, base_dir: str) -> LoadedSample:
    image = load_image(resolve_path(rec.image_path, base_dir))
    mask = None if rec.mask_path is None else load_mask(resolve_path(rec.mask_path, base_dir))
    return LoadedSample(record=rec, image=image, mask=mask, center=rec.center)


def augment_hflip(sample: LoadedSample) -> LoadedSample:
    """Mirror image/mask, reflect the centre x, and swap the eye side."""
    w = sample.image.shape[1]
    center = None
    if sample.center is not None:
        center = PixelPoint((w - 1) - sample.center.x, sample.center.y)
    side = "R" if sample.record.side == "L" else "L"
    return LoadedSample(
        record=replace(sample.record, side=side),
        image=np.ascontiguousarray(sample.image[:, ::-1]),
        mask=None if sample.mask is None else np.ascontiguousarray(sample.mask[:, ::-1]),
        center=center,
    )
