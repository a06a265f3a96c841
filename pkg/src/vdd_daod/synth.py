"""Synthetic source/target corpora: coloured shapes under weather-like shifts.

Source scenes are bright "daytime" images of circles, squares and triangles
with tight box annotations. Target domains are produced by analytic
corruptions (fog, rain streaks, night darkening with sensor noise, and a
compound of rain-on-dusk / rain-on-night picked per image).
"""
from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

CLASSES = ("circle", "square", "triangle")
SHIFT_KINDS = ("none", "fog", "rain", "night", "compound")
COMPOUND_SUBDOMAINS = ("rain-on-dusk", "rain-on-night")
N_BACKGROUNDS = 4
MIN_SIZE, MAX_SIZE = 16, 44


@dataclass(frozen=True)
class SceneSpec:
    rng_seed: int
    image_size: int = 128
    n_objects: int = 3
    background: int = 0
    max_objects: int = 4


@dataclass(frozen=True)
class DomainShift:
    kind: str
    severity: float
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS and self.kind not in COMPOUND_SUBDOMAINS:
            raise ValueError(f"unknown shift kind {self.kind!r}")
        if not 0.0 <= self.severity <= 1.0:
            raise ValueError(f"severity {self.severity} outside [0, 1]")


@dataclass
class ImageSample:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    domain: int
    boxes: Optional[np.ndarray] = None  # (n, 4) x1 y1 x2 y2
    class_ids: Optional[np.ndarray] = None
    shapes: list = field(default_factory=list)

    def __post_init__(self):
        if self.domain not in (0, 1):
            raise ValueError("domain must be 0 or 1")
        if (self.boxes is not None) != (self.domain == 0):
            raise ValueError("boxes must be present exactly for source samples")


# ------------------------------------------------------------------ rendering

def shape_mask(shape: dict, size: int) -> np.ndarray:
    """Boolean mask of pixels whose centres fall inside ``shape``."""
    ys, xs = np.mgrid[0:size, 0:size]
    px, py = xs + 0.5, ys + 0.5
    cx, cy, s = shape["cx"], shape["cy"], shape["size"]
    half = s / 2
    kind = CLASSES[shape["cls"]]
    if kind == "circle":
        return (px - cx) ** 2 + (py - cy) ** 2 <= half ** 2
    if kind == "square":
        return (np.abs(px - cx) <= half) & (np.abs(py - cy) <= half)
    # isosceles triangle, apex up, base width == height == size
    top, bottom = cy - half, cy + half
    t = (py - top) / s  # 0 at apex, 1 at base
    return (py >= top) & (py <= bottom) & (np.abs(px - cx) <= half * t)


def _mask_box(mask: np.ndarray) -> list[float]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return [float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1)]


def _background(rng: np.random.Generator, texture: int, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size] / size
    c0 = rng.uniform(0.45, 0.95, 3)
    if texture == 0:
        img = np.broadcast_to(c0, (size, size, 3)).copy()
    elif texture == 1:
        c1 = rng.uniform(0.45, 0.95, 3)
        img = c0 * (1 - ys[..., None]) + c1 * ys[..., None]
    elif texture == 2:
        img = np.broadcast_to(c0, (size, size, 3)).copy()
        for _ in range(4):
            bx, by = rng.uniform(0, 1, 2)
            amp = rng.uniform(-0.15, 0.15, 3)
            width = rng.uniform(0.15, 0.35)
            bump = np.exp(-((xs - bx) ** 2 + (ys - by) ** 2) / (2 * width ** 2))
            img += bump[..., None] * amp
    else:
        period = rng.uniform(0.08, 0.2)
        amp = rng.uniform(0.04, 0.1)
        stripes = np.sin(2 * np.pi * (xs + ys) / period)
        img = c0 + amp * stripes[..., None]
    return np.clip(img, 0.0, 1.0)


def _place_shapes(rng: np.random.Generator, n: int, size: int) -> list[dict]:
    shapes: list[dict] = []
    boxes: list[tuple[float, float, float, float]] = []
    # size range is quoted for 128 px canvases and scales with the image
    lo = max(10, round(MIN_SIZE * size / 128))
    hi = max(lo, round(MAX_SIZE * size / 128))
    attempts = 0
    while len(shapes) < n:
        attempts += 1
        if attempts > 500:
            raise RuntimeError("could not place shapes without overlap")
        s = int(rng.integers(lo, hi + 1))
        half = s / 2
        cx = float(rng.integers(int(np.ceil(half)) + 1, int(size - half)))
        cy = float(rng.integers(int(np.ceil(half)) + 1, int(size - half)))
        box = (cx - half - 2, cy - half - 2, cx + half + 2, cy + half + 2)
        if any(box[0] < b[2] and b[0] < box[2] and box[1] < b[3] and b[1] < box[3] for b in boxes):
            continue
        boxes.append(box)
        shapes.append({"cls": int(rng.integers(len(CLASSES))), "cx": cx, "cy": cy, "size": s})
    return shapes


def _contrasting_color(rng: np.random.Generator, under: np.ndarray) -> np.ndarray:
    for _ in range(100):
        color = rng.uniform(0.0, 1.0, 3)
        if np.abs(color - under).mean() >= 0.25:
            return color
    return 1.0 - under


def generate_scene(spec: SceneSpec) -> ImageSample:
    if spec.image_size < 32:
        raise ValueError("image_size must be at least 32")
    if not 1 <= spec.n_objects <= spec.max_objects:
        raise ValueError(f"n_objects must lie in [1, {spec.max_objects}]")
    if not 0 <= spec.background < N_BACKGROUNDS:
        raise ValueError(f"unknown background texture {spec.background}")
    size = spec.image_size
    rng = np.random.default_rng(spec.rng_seed)
    img = _background(rng, spec.background, size)
    shapes = _place_shapes(rng, spec.n_objects, size)
    boxes, classes = [], []
    for shape in shapes:
        mask = shape_mask(shape, size)
        color = _contrasting_color(rng, img[mask].mean(axis=0))
        shape["color"] = [float(c) for c in color]
        img[mask] = color
        boxes.append(_mask_box(mask))
        classes.append(shape["cls"])
    return ImageSample(
        image=img.astype(np.float32),
        domain=0,
        boxes=np.asarray(boxes, dtype=np.float32),
        class_ids=np.asarray(classes, dtype=np.int64),
        shapes=shapes,
    )


# ------------------------------------------------------------------- shifts

_NIGHT_SCALE = np.array([0.88, 0.86, 0.78])
_DUSK_SCALE = np.array([0.45, 0.58, 0.7])


def _darken(img, severity, scale, noise_sigma, rng):
    noise = rng.standard_normal(img.shape)
    return img * (1.0 - severity * scale) + severity * noise_sigma * noise


def _rain_streaks(rng: np.random.Generator, size: int) -> np.ndarray:
    mask = np.zeros((size, size))
    n = int(0.03 * size * size / 8)
    angle = np.deg2rad(rng.uniform(70, 80))
    dx, dy = np.cos(angle), np.sin(angle)
    for _ in range(n):
        x0, y0 = rng.uniform(0, size, 2)
        length = rng.uniform(6, 16)
        strength = rng.uniform(0.5, 1.0)
        t = np.linspace(0, length, int(length) * 2)
        xs = np.round(x0 + t * dx).astype(int)
        ys = np.round(y0 + t * dy).astype(int)
        ok = (xs >= 0) & (xs < size) & (ys >= 0) & (ys < size)
        mask[ys[ok], xs[ok]] = np.maximum(mask[ys[ok], xs[ok]], strength)
    return mask


def _rain(img, severity, rng):
    m = _rain_streaks(rng, img.shape[0])[..., None] * 0.8
    return img + severity * m * (0.85 - img)


def shift_image(image: np.ndarray, shift: DomainShift) -> tuple[np.ndarray, Optional[str]]:
    """Apply ``shift`` to an H x W x 3 image; also returns the compound sub-domain."""
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("pixels must lie in [0, 1]")
    kind, s = shift.kind, shift.severity
    if kind == "compound":
        pick = np.random.default_rng([shift.rng_seed, 0]).integers(len(COMPOUND_SUBDOMAINS))
        kind = COMPOUND_SUBDOMAINS[pick]
    sub = kind if kind in COMPOUND_SUBDOMAINS else None
    if kind == "none" or s == 0.0:
        return image.copy(), sub
    rng = np.random.default_rng(shift.rng_seed)
    img = image.astype(np.float64)
    if kind == "fog":
        a = 0.7 * s
        out = img * (1 - a) + a * 0.9
    elif kind == "rain":
        out = _rain(img, s, rng)
    elif kind == "night":
        out = _darken(img, s, _NIGHT_SCALE, 0.06, rng)
    else:
        base_rng, rain_rng = (np.random.default_rng([shift.rng_seed, i]) for i in (1, 2))
        if kind == "rain-on-dusk":
            base = _darken(img, s, _DUSK_SCALE, 0.03, base_rng)
        else:
            base = _darken(img, s, _NIGHT_SCALE, 0.06, base_rng)
        out = _rain(np.clip(base, 0, 1), s, rain_rng)
    return np.clip(out, 0.0, 1.0).astype(np.float32), sub


def apply_domain_shift(sample: ImageSample, shift: DomainShift, domain: int = 1) -> ImageSample:
    """Shift the pixels of ``sample``; geometry is untouched.

    Boxes are carried over only when the output is labelled as source
    (``domain=0``); callers that need target ground truth for scoring keep
    ``sample.boxes`` themselves.
    """
    image, _ = shift_image(sample.image, shift)
    keep = domain == 0
    return ImageSample(
        image=image,
        domain=domain,
        boxes=sample.boxes.copy() if keep and sample.boxes is not None else None,
        class_ids=sample.class_ids.copy() if keep and sample.class_ids is not None else None,
        shapes=sample.shapes if keep else [],
    )


# ------------------------------------------------------------------- corpus

@dataclass
class CorpusConfig:
    master_seed: int = 0
    image_size: int = 128
    max_objects: int = 4
    n_source_train: int = 512
    n_target_train: int = 128
    n_target_eval: int = 128
    targets: tuple = ("night",)
    severity: float = 0.8
    workers: int = 1

    def validate(self) -> None:
        for name in ("n_source_train", "n_target_train", "n_target_eval"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for kind in self.targets:
            if kind not in SHIFT_KINDS or kind == "none":
                raise ValueError(f"unknown target kind {kind!r}")
        if not 0.0 <= self.severity <= 1.0:
            raise ValueError("severity outside [0, 1]")


def child_seed(master_seed: int, split: str, index: int, stream: int) -> int:
    code = int.from_bytes(hashlib.sha256(split.encode()).digest()[:4], "little")
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(code, index, stream))
    return int(ss.generate_state(1, np.uint64)[0])


def scene_spec_for(cfg: CorpusConfig, split: str, index: int) -> SceneSpec:
    seed = child_seed(cfg.master_seed, split, index, 0)
    rng = np.random.default_rng(seed)
    return SceneSpec(
        rng_seed=seed,
        image_size=cfg.image_size,
        n_objects=int(rng.integers(1, cfg.max_objects + 1)),
        background=int(rng.integers(N_BACKGROUNDS)),
        max_objects=cfg.max_objects,
    )


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _render_one(args):
    cfg, split, index, shift_kind, root = args
    sample = generate_scene(scene_spec_for(cfg, split, index))
    sub = None
    image = sample.image
    if shift_kind != "none":
        shift = DomainShift(shift_kind, cfg.severity, child_seed(cfg.master_seed, split, index, 1))
        image, sub = shift_image(sample.image, shift)
    rel = f"images/{split}/{index:05d}.png"
    path = Path(root) / rel
    Image.fromarray(to_uint8(image)).save(path, format="PNG")
    return {
        "file": rel,
        "boxes": sample.boxes.tolist(),
        "classes": sample.class_ids.tolist(),
        "subdomain": sub,
        "sha256": _sha256(path),
    }


def _splits(cfg: CorpusConfig) -> list[dict]:
    splits = [{"name": "source_train", "domain": 0, "shift": "none", "count": cfg.n_source_train, "labelled": True}]
    for kind in cfg.targets:
        splits.append({"name": f"{kind}_target_train", "domain": 1, "shift": kind,
                       "count": cfg.n_target_train, "labelled": False})
        splits.append({"name": f"{kind}_target_eval", "domain": 1, "shift": kind,
                       "count": cfg.n_target_eval, "labelled": False, "oracle": True})
        if kind == "compound":
            for sub in COMPOUND_SUBDOMAINS:
                splits.append({"name": f"compound_{sub.split('-')[-1]}_eval", "domain": 1, "shift": sub,
                               "count": cfg.n_target_eval, "labelled": False, "oracle": True})
    return splits


def _write_jsonl(path: Path, records: list[dict]) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def build_corpus(cfg: CorpusConfig, out_dir) -> dict:
    """Render every split under ``out_dir`` and write ``manifest.json``.

    Target-train annotation files carry ``boxes: null``; target-eval ground
    truth goes to ``oracle/<split>.jsonl`` only.
    """
    cfg.validate()
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    if not os.access(root, os.W_OK):
        raise PermissionError(f"output directory {root} is not writable")
    (root / "annotations").mkdir(exist_ok=True)
    (root / "oracle").mkdir(exist_ok=True)

    files, split_index = [], {}
    for split in _splits(cfg):
        name = split["name"]
        (root / "images" / name).mkdir(parents=True, exist_ok=True)
        jobs = [(cfg, name, i, split["shift"], str(root)) for i in range(split["count"])]
        if cfg.workers > 1:
            with ProcessPoolExecutor(cfg.workers) as pool:
                rendered = list(pool.map(_render_one, jobs, chunksize=16))
        else:
            rendered = [_render_one(job) for job in jobs]

        records = []
        for r in rendered:
            rec = {"file": r["file"], "domain": split["domain"]}
            if split["labelled"]:
                rec.update(boxes=r["boxes"], classes=r["classes"])
            else:
                rec.update(boxes=None, classes=None)
            records.append(rec)
            files.append({"file": r["file"], "split": name, "domain": split["domain"], "sha256": r["sha256"]})
        ann = root / "annotations" / f"{name}.jsonl"
        _write_jsonl(ann, records)
        entry = {"domain": split["domain"], "shift": split["shift"], "count": split["count"],
                 "annotations": str(ann.relative_to(root)), "oracle": None}
        if split.get("oracle"):
            oracle = root / "oracle" / f"{name}.jsonl"
            oracle_records = []
            for r in rendered:
                rec = {"file": r["file"], "domain": 1, "boxes": r["boxes"], "classes": r["classes"]}
                if r["subdomain"] is not None:
                    rec["subdomain"] = r["subdomain"]
                oracle_records.append(rec)
            _write_jsonl(oracle, oracle_records)
            entry["oracle"] = str(oracle.relative_to(root))
        split_index[name] = entry

    checksums = {e["annotations"]: _sha256(root / e["annotations"]) for e in split_index.values()}
    checksums.update({e["oracle"]: _sha256(root / e["oracle"]) for e in split_index.values() if e["oracle"]})
    config_echo = asdict(cfg)
    config_echo["targets"] = list(cfg.targets)
    config_echo.pop("workers")
    manifest = {
        "format": "vdd-daod-corpus/1",
        "master_seed": cfg.master_seed,
        "config": config_echo,
        "classes": list(CLASSES),
        "splits": split_index,
        "files": files,
        "checksums": dict(sorted(checksums.items())),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def load_manifest(corpus_dir) -> dict:
    return json.loads((Path(corpus_dir) / "manifest.json").read_text())


def read_jsonl(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
