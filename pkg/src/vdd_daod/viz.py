"""Feature-map dumps and detection overlays."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .synth import CLASSES, load_image, to_uint8

_COLORS = {"circle": (230, 25, 75), "square": (60, 180, 75), "triangle": (0, 130, 200)}


def select_channel(f_b: torch.Tensor) -> int:
    """Channel whose spatial maximum is largest (first one on ties)."""
    return int(f_b.flatten(1).max(dim=1).values.argmax())


def normalize_map(fmap: np.ndarray) -> np.ndarray:
    """Min-max scale to uint8; a constant map becomes uniform mid gray."""
    fmap = np.asarray(fmap, dtype=np.float64)
    lo, hi = fmap.min(), fmap.max()
    if hi - lo <= 0:
        return np.full(fmap.shape, 128, dtype=np.uint8)
    return np.round((fmap - lo) / (hi - lo) * 255).astype(np.uint8)


def draw_detections(image: np.ndarray, detections: dict) -> Image.Image:
    canvas = Image.fromarray(to_uint8(image))
    draw = ImageDraw.Draw(canvas)
    for box, score, cls in zip(detections["boxes"].tolist(), detections["scores"].tolist(),
                               detections["classes"].tolist()):
        name = CLASSES[cls]
        draw.rectangle(box, outline=_COLORS[name], width=1)
        draw.text((box[0] + 1, box[1] + 1), f"{name} {score:.2f}", fill=_COLORS[name])
    return canvas


def visualize(model, image_path, out_dir, score_thresh: float = 0.5, upscale: int = 8) -> dict:
    """Write ``f_b.png``, ``f_di.png``, ``f_ds.png`` and ``detections.png``.

    One channel, picked on ``F_b``, is shown for all three maps so they stay
    comparable. Returns the summary also written to ``viz.json``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    image = load_image(image_path)
    tensor = torch.from_numpy(image.transpose(2, 0, 1).copy())
    if tuple(tensor.shape[-2:]) != (model.image_size, model.image_size):
        raise ValueError(f"checkpoint expects {model.image_size}x{model.image_size} images, "
                         f"got {tensor.shape[-1]}x{tensor.shape[-2]}")
    with torch.no_grad():
        bundle = model.features(tensor[None])
    channel = select_channel(bundle.f_b[0])
    maps = {"f_b": bundle.f_b, "f_di": bundle.f_di, "f_ds": bundle.f_ds}
    for name, fmap in maps.items():
        gray = normalize_map(fmap[0, channel].double().numpy())
        size = (gray.shape[1] * upscale, gray.shape[0] * upscale)
        Image.fromarray(gray).resize(size, Image.NEAREST).save(out / f"{name}.png")
    dets = model.detect(tensor, score_thresh)
    draw_detections(image, dets).save(out / "detections.png")
    summary = {"channel": channel, "method": model.method, "n_detections": len(dets["scores"]),
               "maps": {k: f"{k}.png" for k in maps}, "overlay": "detections.png"}
    (out / "viz.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary
