"""Image I/O: 8-bit PNG and ASCII PPM, linear [0,1] float internally."""

from __future__ import annotations

import numpy as np
from PIL import Image


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def from_uint8(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) / 255.0


def save_png(path, img: np.ndarray) -> None:
    """Write an (H,W,3) float image in [0,1] as 8-bit RGB PNG."""
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def save_ppm(path, img: np.ndarray) -> None:
    """Write an (H,W,3) float image in [0,1] as ASCII PPM (P3)."""
    data = to_uint8(img)
    h, w = data.shape[:2]
    with open(path, "w") as f:
        f.write(f"P3\n{w} {h}\n255\n")
        for row in data.reshape(h, -1):
            f.write(" ".join(str(v) for v in row))
            f.write("\n")


def load_ppm(path) -> np.ndarray:
    with open(path) as f:
        tokens = []
        for line in f:
            hash_at = line.find("#")
            if hash_at >= 0:
                line = line[:hash_at]
            tokens.extend(line.split())
    if not tokens or tokens[0] != "P3":
        raise ValueError(f"{path}: not an ASCII PPM (P3) file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    vals = np.array(tokens[4:4 + w * h * 3], dtype=np.float64)
    if vals.size != w * h * 3:
        raise ValueError(f"{path}: expected {w * h * 3} samples, got {vals.size}")
    return (vals / maxval).reshape(h, w, 3)
