"""Image loading for manifest records (files on disk or ``synthetic:`` URIs)."""
from __future__ import annotations

import os

import numpy as np
from PIL import Image

from ..errors import DataError
from .synth import URI_SCHEME, parse_synthetic_uri, render_image


def load_image(record, root: str = ".") -> np.ndarray:
    """``H x W x 3`` float32 image in [0, 1]."""
    ref = record.image_ref
    if ref.startswith(URI_SCHEME):
        config, frame_id = parse_synthetic_uri(ref)
        return render_image(record.au, config, frame_id)
    path = ref if os.path.isabs(ref) else os.path.join(root, ref)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image for frame {record.frame_id!r}: {exc}") from None
    return arr / 255.0


def load_images(manifest, root: str = ".") -> np.ndarray:
    """Stack every record's image as an ``N x 3 x H x W`` float32 array."""
    if not len(manifest):
        return np.zeros((0, 3, 0, 0), dtype=np.float32)
    first = load_image(manifest.records[0], root)
    out = np.empty((len(manifest), 3) + first.shape[:2], dtype=np.float32)
    out[0] = first.transpose(2, 0, 1)
    for i, r in enumerate(manifest.records[1:], start=1):
        img = load_image(r, root)
        if img.shape != first.shape:
            raise DataError(f"frame {r.frame_id!r} has shape {img.shape}, expected {first.shape}")
        out[i] = img.transpose(2, 0, 1)
    return out


def save_png(image: np.ndarray, path) -> None:
    """Write an ``H x W x 3`` [0, 1] image as lossless 8-bit RGB."""
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")
