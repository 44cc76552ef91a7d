import csv
import json
import os
from typing import Iterable, List, Sequence

import numpy as np
from PIL import Image

from src.errors import ArtifactError


def ensure_parent(filename):
    """Create the directory that will hold filename."""
    directory = os.path.dirname(filename)
    if directory:
        os.makedirs(directory, exist_ok=True)


def to_pil(pixels) -> Image.Image:
    """H x W x 3 floats in [0, 1] (or an existing PIL image) as an 8-bit RGB image."""
    if isinstance(pixels, Image.Image):
        return pixels
    array = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    return Image.fromarray(np.round(array * 255.0).astype(np.uint8))


def save_image(image, filename, scale: int = 1):
    """Saves a rendered view (array or PIL Image) to a PNG file."""
    ensure_parent(filename)
    image = to_pil(image)
    if scale > 1:
        image = image.resize((image.width * scale, image.height * scale), Image.Resampling.NEAREST)
    try:
        image.save(filename)
    except OSError as e:
        raise ArtifactError(f"could not write image {filename}: {e}") from e
    return filename


def side_by_side(images: Sequence, gap: int = 2, background=(255, 255, 255)) -> Image.Image:
    """Concatenate images horizontally."""
    tiles: List[Image.Image] = [to_pil(im) for im in images]
    if not tiles:
        raise ArtifactError("no images to tile")
    width = sum(t.width for t in tiles) + gap * (len(tiles) - 1)
    height = max(t.height for t in tiles)
    canvas = Image.new("RGB", (width, height), background)
    x = 0
    for tile in tiles:
        canvas.paste(tile, (x, 0))
        x += tile.width + gap
    return canvas


def save_json(data, filename):
    """Saves a JSON document."""
    ensure_parent(filename)
    try:
        with open(filename, "w") as fh:
            json.dump(data, fh, indent=2)
    except OSError as e:
        raise ArtifactError(f"could not write {filename}: {e}") from e
    return filename


def save_csv(rows: Iterable[dict], filename, fieldnames: Sequence[str]):
    """Saves dict rows as CSV with a fixed header; floats keep full precision."""
    ensure_parent(filename)
    try:
        with open(filename, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(fieldnames))
            writer.writeheader()
            for row in rows:
                writer.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in row.items()})
    except OSError as e:
        raise ArtifactError(f"could not write {filename}: {e}") from e
    return filename


def read_csv(filename) -> List[dict]:
    with open(filename, newline="") as fh:
        return list(csv.DictReader(fh))
