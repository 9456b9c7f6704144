"""Video and image datasets on disk (DAVIS-style layout) or in memory.

Video layout::

    <root>/JPEGImages/<seq>/00000.png|jpg
    <root>/Annotations/<seq>/00000.png      (8-bit, nonzero = foreground)

Image layout::

    <root>/images/<stem>.png|jpg
    <root>/masks/<stem>.png
"""
from pathlib import Path
from typing import List, Sequence

import numpy as np

from imcnet.data.clips import sample_clip, static_clip
from imcnet.errors import DatasetError

IMAGE_EXTS = (".png", ".jpg", ".jpeg")


def read_rgb(path):
    from PIL import Image

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from None


def read_mask(path):
    from PIL import Image

    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except OSError as exc:
        raise DatasetError(f"cannot read mask {path}: {exc}") from None
    return (arr > 0).astype(np.uint8)


def _images_in(directory):
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_EXTS)


class FileSequence:
    """A video sequence whose frames are read from disk on access."""

    def __init__(self, name, frame_paths, mask_paths=None):
        self.name = name
        self.frame_paths = list(frame_paths)
        self.mask_paths = None if mask_paths is None else list(mask_paths)

    def __len__(self):
        return len(self.frame_paths)

    def frame(self, i):
        return read_rgb(self.frame_paths[i])

    def mask(self, i):
        if self.mask_paths is None:
            h, w = self.frame(i).shape[:2]
            return np.zeros((h, w), dtype=np.uint8)
        return read_mask(self.mask_paths[i])


class VideoSet:
    """Training samples are (sequence, centre frame) pairs."""

    def __init__(self, sequences: Sequence, n=1, dt=4, centres="all"):
        if not sequences:
            raise DatasetError("video set is empty")
        if centres not in ("all", "middle"):
            raise DatasetError(f"centres must be 'all' or 'middle', got {centres!r}")
        self.sequences = list(sequences)
        self.n, self.dt = n, dt
        if centres == "all":
            self.index = [(s, t) for s in range(len(self.sequences)) for t in range(len(self.sequences[s]))]
        else:
            self.index = [(s, len(seq) // 2) for s, seq in enumerate(self.sequences)]

    def __len__(self):
        return len(self.index)

    def clip(self, k):
        s, t = self.index[k]
        return sample_clip(self.sequences[s], t, self.n, self.dt)


class ImageSet:
    """Single images with masks; each item is served as a static clip."""

    def __init__(self, items: List, n=1):
        if not items:
            raise DatasetError("image set is empty")
        self.items = list(items)
        self.n = n

    def __len__(self):
        return len(self.items)

    def clip(self, k):
        image, mask, name = self.items[k]
        if isinstance(image, (str, Path)):
            image, mask = read_rgb(image), read_mask(mask)
        return static_clip(image, mask, self.n, str(name))


def load_video_sequences(root, require_masks=True):
    root = Path(root)
    img_root = root / "JPEGImages"
    if not img_root.is_dir():
        raise DatasetError(f"{root}: missing JPEGImages/ directory")
    seqs = []
    for seq_dir in sorted(p for p in img_root.iterdir() if p.is_dir()):
        frames = _images_in(seq_dir)
        if not frames:
            continue
        masks = None
        if require_masks:
            masks = []
            for f in frames:
                m = root / "Annotations" / seq_dir.name / (f.stem + ".png")
                if not m.is_file():
                    raise DatasetError(f"missing mask for frame {f}: expected {m}")
                masks.append(m)
        seqs.append(FileSequence(seq_dir.name, frames, masks))
    if not seqs:
        raise DatasetError(f"{root}: no sequences with frames found")
    return seqs


def load_video_dataset(root, n=1, dt=4, centres="all"):
    return VideoSet(load_video_sequences(root), n, dt, centres)


def load_image_dataset(root, n=1):
    root = Path(root)
    if not (root / "images").is_dir():
        raise DatasetError(f"{root}: missing images/ directory")
    items = []
    for img in _images_in(root / "images"):
        m = root / "masks" / (img.stem + ".png")
        if not m.is_file():
            raise DatasetError(f"missing mask for image {img}: expected {m}")
        items.append((img, m, img.stem))
    if not items:
        raise DatasetError(f"{root}: no images found")
    return ImageSet(items, n)
