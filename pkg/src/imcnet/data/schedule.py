"""Joint image/video batch schedule.

With ``r = floor(|V| / (floor(|I| / N_b) * N_b))`` one image batch follows
every ``r`` video batches. When the image set is the larger one ``r``
floors to 0 and batches alternate 1:1 instead. Each set is drawn uniformly
without replacement per pass, reshuffled with a seeded generator.
"""
from dataclasses import dataclass
from itertools import islice
from typing import Iterator, List, Tuple

import numpy as np

from imcnet.errors import DatasetError

VIDEO = "video"
IMAGE = "image"


def joint_ratio(n_video, n_image, batch_size):
    if batch_size < 1:
        raise DatasetError(f"batch size must be >= 1, got {batch_size}")
    if n_video < 1 or n_image < 1:
        raise DatasetError("both the video and the image set must be non-empty")
    if batch_size > n_video or batch_size > n_image:
        raise DatasetError(f"batch size {batch_size} exceeds a set size (video {n_video}, image {n_image})")
    return n_video // ((n_image // batch_size) * batch_size)


class _Shuffler:
    """Endless batches of indices, each pass a fresh permutation."""

    def __init__(self, size, batch_size, rng):
        self.size, self.batch_size, self.rng = size, batch_size, rng
        self._perm = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self):
        if self._pos + self.batch_size > self._perm.size:
            self._perm = self.rng.permutation(self.size)
            self._pos = 0
        out = self._perm[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return tuple(int(i) for i in out)


@dataclass
class JointSchedule:
    n_video: int
    n_image: int
    batch_size: int
    r: int
    seed: int = 0

    @property
    def video_batches_per_epoch(self):
        return self.n_video // self.batch_size

    def kinds(self) -> Iterator[str]:
        """Endless sequence of batch kinds."""
        if self.n_image == 0:
            while True:
                yield VIDEO
        period = max(self.r, 1)
        while True:
            for _ in range(period):
                yield VIDEO
            yield IMAGE

    def batches(self) -> Iterator[Tuple[str, Tuple[int, ...]]]:
        rng = np.random.default_rng(self.seed)
        video = _Shuffler(self.n_video, self.batch_size, rng)
        image = _Shuffler(self.n_image, self.batch_size, rng) if self.n_image else None
        for kind in self.kinds():
            yield kind, (video.next() if kind == VIDEO else image.next())

    def plan(self, n_batches) -> List[Tuple[str, Tuple[int, ...]]]:
        return list(islice(self.batches(), n_batches))

    def epoch_plan(self):
        """Batches covering one pass over the video set plus its interleaved image batches."""
        n_v = self.video_batches_per_epoch
        n_i = 0 if self.n_image == 0 else n_v // max(self.r, 1)
        return self.plan(n_v + n_i)


def build_schedule(n_video, n_image, batch_size, seed=0):
    """``n_image == 0`` gives a video-only schedule."""
    if n_image == 0:
        if batch_size > n_video:
            raise DatasetError(f"batch size {batch_size} exceeds the video set size {n_video}")
        return JointSchedule(n_video, 0, batch_size, 0, seed)
    return JointSchedule(n_video, n_image, batch_size, joint_ratio(n_video, n_image, batch_size), seed)
