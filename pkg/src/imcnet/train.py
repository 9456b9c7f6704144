"""Training loop, inference helpers and train-set evaluation."""
import contextlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from imcnet.config import RunConfig
from imcnet.data import (VideoSet, augment_clip, build_schedule, clips_to_arrays, generate_synthetic,
                         load_image_dataset, load_video_dataset, sample_clip)
from imcnet.data.schedule import VIDEO
from imcnet.data.synthetic import SynthConfig
from imcnet.errors import ConfigError
from imcnet.eval.metrics import region_j
from imcnet.losses import total_loss
from imcnet.model import Adam, IMCNet
from imcnet.tensor import checkpoint

THREADS_ENV = "IMC_THREADS"


def thread_count():
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def build_model(cfg: RunConfig):
    m = cfg.model
    return IMCNet(n=m.n, key_channels=m.key_channels, channels=m.channels,
                  cascade_depth=m.cascade_depth, encoder_channels=tuple(m.encoder_channels),
                  seed=cfg.optim.seed)


def synthetic_config(cfg: RunConfig):
    return SynthConfig(seed=cfg.data.synthetic_seed, count=cfg.data.synthetic_count,
                       size=tuple(cfg.model.input_size), frames=cfg.data.synthetic_frames)


def build_datasets(cfg: RunConfig):
    """(video set, image set or None). Without a video path a synthetic set is generated."""
    n, dt = cfg.model.n, cfg.model.dt
    if cfg.data.video:
        video = load_video_dataset(cfg.data.video, n, dt)
    else:
        # one clip per sequence, centred on its middle frame
        video = VideoSet(generate_synthetic(synthetic_config(cfg)), n, dt, centres="middle")
    image = load_image_dataset(cfg.data.image, n) if cfg.data.image else None
    return video, image


def predict_clips(model, x, batch_size=4):
    """Centre-frame probabilities (B, H, W) for clips ``x`` (B, T, 3, H, W)."""
    out = []
    for s in range(0, x.shape[0], batch_size):
        out.append(model(x[s:s + batch_size]).mask[:, 0])
    return np.concatenate(out)


def train_set_j(model, video: VideoSet, batch_size=4):
    """Mean region similarity of thresholded centre-frame predictions over the video set."""
    scores = []
    for s in range(0, len(video), batch_size):
        clips = [video.clip(k) for k in range(s, min(s + batch_size, len(video)))]
        x, y = clips_to_arrays(clips)
        probs = predict_clips(model, x, batch_size)
        c = video.n
        scores += [region_j(p >= 0.5, g[c, 0] > 0.5) for p, g in zip(probs, y)]
    return float(np.mean(scores))


def infer_sequence(model, sequence, n=1, dt=4, batch_size=4):
    """Foreground probability for every frame of ``sequence`` (clips clamped at the ends)."""
    probs = []
    for s in range(0, len(sequence), batch_size):
        clips = [sample_clip(sequence, t, n, dt) for t in range(s, min(s + batch_size, len(sequence)))]
        x, _ = clips_to_arrays(clips)
        probs.append(predict_clips(model, x, batch_size))
    return np.concatenate(probs)


@dataclass
class TrainResult:
    model: IMCNet
    iterations: int
    history: List[dict] = field(default_factory=list)
    evals: List[dict] = field(default_factory=list)
    final_j: Optional[float] = None
    checkpoint: Optional[Path] = None


def train(cfg: RunConfig, out_dir=None, log=None, video=None, image=None, write_files=True):
    """Run the configured schedule; returns a :class:`TrainResult`.

    ``log`` is an optional callable receiving each per-iteration record.
    Datasets may be passed in directly, otherwise they are built from ``cfg``.
    With ``write_files=False`` no config, log or checkpoint files are written.
    """
    out = Path(out_dir if out_dir is not None else cfg.output.dir)
    if video is None:
        video, image = build_datasets(cfg)
    threads = thread_count()
    o = cfg.optim
    schedule = build_schedule(len(video), len(image) if image is not None else 0, o.batch_size, o.seed)
    if write_files:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.txt")
    model = build_model(cfg)
    opt = Adam(model.param_groups(), cfg.learning_rates(), o.beta1, o.beta2)
    aug_rng = np.random.default_rng([o.seed, 1])
    result = TrainResult(model, 0)
    batches = schedule.batches()
    c = cfg.model.n
    log_cm = open(out / "loss.log", "w") if write_files else contextlib.nullcontext()
    with threadpool_limits(limits=threads), log_cm as log_fh:
        for it in range(1, o.iterations + 1):
            t0 = time.perf_counter()
            kind, idx = next(batches)
            source = video if kind == VIDEO else image
            clips = [source.clip(k) for k in idx]
            if o.augment:
                clips = [augment_clip(cl, aug_rng) for cl in clips]
            x, y = clips_to_arrays(clips)
            b, t = y.shape[:2]
            output = model(x)
            breakdown, g_final, g_side = total_loss(output.mask, y[:, c], output.side,
                                                    y.reshape((b * t,) + y.shape[2:]))
            model.zero_grad()
            model.backward(g_final, g_side)
            opt.step()
            rec = {"iter": it, "kind": kind, **breakdown.as_dict(),
                   "seconds": round(time.perf_counter() - t0, 4)}
            result.history.append(rec)
            if write_files:
                log_fh.write(json.dumps(rec) + "\n")
            if log is not None:
                log(rec)
            result.iterations = it
            if write_files and it % o.checkpoint_every == 0:
                checkpoint.save(out / f"checkpoint_{it:06d}.imcw", model.state_dict())
            if o.target_j > 0 and it % o.eval_every == 0:
                j = train_set_j(model, video, o.batch_size)
                result.evals.append({"iter": it, "train_J": j})
                if j >= o.target_j:
                    break
        result.final_j = train_set_j(model, video, o.batch_size)
    if write_files:
        result.checkpoint = out / "final.imcw"
        checkpoint.save(result.checkpoint, model.state_dict())
    return result


def load_model(cfg: RunConfig, path):
    model = build_model(cfg)
    model.load_state_dict(checkpoint.load(path))
    return model
