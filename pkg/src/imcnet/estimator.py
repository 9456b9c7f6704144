"""A scikit-learn style wrapper around training and centre-frame prediction.

``X`` holds clips as an array (B, T, H, W, 3) with T = 2n+1 frames, uint8
or floats in [0, 1]; ``y`` holds the matching binary masks (B, T, H, W).
Predictions are for the centre frame of each clip.
"""
import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from threadpoolctl import threadpool_limits

from imcnet.config import DataConfig, ModelConfig, OptimConfig, OutputConfig, RunConfig
from imcnet.data.clips import ClipSample
from imcnet.errors import ShapeError
from imcnet.eval.metrics import region_j
from imcnet.train import predict_clips, thread_count, train


def check_clips(X, n=None):
    """Validate and convert clips to uint8 (B, T, H, W, 3)."""
    X = np.asarray(X)
    if X.ndim != 5 or X.shape[-1] != 3:
        raise ShapeError(f"clips must be (B, T, H, W, 3), got {X.shape}")
    if X.shape[1] % 2 == 0:
        raise ShapeError(f"clips need an odd number of frames 2n+1, got {X.shape[1]}")
    if n is not None and X.shape[1] != 2 * n + 1:
        raise ShapeError(f"clips need {2 * n + 1} frames for n={n}, got {X.shape[1]}")
    if X.shape[2] % 32 or X.shape[3] % 32:
        raise ShapeError(f"frame size must be a multiple of 32, got {X.shape[2:4]}")
    if X.dtype == np.uint8:
        return X
    if not np.issubdtype(X.dtype, np.floating) or not np.all(np.isfinite(X)):
        raise ShapeError(f"clips must be uint8 or finite floats, got {X.dtype}")
    if X.min() < 0 or X.max() > 1:
        raise ShapeError("float clips must lie in [0, 1]")
    return np.round(X * 255).astype(np.uint8)


def check_masks(y, X):
    y = np.asarray(y)
    if y.shape != X.shape[:4]:
        raise ShapeError(f"masks must be {X.shape[:4]} to match the clips, got {y.shape}")
    return (y > 0.5).astype(np.uint8)


class _ArrayClips:
    """In-memory clip set with the interface the trainer expects."""

    def __init__(self, X, y):
        self.X, self.y = X, y
        self.n = X.shape[1] // 2

    def __len__(self):
        return len(self.X)

    def clip(self, k):
        return ClipSample(list(self.X[k]), list(self.y[k]), 0, 0, f"clip{k}")


class IMCNetSegmenter(BaseEstimator):
    def __init__(self, n=1, key_channels=64, channels=64, cascade_depth=4,
                 encoder_channels=(16, 32, 48, 64), lr_encoder=1e-6, lr_decoder=1e-5, lr_mcm=1e-4,
                 lr_scale=1.0, batch_size=4, iterations=2000, target_j=0.0, eval_every=100,
                 augment=False, threshold=0.5, seed=0):
        self.n = n
        self.key_channels = key_channels
        self.channels = channels
        self.cascade_depth = cascade_depth
        self.encoder_channels = encoder_channels
        self.lr_encoder = lr_encoder
        self.lr_decoder = lr_decoder
        self.lr_mcm = lr_mcm
        self.lr_scale = lr_scale
        self.batch_size = batch_size
        self.iterations = iterations
        self.target_j = target_j
        self.eval_every = eval_every
        self.augment = augment
        self.threshold = threshold
        self.seed = seed

    def _config(self, input_size):
        return RunConfig(
            model=ModelConfig(n=self.n, key_channels=self.key_channels, channels=self.channels,
                              cascade_depth=self.cascade_depth,
                              encoder_channels=tuple(self.encoder_channels), input_size=tuple(input_size)),
            optim=OptimConfig(lr_encoder=self.lr_encoder, lr_decoder=self.lr_decoder, lr_mcm=self.lr_mcm,
                              lr_scale=self.lr_scale, batch_size=self.batch_size,
                              iterations=self.iterations, seed=self.seed, target_j=self.target_j,
                              eval_every=self.eval_every, augment=self.augment),
            data=DataConfig(), output=OutputConfig())

    def fit(self, X, y):
        X = check_clips(X, self.n)
        y = check_masks(y, X)
        cfg = self._config(X.shape[2:4])
        result = train(cfg, video=_ArrayClips(X, y), write_files=False)
        self.model_ = result.model
        self.history_ = result.history
        self.n_iter_ = result.iterations
        self.train_j_ = result.final_j
        return self

    def predict_proba(self, X):
        """Foreground probability of each clip's centre frame, (B, H, W)."""
        check_is_fitted(self, "model_")
        X = check_clips(X, self.n)
        x = np.ascontiguousarray(X.transpose(0, 1, 4, 2, 3)).astype(np.float32) / 255.0
        with threadpool_limits(limits=thread_count()):
            return predict_clips(self.model_, x, self.batch_size)

    def predict(self, X):
        return (self.predict_proba(X) >= self.threshold).astype(np.uint8)

    def score(self, X, y):
        """Mean region similarity J on centre frames."""
        X = check_clips(X, self.n)
        y = check_masks(y, X)
        pred = self.predict(X)
        return float(np.mean([region_j(p, g[self.n]) for p, g in zip(pred, y)]))
