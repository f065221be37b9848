"""Reconstruction losses: L1, progressive multiscale image and frequency
terms, the weighted total, and PSNR.

Normalization convention, pinned by the literal-formula tests: every inner
loss is the mean over pixels of a per-pixel sum over channels. The frequency
term uses the unnormalized 2D DFT, so the DC bin of a constant image kappa
carries kappa * H * W and the loss of (kappa vs zero) is exactly kappa.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import PointsplatError

DEFAULT_SCALE_FACTORS = (1.0, 0.5, 0.25)

# Loop weighting rule: 0.75 for the first loop, 1.0 afterwards.
FIRST_LOOP_WEIGHT = 0.75

PSNR_SATURATION = math.inf


def default_loop_weights(n_loops: int) -> tuple:
    return tuple(FIRST_LOOP_WEIGHT if l == 0 else 1.0 for l in range(n_loops))


@dataclass
class LossWeights:
    """Weights of the total objective plus the per-loop schedule."""

    gamma1: float = 0.75
    gamma2: float = 1.0
    gamma3: float = 0.25
    loop_weights: tuple = (FIRST_LOOP_WEIGHT, 1.0)

    def __post_init__(self):
        if min(self.gamma1, self.gamma2, self.gamma3) < 0 or min(self.loop_weights) < 0:
            raise PointsplatError("loss weights must be nonnegative")


def _as_image(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise PointsplatError(f"expected an HxWxC image, got shape {a.shape}")
    return a


def _check_same_shape(pred, gt):
    if pred.shape != gt.shape:
        raise PointsplatError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")


def l1_loss(pred, gt) -> float:
    """Mean over pixels of the per-pixel L1 norm across channels."""
    pred, gt = _as_image(pred), _as_image(gt)
    _check_same_shape(pred, gt)
    h, w, _ = pred.shape
    return float(np.abs(pred - gt).sum() / (h * w))


def downsample_image(img, factor: float) -> np.ndarray:
    """Area-average pooling by an integer reciprocal factor (1, 1/2, 1/4...)."""
    img = _as_image(img)
    k = round(1.0 / factor)
    if k < 1 or abs(factor * k - 1.0) > 1e-9:
        raise PointsplatError(f"factor must be a reciprocal integer, got {factor}")
    if k == 1:
        return img.copy()
    h, w, c = img.shape
    if h % k or w % k:
        raise PointsplatError(f"image {h}x{w} not divisible by pooling block {k}")
    return img.reshape(h // k, k, w // k, k, c).mean(axis=(1, 3))


@dataclass
class PredictionPyramid:
    """Per-loop, per-scale prediction stack fed to the progressive losses."""

    predictions: list                                  # [loop][scale] -> image
    scale_factors: tuple = DEFAULT_SCALE_FACTORS

    def __post_init__(self):
        self.predictions = [[_as_image(img) for img in loop] for loop in self.predictions]
        if not self.predictions:
            raise PointsplatError("pyramid needs at least one loop")
        if any(len(loop) != len(self.scale_factors) for loop in self.predictions):
            raise PointsplatError("every loop must carry one image per scale factor")
        if any(b >= a for a, b in zip(self.scale_factors, self.scale_factors[1:])):
            raise PointsplatError("scale factors must be strictly decreasing")
        first = self.predictions[0]
        for loop in self.predictions[1:]:
            for img, ref in zip(loop, first):
                if img.shape != ref.shape:
                    raise PointsplatError("per-scale shapes differ across loops")

    @property
    def n_loops(self) -> int:
        return len(self.predictions)

    @classmethod
    def from_image(cls, img, n_loops: int = 2,
                   scale_factors: tuple = DEFAULT_SCALE_FACTORS) -> "PredictionPyramid":
        """Pyramid whose every loop holds downsampled copies of one image."""
        stack = [downsample_image(img, f) for f in scale_factors]
        return cls([list(stack) for _ in range(n_loops)], scale_factors)


def _loop_weight_vector(pyr: PredictionPyramid, w) -> tuple:
    if w is None:
        return default_loop_weights(pyr.n_loops)
    if callable(w):
        return tuple(float(w(l + 1)) for l in range(pyr.n_loops))
    w = tuple(float(x) for x in w)
    if len(w) != pyr.n_loops:
        raise PointsplatError(f"need {pyr.n_loops} loop weights, got {len(w)}")
    return w


def progressive_multiscale_image_loss(pyr: PredictionPyramid, gt, w=None) -> float:
    """Sum over loops and scales of w(loop) * L1 against the pooled target."""
    gt = _as_image(gt)
    weights = _loop_weight_vector(pyr, w)
    targets = [downsample_image(gt, f) for f in pyr.scale_factors]
    total = 0.0
    for wl, loop in zip(weights, pyr.predictions):
        for pred, target in zip(loop, targets):
            total += wl * l1_loss(pred, target)
    return total


def frequency_loss(pred, gt) -> float:
    """Mean over frequency bins of |DFT(pred) - DFT(gt)|, summed over channels."""
    pred, gt = _as_image(pred), _as_image(gt)
    _check_same_shape(pred, gt)
    h, w, _ = pred.shape
    diff = np.fft.fft2(pred, axes=(0, 1)) - np.fft.fft2(gt, axes=(0, 1))
    return float(np.abs(diff).sum() / (h * w))


def progressive_multiscale_frequency_loss(pyr: PredictionPyramid, gt, w=None) -> float:
    gt = _as_image(gt)
    weights = _loop_weight_vector(pyr, w)
    targets = [downsample_image(gt, f) for f in pyr.scale_factors]
    total = 0.0
    for wl, loop in zip(weights, pyr.predictions):
        for pred, target in zip(loop, targets):
            total += wl * frequency_loss(pred, target)
    return total


def total_loss(l_gs: float, l_mim: float, l_mfr: float,
               weights: LossWeights | None = None) -> float:
    weights = weights or LossWeights()
    return weights.gamma1 * l_gs + weights.gamma2 * l_mim + weights.gamma3 * l_mfr


def psnr(pred, gt) -> float:
    """10 log10(1 / MSE) for unit-range images; +inf on identical inputs."""
    pred, gt = _as_image(pred), _as_image(gt)
    _check_same_shape(pred, gt)
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return PSNR_SATURATION
    return 10.0 * math.log10(1.0 / mse)
