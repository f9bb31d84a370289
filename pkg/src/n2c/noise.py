"""Stochastic image degradation models and reproducible random streams.

Three degradation families are supported, each a pure function of
(image, parameter, stream):

* additive Gaussian noise of a given standard deviation,
* multiplicative Bernoulli masking (each pixel kept with probability q,
  zeroed otherwise, the same decision across all channels of a pixel),
* Poisson photon noise parameterised by the expected count at intensity 1
  ("peak"): v -> Poisson(peak * v) / peak.

Outputs are always clamped to [0, 1].  Images are float32 arrays shaped
(H, W) or (H, W, C).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1

GAUSSIAN = "gaussian"
BERNOULLI = "bernoulli"
POISSON = "poisson"
NOISE_KINDS = (GAUSSIAN, BERNOULLI, POISSON)


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _label64(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & _MASK64
    if isinstance(label, str):
        digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"stream labels must be int or str, got {type(label).__name__}")


class RngStream:
    """Counter-based random stream: (seed, stream id) fully determine the draws.

    Built on the Philox counter-based bit generator, keyed by the pair
    (seed, stream).  ``child`` derives a new independent stream by mixing
    labels into the stream id, so per-sample generators are reproducible
    regardless of the order or parallelism in which they are consumed.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, *labels) -> "RngStream":
        """Derive an independent stream from this stream id plus labels."""
        s = self.stream
        for label in labels:
            s = _splitmix64(s ^ _splitmix64(_label64(label)))
        return RngStream(self.seed, s)

    def child_id(self, *labels) -> int:
        """Stream id that ``child(*labels)`` would use (for uniqueness checks)."""
        return self.child(*labels).stream

    # -- draws ---------------------------------------------------------------

    def uniform(self, lo: float, hi: float, size=None):
        return self._gen.uniform(lo, hi, size=size)

    def normal(self, size=None):
        return self._gen.standard_normal(size=size)

    def poisson(self, lam):
        return self._gen.poisson(lam)

    def random(self, size=None):
        return self._gen.random(size=size)

    def integers(self, lo: int, hi: int, size=None):
        """Uniform integers in [lo, hi)."""
        return self._gen.integers(lo, hi, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


@dataclass(frozen=True)
class NoiseSpec:
    """A degradation model plus its parameter ranges.

    ``stage1`` is the range used to corrupt clean images into the observed
    set; ``stage2`` the range used to re-corrupt an observed image into a
    training input.  ``validation_param`` is the fixed level used when
    scoring against clean references.  All Gaussian sigmas are in intensity
    units (a "20/255" level is 20.0 / 255.0).
    """

    kind: str
    stage1: tuple[float, float]
    stage2: tuple[float, float]
    validation_param: float

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}, expected one of {NOISE_KINDS}")
        for name, (lo, hi) in (("stage1", self.stage1), ("stage2", self.stage2)):
            if not (0 <= lo <= hi):
                raise ValueError(f"{name} range must satisfy 0 <= lo <= hi, got [{lo}, {hi}]")
            if self.kind == BERNOULLI and hi > 1:
                raise ValueError(f"{name} Bernoulli range must lie in [0, 1], got [{lo}, {hi}]")
            if self.kind == POISSON and lo <= 0:
                raise ValueError(f"{name} Poisson peaks must be positive, got [{lo}, {hi}]")

    @classmethod
    def defaults(cls, kind: str) -> "NoiseSpec":
        """Stock parameter ranges for each model."""
        if kind == GAUSSIAN:
            return cls(GAUSSIAN, (3 / 255, 50 / 255), (0.0, 25 / 255), 20 / 255)
        if kind == BERNOULLI:
            return cls(BERNOULLI, (0.35, 0.85), (0.0, 0.8), 0.5)
        if kind == POISSON:
            return cls(POISSON, (20.0, 40.0), (20.0, 40.0), 30.0)
        raise ValueError(f"unknown noise kind {kind!r}, expected one of {NOISE_KINDS}")


def _check_image(x: np.ndarray):
    if x.ndim not in (2, 3):
        raise ValueError(f"images must be (H, W) or (H, W, C), got shape {x.shape}")


def degrade_gaussian(x: np.ndarray, sigma: float, rng: RngStream) -> np.ndarray:
    """Add i.i.d. Gaussian noise of std ``sigma``, clamped to [0, 1]."""
    _check_image(x)
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    noise = rng.normal(size=x.shape) * sigma
    return np.clip(x + noise, 0.0, 1.0).astype(np.float32)


def degrade_bernoulli(x: np.ndarray, q: float, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """Keep each pixel with probability ``q``, zero it otherwise.

    The mask is drawn per pixel and shared across channels.  Returns
    (degraded image, mask) with the mask a float32 {0, 1} array of shape
    (H, W).
    """
    _check_image(x)
    if not (0.0 <= q <= 1.0):
        raise ValueError(f"q must lie in [0, 1], got {q}")
    mask = (rng.random(size=x.shape[:2]) < q).astype(np.float32)
    if x.ndim == 3:
        out = x * mask[:, :, None]
    else:
        out = x * mask
    return out.astype(np.float32), mask


def degrade_poisson(x: np.ndarray, peak: float, rng: RngStream) -> np.ndarray:
    """Replace each value v with Poisson(peak * v) / peak, clamped to [0, 1]."""
    _check_image(x)
    if peak <= 0:
        raise ValueError(f"peak must be > 0, got {peak}")
    counts = rng.poisson(np.asarray(x, dtype=np.float64) * peak)
    return np.clip(counts / peak, 0.0, 1.0).astype(np.float32)


def sample_parameter(range_: tuple[float, float], rng: RngStream) -> float:
    """Uniform draw from [lo, hi]."""
    lo, hi = range_
    if lo > hi:
        raise ValueError(f"invalid range [{lo}, {hi}]")
    return float(rng.uniform(lo, hi))


def mask_from_zeros(x: np.ndarray) -> np.ndarray:
    """Recover a Bernoulli retention mask by the exact-zero test.

    Valid because the Bernoulli degradation writes exact zeros.  A pixel
    counts as present when any of its channels is nonzero.
    """
    _check_image(x)
    present = x != 0 if x.ndim == 2 else np.any(x != 0, axis=2)
    return present.astype(np.float32)


def make_training_pair(
    y: np.ndarray, spec: NoiseSpec, rng: RngStream
) -> tuple[np.ndarray, np.ndarray | None]:
    """Re-corrupt an observed image ``y`` into a training input ``z``.

    The stage-two parameter is drawn fresh from ``spec.stage2`` on every
    call, so repeated calls with distinct streams give distinct ``z`` for
    the same ``y``.  For the Bernoulli model the returned mask marks the
    pixels of ``y`` that are still present (exact-zero test); the loss is
    evaluated only there, which is what lets the network learn to fill
    pixels that ``z`` lost but ``y`` kept.  Other models return None.
    """
    param = sample_parameter(spec.stage2, rng)
    if spec.kind == GAUSSIAN:
        return degrade_gaussian(y, param, rng), None
    if spec.kind == BERNOULLI:
        z, _ = degrade_bernoulli(y, param, rng)
        return z, mask_from_zeros(y)
    if spec.kind == POISSON:
        return degrade_poisson(y, param, rng), None
    raise ValueError(f"unknown noise kind {spec.kind!r}")
