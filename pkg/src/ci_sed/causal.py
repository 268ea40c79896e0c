"""Context adjustment pool, feature enhancement and backdoor adjustment.

The pool ``q`` holds one standardized context row per class over the frame
axis.  A training clip updates the rows of its labelled classes with that
clip's frame predictions; enhancement re-projects the selected rows onto the
frame features through a 1x1 convolution and a multiplicative gate::

    xe = x + x * conv1x1(diag(mask) q)

Backdoor adjustment averages class scores over the k context strata.  The
exact form needs one classifier pass per stratum; the approximation moves the
uniform average inside the network (mask scaled by 1/k) and needs one pass.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import Classifier, Projection, aggregate_clip, frame_scores

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA = 0.01
POOL_EPS = 1e-12


@dataclass
class ContextPool:
    q: np.ndarray
    lam: float = DEFAULT_LAMBDA
    eps: float = POOL_EPS
    touches: np.ndarray = field(default=None)

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        if self.q.ndim != 2:
            raise ValueError(f"pool must be [k, n], got shape {self.q.shape}")
        if self.lam < 0:
            raise ValueError(f"update rate must be >= 0, got {self.lam}")
        if self.touches is None:
            self.touches = np.zeros(self.q.shape[0], dtype=np.int64)

    @classmethod
    def zeros(cls, k: int, n: int, lam: float = DEFAULT_LAMBDA, eps: float = POOL_EPS) -> "ContextPool":
        return cls(np.zeros((k, n)), lam, eps)

    @property
    def k(self) -> int:
        return self.q.shape[0]

    @property
    def n(self) -> int:
        return self.q.shape[1]

    @property
    def class_priors(self) -> np.ndarray:
        return np.full(self.k, 1.0 / self.k)

    def copy(self) -> "ContextPool":
        return ContextPool(self.q.copy(), self.lam, self.eps, self.touches.copy())

    def resized(self, n: int) -> np.ndarray:
        return resample_frames(self.q, n)


def resample_frames(a: np.ndarray, n: int) -> np.ndarray:
    """Nearest-neighbour resampling of the last axis to ``n`` frames."""
    src = a.shape[-1]
    if src == n:
        return a
    idx = np.minimum(((np.arange(n) + 0.5) * src / n).astype(np.int64), src - 1)
    return a[..., idx]


def standardize_row(row: np.ndarray, eps: float) -> np.ndarray:
    centred = row - row.mean()
    return centred / np.sqrt((centred * centred).mean() + eps)


def pool_update(pool: ContextPool, m, present) -> ContextPool:
    """Return a new pool with ``q_j <- standardize(q_j + lam * m_j)`` for each present j.

    ``m`` is one clip's ``[k, n]`` frame predictions (array or Tensor, no
    gradient is taken).  Rows of absent classes are copied bit for bit.
    """
    m = np.asarray(m.data if isinstance(m, Tensor) else m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != pool.k:
        raise ValueError(f"pool_update: predictions shape {m.shape} incompatible with pool {pool.q.shape}")
    m = resample_frames(m, pool.n)
    out = pool.copy()
    for j in sorted(set(int(j) for j in present)):
        if not 0 <= j < pool.k:
            raise IndexError(f"pool_update: class index {j} outside [0, {pool.k})")
        row = out.q[j] + pool.lam * m[j]
        if np.ptp(row) == 0.0:
            logger.warning("context row %d is constant after update; standardized to zeros", j)
        out.q[j] = standardize_row(row, pool.eps)
        out.touches[j] += 1
    return out


def _mask_array(mask, k: int) -> np.ndarray:
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
    if mask.shape[-1] != k or mask.ndim not in (1, 2):
        raise ValueError(f"mask shape {mask.shape} does not match {k} pool rows")
    return mask


def enhance(x: Tensor, pool: ContextPool | np.ndarray, mask, projection: Projection) -> Tensor:
    """Enhanced features ``x + x * conv1x1(diag(mask) q, W, b)``.

    ``x`` is ``[c, n]`` with ``mask [k]`` or batched ``[B, c, n]`` with
    ``mask [B, k]``.  The pool enters as a constant; only ``x`` and the
    projection receive gradients.
    """
    q = pool.q if isinstance(pool, ContextPool) else np.asarray(pool, dtype=np.float64)
    k = q.shape[0]
    mask = _mask_array(mask, k)
    if projection.weight.shape[1] != k or projection.weight.shape[0] != x.shape[-2]:
        raise ValueError(f"enhance: projection {projection.weight.shape} incompatible with "
                         f"features {x.shape} and pool {q.shape}")
    if (x.data.ndim == 3) != (mask.ndim == 2) or (mask.ndim == 2 and mask.shape[0] != x.shape[0]):
        raise ValueError(f"enhance: mask shape {mask.shape} does not match features {x.shape}")
    q = resample_frames(q, x.shape[-1])
    context = Tensor((mask[..., :, None] * q).astype(x.dtype))
    gate = ad.conv1x1(context, projection.weight, projection.bias)
    return ad.add(x, ad.mul(x, gate))


def approx_backdoor(x: Tensor, pool, mask, classifier: Classifier, projection: Projection,
                    pooling: str = "mean", return_frames: bool = False):
    """Single-pass intervention: enhance with ``mask / k`` then classify."""
    q = pool.q if isinstance(pool, ContextPool) else np.asarray(pool)
    k = q.shape[0]
    xe = enhance(x, pool, _mask_array(mask, k) / k, projection)
    m = frame_scores(xe, classifier)
    s = aggregate_clip(m, pooling)
    return (s, m) if return_frames else s


def exact_backdoor(x: Tensor, pool, classifier: Classifier, projection: Projection,
                   mask=None, pooling: str = "mean") -> np.ndarray:
    """Stratified intervention: one pass per context row, prior-weighted average.

    Pass i enhances with ``mask_i * e_i`` (``mask`` defaults to all ones), and
    the returned clip scores are ``sum_i (1/k) * scores_i`` in double precision.
    Used only as an oracle.
    """
    q = pool.q if isinstance(pool, ContextPool) else np.asarray(pool)
    k = q.shape[0]
    lead = x.shape[:-2]
    mask = np.ones((*lead, k)) if mask is None else _mask_array(mask, k)
    prior = 1.0 / k
    acc = np.zeros((*lead, k), dtype=np.float64)
    for i in range(k):
        stratum = np.zeros_like(mask)
        stratum[..., i] = mask[..., i]
        xe = enhance(x, q, stratum, projection)
        s = aggregate_clip(frame_scores(xe, classifier), pooling)
        acc += prior * np.asarray(s.data, dtype=np.float64)
    return acc
