"""Binary mask machinery: noisy relaxation, straight-through binarization,
broadcast application to filter banks, and the sparsity penalty.

Three mask roles share this machinery:

  * grow mask    -- one logit per output channel; its bits drive channel
                    growth and detachment (see growth.py);
  * claim mask   -- one logit per (out, in) kernel of a freshly grown
                    channel; bit 1 claims the kernel for the current task,
                    bit 0 releases it for later tasks;
  * reuse mask   -- one logit per (out, in) kernel of frozen earlier-task
                    channels; bit 1 borrows that kernel for the current task.

A logit m maps to a soft probability through a two-class Gumbel relaxation
of sigmoid(m); forward passes only ever see hard {0,1} bits, while gradients
travel through the relaxed path (straight-through).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np


class Granularity(Enum):
    CHANNEL = "channel"   # one bit per output channel, broadcast over (Cin,k,k)
    KERNEL = "kernel"     # one bit per (out, in) pair, broadcast over (k,k)


@dataclass(frozen=True)
class MaskBinding:
    """Which layer's weights a mask multiplies, and that weight shape."""

    layer: str
    out_channels: int
    in_channels: int

    def expected_shape(self, granularity: Granularity) -> tuple[int, ...]:
        if granularity is Granularity.CHANNEL:
            return (self.out_channels,)
        return (self.out_channels, self.in_channels)


@dataclass
class MaskParam:
    """Real-valued mask logits bound to one layer."""

    logits: np.ndarray
    granularity: Granularity
    binding: MaskBinding

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        want = self.binding.expected_shape(self.granularity)
        if self.logits.shape != want:
            raise ValueError(
                f"{self.granularity.value} mask for {self.binding.layer} must have "
                f"shape {want}, got {self.logits.shape}"
            )

    def hard_bits(self) -> "BinaryMask":
        """Noise-free binarization: bit 1 where sigmoid(logit) >= 0.5."""
        return BinaryMask(
            bits=binarize_ste(sigmoid(self.logits)),
            granularity=self.granularity,
            binding=self.binding,
        )


@dataclass
class BinaryMask:
    """Hard {0,1} bits with the same binding discipline as MaskParam."""

    bits: np.ndarray
    granularity: Granularity
    binding: MaskBinding

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.float64)
        want = self.binding.expected_shape(self.granularity)
        if self.bits.shape != want:
            raise ValueError(
                f"{self.granularity.value} bits for {self.binding.layer} must have "
                f"shape {want}, got {self.bits.shape}"
            )
        if not np.all((self.bits == 0.0) | (self.bits == 1.0)):
            raise ValueError("mask bits must be exactly 0.0 or 1.0")


# ---------------------------------------------------------------------------
# noise and relaxation
# ---------------------------------------------------------------------------

_U_LO = 1e-300
_U_HI = np.nextafter(1.0, 0.0)


def gumbel_from_uniform(u) -> np.ndarray:
    """g = -log(-log(u)) for u in the open interval (0,1)."""
    u = np.asarray(u, dtype=np.float64)
    return -np.log(-np.log(u))


def gumbel_noise(rng, shape) -> np.ndarray:
    """Standard Gumbel samples from a SeededRng stream."""
    u = np.clip(np.asarray(rng.random(size=shape), dtype=np.float64), _U_LO, _U_HI)
    return gumbel_from_uniform(u)


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return -np.logaddexp(0.0, -x)


def gumbel_sigmoid(m_r, g0, g1, temperature: float) -> np.ndarray:
    """Two-class Gumbel relaxation of sigmoid(m_r).

    p = exp((log sigmoid(m_r) + g0)/T) / (same + exp(g1/T)), computed by
    factoring out the larger exponent.  Output is strictly inside (0,1).
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    m_r = np.asarray(m_r, dtype=np.float64)
    a = (log_sigmoid(m_r) + g0) / temperature
    b = np.asarray(g1, dtype=np.float64) / temperature
    m = np.maximum(a, b)
    num = np.exp(a - m)
    den = np.exp(b - m)
    p = num / (num + den)
    return np.clip(p, np.finfo(np.float64).tiny, _U_HI)


def gumbel_sigmoid_grad(m_r, g0, g1, temperature: float) -> np.ndarray:
    """d p / d m_r for gumbel_sigmoid at the given noise values."""
    p = gumbel_sigmoid(m_r, g0, g1, temperature)
    return p * (1.0 - p) * sigmoid(-np.asarray(m_r, dtype=np.float64)) / temperature


# ---------------------------------------------------------------------------
# straight-through binarization
# ---------------------------------------------------------------------------

def binarize_ste(p, threshold: float = 0.5) -> np.ndarray:
    """1.0 where p >= threshold else 0.0 (ties round up)."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0,1), got {threshold}")
    p = np.asarray(p, dtype=np.float64)
    return np.where(p >= threshold, 1.0, 0.0)


def binarize_ste_backward(dbits) -> np.ndarray:
    """Straight-through: the upstream gradient passes through unchanged."""
    return np.asarray(dbits, dtype=np.float64)


def ste_logit_grad(dbits, logits, g0, g1, temperature: float) -> np.ndarray:
    """Route a gradient w.r.t. hard bits back to the logits.

    Chains the straight-through identity (bits -> p) with the relaxed
    derivative dp/dlogit evaluated at the given Gumbel noise.
    """
    dp = binarize_ste_backward(dbits)
    return dp * gumbel_sigmoid_grad(logits, g0, g1, temperature)


# ---------------------------------------------------------------------------
# mask application
# ---------------------------------------------------------------------------

def _expand_bits(mask: BinaryMask, weight_shape: tuple[int, ...]) -> np.ndarray:
    cout, cin = weight_shape[0], weight_shape[1]
    if (mask.binding.out_channels, mask.binding.in_channels) != (cout, cin):
        raise ValueError(
            f"mask bound to {mask.binding.out_channels}x{mask.binding.in_channels} "
            f"cannot apply to weights {weight_shape}"
        )
    if mask.granularity is Granularity.CHANNEL:
        return mask.bits[:, None, None, None]
    return mask.bits[:, :, None, None]


def apply_mask(weights: np.ndarray, mask: BinaryMask) -> np.ndarray:
    """Elementwise product with the mask broadcast over the kernel axes.

    Positions with bit 0 are written as exact +0.0 so the result is
    independent of the masked weight values down to the byte level.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 4:
        raise ValueError(f"weights must be [Cout,Cin,k,k], got shape {w.shape}")
    expanded = np.broadcast_to(_expand_bits(mask, w.shape), w.shape)
    out = w * expanded
    out[expanded == 0.0] = 0.0
    return out


def apply_mask_backward(dout: np.ndarray, weights: np.ndarray,
                        mask: BinaryMask) -> tuple[np.ndarray, np.ndarray]:
    """Gradients (dweights, dbits) of ``apply_mask``."""
    w = np.asarray(weights, dtype=np.float64)
    expanded = np.broadcast_to(_expand_bits(mask, w.shape), w.shape)
    dw = dout * expanded
    prod = dout * w
    if mask.granularity is Granularity.CHANNEL:
        dbits = prod.sum(axis=(1, 2, 3))
    else:
        dbits = prod.sum(axis=(2, 3))
    return dw, dbits


# ---------------------------------------------------------------------------
# sparsity penalty
# ---------------------------------------------------------------------------

def l0_penalty(mask: BinaryMask, logits: np.ndarray,
               lam: float) -> tuple[float, np.ndarray]:
    """lam * (number of 1-bits), with a relaxed gradient surrogate.

    The value is the exact count; the surrogate gradient is the derivative
    of the relaxed count lam * sum(sigmoid(logits)), i.e. lam * sigmoid'(l)
    per logit, so shrinking pressure reaches every logit regardless of its
    current bit.
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape != mask.bits.shape:
        raise ValueError(
            f"logits shape {logits.shape} != bits shape {mask.bits.shape}"
        )
    value = float(lam * mask.bits.sum())
    s = sigmoid(logits)
    dlogits = lam * s * (1.0 - s)
    return value, dlogits
