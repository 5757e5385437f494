"""Shared backbone state: layer weights, channel slots, kernel ownership.

Every conv layer is allocated at its full channel capacity up front, but a
channel only participates once a task has grown it.  Each channel slot walks
the lifecycle UNGROWN -> GROWN_TRAINING <-> DETACHED -> PRUNED/FIXED; once
FIXED it belongs to its owner task forever.  Within a FIXED slot, each
(out, in) kernel is either USED by some task (immutable) or RELEASED
(trainable by the current task until it claims it).

The per-task sub-network is expressed as a kernel multiplier grid plus a
channel-activity row mask (a ``TaskView``); masked positions are written as
exact +0.0 so outputs are reproducible byte-for-byte no matter what later
tasks write into released or not-yet-grown storage.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .ops import (
    conv2d,
    conv2d_backward,
    group_norm,
    group_norm_backward,
    linear,
    linear_backward,
    maxpool2d,
    maxpool2d_backward,
    relu,
    relu_backward,
)


class SlotState(IntEnum):
    UNGROWN = 0
    GROWN_TRAINING = 1
    DETACHED = 2
    PRUNED = 3
    FIXED = 4


class KernelState(IntEnum):
    UNTRACKED = 0
    USED = 1
    RELEASED = 2


@dataclass(frozen=True)
class ConvLayerSpec:
    name: str
    in_channels: int
    out_channels: int       # full capacity (the ratio denominator)
    seed_channels: int      # channels materialized before task 1 trains
    kernel: int = 3
    stride: int = 1
    pad: int = 1
    pool: int = 2           # maxpool window after relu; 0 disables

    def __post_init__(self):
        if not 0 <= self.seed_channels <= self.out_channels:
            raise ValueError(
                f"{self.name}: seed_channels {self.seed_channels} outside "
                f"[0, {self.out_channels}]"
            )

    @property
    def params_per_channel(self) -> int:
        return self.in_channels * self.kernel * self.kernel + 1  # + bias

    @property
    def full_params(self) -> int:
        return self.out_channels * self.params_per_channel


@dataclass(frozen=True)
class ArchSpec:
    image_size: int
    in_channels: int
    layers: tuple[ConvLayerSpec, ...]
    group_norm: bool = False
    norm_eps: float = 1e-5

    def __post_init__(self):
        prev = self.in_channels
        for spec in self.layers:
            if spec.in_channels != prev:
                raise ValueError(
                    f"layer {spec.name} expects {spec.in_channels} input channels "
                    f"but the previous stage provides {prev}"
                )
            prev = spec.out_channels

    def spatial_after(self, index: int) -> int:
        """Spatial extent after layer ``index`` (conv + optional pool)."""
        size = self.image_size
        for spec in self.layers[: index + 1]:
            size = (size + 2 * spec.pad - spec.kernel) // spec.stride + 1
            if spec.pool:
                size = size // spec.pool
        return size

    @property
    def feature_dim(self) -> int:
        last = self.layers[-1]
        s = self.spatial_after(len(self.layers) - 1)
        return last.out_channels * s * s

    @property
    def full_params(self) -> int:
        return sum(spec.full_params for spec in self.layers)


@dataclass
class ChannelSlot:
    """Read-only snapshot of one slot, for inspection and tests."""

    layer: str
    index: int
    state: SlotState
    owner: int
    weights: np.ndarray | None


class LayerState:
    """Weights plus slot/kernel bookkeeping for one conv layer."""

    def __init__(self, spec: ConvLayerSpec):
        self.spec = spec
        k = spec.kernel
        self.weights = np.zeros((spec.out_channels, spec.in_channels, k, k))
        self.bias = np.zeros(spec.out_channels)
        self.slot_state = np.full(spec.out_channels, SlotState.UNGROWN, dtype=np.int8)
        self.slot_owner = np.zeros(spec.out_channels, dtype=np.int32)
        self.kernel_state = np.full(
            (spec.out_channels, spec.in_channels), KernelState.UNTRACKED, dtype=np.int8
        )
        self.kernel_owner = np.zeros((spec.out_channels, spec.in_channels), dtype=np.int32)

    def slots(self) -> list[ChannelSlot]:
        out = []
        for j in range(self.spec.out_channels):
            state = SlotState(self.slot_state[j])
            has_w = state in (SlotState.GROWN_TRAINING, SlotState.DETACHED, SlotState.FIXED)
            out.append(
                ChannelSlot(
                    layer=self.spec.name,
                    index=j,
                    state=state,
                    owner=int(self.slot_owner[j]),
                    weights=self.weights[j].copy() if has_w else None,
                )
            )
        return out

    def state_counts(self) -> dict[str, int]:
        return {s.name: int((self.slot_state == s).sum()) for s in SlotState}

    def active_channels(self, include_training: bool = True) -> np.ndarray:
        active = self.slot_state == SlotState.FIXED
        if include_training:
            active |= self.slot_state == SlotState.GROWN_TRAINING
        return active

    def active_params(self, include_training: bool = True) -> int:
        return int(self.active_channels(include_training).sum()) * self.spec.params_per_channel


class BackboneState:
    """All layers plus the ownership ledger they carry."""

    def __init__(self, arch: ArchSpec):
        self.arch = arch
        self.layers = [LayerState(spec) for spec in arch.layers]

    def layer(self, name: str) -> LayerState:
        for layer in self.layers:
            if layer.spec.name == name:
                return layer
        raise KeyError(name)

    def active_params(self, include_training: bool = True) -> int:
        return sum(l.active_params(include_training) for l in self.layers)

    def growth_ratio(self, include_training: bool = True) -> float:
        return self.active_params(include_training) / self.arch.full_params

    def protected_digests(self) -> dict[tuple, str]:
        """Digest per immutable item: every USED kernel and FIXED bias.

        Earlier entries must survive verbatim in any later call; the driver
        asserts this at every task boundary.
        """
        out: dict[tuple, str] = {}
        for layer in self.layers:
            name = layer.spec.name
            used = np.argwhere(layer.kernel_state == KernelState.USED)
            for j, i in used:
                h = hashlib.sha256(layer.weights[j, i].tobytes()).hexdigest()[:16]
                out[(name, int(j), int(i), int(layer.kernel_owner[j, i]))] = h
            for j in np.flatnonzero(layer.slot_state == SlotState.FIXED):
                h = hashlib.sha256(layer.bias[int(j)].tobytes()).hexdigest()[:16]
                out[(name, int(j), "bias", int(layer.slot_owner[j]))] = h
        return out


# ---------------------------------------------------------------------------
# per-task sub-network view and forward pass
# ---------------------------------------------------------------------------

@dataclass
class TaskView:
    """Kernel multipliers + channel activity defining one task's network."""

    multipliers: dict[str, np.ndarray]          # [out_cap, in_cap] in {0,1} ... or {0,1} bits
    channel_on: dict[str, np.ndarray]           # bool [out_cap]
    head_weight: np.ndarray                     # [K, feature_dim]
    head_bias: np.ndarray                       # [K]
    norm_scale: dict[str, np.ndarray] | None = None
    norm_shift: dict[str, np.ndarray] | None = None


@dataclass
class ForwardCache:
    layer_caches: list = field(default_factory=list)
    flat_shape: tuple = ()
    head_cache: object = None
    eff_weights: dict = field(default_factory=dict)


def effective_filters(layer: LayerState, mult: np.ndarray) -> np.ndarray:
    """weights * multiplier, with masked positions forced to exact +0.0."""
    eff = layer.weights * mult[:, :, None, None]
    eff[np.broadcast_to((mult == 0.0)[:, :, None, None], eff.shape)] = 0.0
    return eff


def forward_pass(backbone: BackboneState, view: TaskView, x: np.ndarray,
                 want_cache: bool = False):
    """Run the masked backbone + head; returns logits (and caches)."""
    cache = ForwardCache() if want_cache else None
    h = np.asarray(x, dtype=np.float64)
    for layer in backbone.layers:
        name = layer.spec.name
        mult = view.multipliers[name]
        on = view.channel_on[name]
        eff_w = effective_filters(layer, mult)
        eff_b = np.where(on, layer.bias, 0.0)
        h, conv_cache = conv2d(h, eff_w, eff_b, stride=layer.spec.stride, pad=layer.spec.pad)
        norm_cache = None
        if view.norm_scale is not None:
            h, norm_cache = group_norm(
                h, view.norm_scale[name], view.norm_shift[name],
                groups=1, eps=backbone.arch.norm_eps,
            )
        h[:, ~on] = 0.0   # kill bias/norm leakage from channels outside the task
        h, relu_cache = relu(h)
        pool_cache = None
        if layer.spec.pool:
            h, pool_cache = maxpool2d(h, k=layer.spec.pool, stride=layer.spec.pool)
        if want_cache:
            cache.layer_caches.append((conv_cache, norm_cache, relu_cache, pool_cache, on))
            cache.eff_weights[name] = eff_w
    flat = h.reshape(h.shape[0], -1)
    logits, head_cache = linear(flat, view.head_weight, view.head_bias)
    if want_cache:
        cache.flat_shape = h.shape
        cache.head_cache = head_cache
        return logits, cache
    return logits


@dataclass
class BackwardResult:
    d_eff_weights: dict[str, np.ndarray]
    d_bias: dict[str, np.ndarray]
    d_head_weight: np.ndarray
    d_head_bias: np.ndarray
    d_norm_scale: dict[str, np.ndarray]
    d_norm_shift: dict[str, np.ndarray]


def backward_pass(backbone: BackboneState, view: TaskView, cache: ForwardCache,
                  dlogits: np.ndarray) -> BackwardResult:
    """Backpropagate through head and all layers.

    Returns gradients w.r.t. the *effective* (masked) filters; the trainer
    splits those into weight and mask-logit gradients.
    """
    dflat, d_hw, d_hb = linear_backward(dlogits, cache.head_cache)
    dh = dflat.reshape(cache.flat_shape)
    d_eff: dict[str, np.ndarray] = {}
    d_bias: dict[str, np.ndarray] = {}
    d_ns: dict[str, np.ndarray] = {}
    d_nsh: dict[str, np.ndarray] = {}
    for layer, caches in zip(reversed(backbone.layers), reversed(cache.layer_caches)):
        conv_cache, norm_cache, relu_cache, pool_cache, on = caches
        name = layer.spec.name
        if pool_cache is not None:
            dh = maxpool2d_backward(dh, pool_cache)
        dh = relu_backward(dh, relu_cache)
        dh[:, ~on] = 0.0
        if norm_cache is not None:
            dh, dscale, dshift = group_norm_backward(dh, norm_cache)
            d_ns[name] = dscale
            d_nsh[name] = dshift
        dh, dw_eff, db = conv2d_backward(dh, conv_cache)
        d_eff[name] = dw_eff
        d_bias[name] = np.where(on, db, 0.0)
    return BackwardResult(d_eff, d_bias, d_hw, d_hb, d_ns, d_nsh)
