"""Exhaustive verification that kernel-level masking can only help.

On micro instances small enough to enumerate completely, the minimum of the
penalized loss over (weights, channel gate, kernel mask) is compared with
the minimum over (weights, channel gate) at kernel mask fixed to all-ones.
The second search space is a subset of the first, so

    min_free <= min_constrained

must hold exactly -- both minima are read from one shared enumeration table,
so the comparison carries zero numerical tolerance.  Strict inequality on
some instances shows the kernel mask buys real freedom; grids that exclude
the value 0 model trained weights (which are never exactly zero), and those
are where strict gaps appear.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .rng import SeededRng

ENUM_BUDGET = 10**7


class EnumBudgetError(ValueError):
    """Instance search space exceeds the enumeration budget."""


@dataclass(frozen=True)
class MicroInstance:
    """A fully enumerable one-layer classification problem (1x1 kernels)."""

    instance_id: int
    out_channels: int                 # also the class count
    in_channels: int
    weight_grid: tuple[float, ...]    # candidate values per weight
    inputs: np.ndarray                # [P, in_channels]
    labels: np.ndarray                # [P] in [0, out_channels)
    lam: float                        # channel-gate sparsity coefficient

    def __post_init__(self):
        if self.out_channels > 2 or self.in_channels > 2:
            raise ValueError("micro instances are capped at 2x2 channels")
        if len(self.inputs) > 8:
            raise ValueError(f"at most 8 labeled points, got {len(self.inputs)}")
        if self.labels.min() < 0 or self.labels.max() >= self.out_channels:
            raise ValueError("labels outside class range")
        if self.search_space_size > ENUM_BUDGET:
            raise EnumBudgetError(
                f"instance {self.instance_id}: {self.search_space_size} "
                f"configurations exceed the {ENUM_BUDGET} budget"
            )

    @property
    def n_weights(self) -> int:
        return self.out_channels * self.in_channels

    @property
    def search_space_size(self) -> int:
        return (len(self.weight_grid) ** self.n_weights
                * 2 ** self.out_channels
                * 2 ** self.n_weights)


@dataclass
class EnumResult:
    min_loss: float
    argmin_weights: np.ndarray        # [Cout, Cin]
    argmin_gate: np.ndarray           # [Cout]
    argmin_kernel_mask: np.ndarray    # [Cout, Cin]


def _loss_table(instance: MicroInstance,
                kernel_configs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Penalized loss for every (w, gate, kernel mask) combination.

    Returns (losses [nw, ng, nk], w_configs, gate_configs); enumeration
    order is lexicographic in each axis, so a flat argmin is the documented
    tie-break.
    """
    co, ci = instance.out_channels, instance.in_channels
    w_configs = np.array(
        list(itertools.product(instance.weight_grid, repeat=instance.n_weights))
    ).reshape(-1, co, ci)
    gate_configs = np.array(
        list(itertools.product((0.0, 1.0), repeat=co))
    ).reshape(-1, co)
    x = instance.inputs                       # [P, ci]
    y = instance.labels
    # effective weights: [nw, ng, nk, co, ci]
    eff = (w_configs[:, None, None, :, :]
           * gate_configs[None, :, None, :, None]
           * kernel_configs[None, None, :, :, :])
    logits = np.einsum("abcoi,pi->abcop", eff, x)          # [nw, ng, nk, co, P]
    zmax = logits.max(axis=3, keepdims=True)
    logp = logits - zmax - np.log(np.exp(logits - zmax).sum(axis=3, keepdims=True))
    picked = np.take_along_axis(logp, y[None, None, None, None, :], axis=3)[..., 0, :]
    data_loss = -picked.mean(axis=-1)                       # [nw, ng, nk]
    penalty = instance.lam * gate_configs.sum(axis=1)       # [ng]
    return data_loss + penalty[None, :, None], w_configs, gate_configs


def _all_kernel_configs(instance: MicroInstance) -> np.ndarray:
    co, ci = instance.out_channels, instance.in_channels
    return np.array(
        list(itertools.product((0.0, 1.0), repeat=instance.n_weights))
    ).reshape(-1, co, ci)


def enumerate_min_loss(instance: MicroInstance, attentive_free: bool) -> EnumResult:
    """Exact global minimum over the discretized configuration space.

    With ``attentive_free`` the kernel mask ranges over all {0,1} grids;
    otherwise it is pinned to all-ones, which leaves every weight in play.
    """
    if attentive_free:
        kernel_configs = _all_kernel_configs(instance)
    else:
        kernel_configs = np.ones((1, instance.out_channels, instance.in_channels))
    losses, w_configs, gate_configs = _loss_table(instance, kernel_configs)
    flat = int(np.argmin(losses))           # first minimum = lexicographic tie-break
    iw, ig, ik = np.unravel_index(flat, losses.shape)
    return EnumResult(
        min_loss=float(losses[iw, ig, ik]),
        argmin_weights=w_configs[iw].copy(),
        argmin_gate=gate_configs[ig].copy(),
        argmin_kernel_mask=kernel_configs[ik].copy(),
    )


def evaluate_configuration(instance: MicroInstance, weights: np.ndarray,
                           gate: np.ndarray, kernel_mask: np.ndarray) -> float:
    """Loss of a single configuration (used to re-check reported argmins)."""
    eff = weights * gate[:, None] * kernel_mask
    logits = instance.inputs @ eff.T
    zmax = logits.max(axis=1, keepdims=True)
    logp = logits - zmax - np.log(np.exp(logits - zmax).sum(axis=1, keepdims=True))
    data = -logp[np.arange(len(instance.labels)), instance.labels].mean()
    return float(data + instance.lam * gate.sum())


# mathematically tied configurations can differ by ~1 ulp through different
# float paths; a gap must clear this floor before it counts as strict
STRICT_GAP_FLOOR = 1e-9


@dataclass
class VerifyResult:
    instance_id: int
    min_free: float
    min_constrained: float
    passed: bool      # exact: min over the superset cannot exceed the subset's
    strict: bool      # gap above STRICT_GAP_FLOOR: masking bought real freedom


def verify_mask_freedom(instance: MicroInstance,
                        force_identity_mask: bool = False) -> VerifyResult:
    """Check min_free <= min_constrained from one shared enumeration.

    ``force_identity_mask`` plants a fault for verifier self-tests: the
    "free" branch is evaluated with the kernel mask pinned to all-ones, so
    strict inequalities disappear and the sweep's suspicious-equality
    diagnostic must fire.
    """
    if force_identity_mask:
        kernel_configs = np.ones((1, instance.out_channels, instance.in_channels))
    else:
        kernel_configs = _all_kernel_configs(instance)
    losses, _, _ = _loss_table(instance, kernel_configs)
    ones_index = kernel_configs.shape[0] - 1   # all-ones is last in lex order
    min_free = float(losses.min())
    min_constrained = float(losses[:, :, ones_index].min())
    return VerifyResult(
        instance_id=instance.instance_id,
        min_free=min_free,
        min_constrained=min_constrained,
        passed=min_free <= min_constrained,
        strict=min_constrained - min_free > STRICT_GAP_FLOOR,
    )


# ---------------------------------------------------------------------------
# randomized sweep
# ---------------------------------------------------------------------------

_GRIDS_WITH_ZERO = (
    (-1.0, -0.5, 0.0, 0.5, 1.0),
    (-1.0, 0.0, 1.0),
)
_GRIDS_WITHOUT_ZERO = (
    (-1.0, 1.0),
    (-1.0, 0.5),
)


def random_instance(rng: SeededRng, instance_id: int) -> MicroInstance:
    """Draw a random enumerable instance.

    Half the instances use weight grids without 0 (trained weights are never
    exactly zero), which is where kernel masking can strictly win.  Two-class
    softmax only sees logit differences, so equal kernels across the two
    output rows already cancel; strict gaps therefore need a second feature
    that is only partially label-correlated (flipped on a fraction of the
    points), where an intermediate slope reachable only by zeroing one
    kernel is optimal.
    """
    with_zero = bool(rng.integers(0, 2))
    grids = _GRIDS_WITH_ZERO if with_zero else _GRIDS_WITHOUT_ZERO
    grid = grids[int(rng.integers(0, len(grids)))]
    p = int(rng.integers(5, 9))
    labels = rng.integers(0, 2, size=p).astype(np.int64)
    sign = 2.0 * labels - 1.0
    informative = sign * rng.uniform(0.4, 1.0, size=p)
    flip_rate = rng.uniform(0.25, 0.45)
    flips = np.where(rng.random(p) < flip_rate, -1.0, 1.0)
    partial = sign * flips * rng.uniform(0.4, 0.9, size=p)
    inputs = np.round(np.stack([informative, partial], axis=1), 3)
    lam = float(rng.integers(0, 3)) * 0.05
    return MicroInstance(
        instance_id=instance_id,
        out_channels=2,
        in_channels=2,
        weight_grid=grid,
        inputs=inputs,
        labels=labels,
        lam=lam,
    )


@dataclass
class SweepReport:
    results: list[VerifyResult] = field(default_factory=list)

    @property
    def all_passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def strict_count(self) -> int:
        return sum(r.strict for r in self.results)

    @property
    def suspicious_equality(self) -> bool:
        # a healthy sweep produces strict gaps on a visible fraction of
        # instances; none at all indicates a broken free branch
        return self.strict_count == 0

    def to_csv(self) -> str:
        lines = ["instance_id,min_free,min_constrained,pass"]
        for r in self.results:
            lines.append(
                f"{r.instance_id},{r.min_free:.12g},{r.min_constrained:.12g},"
                f"{int(r.passed)}"
            )
        return "\n".join(lines) + "\n"


def run_sweep(n_instances: int, seed: int,
              force_identity_mask: bool = False) -> SweepReport:
    if n_instances < 1:
        raise ValueError(f"need at least one instance, got {n_instances}")
    rng = SeededRng(seed).substream("enumcheck")
    report = SweepReport()
    for i in range(1, n_instances + 1):
        instance = random_instance(rng.substream(f"instance{i}"), i)
        report.results.append(
            verify_mask_freedom(instance, force_identity_mask=force_identity_mask)
        )
    return report
