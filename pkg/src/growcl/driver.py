"""Task-sequence execution.

Task 1 sparse-grows a seed backbone.  Each later task first runs a
pick-and-reuse phase (learn a kernel-reuse mask over frozen weights and
retrain released kernels, jointly with a fresh head); if its validation
accuracy misses the task's target, an expansion phase grows new channels
under the channel gate + kernel claim masks with the sparsity penalty.
Finalization freezes everything the task's function depends on, writes a
snapshot whose probe fingerprint pins the task's logits byte-for-byte, and
the forgetting check re-verifies every earlier fingerprint at every task
boundary.

Two baselines share the machinery: ``baseline_scratch`` trains an
independent full-capacity model per task, and ``baseline_grow_only`` grows
per task with the channel gate only (no reuse mask, no claims, no released
retraining) on a frozen backbone.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .backbone import (
    BackboneState,
    KernelState,
    SlotState,
    TaskView,
    backward_pass,
    forward_pass,
)
from .config import RunConfig
from .data import Task, TaskSequence, load_group_file, load_idx, split_by_class, synth_tasks
from .growth import (
    ContractViolation,
    GrowthLedger,
    claim_released_kernels,
    enforce_growth_cap,
    finalize_task,
    query_and_transition,
)
from .masks import (
    BinaryMask,
    Granularity,
    MaskBinding,
    MaskParam,
    binarize_ste,
    gumbel_noise,
    gumbel_sigmoid,
    l0_penalty,
    ste_logit_grad,
)
from .ops import cross_entropy, sgd_step
from .rng import SeededRng

PROBE_SIZE = 64
EVAL_BATCH = 256

# Mask logits get larger steps than weights: straight-through gradients are
# damped by p(1-p)*sigmoid(-m)/T, and gate decisions must settle within a
# phase (tens of epochs), not across hundreds.  Selection logits (reuse and
# claim masks) start at a good default (+1, keep everything) and only need
# refinement, so they move slower than channel-gate logits.
GATE_LR_SCALE = 20.0
SELECT_LR_SCALE = 2.0

# Claim and reuse logits start at +1: keep-biased, so a kernel is only
# released or dropped when gradients actively argue against it.
CLAIM_INIT = 1.0

# At most this many UNGROWN slots per layer are tried per epoch query, and
# only while validation accuracy is still below the task's target.  Slots a
# task tries and then drops are pruned for good at finalize, so unbounded
# exploration would exhaust the slot pool within one task.
EXPLORE_PER_EPOCH = 1


@dataclass(frozen=True)
class ModeFlags:
    reuse_mask: bool         # learn a reuse mask over frozen used kernels
    retrain_released: bool   # train released kernels and claim them at the end
    claim_mask: bool         # learn kernel claims on freshly grown channels


GROWN_FLAGS = ModeFlags(reuse_mask=True, retrain_released=True, claim_mask=True)
GROW_ONLY_FLAGS = ModeFlags(reuse_mask=False, retrain_released=False, claim_mask=False)


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    task: Task
    target_accuracy: float
    growth_cap: float
    epoch_budget: dict[str, int]

    def __post_init__(self):
        if not 0.0 < self.target_accuracy <= 1.0:
            raise ValueError(f"target accuracy {self.target_accuracy} outside (0, 1]")
        if not 0.0 < self.growth_cap <= 1.0:
            raise ValueError(f"growth cap {self.growth_cap} outside (0, 1]")


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class TaskSnapshot:
    """Everything needed to reproduce one task's inference bit-exactly,
    given the shared backbone.

    The frozen bits are what inference uses; the raw mask logits ride along
    for post-hoc analysis (they never affect evaluation)."""

    task_id: int
    n_classes: int
    reuse_bits: dict[str, np.ndarray] | None
    claim_bits: dict[str, np.ndarray]
    head_weight: np.ndarray
    head_bias: np.ndarray
    norm_scale: dict[str, np.ndarray] | None
    norm_shift: dict[str, np.ndarray] | None
    probe_images: np.ndarray
    probe_fingerprint: str
    reuse_logits: dict[str, np.ndarray] | None = None
    claim_logits: dict[str, np.ndarray] | None = None


@dataclass
class GateLogEntry:
    task_id: int
    pick_accuracy: float
    target_accuracy: float
    expanded: bool


@dataclass
class EpochLogEntry:
    task_id: int
    phase: str
    epoch: int
    loss: float
    val_accuracy: float
    growth_ratio: float


# ---------------------------------------------------------------------------
# view construction
# ---------------------------------------------------------------------------

def build_eval_view(backbone: BackboneState, snapshot: TaskSnapshot) -> TaskView:
    """The frozen sub-network of a finished task.

    Multiplier rules per kernel (j, i) in channels FIXED with owner <= t:
    USED by an earlier task -> that task's stored reuse bit; USED by task t
    itself (own claims and retrained released kernels) -> 1; USED by a later
    task or still RELEASED -> 0 (those were releases of t's own growth,
    which t's training already multiplied by 0).
    """
    t = snapshot.task_id
    multipliers: dict[str, np.ndarray] = {}
    channel_on: dict[str, np.ndarray] = {}
    for layer in backbone.layers:
        name = layer.spec.name
        on = (layer.slot_state == SlotState.FIXED) & (layer.slot_owner <= t)
        mult = np.zeros_like(layer.kernel_state, dtype=np.float64)
        rows = on[:, None]
        used = layer.kernel_state == KernelState.USED
        own = rows & used & (layer.kernel_owner == t)
        old = rows & used & (layer.kernel_owner < t)
        mult[own] = 1.0
        if snapshot.reuse_bits is None:
            mult[old] = 1.0
        else:
            mult[old] = snapshot.reuse_bits[name][old]
        multipliers[name] = mult
        channel_on[name] = on
    return TaskView(
        multipliers=multipliers,
        channel_on=channel_on,
        head_weight=snapshot.head_weight,
        head_bias=snapshot.head_bias,
        norm_scale=snapshot.norm_scale,
        norm_shift=snapshot.norm_shift,
    )


@dataclass
class TrainView:
    view: TaskView
    used_old: dict[str, np.ndarray]        # bool [oc, ic]: frozen reusable kernels
    training_rows: dict[str, np.ndarray]   # bool [oc]: this task's growing channels
    trainable_kernels: dict[str, np.ndarray]   # bool [oc, ic]


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------

class TaskTrainer:
    """Owns one task's trainable state across its pick/expand phases.

    Forward passes always see hard {0,1} bits derived from the current
    logits; gradients reach the logits through the straight-through
    estimator with fresh Gumbel noise on the relaxed path each step.
    """

    def __init__(self, backbone: BackboneState, spec: TaskSpec, config: RunConfig,
                 flags: ModeFlags, root_rng: SeededRng):
        self.backbone = backbone
        self.spec = spec
        self.task = spec.task
        self.config = config
        self.flags = flags
        t = spec.task_id
        self.gumbel = root_rng.substream(f"task{t}/gumbel")
        self.growth = root_rng.substream(f"task{t}/growth")
        self.batches = root_rng.substream(f"task{t}/batches")
        init = root_rng.substream(f"task{t}/init")

        self.grow_masks: dict[str, MaskParam] = {}
        self.claim_masks: dict[str, MaskParam] = {}
        self.reuse_masks: dict[str, MaskParam] = {}
        self.w_vel: dict[str, np.ndarray] = {}
        self.b_vel: dict[str, np.ndarray] = {}
        self.logit_vel: dict[str, np.ndarray] = {}
        for layer in backbone.layers:
            name = layer.spec.name
            binding = MaskBinding(name, layer.spec.out_channels, layer.spec.in_channels)
            grow_logits = np.full(layer.spec.out_channels, -1.0)
            grow_logits[layer.slot_state == SlotState.GROWN_TRAINING] = 1.0
            self.grow_masks[name] = MaskParam(grow_logits, Granularity.CHANNEL, binding)
            self.claim_masks[name] = MaskParam(
                np.full((layer.spec.out_channels, layer.spec.in_channels), CLAIM_INIT),
                Granularity.KERNEL, binding,
            )
            self.reuse_masks[name] = MaskParam(
                np.ones((layer.spec.out_channels, layer.spec.in_channels)),
                Granularity.KERNEL, binding,
            )
            self.w_vel[name] = np.zeros_like(layer.weights)
            self.b_vel[name] = np.zeros_like(layer.bias)
            self.logit_vel[f"{name}/grow"] = np.zeros_like(grow_logits)
            self.logit_vel[f"{name}/claim"] = np.zeros_like(self.claim_masks[name].logits)
            self.logit_vel[f"{name}/reuse"] = np.zeros_like(self.reuse_masks[name].logits)

        d = backbone.arch.feature_dim
        k = self.task.n_classes
        self.head_weight = init.uniform(-np.sqrt(6.0 / d), np.sqrt(6.0 / d), size=(k, d))
        self.head_bias = np.zeros(k)
        self.head_w_vel = np.zeros_like(self.head_weight)
        self.head_b_vel = np.zeros_like(self.head_bias)

        self.norm_scale = self.norm_shift = None
        self.norm_vel = {}
        if backbone.arch.group_norm:
            self.norm_scale = {
                l.spec.name: np.ones(l.spec.out_channels) for l in backbone.layers
            }
            self.norm_shift = {
                l.spec.name: np.zeros(l.spec.out_channels) for l in backbone.layers
            }
            for l in backbone.layers:
                self.norm_vel[f"{l.spec.name}/scale"] = np.zeros(l.spec.out_channels)
                self.norm_vel[f"{l.spec.name}/shift"] = np.zeros(l.spec.out_channels)

        self.lam_eff = config.lambda_l0
        self.gate_lr = config.learning_rate * GATE_LR_SCALE
        self.select_lr = config.learning_rate * SELECT_LR_SCALE
        self.grow_phase = False

    # -- view -------------------------------------------------------------

    def build_train_view(self) -> TrainView:
        t = self.spec.task_id
        multipliers, channel_on = {}, {}
        used_old, training_rows, trainable_kernels = {}, {}, {}
        for layer in self.backbone.layers:
            name = layer.spec.name
            fixed = layer.slot_state == SlotState.FIXED
            training = layer.slot_state == SlotState.GROWN_TRAINING
            on = fixed | training
            used = (layer.kernel_state == KernelState.USED) & fixed[:, None]
            released = (layer.kernel_state == KernelState.RELEASED) & fixed[:, None]
            mult = np.zeros_like(layer.kernel_state, dtype=np.float64)
            if self.flags.reuse_mask:
                mult[used] = self.reuse_masks[name].hard_bits().bits[used]
            else:
                mult[used] = 1.0
            if self.flags.retrain_released:
                mult[released] = 1.0
            rows = training[:, None]
            if self.flags.claim_mask:
                claim_bits = self.claim_masks[name].hard_bits().bits
                mult[np.broadcast_to(rows, mult.shape)] = np.broadcast_to(
                    claim_bits, mult.shape
                )[np.broadcast_to(rows, mult.shape)]
            else:
                mult[np.broadcast_to(rows, mult.shape)] = 1.0
            multipliers[name] = mult
            channel_on[name] = on
            used_old[name] = used
            training_rows[name] = training
            trainable = np.broadcast_to(rows, mult.shape).copy()
            if self.flags.retrain_released:
                trainable |= released
            trainable_kernels[name] = trainable
        view = TaskView(
            multipliers=multipliers,
            channel_on=channel_on,
            head_weight=self.head_weight,
            head_bias=self.head_bias,
            norm_scale=self.norm_scale,
            norm_shift=self.norm_shift,
        )
        return TrainView(view, used_old, training_rows, trainable_kernels)

    # -- growth queries -----------------------------------------------------

    def _reset_slot_velocity(self, layer_name: str, index: int) -> None:
        self.w_vel[layer_name][index] = 0.0
        self.b_vel[layer_name][index] = 0.0

    def query_epoch(self, temperature: float, need_growth: bool) -> None:
        """Start-of-epoch mask query + transitions + cap enforcement.

        Slots currently in the model (GROWN_TRAINING) are kept or detached
        by their learned gate bit (logit >= 0), so retention is never a coin
        flip.  Exploration is what the noisy sampled bit drives: DETACHED
        slots may be re-tried any time, while UNGROWN slots are tried (at
        most EXPLORE_PER_EPOCH per layer) only while the task still needs
        growth -- once the target accuracy is met, no new channel is ever
        materialized.  A slot grown for the first time starts its gate logit
        at +1: trying a channel is a commitment it must then defend against
        the sparsity pressure and the data gradient.
        """
        for layer in self.backbone.layers:
            name = layer.spec.name
            logits = self.grow_masks[name].logits
            n = layer.spec.out_channels
            g0 = gumbel_noise(self.gumbel, (n,))
            g1 = gumbel_noise(self.gumbel, (n,))
            noisy_bits = binarize_ste(gumbel_sigmoid(logits, g0, g1, temperature))
            hard_bits = self.grow_masks[name].hard_bits().bits
            active = layer.slot_state == SlotState.GROWN_TRAINING
            ungrown = layer.slot_state == SlotState.UNGROWN
            bits = np.where(active, hard_bits, noisy_bits)
            if need_growth:
                tries = np.flatnonzero(ungrown & (bits == 1.0))
                bits[tries[EXPLORE_PER_EPOCH:]] = 0.0
            else:
                bits[ungrown] = 0.0
            bits[layer.slot_state == SlotState.FIXED] = np.nan
            for action in query_and_transition(layer, bits, self.growth):
                self._reset_slot_velocity(name, action.index)
                if action.action == "grow":
                    logits[action.index] = 1.0
        self._enforce_cap()

    def _enforce_cap(self) -> None:
        logits = {name: m.logits for name, m in self.grow_masks.items()}
        for action in enforce_growth_cap(self.backbone, logits, self.spec.growth_cap):
            self._reset_slot_velocity(action.layer, action.index)

    # -- one optimization step ---------------------------------------------

    def train_step(self, images: np.ndarray, labels: np.ndarray,
                   temperature: float) -> float:
        cfg = self.config
        tv = self.build_train_view()
        logits, cache = forward_pass(self.backbone, tv.view, images, want_cache=True)
        loss, dlogits = cross_entropy(logits, labels)
        grads = backward_pass(self.backbone, tv.view, cache, dlogits)

        penalty_value = 0.0
        for layer in self.backbone.layers:
            name = layer.spec.name
            mult = tv.view.multipliers[name]
            d_eff = grads.d_eff_weights[name]
            d_mult = (d_eff * layer.weights).sum(axis=(2, 3))

            # weights: only this task's growing rows and released kernels move
            trainable = tv.trainable_kernels[name]
            expanded = np.broadcast_to(
                trainable[:, :, None, None], layer.weights.shape
            )
            dw = d_eff * mult[:, :, None, None]
            dw[~expanded] = 0.0
            vel = self.w_vel[name]
            vel *= cfg.momentum
            vel += dw
            vel[~expanded] = 0.0
            layer.weights -= cfg.learning_rate * vel

            rows = tv.training_rows[name]
            db = grads.d_bias[name].copy()
            db[~rows] = 0.0
            bvel = self.b_vel[name]
            bvel *= cfg.momentum
            bvel += db
            bvel[~rows] = 0.0
            layer.bias -= cfg.learning_rate * bvel

            # reuse-mask logits (frozen used kernels of earlier tasks); the
            # surrogate is temperature-normalized (T * dp/dlogit) so that
            # annealing T sharpens the relaxation and settles the masks
            # instead of amplifying their updates 1/T-fold
            if self.flags.reuse_mask:
                reuse = self.reuse_masks[name]
                g0 = gumbel_noise(self.gumbel, reuse.logits.shape)
                g1 = gumbel_noise(self.gumbel, reuse.logits.shape)
                d_bits = np.where(tv.used_old[name], d_mult, 0.0)
                d_logits = temperature * ste_logit_grad(
                    d_bits, reuse.logits, g0, g1, temperature)
                d_logits[~tv.used_old[name]] = 0.0
                v = self.logit_vel[f"{name}/reuse"]
                v *= cfg.momentum
                v += d_logits
                v[~tv.used_old[name]] = 0.0
                reuse.logits -= self.select_lr * v

            # claim-mask logits (kernels of this task's growing channels)
            if self.flags.claim_mask:
                claim = self.claim_masks[name]
                g0 = gumbel_noise(self.gumbel, claim.logits.shape)
                g1 = gumbel_noise(self.gumbel, claim.logits.shape)
                row_grid = np.broadcast_to(rows[:, None], claim.logits.shape)
                d_bits = np.where(row_grid, d_mult, 0.0)
                d_logits = temperature * ste_logit_grad(
                    d_bits, claim.logits, g0, g1, temperature)
                d_logits[~row_grid] = 0.0
                v = self.logit_vel[f"{name}/claim"]
                v *= cfg.momentum
                v += d_logits
                v[~row_grid] = 0.0
                claim.logits -= self.select_lr * v

            # channel-gate logits: data sensitivity plus the sparsity surrogate
            if self.grow_phase:
                grow = self.grow_masks[name]
                g0 = gumbel_noise(self.gumbel, grow.logits.shape)
                g1 = gumbel_noise(self.gumbel, grow.logits.shape)
                row_mult = np.where(rows[:, None], mult, 0.0)
                d_gate = (d_mult * row_mult).sum(axis=1)
                queryable = (layer.slot_state != SlotState.FIXED) & \
                            (layer.slot_state != SlotState.PRUNED)
                gate_bits = grow.hard_bits().bits.copy()
                gate_bits[~queryable] = 0.0
                value, d_l0 = l0_penalty(
                    BinaryMask(gate_bits, Granularity.CHANNEL, grow.binding),
                    grow.logits, self.lam_eff,
                )
                penalty_value += value
                d_full = temperature * ste_logit_grad(
                    d_gate, grow.logits, g0, g1, temperature)
                d_full += d_l0
                d_full[~queryable] = 0.0
                v = self.logit_vel[f"{name}/grow"]
                v *= cfg.momentum
                v += d_full
                v[~queryable] = 0.0
                grow.logits -= self.gate_lr * v

            # per-task normalization affine
            if self.norm_scale is not None:
                sgd_step(self.norm_scale[name], grads.d_norm_scale[name],
                         cfg.learning_rate, cfg.momentum, self.norm_vel[f"{name}/scale"])
                sgd_step(self.norm_shift[name], grads.d_norm_shift[name],
                         cfg.learning_rate, cfg.momentum, self.norm_vel[f"{name}/shift"])

        sgd_step(self.head_weight, grads.d_head_weight,
                 cfg.learning_rate, cfg.momentum, self.head_w_vel)
        sgd_step(self.head_bias, grads.d_head_bias,
                 cfg.learning_rate, cfg.momentum, self.head_b_vel)
        return loss + penalty_value

    # -- phases --------------------------------------------------------------

    def temperature(self, epoch: int, total: int) -> float:
        if total <= 1:
            return self.config.temp_end
        frac = epoch / (total - 1)
        return self.config.temp_start + (self.config.temp_end - self.config.temp_start) * frac

    def validation_accuracy(self) -> float:
        tv = self.build_train_view()
        return _dataset_accuracy(self.backbone, tv.view, self.task.val)

    def train_phase(self, phase: str, n_epochs: int, grow: bool,
                    epoch_log: list[EpochLogEntry]) -> None:
        self.grow_phase = grow
        train = self.task.train
        n = len(train)
        bs = self.config.batch_size
        val_acc = None
        for epoch in range(n_epochs):
            temp = self.temperature(epoch, n_epochs)
            if grow:
                if val_acc is None:
                    val_acc = self.validation_accuracy()
                self.query_epoch(temp, need_growth=val_acc < self.spec.target_accuracy)
            order = self.batches.permutation(n)
            losses = []
            for start in range(0, n, bs):
                idx = order[start:start + bs]
                losses.append(self.train_step(train.images[idx], train.labels[idx], temp))
            for layer in self.backbone.layers:
                if not np.all(np.isfinite(layer.weights)):
                    raise FloatingPointError(
                        f"non-finite weights in {layer.spec.name} "
                        f"(task {self.spec.task_id}, {phase} epoch {epoch})"
                    )
            val_acc = self.validation_accuracy()
            epoch_log.append(EpochLogEntry(
                task_id=self.spec.task_id,
                phase=phase,
                epoch=epoch,
                loss=float(np.mean(losses)),
                val_accuracy=val_acc,
                growth_ratio=self.backbone.growth_ratio(include_training=True),
            ))
        self.grow_phase = False

    # -- finalization ---------------------------------------------------------

    def finalize(self) -> TaskSnapshot:
        """Freeze exactly the network the task last trained with.

        No query runs here: the active set is the one the head has adapted
        to, so fixing it cannot ablate features the task depends on.
        """
        t = self.spec.task_id
        self._enforce_cap()   # no-op unless a caller skipped the epoch queries
        claim_bits: dict[str, np.ndarray] = {}
        for layer in self.backbone.layers:
            name = layer.spec.name
            if self.flags.retrain_released:
                claim_released_kernels(layer, t)
            if self.flags.claim_mask:
                bits = self.claim_masks[name].hard_bits().bits
            else:
                bits = np.ones_like(layer.kernel_state, dtype=np.float64)
            claim_bits[name] = bits
            finalize_task(layer, bits, t)
        reuse_bits = reuse_logits = None
        if self.flags.reuse_mask:
            reuse_bits = {
                name: _frozen(self.reuse_masks[name].hard_bits().bits)
                for name in claim_bits
            }
            reuse_logits = {
                name: _frozen(self.reuse_masks[name].logits) for name in claim_bits
            }
        claim_logits = None
        if self.flags.claim_mask:
            claim_logits = {
                name: _frozen(self.claim_masks[name].logits) for name in claim_bits
            }
        probe = _frozen(self.task.val.images[:PROBE_SIZE])
        snapshot = TaskSnapshot(
            task_id=t,
            n_classes=self.task.n_classes,
            reuse_bits=reuse_bits,
            claim_bits={name: _frozen(bits) for name, bits in claim_bits.items()},
            reuse_logits=reuse_logits,
            claim_logits=claim_logits,
            head_weight=_frozen(self.head_weight),
            head_bias=_frozen(self.head_bias),
            norm_scale=(None if self.norm_scale is None
                        else {n: _frozen(v) for n, v in self.norm_scale.items()}),
            norm_shift=(None if self.norm_shift is None
                        else {n: _frozen(v) for n, v in self.norm_shift.items()}),
            probe_images=probe,
            probe_fingerprint="",
        )
        fingerprint = probe_fingerprint(self.backbone, snapshot)
        object.__setattr__(snapshot, "probe_fingerprint", fingerprint)
        return snapshot


# ---------------------------------------------------------------------------
# evaluation / forgetting
# ---------------------------------------------------------------------------

def _batched_logits(backbone: BackboneState, view: TaskView, images: np.ndarray) -> np.ndarray:
    outs = [
        forward_pass(backbone, view, images[s:s + EVAL_BATCH])
        for s in range(0, len(images), EVAL_BATCH)
    ]
    return np.concatenate(outs, axis=0)


def _dataset_accuracy(backbone: BackboneState, view: TaskView, dataset) -> float:
    logits = _batched_logits(backbone, view, dataset.images)
    return float((logits.argmax(axis=1) == dataset.labels).mean())


def evaluate(task_id: int, backbone: BackboneState, snapshot: TaskSnapshot | None,
             dataset) -> float:
    """Deterministic accuracy of a finished task's frozen sub-network."""
    if snapshot is None:
        raise KeyError(f"no snapshot for task {task_id}")
    if snapshot.task_id != task_id:
        raise KeyError(f"snapshot belongs to task {snapshot.task_id}, not {task_id}")
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    view = build_eval_view(backbone, snapshot)
    return _dataset_accuracy(backbone, view, dataset)


def probe_fingerprint(backbone: BackboneState, snapshot: TaskSnapshot) -> str:
    """sha256 over the task's probe-batch logit bytes."""
    view = build_eval_view(backbone, snapshot)
    logits = _batched_logits(backbone, view, snapshot.probe_images)
    return hashlib.sha256(logits.tobytes()).hexdigest()


def forgetting_check(snapshots: dict[int, TaskSnapshot],
                     backbone: BackboneState) -> dict[int, bool]:
    """Recompute each task's probe logits; pass iff bitwise-equal to stored."""
    return {
        t: probe_fingerprint(backbone, snap) == snap.probe_fingerprint
        for t, snap in sorted(snapshots.items())
    }


# ---------------------------------------------------------------------------
# scratch training (independent full-capacity model per task)
# ---------------------------------------------------------------------------

@dataclass
class ScratchOutcome:
    task_id: int
    val_accuracy: float
    test_accuracy: float
    epoch_log: list[EpochLogEntry]


def train_scratch_model(task: Task, config: RunConfig, seed: int) -> ScratchOutcome:
    """Train one full-capacity model on one task (no masks, no growth).

    All streams derive from the task id, so the outcome is independent of
    the task's position in any sequence.
    """
    arch = config.arch
    rng = SeededRng(seed).substream(f"scratch/task{task.task_id}")
    init = rng.substream("init")
    batches = rng.substream("batches")
    backbone = BackboneState(arch)
    for layer in backbone.layers:
        bound = np.sqrt(6.0 / (layer.spec.in_channels * layer.spec.kernel ** 2))
        layer.weights[:] = init.uniform(-bound, bound, size=layer.weights.shape)
        layer.slot_state[:] = SlotState.GROWN_TRAINING
    d = arch.feature_dim
    k = task.n_classes
    head_w = init.uniform(-np.sqrt(6.0 / d), np.sqrt(6.0 / d), size=(k, d))
    head_b = np.zeros(k)
    norm_scale = norm_shift = None
    norm_vel = {}
    if arch.group_norm:
        norm_scale = {l.spec.name: np.ones(l.spec.out_channels) for l in backbone.layers}
        norm_shift = {l.spec.name: np.zeros(l.spec.out_channels) for l in backbone.layers}
        norm_vel = {f"{l.spec.name}/{p}": np.zeros(l.spec.out_channels)
                    for l in backbone.layers for p in ("scale", "shift")}

    view = TaskView(
        multipliers={l.spec.name: np.ones((l.spec.out_channels, l.spec.in_channels))
                     for l in backbone.layers},
        channel_on={l.spec.name: np.ones(l.spec.out_channels, dtype=bool)
                    for l in backbone.layers},
        head_weight=head_w,
        head_bias=head_b,
        norm_scale=norm_scale,
        norm_shift=norm_shift,
    )
    w_vel = {l.spec.name: np.zeros_like(l.weights) for l in backbone.layers}
    b_vel = {l.spec.name: np.zeros_like(l.bias) for l in backbone.layers}
    hw_vel = np.zeros_like(head_w)
    hb_vel = np.zeros_like(head_b)

    epoch_log: list[EpochLogEntry] = []
    n = len(task.train)
    bs = config.batch_size
    for epoch in range(config.epochs["scratch"]):
        order = batches.permutation(n)
        losses = []
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            logits, cache = forward_pass(backbone, view,
                                         task.train.images[idx], want_cache=True)
            loss, dlogits = cross_entropy(logits, task.train.labels[idx])
            grads = backward_pass(backbone, view, cache, dlogits)
            for layer in backbone.layers:
                name = layer.spec.name
                sgd_step(layer.weights, grads.d_eff_weights[name],
                         config.learning_rate, config.momentum, w_vel[name])
                sgd_step(layer.bias, grads.d_bias[name],
                         config.learning_rate, config.momentum, b_vel[name])
                if norm_scale is not None:
                    sgd_step(norm_scale[name], grads.d_norm_scale[name],
                             config.learning_rate, config.momentum, norm_vel[f"{name}/scale"])
                    sgd_step(norm_shift[name], grads.d_norm_shift[name],
                             config.learning_rate, config.momentum, norm_vel[f"{name}/shift"])
            sgd_step(head_w, grads.d_head_weight, config.learning_rate,
                     config.momentum, hw_vel)
            sgd_step(head_b, grads.d_head_bias, config.learning_rate,
                     config.momentum, hb_vel)
            losses.append(loss)
        epoch_log.append(EpochLogEntry(
            task_id=task.task_id, phase="scratch", epoch=epoch,
            loss=float(np.mean(losses)),
            val_accuracy=_dataset_accuracy(backbone, view, task.val),
            growth_ratio=1.0,
        ))
    return ScratchOutcome(
        task_id=task.task_id,
        val_accuracy=_dataset_accuracy(backbone, view, task.val),
        test_accuracy=_dataset_accuracy(backbone, view, task.test),
        epoch_log=epoch_log,
    )


# ---------------------------------------------------------------------------
# run orchestration
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    mode: str
    config: RunConfig
    backbone: BackboneState | None
    snapshots: dict[int, TaskSnapshot]
    ledger: GrowthLedger | None
    test_accuracies: dict[int, float]
    val_accuracies: dict[int, float]
    targets: dict[int, float]
    ratios: dict[int, float]
    gate_log: list[GateLogEntry] = field(default_factory=list)
    epoch_log: list[EpochLogEntry] = field(default_factory=list)
    forgetting_log: list[dict] = field(default_factory=list)

    @property
    def task_ids(self) -> list[int]:
        return sorted(self.test_accuracies)

    @property
    def avg_accuracy(self) -> float:
        return float(np.mean([self.test_accuracies[t] for t in self.task_ids]))

    @property
    def run_id(self) -> str:
        return f"{self.mode}-seed{self.config.seed}-{self.config.digest[:8]}"


def build_tasks(config: RunConfig) -> TaskSequence:
    rng = SeededRng(config.seed).substream("data")
    src = config.task_source
    if src["source"] == "synthetic":
        return synth_tasks(
            rng,
            n_tasks=src["n_tasks"],
            classes_per_task=src["classes_per_task"],
            samples_per_class=src["samples_per_class"],
            image_size=src["image_size"],
            difficulty=src["difficulty"],
        )
    dataset = load_idx(src["images"], src["labels"])
    groups = load_group_file(src["groups"])
    return split_by_class(dataset, groups, rng)


def resolve_targets(tasks: TaskSequence, config: RunConfig) -> dict[int, float]:
    """Explicit targets from config, else scratch accuracy minus the slack."""
    if config.target_accuracy is not None:
        values = config.target_accuracy
        if len(values) == 1:
            values = values * len(tasks)
        if len(values) != len(tasks):
            raise ValueError(
                f"{len(values)} target accuracies for {len(tasks)} tasks"
            )
        return {task.task_id: values[i] for i, task in enumerate(tasks)}
    targets = {}
    for task in tasks:
        outcome = train_scratch_model(task, config, config.seed)
        targets[task.task_id] = max(1e-6, outcome.val_accuracy - config.target_slack)
    return targets


def _check_boundary(result: RunResult, backbone: BackboneState,
                    snapshots: dict[int, TaskSnapshot],
                    digests_before: dict, after_task: int) -> dict:
    digests_now = backbone.protected_digests()
    for key, value in digests_before.items():
        if digests_now.get(key) != value:
            raise ContractViolation(
                f"protected weight changed after task {after_task}: {key}"
            )
    passes = forgetting_check(snapshots, backbone)
    result.forgetting_log.append(
        {"after_task": after_task, "passes": {str(t): bool(v) for t, v in passes.items()}}
    )
    if not all(passes.values()):
        failed = [t for t, ok in passes.items() if not ok]
        raise ContractViolation(
            f"forgetting check failed after task {after_task} for tasks {failed}"
        )
    return digests_now


def train_task1(backbone: BackboneState, spec: TaskSpec, config: RunConfig,
                root: SeededRng, epoch_log: list[EpochLogEntry]) -> TaskSnapshot:
    """Sparse-grow the seed backbone on the first task and freeze it."""
    if backbone.active_params(include_training=False) != 0:
        raise ContractViolation("task 1 requires an empty ownership ledger")
    trainer = TaskTrainer(backbone, spec, config, GROWN_FLAGS, root)
    trainer.train_phase("grow", config.epochs["task1"], grow=True,
                        epoch_log=epoch_log)
    return trainer.finalize()


def pick_and_reuse(backbone: BackboneState, spec: TaskSpec, config: RunConfig,
                   root: SeededRng,
                   epoch_log: list[EpochLogEntry]) -> tuple[TaskTrainer, float]:
    """Adapt frozen weights to a new task without growing.

    Learns the kernel-reuse mask over earlier tasks' weights, retrains
    released kernels, and trains the task head jointly; returns the trainer
    (for a possible expansion) plus the candidate validation accuracy.
    """
    if spec.task_id < 2:
        raise ContractViolation("pick_and_reuse applies to tasks 2..T")
    trainer = TaskTrainer(backbone, spec, config, GROWN_FLAGS, root)
    trainer.train_phase("pick", config.epochs["pick"], grow=False,
                        epoch_log=epoch_log)
    return trainer, trainer.validation_accuracy()


def expand_task(trainer: TaskTrainer,
                epoch_log: list[EpochLogEntry]) -> TaskSnapshot:
    """Grow the backbone for a task whose candidate accuracy missed target."""
    trainer.train_phase("expand", trainer.config.epochs["expand"], grow=True,
                        epoch_log=epoch_log)
    return trainer.finalize()


def run_grown(config: RunConfig) -> RunResult:
    """Full pipeline: task-1 sparse growth, then pick/reuse + gated expansion."""
    tasks = build_tasks(config)
    targets = resolve_targets(tasks, config)
    root = SeededRng(config.seed)
    backbone = BackboneState(config.arch)
    _grow_seed_channels(backbone, root.substream("growth"))
    ledger = GrowthLedger(full_params=config.arch.full_params)
    result = RunResult(
        mode="grown", config=config, backbone=backbone, snapshots={},
        ledger=ledger, test_accuracies={}, val_accuracies={}, targets=targets,
        ratios={},
    )
    digests: dict = {}
    for task in tasks:
        t = task.task_id
        spec = TaskSpec(t, task, targets[t], config.growth_cap, config.epochs)
        if t == 1:
            snapshot = train_task1(backbone, spec, config, root, result.epoch_log)
        else:
            trainer, pick_acc = pick_and_reuse(backbone, spec, config, root,
                                               result.epoch_log)
            expanded = pick_acc < spec.target_accuracy
            result.gate_log.append(
                GateLogEntry(t, pick_acc, spec.target_accuracy, expanded)
            )
            if expanded:
                snapshot = expand_task(trainer, result.epoch_log)
            else:
                snapshot = trainer.finalize()
        result.snapshots[t] = snapshot
        row = ledger.record(t, backbone)
        result.ratios[t] = row.growth_ratio
        result.val_accuracies[t] = evaluate(t, backbone, snapshot, task.val)
        result.test_accuracies[t] = evaluate(t, backbone, snapshot, task.test)
        digests = _check_boundary(result, backbone, result.snapshots, digests, t)
    return result


def _grow_seed_channels(backbone: BackboneState, rng: SeededRng) -> None:
    for layer in backbone.layers:
        bits = np.full(layer.spec.out_channels, 0.0)
        bits[: layer.spec.seed_channels] = 1.0
        query_and_transition(layer, bits, rng)


def baseline_grow_only(config: RunConfig) -> RunResult:
    """Channel-gate growth per task on a frozen backbone; no reuse mask, no
    claims, no released-weight retraining.

    Growth is gated by the same targets as the full pipeline, so the paired
    comparison isolates the mask/claim/retrain machinery rather than the
    growth budget."""
    tasks = build_tasks(config)
    targets = resolve_targets(tasks, config)
    root = SeededRng(config.seed)
    backbone = BackboneState(config.arch)
    _grow_seed_channels(backbone, root.substream("growth"))
    ledger = GrowthLedger(full_params=config.arch.full_params)
    result = RunResult(
        mode="grow_only", config=config, backbone=backbone, snapshots={},
        ledger=ledger, test_accuracies={}, val_accuracies={}, targets=targets,
        ratios={},
    )
    digests: dict = {}
    for task in tasks:
        t = task.task_id
        budget = config.epochs["task1"] if t == 1 else (
            config.epochs["pick"] + config.epochs["expand"]
        )
        spec = TaskSpec(t, task, targets[t], config.growth_cap, config.epochs)
        trainer = TaskTrainer(backbone, spec, config, GROW_ONLY_FLAGS, root)
        trainer.train_phase("grow", budget, grow=True, epoch_log=result.epoch_log)
        snapshot = trainer.finalize()
        result.snapshots[t] = snapshot
        row = ledger.record(t, backbone)
        result.ratios[t] = row.growth_ratio
        result.val_accuracies[t] = evaluate(t, backbone, snapshot, task.val)
        result.test_accuracies[t] = evaluate(t, backbone, snapshot, task.test)
        digests = _check_boundary(result, backbone, result.snapshots, digests, t)
    return result


def baseline_scratch(config: RunConfig) -> RunResult:
    """Independent full-capacity model per task; size accumulates per model."""
    tasks = build_tasks(config)
    result = RunResult(
        mode="scratch", config=config, backbone=None, snapshots={},
        ledger=None, test_accuracies={}, val_accuracies={}, targets={},
        ratios={},
    )
    for i, task in enumerate(tasks, start=1):
        outcome = train_scratch_model(task, config, config.seed)
        result.epoch_log.extend(outcome.epoch_log)
        result.val_accuracies[task.task_id] = outcome.val_accuracy
        result.test_accuracies[task.task_id] = outcome.test_accuracy
        result.ratios[task.task_id] = float(i)   # i independent models so far
    return result


def run_pipeline(config: RunConfig, mode: str) -> RunResult:
    if mode == "grown":
        return run_grown(config)
    if mode == "scratch":
        return baseline_scratch(config)
    if mode == "grow_only":
        return baseline_grow_only(config)
    raise ValueError(f"unknown mode {mode!r}")
