"""Post-pruning recovery: low-rank adapters trained by distillation.

Adapters attach to the four attention projections of every layer (whatever
their compressed shapes are), keep the base weights frozen, and train with
plain fixed-step SGD on a combined objective: cross entropy on the ground
truth plus KL(teacher || student) with both distributions tempered. The raw
KL at temperature T is used as-is, without the T^2 gradient compensation.

Merging folds ``scale * down @ up`` into the base weight; a merged model is
indistinguishable from the adapter-attached one in eval mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import Node, Tape, gradients
from .toymodel import (AttentionLayer, AttentionModel, CalibrationSet,
                       LinearMap, forward_prefill)


@dataclass(frozen=True)
class KdConfig:
    """Distillation settings.

    Defaults are desk-scale: adapter rank 1 with scale alpha/rank = 2 keeps
    the adapter share of the tiny default model's parameters under 5%. The
    loss weights and temperature follow the recorded recipe (0.4 CE + 0.6 KD,
    T = 2).
    """

    alpha_ce: float = 0.4
    alpha_kd: float = 0.6
    temperature: float = 2.0
    lr: float = 0.05
    steps: int = 200
    batch_size: int = 2
    lora_rank: int = 1
    lora_alpha: float = 2.0
    dropout: float = 0.05
    seed: int = 42

    def __post_init__(self):
        if self.alpha_ce < 0 or self.alpha_kd < 0:
            raise ValueError("loss weights must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.lora_rank < 1:
            raise ValueError("adapter rank must be at least 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def scaling(self) -> float:
        return self.lora_alpha / self.lora_rank


class LoraLinear(LinearMap):
    """A frozen base projection plus a trainable low-rank delta."""

    def __init__(self, base, rank: int, scaling: float, dropout: float,
                 rng: np.random.Generator):
        super().__init__(base)
        d_in, d_out = self.weight.shape
        self.down = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, rank))
        self.up = np.zeros((rank, d_out))
        self.scaling = scaling
        self.dropout = dropout
        self.training = False
        self._mask_rng = rng

    def apply(self, tape: Tape, x: Node, name: str, tag: str | None = None) -> Node:
        base = tape.leaf(self.weight, name)
        out = tape.matmul(x, base, tag=tag)
        x_in = x
        if self.training and self.dropout > 0.0:
            keep = (self._mask_rng.random(x.value.shape) >= self.dropout)
            mask = keep.astype(np.float64) / (1.0 - self.dropout)
            x_in = tape.mul(x, tape.constant(mask))
        down = tape.leaf(self.down, f"{name}.lora_down")
        up = tape.leaf(self.up, f"{name}.lora_up")
        delta = tape.matmul(tape.matmul(x_in, down, tag=tag), up, tag=tag)
        return tape.add(out, tape.scale(delta, self.scaling))

    def merged_weight(self):
        return self.weight + self.scaling * (self.down @ self.up)

    def adapter_param_count(self) -> int:
        return int(self.down.size + self.up.size)


_ROLES = ("proj_q", "k_map", "v_map", "proj_o")


def attach_adapters(model: AttentionModel, cfg: KdConfig) -> AttentionModel:
    """Fresh model whose four projections per layer carry zero-initialized adapters."""
    rng = np.random.default_rng(cfg.seed)
    layers = []
    for layer in model.layers:
        wrapped = {}
        for role in _ROLES:
            base = getattr(layer, role).merged_weight()
            wrapped[role] = LoraLinear(base, cfg.lora_rank, cfg.scaling,
                                       cfg.dropout, rng)
        layers.append(AttentionLayer(
            wrapped["proj_q"], wrapped["k_map"], wrapped["v_map"], wrapped["proj_o"],
            k_recon=layer.k_recon, v_recon=layer.v_recon,
            k_retained=layer.k_retained))
    return AttentionModel(model.spec, model.embedding, layers,
                          method=model.method, manifest=model.manifest)


def merge_adapters(model: AttentionModel) -> AttentionModel:
    """Fold every adapter into its base weight; plain maps pass through."""
    layers = []
    for layer in model.layers:
        merged = {role: LinearMap(getattr(layer, role).merged_weight())
                  for role in _ROLES}
        layers.append(AttentionLayer(
            merged["proj_q"], merged["k_map"], merged["v_map"], merged["proj_o"],
            k_recon=layer.k_recon, v_recon=layer.v_recon,
            k_retained=layer.k_retained))
    return AttentionModel(model.spec, model.embedding, layers,
                          method=model.method, manifest=model.manifest)


def adapter_params(model: AttentionModel) -> int:
    total = 0
    for layer in model.layers:
        for role in _ROLES:
            m = getattr(layer, role)
            if isinstance(m, LoraLinear):
                total += m.adapter_param_count()
    return total


def set_training(model: AttentionModel, training: bool):
    for layer in model.layers:
        for role in _ROLES:
            m = getattr(layer, role)
            if isinstance(m, LoraLinear):
                m.training = training


# -- losses --------------------------------------------------------------------


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def kd_loss_parts(teacher_logits, student_logits, labels,
                  cfg: KdConfig) -> tuple[float, float]:
    """(cross entropy, KL divergence) per the config's temperature."""
    teacher_logits = np.asarray(teacher_logits, dtype=np.float64)
    student_logits = np.asarray(student_logits, dtype=np.float64)
    if teacher_logits.shape != student_logits.shape:
        raise ValueError("teacher and student logits must have equal shapes")
    labels = np.asarray(labels, dtype=np.intp)
    n = student_logits.shape[0]
    if labels.shape[0] != n:
        raise ValueError("one label per row required")
    logp = _log_softmax(student_logits)
    ce = float(-np.sum(logp[np.arange(n), labels]) / n)
    t = cfg.temperature
    p_t = _softmax(teacher_logits / t)
    logp_t = _log_softmax(teacher_logits / t)
    logp_s = _log_softmax(student_logits / t)
    kd = float(np.sum(p_t * (logp_t - logp_s)) / n)
    return ce, kd


def kd_loss(teacher_logits, student_logits, labels, cfg: KdConfig) -> float:
    """alpha_ce * CE(student, labels) + alpha_kd * KL(teacher || student)."""
    ce, kd = kd_loss_parts(teacher_logits, student_logits, labels, cfg)
    return cfg.alpha_ce * ce + cfg.alpha_kd * kd


def _kd_loss_node(tape: Tape, teacher_logits: np.ndarray, student_pred: Node,
                  labels, cfg: KdConfig) -> tuple[Node, float, float]:
    """Differentiable combined loss; returns the node plus (ce, kd) values."""
    n = student_pred.value.shape[0]
    ce_node = tape.cross_entropy(student_pred, labels)
    t = cfg.temperature
    p_t = _softmax(teacher_logits / t)
    logp_t = _log_softmax(teacher_logits / t)
    entropy_term = float(np.sum(p_t * logp_t) / n)
    logp_s = tape.row_log_softmax(tape.scale(student_pred, 1.0 / t))
    cross_term = tape.scale(tape.sum_all(tape.mul(tape.constant(p_t), logp_s)),
                            -1.0 / n)
    kd_node = tape.add(tape.constant([[entropy_term]]), cross_term)
    total = tape.add(tape.scale(ce_node, cfg.alpha_ce),
                     tape.scale(kd_node, cfg.alpha_kd))
    return total, float(ce_node.value[0, 0]), float(kd_node.value[0, 0])


# -- training loop ---------------------------------------------------------------


@dataclass
class TraceRow:
    step: int
    ce: float
    kd: float
    total: float


class DistillationDiverged(RuntimeError):
    def __init__(self, step: int, trace: list[TraceRow]):
        super().__init__(f"non-finite loss at step {step}")
        self.trace = trace


def trace_to_csv(trace: list[TraceRow]) -> str:
    lines = ["step,ce,kd,total"]
    for row in trace:
        lines.append(f"{row.step},{row.ce:.10f},{row.kd:.10f},{row.total:.10f}")
    return "\n".join(lines) + "\n"


def adapters_to_json(model: AttentionModel) -> str:
    """Serialize every attached adapter (for audit next to a checkpoint)."""
    import json

    payload = {}
    role_names = {"proj_q": "q", "k_map": "k", "v_map": "v", "proj_o": "o"}
    for i, layer in enumerate(model.layers):
        for role, short in role_names.items():
            m = getattr(layer, role)
            if isinstance(m, LoraLinear):
                payload[f"L{i}.{short}"] = {
                    "down": m.down.tolist(),
                    "up": m.up.tolist(),
                    "scaling": m.scaling,
                    "dropout": m.dropout,
                }
    return json.dumps(payload, sort_keys=True, indent=1)


def distill(teacher: AttentionModel, student: AttentionModel,
            calib: CalibrationSet, cfg: KdConfig) -> tuple[AttentionModel, list[TraceRow]]:
    """Train adapters on the student against the teacher's distribution.

    The student gets adapters attached here if it has none. Batches cycle
    round-robin through the calibration windows; gradients are averaged over
    the batch in index order and the update is plain fixed-step SGD. Returns
    the adapter-carrying student (train in eval mode afterwards or merge).
    """
    has_adapters = any(isinstance(getattr(layer, role), LoraLinear)
                       for layer in student.layers for role in _ROLES)
    if not has_adapters:
        student = attach_adapters(student, cfg)
    trace: list[TraceRow] = []
    set_training(student, True)
    try:
        for step in range(cfg.steps):
            picks = [(step * cfg.batch_size + j) % calib.count
                     for j in range(cfg.batch_size)]
            grad_acc: dict[str, np.ndarray] = {}
            ce_sum = kd_sum = total_sum = 0.0
            for seq_idx in picks:
                seq = list(calib.sequences[seq_idx])
                labels = seq[1:]
                teacher_pred = forward_prefill(teacher, seq).logits[:-1, :]
                tape = Tape()
                result = forward_prefill(student, seq, tape=tape)
                student_pred = tape.gather_rows(result.logits_node,
                                                range(len(seq) - 1))
                loss, ce, kd = _kd_loss_node(tape, teacher_pred, student_pred,
                                             labels, cfg)
                ce_sum += ce
                kd_sum += kd
                total_sum += float(loss.value[0, 0])
                names = sorted(n for n in tape.leaves if ".lora_" in n)
                grads = gradients(tape, loss, [tape.leaves[n] for n in names])
                for name, g in zip(names, grads):
                    if name in grad_acc:
                        grad_acc[name] += g
                    else:
                        grad_acc[name] = g.copy()
            b = cfg.batch_size
            row = TraceRow(step, ce_sum / b, kd_sum / b, total_sum / b)
            trace.append(row)
            if not np.isfinite(row.total):
                raise DistillationDiverged(step, trace)
            adapters = _adapter_index(student)
            for name, g in grad_acc.items():
                target, attr = adapters[name]
                arr = getattr(target, attr)
                arr -= (cfg.lr / b) * g
                if not np.all(np.isfinite(arr)):
                    raise DistillationDiverged(step, trace)
    finally:
        set_training(student, False)
    return student, trace


def pretrain(model: AttentionModel, calib: CalibrationSet, steps: int = 150,
             lr: float = 0.2, batch_size: int = 4, clip_norm: float = 1.0,
             momentum: float = 0.0, only: list[str] | None = None) -> AttentionModel:
    """Gradient descent on the calibration stream over the base weights.

    Returns a new model (the input stays untouched). Used to move the toy LM
    near a loss minimum before curvature-based analyses; distillation proper
    trains adapters only. Updates clip to a global gradient norm for
    stability across seeds; heavy-ball momentum is available for runs that
    must actually converge rather than just improve. ``only`` restricts the
    update to the named weights (e.g. ["L0.k"]) with the rest held fixed.
    """
    from .numcore import gradients as _gradients
    from .toymodel import loss_forward as _loss_forward

    trained = AttentionModel(
        model.spec, model.embedding.copy(),
        [AttentionLayer(
            LinearMap(layer.proj_q.merged_weight().copy()),
            LinearMap(layer.k_map.merged_weight().copy()),
            LinearMap(layer.v_map.merged_weight().copy()),
            LinearMap(layer.proj_o.merged_weight().copy()),
            k_recon=layer.k_recon, v_recon=layer.v_recon,
            k_retained=layer.k_retained)
         for layer in model.layers],
        method=model.method, manifest=model.manifest)

    weights = {"embedding": trained.embedding}
    for i, layer in enumerate(trained.layers):
        weights[f"L{i}.q"] = layer.proj_q.weight
        weights[f"L{i}.k"] = layer.k_map.weight
        weights[f"L{i}.v"] = layer.v_map.weight
        weights[f"L{i}.o"] = layer.proj_o.weight

    names = sorted(weights) if only is None else sorted(only)
    if any(n not in weights for n in names):
        raise ValueError(f"unknown weight names in {names}")
    velocity = {name: np.zeros_like(weights[name]) for name in names}
    for step in range(steps):
        picks = [(step * batch_size + j) % calib.count for j in range(batch_size)]
        acc = {name: np.zeros_like(weights[name]) for name in names}
        for seq_idx in picks:
            loss, tape = _loss_forward(trained, list(calib.sequences[seq_idx]))
            grads = _gradients(tape, loss, [tape.leaves[n] for n in names])
            for name, g in zip(names, grads):
                acc[name] += g
        norm = np.sqrt(sum(float(np.sum(acc[n] ** 2)) for n in names)) / batch_size
        scale = (lr / batch_size) * min(1.0, clip_norm / max(norm, 1e-12))
        for name in names:
            velocity[name] = momentum * velocity[name] + scale * acc[name]
            weights[name] -= velocity[name]
    return trained


def _adapter_index(model: AttentionModel) -> dict[str, tuple[LoraLinear, str]]:
    role_names = {"proj_q": "q", "k_map": "k", "v_map": "v", "proj_o": "o"}
    index = {}
    for i, layer in enumerate(model.layers):
        for role, short in role_names.items():
            m = getattr(layer, role)
            if isinstance(m, LoraLinear):
                index[f"L{i}.{short}.lora_down"] = (m, "down")
                index[f"L{i}.{short}.lora_up"] = (m, "up")
    return index
