"""Pair saliency: empirical Fisher scores and the magnitude ablation.

The Fisher estimate is the calibration-set mean of elementwise SQUARED
per-sample loss gradients (square first, then average). Pair scores sum the
Fisher mass of the two columns each rotation pair owns; value projections are
never rotated, but their columns are grouped into consecutive (2x, 2x+1)
pseudo-pairs so one score/budget pipeline serves both sides.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .numcore import gradients
from .rope import PairingScheme
from .toymodel import AttentionModel, CalibrationSet, loss_forward

KEY_SIDE = "k"
VALUE_SIDE = "v"
SIDES = (KEY_SIDE, VALUE_SIDE)


def default_targets(model: AttentionModel) -> list[tuple[int, str]]:
    """All (layer, side) projections the pruning pipeline scores."""
    return [(i, side) for i in range(model.spec.layers) for side in SIDES]


@dataclass
class FisherEstimate:
    """Accumulated squared gradients per targeted projection."""

    sums: dict[tuple[int, str], np.ndarray]
    samples: int

    def mean(self, layer: int, side: str) -> np.ndarray:
        return self.sums[(layer, side)] / self.samples

    def targets(self) -> list[tuple[int, str]]:
        return sorted(self.sums.keys())


def estimate_fisher(model: AttentionModel, calib: CalibrationSet,
                    targets: list[tuple[int, str]] | None = None) -> FisherEstimate:
    """Mean over calibration windows of squared CE-loss gradients.

    Windows are processed in index order with a private tape each, so the
    estimate does not depend on scheduling.
    """
    if calib.count == 0:
        raise ValueError("calibration set is empty")
    targets = default_targets(model) if targets is None else list(targets)
    sums: dict[tuple[int, str], np.ndarray] = {}
    for seq in calib:
        loss, tape = loss_forward(model, seq)
        leaf_nodes = [tape.leaves[f"L{layer}.{side}"] for layer, side in targets]
        grads = gradients(tape, loss, leaf_nodes)
        for key, g in zip(targets, grads):
            sq = g * g
            if key in sums:
                sums[key] += sq
            else:
                sums[key] = sq
    return FisherEstimate(sums, calib.count)


def _pair_column_lists(scheme: PairingScheme, side: str) -> list[tuple[int, int]]:
    # value columns are not rotated; they use consecutive pseudo-pairs
    if side == VALUE_SIDE:
        d = scheme.head_dim
        return [(2 * p, 2 * p + 1) for p in range(d // 2)]
    return scheme.pairs()


@dataclass
class PairScoreTable:
    """sigma_p per (layer, side, head, pair), plus group and grand totals."""

    head_dim: int
    pairing: str
    scores: dict[tuple[int, str, int], np.ndarray] = field(default_factory=dict)

    @property
    def num_pairs(self) -> int:
        return self.head_dim // 2

    def set(self, layer: int, side: str, head: int, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.num_pairs,):
            raise ValueError("one score per pair required")
        if np.any(values < 0):
            raise ValueError("pair scores must be non-negative")
        self.scores[(layer, side, head)] = values

    def get(self, layer: int, side: str, head: int) -> np.ndarray:
        return self.scores[(layer, side, head)]

    def keys(self) -> list[tuple[int, str, int]]:
        return sorted(self.scores.keys())

    def groups(self) -> list[tuple[int, str]]:
        return sorted({(layer, side) for layer, side, _ in self.scores})

    def group_total(self, layer: int, side: str) -> float:
        total = 0.0
        for (l, s, _), v in sorted(self.scores.items()):
            if l == layer and s == side:
                total += float(np.sum(v))
        return total

    def grand_total(self) -> float:
        return float(sum(self.group_total(l, s) for l, s in self.groups()))

    def to_json(self) -> str:
        payload = {
            "head_dim": self.head_dim,
            "pairing": self.pairing,
            "scores": {f"{l}.{s}.{h}": v.tolist()
                       for (l, s, h), v in sorted(self.scores.items())},
            "group_totals": {f"{l}.{s}": self.group_total(l, s)
                             for l, s in self.groups()},
            "grand_total": self.grand_total(),
        }
        return json.dumps(payload, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "PairScoreTable":
        data = json.loads(text)
        table = cls(head_dim=data["head_dim"], pairing=data["pairing"])
        for key, values in data["scores"].items():
            l, s, h = key.split(".")
            table.set(int(l), s, int(h), np.asarray(values))
        return table


def _scores_from_matrix_stat(stat: np.ndarray, scheme: PairingScheme, side: str,
                             head_dim: int) -> list[np.ndarray]:
    """Per-head pair sums of a non-negative per-entry statistic."""
    n_heads = stat.shape[1] // head_dim
    pairs = _pair_column_lists(scheme, side)
    per_head = []
    for h in range(n_heads):
        block = stat[:, h * head_dim:(h + 1) * head_dim]
        col_sums = block.sum(axis=0)
        per_head.append(np.array([col_sums[a] + col_sums[b] for a, b in pairs]))
    return per_head


def pair_scores(fisher: FisherEstimate, scheme: PairingScheme) -> PairScoreTable:
    """Aggregate Fisher mass over each pair's two columns (all rows)."""
    table = PairScoreTable(head_dim=scheme.head_dim, pairing=scheme.kind)
    for layer, side in fisher.targets():
        stat = fisher.mean(layer, side)
        if stat.shape[1] % scheme.head_dim != 0:
            raise ValueError("fisher shape does not split into heads")
        for h, values in enumerate(_scores_from_matrix_stat(stat, scheme, side,
                                                            scheme.head_dim)):
            table.set(layer, side, h, values)
    return table


def magnitude_scores(model: AttentionModel, scheme: PairingScheme) -> PairScoreTable:
    """Ablation baseline: sigma_p = squared Frobenius mass of the pair columns."""
    table = PairScoreTable(head_dim=scheme.head_dim, pairing=scheme.kind)
    for layer in range(model.spec.layers):
        for side, mat in ((KEY_SIDE, model.layers[layer].k_map.merged_weight()),
                          (VALUE_SIDE, model.layers[layer].v_map.merged_weight())):
            stat = mat * mat
            for h, values in enumerate(_scores_from_matrix_stat(stat, scheme, side,
                                                                scheme.head_dim)):
                table.set(layer, side, h, values)
    return table
