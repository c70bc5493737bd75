"""Executable checks of the structural claims behind pair-aligned pruning.

Three families:

* commutativity: rotating a retained-pair latent and then expanding equals
  expanding and then rotating, exactly; a deliberately misaligned column
  selection (diagnostic only) breaks this by orders of magnitude;
* greedy optimality: keeping the top-m scores minimizes the residual score
  mass, confirmed by exhaustive subset enumeration at small pair counts;
* the second-order loss bound: pruning-induced loss change versus half the
  squared-perturbation-scaled residual score mass. On a synthetic quadratic
  whose curvature the score estimate matches by construction the ratio is
  exactly 1; on the toy LM it is an empirical regime check, never a hard
  guarantee.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .rope import RetainedIndex, RopeConfig, rotate, rotate_indexed
from .scoring import estimate_fisher
from .toymodel import (AttentionLayer, AttentionModel, CalibrationSet,
                       LinearMap, mean_loss)


def commutativity_deviation(a_cols: np.ndarray, retained: RetainedIndex,
                            cfg: RopeConfig, x: np.ndarray,
                            positions) -> float:
    """max |rotate_indexed(xA) B - rotate(xA B)| with the dense expansion."""
    latent = x @ a_cols
    b = retained.expansion_matrix()
    lhs = rotate_indexed(latent, positions, cfg, retained) @ b
    rhs = rotate(latent @ b, positions, cfg)
    return float(np.max(np.abs(lhs - rhs)))


def random_factorization_deviation(cfg: RopeConfig, retained_count: int,
                                   rng: np.random.Generator,
                                   rows: int = 8, model_dim: int | None = None,
                                   ) -> float:
    """Deviation for one random weight/score/input draw."""
    d = cfg.head_dim
    model_dim = 2 * d if model_dim is None else model_dim
    weight = rng.normal(size=(model_dim, d))
    pairs = tuple(sorted(rng.choice(d // 2, size=retained_count, replace=False).tolist()))
    retained = RetainedIndex(pairs, cfg.scheme)
    a_cols = weight[:, retained.rap_index]
    x = rng.normal(size=(rows, model_dim))
    positions = rng.integers(0, 4096, size=rows).tolist()
    return commutativity_deviation(a_cols, retained, cfg, x, positions)


def check_commutativity(model: AttentionModel, trials: int = 8,
                        seed: int = 0) -> float:
    """Max deviation over every installed retained-pair key head."""
    rng = np.random.default_rng(seed)
    cfg = model.spec.rope
    dim = model.spec.model_dim
    worst = 0.0
    found = False
    for layer in model.layers:
        if layer.k_mode != "rap":
            continue
        found = True
        kw = layer.k_map.weight.shape[1] // model.spec.kv_heads
        for g, retained in enumerate(layer.k_retained):
            a_cols = layer.k_map.weight[:, g * kw:(g + 1) * kw]
            for _ in range(trials):
                x = rng.normal(size=(6, dim))
                positions = rng.integers(0, 4096, size=6).tolist()
                worst = max(worst, commutativity_deviation(
                    a_cols, retained, cfg, x, positions))
    if not found:
        raise ValueError("model has no retained-pair key factorization")
    return worst


def misaligned_deviation(cfg: RopeConfig, rng: np.random.Generator,
                         rows: int = 8) -> float:
    """Diagnostic: break one pair's alignment and measure the blow-up.

    Keeps m-1 whole pairs plus one half-pair column stolen from a pruned
    pair, while still claiming the original pair ids for the rotation. This
    reproduces the failure mode of non-pair-aligned column pruning; it is
    excluded from every normal pipeline.
    """
    d = cfg.head_dim
    n_pairs = d // 2
    if n_pairs < 3:
        raise ValueError("diagnostic needs at least 3 pairs")
    m = max(2, n_pairs // 2)
    pairs = sorted(rng.choice(n_pairs, size=m + 1, replace=False).tolist())
    kept, stolen_pair = tuple(pairs[:m]), pairs[m]
    retained = RetainedIndex(kept, cfg.scheme)
    index = list(retained.rap_index)
    # replace the last column with one from a pruned pair
    index[-1] = cfg.scheme.pair_columns(stolen_pair)[0]
    weight = rng.normal(size=(2 * d, d))
    a_cols = weight[:, index]
    x = rng.normal(size=(rows, 2 * d))
    positions = rng.integers(1, 4096, size=rows).tolist()
    latent = x @ a_cols
    b = np.zeros((len(index), d))
    b[np.arange(len(index)), index] = 1.0
    lhs = rotate_indexed(latent, positions, cfg, retained) @ b
    rhs = rotate(latent @ b, positions, cfg)
    return float(np.max(np.abs(lhs - rhs)))


# -- greedy optimality ----------------------------------------------------------


def check_greedy_optimality(sigma, m: int) -> tuple[bool, tuple[int, ...] | None]:
    """Exhaustively confirm top-m selection minimizes the residual score mass.

    Returns (ok, witness); the witness is any subset strictly better than the
    greedy choice. Feasible up to a dozen pairs.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    n = sigma.size
    if n > 12:
        raise ValueError("enumeration limited to 12 pairs")
    if not 1 <= m <= n:
        raise ValueError("m out of range")
    order = np.argsort(-sigma, kind="stable")
    greedy = tuple(sorted(int(i) for i in order[:m]))
    total = float(sigma.sum())
    greedy_residual = total - float(sigma[list(greedy)].sum())
    for subset in itertools.combinations(range(n), m):
        residual = total - float(sigma[list(subset)].sum())
        if residual < greedy_residual - 1e-12:
            return False, subset
    return True, None


# -- loss bound -----------------------------------------------------------------


@dataclass
class BoundReport:
    pruned_pairs: tuple[int, ...]
    delta_loss: float
    bound: float
    ratio: float
    within_second_order: bool

    @classmethod
    def from_values(cls, pruned, delta, bound, slack: float = 0.2):
        if bound == 0.0:
            ratio = 0.0 if delta == 0.0 else float("inf")
        else:
            ratio = delta / bound
        return cls(tuple(pruned), float(delta), float(bound), float(ratio),
                   bool(delta <= bound * (1.0 + slack)))


def _scaled_pair_removal(model: AttentionModel, layer: int, head: int,
                         pairs, eps: float) -> AttentionModel:
    """Copy of the model with the chosen pair columns scaled by (1 - eps)."""
    d = model.spec.head_dim
    scheme = model.spec.rope.scheme
    layers = list(model.layers)
    src = layers[layer]
    w_k = src.k_map.merged_weight().copy()
    for p in pairs:
        a, b = scheme.pair_columns(p)
        w_k[:, head * d + a] *= (1.0 - eps)
        w_k[:, head * d + b] *= (1.0 - eps)
    layers[layer] = AttentionLayer(src.proj_q, LinearMap(w_k), src.v_map,
                                   src.proj_o, k_recon=src.k_recon,
                                   v_recon=src.v_recon, k_retained=src.k_retained)
    return AttentionModel(model.spec, model.embedding, layers, method=model.method)


def check_loss_bound(model: AttentionModel, calib: CalibrationSet, layer: int,
                     head: int, pruned_pairs, eps: float = 1.0,
                     fisher=None, slack: float = 0.2) -> BoundReport:
    """Measure the loss change of scaled pair removal against the score bound.

    ``eps`` in (0, 1] shrinks the perturbation toward the quadratic regime;
    the bound scales with eps^2 (quadratic homogeneity of the score form).
    """
    if not 0.0 < eps <= 1.0:
        raise ValueError("eps must be in (0, 1]")
    pruned = tuple(sorted(set(int(p) for p in pruned_pairs)))
    if fisher is None:
        fisher = estimate_fisher(model, calib, targets=[(layer, "k")])
    stat = fisher.mean(layer, "k")
    d = model.spec.head_dim
    scheme = model.spec.rope.scheme
    block = stat[:, head * d:(head + 1) * d]
    col_sums = block.sum(axis=0)
    sigma = np.array([col_sums[a] + col_sums[b] for a, b in scheme.pairs()])
    bound = 0.5 * eps * eps * float(sigma[list(pruned)].sum()) if pruned else 0.0

    if pruned:
        perturbed = _scaled_pair_removal(model, layer, head, pruned, eps)
        delta = mean_loss(perturbed, calib) - mean_loss(model, calib)
    else:
        delta = 0.0
    if not np.isfinite(delta):
        raise FloatingPointError("loss became non-finite under perturbation")
    return BoundReport.from_values(pruned, delta, bound, slack)


def ambiguous_calibration(vocab: int, groups: int, seed: int) -> CalibrationSet:
    """Length-3 windows where EVERY next-token prediction is a 2-way conflict.

    Each group shares a first token with two continuations, and each
    continuation again branches twice, so no model can fit the data exactly.
    The empirical optimum then has finite logits everywhere: gradient descent
    actually reaches it, the mean gradient vanishes, and per-sample squared
    gradients estimate the curvature (information-matrix equality). That is
    the regime the second-order score bound presumes; saturating (memorized)
    positions would instead leak curvature the squared-gradient score cannot
    see.
    """
    rng = np.random.default_rng(seed)
    seqs = []
    for _ in range(groups):
        a = int(rng.integers(vocab))
        b1, b2 = rng.choice(vocab, size=2, replace=False)
        for b in (int(b1), int(b2)):
            c1, c2 = rng.choice(vocab, size=2, replace=False)
            seqs.append((a, b, int(c1)))
            seqs.append((a, b, int(c2)))
    return CalibrationSet(tuple(seqs), seed)


def toy_bound_regime_check(seed: int, eps: float = 0.05,
                           slack: float = 0.2) -> BoundReport:
    """The full bound check recipe on a trained single-layer toy LM.

    Trains the model on ambiguous calibration data (momentum phase, then a
    plain-descent polish of the key projection alone, since the bound's
    Taylor expansion holds the other parameters fixed), prunes the
    lowest-score pair at scale ``eps`` and reports loss change vs bound.
    """
    from .recover import pretrain
    from .rope import PairingScheme
    from .scoring import pair_scores
    from .toymodel import AttentionModel, ModelSpec

    scheme = PairingScheme("adjacent", 4)
    spec = ModelSpec(layers=1, query_heads=2, kv_heads=1, head_dim=4, vocab=8,
                     rope=RopeConfig(theta_base=10000.0, scheme=scheme),
                     seed=300 + seed)
    model = AttentionModel.build(spec)
    calib = ambiguous_calibration(spec.vocab, groups=5, seed=seed)
    warm = pretrain(model, calib, steps=250, lr=0.05, batch_size=calib.count,
                    momentum=0.9, clip_norm=5.0)
    trained = pretrain(warm, calib, steps=250, lr=0.05,
                       batch_size=calib.count, only=["L0.k"])
    fisher = estimate_fisher(trained, calib, targets=[(0, "k")])
    sigma = pair_scores(fisher, scheme).get(0, "k", 0)
    lowest = int(np.argmin(sigma))
    return check_loss_bound(trained, calib, 0, 0, [lowest], eps=eps,
                            fisher=fisher, slack=slack)


def quadratic_bound_case(seed: int, rows: int = 6, head_dim: int = 8,
                         pairing: str = "adjacent", prune_count: int = 2,
                         eps: float = 1.0) -> BoundReport:
    """Synthetic case where every approximation behind the bound is exact.

    The reference loss is 0.5 * ||G o (W - W0)||_F^2 evaluated from its
    minimum W0 (no first-order term). Score samples are linear losses with
    Rademacher sign patterns, whose squared gradients equal the curvature
    G^2 exactly. W0 has unit-magnitude entries, so the score mass of a pair
    equals the curvature quadratic form of removing it: the ratio is 1.
    """
    from .rope import PairingScheme

    rng = np.random.default_rng(seed)
    scheme = PairingScheme(pairing, head_dim)
    curvature_root = rng.uniform(0.5, 2.0, size=(rows, head_dim))   # G
    w0 = rng.choice([-1.0, 1.0], size=(rows, head_dim))

    # empirical squared-gradient estimate from Rademacher linear losses
    samples = 8
    fisher = np.zeros_like(curvature_root)
    for _ in range(samples):
        signs = rng.choice([-1.0, 1.0], size=(rows, head_dim))
        grad = signs * curvature_root
        fisher += grad * grad
    fisher /= samples

    pairs = sorted(rng.choice(head_dim // 2, size=prune_count, replace=False).tolist())
    cols = [c for p in pairs for c in scheme.pair_columns(p)]
    sigma = np.array([fisher[:, [a, b]].sum() for a, b in scheme.pairs()])
    bound = 0.5 * eps * eps * float(sigma[pairs].sum())

    w = w0.copy()
    w[:, cols] *= (1.0 - eps)

    def quadratic_loss(mat):
        return 0.5 * float(np.sum((curvature_root * (mat - w0)) ** 2))

    delta = quadratic_loss(w) - quadratic_loss(w0)
    return BoundReport.from_values(pairs, delta, bound, slack=1e-9)
