"""A deterministic toy decoder attention LM with pluggable KV representations.

The model is a pure chain: token embedding -> L causal attention layers ->
tied output head. There are no MLP blocks, biases, layer norms or residual
streams; the compression machinery only touches attention projections, so
anything else would add noise without coverage.

Each layer can run with full-dimension keys/values or with latent (compressed)
ones:

* key path ``full``: cache stores rotated full-width keys;
* key path ``rap``: cache stores index-rotated retained-pair latents, queries
  go through the absorbed projection, no reconstruction ever happens;
* key path ``svd``: cache stores unrotated latents, every attention step
  reconstructs keys to full width (the matmul is counted) and only then
  rotates them;
* value path ``full`` / ``latent``: latent values either get reconstructed per
  step (``v_recon`` present) or flow straight into an absorbed output
  projection.

Attention scores always scale by 1/sqrt(D) with the ORIGINAL head dimension,
also after pruning; the latent paths then reproduce full-dimension references
exactly instead of approximately.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numcore import Matrix, Node, Tape, as_matrix
from .rope import PairingScheme, RetainedIndex, RopeConfig


@dataclass(frozen=True)
class ModelSpec:
    """Dimensions and seeds of the toy LM.

    ``query_heads`` must be a multiple of ``kv_heads`` (grouped-query
    attention); the model dimension is ``query_heads * head_dim``.
    """

    layers: int
    query_heads: int
    kv_heads: int
    head_dim: int
    vocab: int
    rope: RopeConfig
    seed: int = 42

    def __post_init__(self):
        if self.layers < 1 or self.query_heads < 1 or self.kv_heads < 1:
            raise ValueError("layers and head counts must be positive")
        if self.query_heads % self.kv_heads != 0:
            raise ValueError("query_heads must be divisible by kv_heads")
        if self.head_dim % 2 != 0:
            raise ValueError("head_dim must be even")
        if self.rope.scheme.head_dim != self.head_dim:
            raise ValueError("rope scheme head_dim must match model head_dim")
        if self.vocab < 2:
            raise ValueError("vocab must be at least 2")

    @property
    def model_dim(self) -> int:
        return self.query_heads * self.head_dim

    @property
    def group_size(self) -> int:
        return self.query_heads // self.kv_heads


def default_spec(seed: int = 42, pairing: str = "adjacent") -> ModelSpec:
    """Desk-scale default: 2 layers, 4 query / 2 kv heads, head dim 8, vocab 64."""
    scheme = PairingScheme(pairing, 8)
    return ModelSpec(
        layers=2,
        query_heads=4,
        kv_heads=2,
        head_dim=8,
        vocab=64,
        rope=RopeConfig(theta_base=10000.0, scheme=scheme),
        seed=seed,
    )


class LinearMap:
    """Projection ``y = x @ w`` whose weight registers as a named tape leaf."""

    def __init__(self, weight):
        self.weight = as_matrix(weight)

    def apply(self, tape: Tape, x: Node, name: str, tag: str | None = None) -> Node:
        w = tape.leaf(self.weight, name)
        return tape.matmul(x, w, tag=tag)

    def merged_weight(self) -> Matrix:
        return self.weight

    def param_count(self) -> int:
        return int(self.weight.size)


@dataclass
class AttentionLayer:
    """One attention layer; the mode of each side follows from what is set."""

    proj_q: LinearMap                 # dim x (H_q * q_width)
    k_map: LinearMap                  # dim x (H_kv * k_width)
    v_map: LinearMap                  # dim x (H_kv * v_width)
    proj_o: LinearMap                 # (H_q * o_width) x dim
    k_recon: list[np.ndarray] | None = None   # per kv head, (k_width x D)
    v_recon: list[np.ndarray] | None = None   # per kv head, (v_width x D)
    k_retained: list[RetainedIndex] | None = None  # per kv head, rap mode

    @property
    def k_mode(self) -> str:
        if self.k_retained is not None:
            return "rap"
        if self.k_recon is not None:
            return "svd"
        return "full"

    def param_count(self) -> int:
        n = (self.proj_q.param_count() + self.k_map.param_count()
             + self.v_map.param_count() + self.proj_o.param_count())
        for recon in (self.k_recon, self.v_recon):
            if recon is not None:
                n += sum(int(b.size) for b in recon)
        return n


class AttentionModel:
    """Toy LM; also serves as the container for compressed variants."""

    def __init__(self, spec: ModelSpec, embedding, layers, method: str = "baseline",
                 manifest: dict | None = None):
        self.spec = spec
        self.embedding = as_matrix(embedding, rows=spec.vocab, cols=spec.model_dim)
        self.layers = list(layers)
        self.method = method
        self.manifest = manifest

    @classmethod
    def build(cls, spec: ModelSpec) -> "AttentionModel":
        rng = np.random.default_rng(spec.seed)
        dim = spec.model_dim
        kv_width = spec.kv_heads * spec.head_dim
        std = 1.0 / np.sqrt(dim)
        embedding = rng.normal(0.0, 1.0, size=(spec.vocab, dim))
        layers = []
        for _ in range(spec.layers):
            layers.append(AttentionLayer(
                proj_q=LinearMap(rng.normal(0.0, std, size=(dim, dim))),
                k_map=LinearMap(rng.normal(0.0, std, size=(dim, kv_width))),
                v_map=LinearMap(rng.normal(0.0, std, size=(dim, kv_width))),
                proj_o=LinearMap(rng.normal(0.0, std, size=(dim, dim))),
            ))
        return cls(spec, embedding, layers)

    # -- accounting ----------------------------------------------------------

    def attention_params(self) -> int:
        return sum(layer.param_count() for layer in self.layers)

    def total_params(self) -> int:
        return self.attention_params() + int(self.embedding.size)


@dataclass
class HeadCache:
    k: np.ndarray  # (t, k_store_width)
    v: np.ndarray  # (t, v_store_width)


class KvCache:
    """Per layer, per kv head stores; single-writer, grows on decode."""

    def __init__(self, model: AttentionModel):
        self.model = model
        spec = model.spec
        self.heads: list[list[HeadCache]] = []
        for layer in model.layers:
            kw = layer.k_map.weight.shape[1] // spec.kv_heads
            vw = layer.v_map.weight.shape[1] // spec.kv_heads
            self.heads.append([
                HeadCache(np.zeros((0, kw)), np.zeros((0, vw)))
                for _ in range(spec.kv_heads)
            ])
        self.length = 0

    def entries(self) -> int:
        """Total cached scalars at the current length."""
        total = 0
        for layer in self.heads:
            for hc in layer:
                total += hc.k.size + hc.v.size
        return int(total)


@dataclass
class PrefillResult:
    logits: Matrix
    cache: KvCache
    tape: Tape
    logits_node: Node
    attention_probs: list[list[Matrix]] = field(default_factory=list)


def _causal_mask(n: int) -> np.ndarray:
    mask = np.zeros((n, n))
    mask[np.triu_indices(n, k=1)] = -np.inf
    return mask


def _rotate_node(tape: Tape, node: Node, cfg: RopeConfig, cos, sin,
                 retained: RetainedIndex | None) -> Node:
    if retained is None:
        first, second = cfg.scheme.column_arrays()
        return tape.rotate_pairs(node, cos, sin, first, second)
    keep = np.asarray(retained.pairs, dtype=np.intp)
    first, second = cfg.scheme.column_arrays(width=2 * len(retained))
    return tape.rotate_pairs(node, cos[:, keep], sin[:, keep], first, second)


def _layer_forward(model: AttentionModel, tape: Tape, x: Node, idx: int,
                   cos, sin, mask_node: Node | None,
                   cache: KvCache | None, probs_out: list | None) -> Node:
    """Causal attention over the rows of ``x`` (prefill path)."""
    spec = model.spec
    layer = model.layers[idx]
    d = spec.head_dim
    inv_sqrt_d = 1.0 / np.sqrt(d)

    q_all = layer.proj_q.apply(tape, x, f"L{idx}.q", tag="attn_q")
    k_all = layer.k_map.apply(tape, x, f"L{idx}.k", tag="kv_proj")
    v_all = layer.v_map.apply(tape, x, f"L{idx}.v", tag="kv_proj")
    qw = q_all.value.shape[1] // spec.query_heads
    kw = k_all.value.shape[1] // spec.kv_heads
    vw = v_all.value.shape[1] // spec.kv_heads

    k_rot_heads, v_use_heads = [], []
    for g in range(spec.kv_heads):
        k_g = tape.gather_cols(k_all, range(g * kw, (g + 1) * kw))
        if layer.k_mode == "svd":
            recon = tape.leaf(layer.k_recon[g], f"L{idx}.k_b{g}")
            k_full = tape.matmul(k_g, recon, tag="kv_proj")
            k_rot = _rotate_node(tape, k_full, spec.rope, cos, sin, None)
            store = k_g.value
        elif layer.k_mode == "rap":
            k_rot = _rotate_node(tape, k_g, spec.rope, cos, sin, layer.k_retained[g])
            store = k_rot.value
        else:
            k_rot = _rotate_node(tape, k_g, spec.rope, cos, sin, None)
            store = k_rot.value
        k_rot_heads.append(k_rot)

        v_g = tape.gather_cols(v_all, range(g * vw, (g + 1) * vw))
        if layer.v_recon is not None:
            recon_v = tape.leaf(layer.v_recon[g], f"L{idx}.v_b{g}")
            v_use = tape.matmul(v_g, recon_v, tag="kv_proj")
        else:
            v_use = v_g
        v_use_heads.append(v_use)

        if cache is not None:
            hc = cache.heads[idx][g]
            hc.k = np.vstack([hc.k, store])
            hc.v = np.vstack([hc.v, v_g.value])

    outs = []
    layer_probs = [] if probs_out is not None else None
    for h in range(spec.query_heads):
        g = h // spec.group_size
        q_h = tape.gather_cols(q_all, range(h * qw, (h + 1) * qw))
        retained = layer.k_retained[g] if layer.k_mode == "rap" else None
        q_rot = _rotate_node(tape, q_h, spec.rope, cos, sin, retained)
        scores = tape.matmul(q_rot, tape.transpose(k_rot_heads[g]), tag="attn_score")
        scores = tape.scale(scores, inv_sqrt_d)
        if mask_node is not None:
            scores = tape.add(scores, mask_node)
        probs = tape.row_softmax(scores)
        if layer_probs is not None:
            layer_probs.append(probs.value)
        outs.append(tape.matmul(probs, v_use_heads[g], tag="attn_value"))
    if probs_out is not None:
        probs_out.append(layer_probs)

    merged = outs[0] if len(outs) == 1 else tape.concat_cols(outs)
    return layer.proj_o.apply(tape, merged, f"L{idx}.o", tag="attn_o")


def _check_tokens(spec: ModelSpec, tokens) -> list[int]:
    toks = [int(t) for t in tokens]
    if not toks:
        raise ValueError("token sequence must be non-empty")
    if any(t < 0 or t >= spec.vocab for t in toks):
        raise ValueError("token out of vocabulary")
    return toks


def forward_prefill(model: AttentionModel, tokens, tape: Tape | None = None,
                    collect_probs: bool = False) -> PrefillResult:
    """Run causal attention over the whole sequence, filling a fresh cache."""
    spec = model.spec
    toks = _check_tokens(spec, tokens)
    tape = tape if tape is not None else Tape()
    positions = list(range(len(toks)))
    cos, sin = spec.rope.angle_tables(positions)
    mask_node = tape.constant(_causal_mask(len(toks))) if len(toks) > 1 else None

    emb = tape.leaf(model.embedding, "embedding")
    x = tape.gather_rows(emb, toks)
    cache = KvCache(model)
    cache.length = len(toks)
    probs_out: list | None = [] if collect_probs else None
    for i in range(spec.layers):
        x = _layer_forward(model, tape, x, i, cos, sin, mask_node, cache, probs_out)
    logits_node = tape.matmul(x, tape.transpose(emb), tag="lm_head")
    return PrefillResult(logits_node.value.copy(), cache, tape, logits_node,
                         probs_out or [])


def forward_decode(model: AttentionModel, cache: KvCache, token: int,
                   tape: Tape | None = None) -> tuple[Matrix, KvCache]:
    """Append one token to the cache and return the next-token logits."""
    spec = model.spec
    if cache.model is not model:
        raise ValueError("cache was built for a different model")
    token = _check_tokens(spec, [token])[0]
    tape = tape if tape is not None else Tape()
    t = cache.length
    cos_new, sin_new = spec.rope.angle_tables([t])
    past_positions = list(range(t + 1))
    cos_all, sin_all = spec.rope.angle_tables(past_positions)
    d = spec.head_dim
    inv_sqrt_d = 1.0 / np.sqrt(d)

    emb = tape.leaf(model.embedding, "embedding")
    x = tape.gather_rows(emb, [token])
    for idx, layer in enumerate(model.layers):
        q_all = layer.proj_q.apply(tape, x, f"L{idx}.q", tag="attn_q")
        k_all = layer.k_map.apply(tape, x, f"L{idx}.k", tag="kv_proj")
        v_all = layer.v_map.apply(tape, x, f"L{idx}.v", tag="kv_proj")
        qw = q_all.value.shape[1] // spec.query_heads
        kw = k_all.value.shape[1] // spec.kv_heads
        vw = v_all.value.shape[1] // spec.kv_heads

        k_mats, v_mats = [], []
        for g in range(spec.kv_heads):
            hc = cache.heads[idx][g]
            k_g = tape.gather_cols(k_all, range(g * kw, (g + 1) * kw))
            if layer.k_mode == "svd":
                hc.k = np.vstack([hc.k, k_g.value])
                lat = tape.constant(hc.k)
                recon = tape.leaf(layer.k_recon[g], f"L{idx}.k_b{g}")
                k_full = tape.matmul(lat, recon, tag="kv_proj")
                k_mat = _rotate_node(tape, k_full, spec.rope, cos_all, sin_all, None)
            else:
                retained = layer.k_retained[g] if layer.k_mode == "rap" else None
                k_new = _rotate_node(tape, k_g, spec.rope, cos_new, sin_new, retained)
                hc.k = np.vstack([hc.k, k_new.value])
                k_mat = tape.constant(hc.k)
            k_mats.append(k_mat)

            v_g = tape.gather_cols(v_all, range(g * vw, (g + 1) * vw))
            hc.v = np.vstack([hc.v, v_g.value])
            if layer.v_recon is not None:
                lat_v = tape.constant(hc.v)
                recon_v = tape.leaf(layer.v_recon[g], f"L{idx}.v_b{g}")
                v_mat = tape.matmul(lat_v, recon_v, tag="kv_proj")
            else:
                v_mat = tape.constant(hc.v)
            v_mats.append(v_mat)

        outs = []
        for h in range(spec.query_heads):
            g = h // spec.group_size
            q_h = tape.gather_cols(q_all, range(h * qw, (h + 1) * qw))
            retained = layer.k_retained[g] if layer.k_mode == "rap" else None
            q_rot = _rotate_node(tape, q_h, spec.rope, cos_new, sin_new, retained)
            scores = tape.matmul(q_rot, tape.transpose(k_mats[g]), tag="attn_score")
            scores = tape.scale(scores, inv_sqrt_d)
            probs = tape.row_softmax(scores)
            outs.append(tape.matmul(probs, v_mats[g], tag="attn_value"))
        merged = outs[0] if len(outs) == 1 else tape.concat_cols(outs)
        x = layer.proj_o.apply(tape, merged, f"L{idx}.o", tag="attn_o")

    logits_node = tape.matmul(x, tape.transpose(emb), tag="lm_head")
    cache.length = t + 1
    return logits_node.value.copy(), cache


def loss_forward(model: AttentionModel, tokens,
                 tape: Tape | None = None) -> tuple[Node, Tape]:
    """Mean next-token cross entropy as a differentiable tape node."""
    toks = _check_tokens(model.spec, tokens)
    if len(toks) < 2:
        raise ValueError("need at least 2 tokens for a next-token loss")
    tape = tape if tape is not None else Tape()
    result = forward_prefill(model, toks, tape=tape)
    predict = tape.gather_rows(result.logits_node, range(len(toks) - 1))
    loss = tape.cross_entropy(predict, toks[1:])
    return loss, tape


def loss_ce(model: AttentionModel, tokens) -> float:
    loss, _ = loss_forward(model, tokens)
    return float(loss.value[0, 0])


def mean_loss(model: AttentionModel, sequences) -> float:
    """Mean of loss_ce over an iterable of sequences, in iteration order."""
    seqs = list(sequences)
    if not seqs:
        raise ValueError("no sequences given")
    return float(np.mean([loss_ce(model, s) for s in seqs]))


# -- calibration data ---------------------------------------------------------


@dataclass(frozen=True)
class CalibrationSet:
    """Seeded synthetic token windows used for scoring and distillation."""

    sequences: tuple[tuple[int, ...], ...]
    seed: int

    @property
    def count(self) -> int:
        return len(self.sequences)

    @property
    def window(self) -> int:
        return len(self.sequences[0]) if self.sequences else 0

    def __iter__(self):
        return iter(self.sequences)


def markov_calibration(vocab: int, count: int = 16, window: int = 64,
                       seed: int = 42) -> CalibrationSet:
    """Token streams from a fixed-order Markov chain; deterministic per seed.

    The transition rows are sparse-ish Dirichlet draws so the streams carry
    learnable structure (scores and distillation need non-degenerate signal).
    """
    if count < 1 or window < 2:
        raise ValueError("need at least one window of length >= 2")
    rng = np.random.default_rng(seed)
    transitions = rng.dirichlet(np.full(vocab, 0.25), size=vocab)
    cumulative = np.cumsum(transitions, axis=1)
    sequences = []
    for _ in range(count):
        state = int(rng.integers(vocab))
        seq = [state]
        for _ in range(window - 1):
            u = rng.random()
            state = int(np.searchsorted(cumulative[state], u))
            state = min(state, vocab - 1)
            seq.append(state)
        sequences.append(tuple(seq))
    return CalibrationSet(tuple(sequences), seed)


# -- serialization ------------------------------------------------------------


def _spec_to_json(spec: ModelSpec) -> dict:
    return {
        "layers": spec.layers,
        "query_heads": spec.query_heads,
        "kv_heads": spec.kv_heads,
        "head_dim": spec.head_dim,
        "vocab": spec.vocab,
        "theta_base": spec.rope.theta_base,
        "pairing": spec.rope.scheme.kind,
        "seed": spec.seed,
    }


def spec_from_json(data: dict) -> ModelSpec:
    scheme = PairingScheme(data["pairing"], data["head_dim"])
    return ModelSpec(
        layers=data["layers"],
        query_heads=data["query_heads"],
        kv_heads=data["kv_heads"],
        head_dim=data["head_dim"],
        vocab=data["vocab"],
        rope=RopeConfig(theta_base=data["theta_base"], scheme=scheme),
        seed=data.get("seed", 42),
    )


def _model_arrays(model: AttentionModel) -> list[tuple[str, np.ndarray]]:
    arrays = [("embedding", model.embedding)]
    for i, layer in enumerate(model.layers):
        arrays.append((f"L{i}.q", layer.proj_q.merged_weight()))
        arrays.append((f"L{i}.k", layer.k_map.merged_weight()))
        if layer.k_recon is not None:
            for g, b in enumerate(layer.k_recon):
                arrays.append((f"L{i}.k_b{g}", b))
        arrays.append((f"L{i}.v", layer.v_map.merged_weight()))
        if layer.v_recon is not None:
            for g, b in enumerate(layer.v_recon):
                arrays.append((f"L{i}.v_b{g}", b))
        arrays.append((f"L{i}.o", layer.proj_o.merged_weight()))
    return arrays


def save_model(model: AttentionModel, path) -> None:
    """One file: a JSON header line, then the little-endian float64 blob.

    The header's ``arrays`` list documents the blob order; retained pair ids
    (the index form of the expansion matrices) live in the header since they
    are structure, not parameters.
    """
    arrays = _model_arrays(model)
    header = {
        "format": "rapkit-model-v1",
        "byte_order": "little",
        "dtype": "float64",
        "method": model.method,
        "spec": _spec_to_json(model.spec),
        "arrays": [{"name": n, "rows": a.shape[0], "cols": a.shape[1]}
                   for n, a in arrays],
        "retained_pairs": [
            [list(r.pairs) for r in layer.k_retained] if layer.k_retained else None
            for layer in model.layers
        ],
    }
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(blob)


def load_model(path) -> AttentionModel:
    raw = Path(path).read_bytes()
    newline = raw.index(b"\n")
    header = json.loads(raw[:newline].decode("utf-8"))
    if header.get("format") != "rapkit-model-v1":
        raise ValueError(f"unrecognized model file {path}")
    spec = spec_from_json(header["spec"])
    blob = raw[newline + 1:]
    offset = 0
    arrays: dict[str, np.ndarray] = {}
    for meta in header["arrays"]:
        n = meta["rows"] * meta["cols"]
        chunk = np.frombuffer(blob, dtype="<f8", count=n, offset=offset)
        arrays[meta["name"]] = np.ascontiguousarray(
            chunk.reshape(meta["rows"], meta["cols"]).astype(np.float64))
        offset += n * 8

    layers = []
    for i in range(spec.layers):
        retained_meta = header["retained_pairs"][i]
        retained = None
        if retained_meta is not None:
            retained = [RetainedIndex(tuple(p), spec.rope.scheme) for p in retained_meta]
        k_recon = []
        g = 0
        while f"L{i}.k_b{g}" in arrays:
            k_recon.append(arrays[f"L{i}.k_b{g}"])
            g += 1
        v_recon = []
        g = 0
        while f"L{i}.v_b{g}" in arrays:
            v_recon.append(arrays[f"L{i}.v_b{g}"])
            g += 1
        layers.append(AttentionLayer(
            proj_q=LinearMap(arrays[f"L{i}.q"]),
            k_map=LinearMap(arrays[f"L{i}.k"]),
            v_map=LinearMap(arrays[f"L{i}.v"]),
            proj_o=LinearMap(arrays[f"L{i}.o"]),
            k_recon=k_recon or None,
            v_recon=v_recon or None,
            k_retained=retained,
        ))
    return AttentionModel(spec, arrays["embedding"], layers, method=header["method"])
