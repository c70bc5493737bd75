import numpy as np
import pytest

from rapkit.rope import PairingScheme, RopeConfig
from rapkit.toymodel import AttentionLayer, AttentionModel, LinearMap, ModelSpec


def make_spec(layers=2, query_heads=4, kv_heads=2, head_dim=8, vocab=64,
              pairing="adjacent", theta_base=10000.0, seed=42) -> ModelSpec:
    scheme = PairingScheme(pairing, head_dim)
    return ModelSpec(layers=layers, query_heads=query_heads, kv_heads=kv_heads,
                     head_dim=head_dim, vocab=vocab,
                     rope=RopeConfig(theta_base=theta_base, scheme=scheme),
                     seed=seed)


def tiny_spec(seed=0, pairing="adjacent") -> ModelSpec:
    """Smallest interesting model: dim 4, one layer, 2 heads of dim 2."""
    return make_spec(layers=1, query_heads=2, kv_heads=1, head_dim=2, vocab=8,
                     pairing=pairing, seed=seed)


def identity_model(head_dim=4, vocab=6, seed=3) -> AttentionModel:
    """Single head, single layer, all four projections equal to the identity."""
    spec = make_spec(layers=1, query_heads=1, kv_heads=1, head_dim=head_dim,
                     vocab=vocab, seed=seed)
    eye = np.eye(spec.model_dim)
    rng = np.random.default_rng(seed)
    embedding = rng.normal(size=(vocab, spec.model_dim))
    layer = AttentionLayer(LinearMap(eye), LinearMap(eye), LinearMap(eye),
                           LinearMap(eye))
    return AttentionModel(spec, embedding, [layer])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def finite_difference(f, arrays: dict, wrt: str, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``f(arrays) -> float`` w.r.t. one array.

    This is the independent gradient oracle: it only ever calls the scalar
    function, never the tape's backward pass.
    """
    x = arrays[wrt]
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = f(arrays)
        x[idx] = orig - h
        fm = f(arrays)
        x[idx] = orig
        g[idx] = (fp - fm) / (2.0 * h)
    return g
