"""Multi-head local self-attention over patches.

This is the dense reference that token merging must approximate: an
untrained but deterministic stack of residual attention blocks with
seeded Gaussian weights. There is no positional encoding and, by
default, no MLP or normalization; merging wraps only the attention, so
the minimal block isolates the mechanism.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .counters import FlopCounter, tally
from .errors import ConfigError, NonFiniteError
from .parallel import map_patches
from .serialization import PatchSet


@dataclass
class AttnParams:
    """Projection weights for one multi-head attention layer."""

    d_model: int
    heads: int
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ConfigError(
                f"d_model ({self.d_model}) must be divisible by heads ({self.heads})"
            )
        for name in ("w_q", "w_k", "w_v", "w_o"):
            w = getattr(self, name)
            if w.shape != (self.d_model, self.d_model):
                raise ConfigError(f"{name} must be ({self.d_model}, {self.d_model})")
            if not np.isfinite(w).all():
                raise NonFiniteError(f"{name} contains non-finite values")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @classmethod
    def init(cls, d_model: int, heads: int, seed: int = 0) -> "AttnParams":
        """Seeded Gaussian weights scaled by 1/sqrt(d_model)."""
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        scale = 1.0 / np.sqrt(d_model)
        w = [scale * rng.normal(size=(d_model, d_model)) for _ in range(4)]
        return cls(d_model=d_model, heads=heads, w_q=w[0], w_k=w[1], w_v=w[2], w_o=w[3], seed=seed)

    @classmethod
    def zeros(cls, d_model: int, heads: int) -> "AttnParams":
        z = np.zeros((d_model, d_model))
        return cls(d_model=d_model, heads=heads, w_q=z, w_k=z.copy(), w_v=z.copy(), w_o=z.copy())


@dataclass
class MlpParams:
    """Optional two-layer MLP applied after the attention residual."""

    w1: np.ndarray
    w2: np.ndarray

    @classmethod
    def init(cls, d_model: int, hidden: int, seed: int = 0) -> "MlpParams":
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        s1 = 1.0 / np.sqrt(d_model)
        s2 = 1.0 / np.sqrt(hidden)
        return cls(w1=s1 * rng.normal(size=(d_model, hidden)),
                   w2=s2 * rng.normal(size=(hidden, d_model)))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.maximum(x @ self.w1, 0.0) @ self.w2


@dataclass
class LayerStack:
    """An ordered list of attention layers with identity pre/post maps."""

    layers: list[AttnParams]
    mlps: list[MlpParams] | None = field(default=None)

    def __post_init__(self):
        if len(self.layers) < 1:
            raise ConfigError("stack must contain at least one layer")
        if self.mlps is not None and len(self.mlps) != len(self.layers):
            raise ConfigError("mlps must match layer count")

    @property
    def depth(self) -> int:
        return len(self.layers)

    @classmethod
    def init(cls, d_model: int, heads: int, depth: int, seed: int = 0,
             mlp: bool = False) -> "LayerStack":
        """One substream per layer so layers are independently seeded."""
        base = np.random.SeedSequence(seed)
        children = base.spawn(2 * depth)
        layers, mlps = [], []
        for i in range(depth):
            rng = np.random.default_rng(children[2 * i])
            scale = 1.0 / np.sqrt(d_model)
            w = [scale * rng.normal(size=(d_model, d_model)) for _ in range(4)]
            layers.append(AttnParams(d_model=d_model, heads=heads,
                                     w_q=w[0], w_k=w[1], w_v=w[2], w_o=w[3], seed=seed))
            if mlp:
                rng2 = np.random.default_rng(children[2 * i + 1])
                hidden = 2 * d_model
                mlps.append(MlpParams(
                    w1=(1.0 / np.sqrt(d_model)) * rng2.normal(size=(d_model, hidden)),
                    w2=(1.0 / np.sqrt(hidden)) * rng2.normal(size=(hidden, d_model)),
                ))
        return cls(layers=layers, mlps=mlps if mlp else None)


def _check_finite(name, arr):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {name}")


def masked_softmax(scores: np.ndarray, valid_cols: np.ndarray) -> np.ndarray:
    """Row softmax over the valid columns only; invalid columns get 0."""
    neg = np.where(valid_cols[None, :], scores, -np.inf)
    m = neg.max(axis=1, keepdims=True)
    e = np.exp(neg - m)
    e[:, ~valid_cols] = 0.0
    denom = e.sum(axis=1, keepdims=True)
    return e / denom


def attend_heads(q: np.ndarray, k: np.ndarray, v: np.ndarray, heads: int,
                 valid: np.ndarray | None = None,
                 counter: FlopCounter | None = None) -> np.ndarray:
    """Per-head scaled dot-product attention on already-projected rows.

    q is (Tq, d_model); k and v are (Tk, d_model). Returns concatenated
    head outputs (Tq, d_model) without the output projection.
    """
    tq, d_model = q.shape
    tk = k.shape[0]
    d = d_model // heads
    if valid is None:
        valid = np.ones(tk, dtype=bool)
    qs = q.reshape(tq, heads, d)
    ks = k.reshape(tk, heads, d)
    vs = v.reshape(tk, heads, d)
    out = np.empty((tq, heads, d))
    inv = 1.0 / np.sqrt(d)
    n_valid = int(valid.sum())
    for h in range(heads):
        scores = (qs[:, h, :] @ ks[:, h, :].T) * inv
        _check_finite("attention scores", scores)
        attn = masked_softmax(scores, valid)
        out[:, h, :] = attn @ vs[:, h, :]
    # score matmul + weighted sum, both at (rows x valid keys) per head
    tally(counter, "attn_score", 2 * 2 * tq * n_valid * d_model)
    tally(counter, "attn_softmax", 5 * tq * n_valid * heads)
    return out.reshape(tq, d_model)


def dense_patch_attention(feats: np.ndarray, params: AttnParams,
                          pad_mask: np.ndarray | None = None,
                          counter: FlopCounter | None = None) -> np.ndarray:
    """Multi-head self-attention over one patch.

    Padded slots are excluded from every softmax and receive an all-zero
    output row; no padded slot can influence a valid one.
    """
    t, d_model = feats.shape
    if d_model != params.d_model:
        raise ConfigError(f"feature dim {d_model} does not match d_model {params.d_model}")
    if pad_mask is None:
        pad_mask = np.zeros(t, dtype=bool)
    valid = ~pad_mask
    _check_finite("patch features", feats)

    q = feats @ params.w_q
    k = feats @ params.w_k
    v = feats @ params.w_v
    tally(counter, "attn_qkv", 3 * 2 * t * d_model * d_model)

    mixed = attend_heads(q[valid], k[valid], v[valid], params.heads, counter=counter)
    out = np.zeros((t, d_model))
    out[valid] = mixed @ params.w_o
    tally(counter, "attn_out", 2 * t * d_model * d_model)
    _check_finite("attention output", out)
    return out


def run_stack(feats: np.ndarray, patches: PatchSet, stack: LayerStack,
              counter: FlopCounter | None = None,
              threads: int = 1) -> list[np.ndarray]:
    """Apply every layer patch-wise with a residual connection.

    Returns the feature snapshot after each layer (layer outputs, in
    original point order). Patches are independent; with ``threads > 1``
    they are processed concurrently with bitwise-identical results.
    """
    snapshots = []
    current = np.asarray(feats, dtype=np.float64)
    for li in range(stack.depth):
        params = stack.layers[li]

        def work(k, patch_feats, patch_mask, _params=params):
            sub = FlopCounter() if counter is not None else None
            out = dense_patch_attention(patch_feats, _params, pad_mask=patch_mask, counter=sub)
            return out, sub

        outputs = map_patches(work, current, patches, threads=threads)
        attn_out = np.zeros_like(current)
        for k, (out, sub) in enumerate(outputs):
            if sub is not None:
                counter.merge(sub)
            row_idx = patches.indices[k][~patches.pad_mask[k]]
            attn_out[row_idx] = out[~patches.pad_mask[k]]
        current = current + attn_out
        if stack.mlps is not None:
            current = current + stack.mlps[li].apply(current)
        snapshots.append(current.copy())
    return snapshots
