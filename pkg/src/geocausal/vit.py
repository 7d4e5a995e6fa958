"""Image + tabular fusion transformer producing a treatment logit.

Token layout fed to the encoder::

    [CLS] , patch_1 ... patch_P , [TAB]

Each token gets a learned positional embedding. Patches are non-overlapping
``patch_size`` squares flattened band-major and linearly projected; the
tabular vector is projected to a single token. The encoder is pre-norm
(LN -> multi-head self-attention -> residual, LN -> MLP -> residual) with
dropout on branch outputs and per-sample drop path on each residual branch.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


@dataclass
class ModelConfig:
    patch_size: int = 16
    embed_dim: int = 64
    num_layers: int = 8
    num_heads: int = 4
    dropout_rate: float = 0.10
    drop_path_rate: float = 0.10
    tabular_width: int = 0
    image_bands: int = 5
    image_side: int = 64
    mlp_ratio: int = 2
    activation: str = "gelu"
    pool: str = "cls"
    final_norm: bool = True
    head_init: str = "zeros"

    def __post_init__(self):
        if self.has_image and self.image_side % self.patch_size:
            raise ConfigError(f"image_side {self.image_side} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        for name in ("dropout_rate", "drop_path_rate"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.activation not in ("gelu", "relu"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.pool not in ("cls", "mean"):
            raise ConfigError(f"unknown pool {self.pool!r}")
        if not self.has_image and self.tabular_width <= 0:
            raise ConfigError("model needs image input, tabular input, or both")

    @property
    def has_image(self) -> bool:
        return self.image_bands > 0 and self.image_side > 0

    @property
    def n_patches(self) -> int:
        return (self.image_side // self.patch_size) ** 2 if self.has_image else 0

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.image_bands

    @property
    def seq_len(self) -> int:
        return self.n_patches + 1 + (1 if self.tabular_width > 0 else 0)

    def to_dict(self) -> dict:
        return asdict(self)


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(n, bands, side, side) -> (n, n_patches, bands*patch*patch), row-major patch order."""
    n, bands, side, _ = images.shape
    g = side // patch_size
    x = images.reshape(n, bands, g, patch_size, g, patch_size)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(n, g * g, bands * patch_size * patch_size), dtype=np.float32)


class FusionViT:
    """Parameters and forward pass of the fused propensity transformer."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        c = config
        d = c.embed_dim

        def p(name, values):
            self.params[name] = Tensor(values, requires_grad=True, name=name)

        def dense(fan_in, fan_out):
            return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))

        p("cls_token", rng.normal(0.0, 0.02, size=(1, 1, d)))
        p("pos_embed", rng.normal(0.0, 0.02, size=(1, c.seq_len, d)))
        if c.has_image:
            p("patch_w", dense(c.patch_dim, d))
            p("patch_b", np.zeros(d))
        if c.tabular_width > 0:
            p("tab_w", dense(c.tabular_width, d))
            p("tab_b", np.zeros(d))
        hidden = c.mlp_ratio * d
        for i in range(c.num_layers):
            p(f"l{i}.ln1_g", np.ones(d))
            p(f"l{i}.ln1_b", np.zeros(d))
            for proj in ("q", "k", "v", "o"):
                p(f"l{i}.w{proj}", dense(d, d))
                p(f"l{i}.b{proj}", np.zeros(d))
            p(f"l{i}.ln2_g", np.ones(d))
            p(f"l{i}.ln2_b", np.zeros(d))
            p(f"l{i}.w1", dense(d, hidden))
            p(f"l{i}.b1", np.zeros(hidden))
            p(f"l{i}.w2", dense(hidden, d))
            p(f"l{i}.b2", np.zeros(d))
        if c.final_norm:
            p("norm_g", np.ones(d))
            p("norm_b", np.zeros(d))
        if c.head_init == "zeros":
            p("head_w", np.zeros((d, 1)))
        else:
            p("head_w", dense(d, 1))
        p("head_b", np.zeros(1))

    # -- inputs -------------------------------------------------------------

    def _check_inputs(self, patches, tabular):
        c = self.config
        n = None
        if c.has_image:
            if patches is None:
                raise InputError("model expects image patches")
            if patches.ndim != 3 or patches.shape[1:] != (c.n_patches, c.patch_dim):
                raise InputError(f"patch array shape {patches.shape} does not match config "
                                 f"({c.n_patches}, {c.patch_dim})")
            n = patches.shape[0]
        if c.tabular_width > 0:
            if tabular is None:
                raise InputError("model expects tabular covariates")
            tv = tabular.values if isinstance(tabular, Tensor) else np.asarray(tabular)
            if tv.ndim != 2 or tv.shape[1] != c.tabular_width:
                raise InputError(f"tabular shape {tv.shape} does not match width {c.tabular_width}")
            if not np.all(np.isfinite(tv)):
                raise InputError("non-finite tabular covariates")
            if n is not None and tv.shape[0] != n:
                raise InputError("image and tabular batch sizes differ")
            n = tv.shape[0]
        return n

    def fuse_inputs(self, patches=None, tabular=None) -> Tensor:
        """Token sequence (n, seq_len, embed_dim) before the encoder."""
        n = self._check_inputs(patches, tabular)
        c, P = self.config, self.params
        d = c.embed_dim
        parts = [T.broadcast_to(P["cls_token"], (n, 1, d))]
        if c.has_image:
            parts.append(T.matmul(T.as_tensor(patches), P["patch_w"]) + P["patch_b"])
        if c.tabular_width > 0:
            tab = T.matmul(T.as_tensor(tabular), P["tab_w"]) + P["tab_b"]
            parts.append(tab.reshape(n, 1, d))
        tokens = T.concat(parts, axis=1) if len(parts) > 1 else parts[0]
        return tokens + P["pos_embed"]

    # -- encoder --------------------------------------------------------------

    def _attention(self, x: Tensor, i: int) -> Tensor:
        c, P = self.config, self.params
        n, L, d = x.shape
        h = c.num_heads
        dh = d // h

        def heads(t):
            return t.reshape(n, L, h, dh).transpose(0, 2, 1, 3)

        q = heads(T.matmul(x, P[f"l{i}.wq"]) + P[f"l{i}.bq"])
        k = heads(T.matmul(x, P[f"l{i}.wk"]) + P[f"l{i}.bk"])
        v = heads(T.matmul(x, P[f"l{i}.wv"]) + P[f"l{i}.bv"])
        scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
        att = T.softmax(scores, axis=-1)
        out = T.matmul(att, v).transpose(0, 2, 1, 3).reshape(n, L, d)
        return T.matmul(out, P[f"l{i}.wo"]) + P[f"l{i}.bo"]

    def _mlp(self, x: Tensor, i: int, rng) -> Tensor:
        P = self.params
        act = T.gelu if self.config.activation == "gelu" else T.relu
        hidden = act(T.matmul(x, P[f"l{i}.w1"]) + P[f"l{i}.b1"])
        hidden = T.dropout(hidden, self.config.dropout_rate, rng)
        return T.matmul(hidden, P[f"l{i}.w2"]) + P[f"l{i}.b2"]

    def encode(self, tokens: Tensor, rng=None) -> Tensor:
        c, P = self.config, self.params
        x = T.dropout(tokens, c.dropout_rate, rng)
        for i in range(c.num_layers):
            branch = self._attention(T.layer_norm(x, P[f"l{i}.ln1_g"], P[f"l{i}.ln1_b"]), i)
            x = x + T.drop_path(T.dropout(branch, c.dropout_rate, rng), c.drop_path_rate, rng)
            branch = self._mlp(T.layer_norm(x, P[f"l{i}.ln2_g"], P[f"l{i}.ln2_b"]), i, rng)
            x = x + T.drop_path(T.dropout(branch, c.dropout_rate, rng), c.drop_path_rate, rng)
        return x

    def logits(self, patches=None, tabular=None, train_mode: bool = False, rng_seed=None) -> Tensor:
        """Classifier logit per row, shape (n,)."""
        c, P = self.config, self.params
        rng = np.random.default_rng(rng_seed) if train_mode else None
        x = self.encode(self.fuse_inputs(patches, tabular), rng)
        n, _, d = x.shape
        pooled = x[:, 0, :] if c.pool == "cls" else T.mean(x, axis=1)
        if c.final_norm:
            pooled = T.layer_norm(pooled, P["norm_g"], P["norm_b"])
        return (T.matmul(pooled, P["head_w"]) + P["head_b"]).reshape(n)

    def forward_propensity(self, patches=None, tabular=None, train_mode: bool = False,
                           rng_seed=None) -> Tensor:
        return T.sigmoid(self.logits(patches, tabular, train_mode, rng_seed))

    def state_dict(self) -> dict:
        return {k: v.values.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict):
        for k, v in state.items():
            if k not in self.params:
                raise KeyError(f"unexpected parameter {k!r}")
            if self.params[k].shape != v.shape:
                raise T.ShapeError(f"parameter {k!r}: {v.shape} vs {self.params[k].shape}")
            self.params[k].values[...] = v
