"""Tiny pre-norm Vision Transformer (and a token-sequence twin) with mean pooling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, AttenuationParams, MultiHeadSelfAttention, _trunc_normal
from .positional import Layout, MechanismConfig, sinusoidal_encoding
from .tensor import Parameter, Tensor

GEOMETRY_PARAMS = ("theta", "w", "sigma", "a_factor", "gen_x", "gen_y")
DECAYED_WEIGHTS = ("wq", "wk", "wv", "wo", "w1", "w2", "embed", "head")


@dataclass
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    d_model: int = 128
    heads: int = 4
    layers: int = 6
    mlp_ratio: int = 4
    classes: int = 10
    mechanism: MechanismConfig = field(default_factory=MechanismConfig)
    lf: AttenuationParams = None

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image size {self.image_size} is not divisible by patch size {self.patch_size}")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")

    @property
    def grid(self):
        g = self.image_size // self.patch_size
        return g, g

    @property
    def tokens(self):
        return self.grid[0] * self.grid[1]

    @property
    def patch_dim(self):
        return self.channels * self.patch_size ** 2

    def layout(self) -> Layout:
        return Layout.image(*self.grid)

    def to_dict(self):
        d = dict(self.__dict__)
        d["kind"] = "vit"
        d["mechanism"] = self.mechanism.to_dict()
        d["lf"] = None if self.lf is None else self.lf.to_dict()
        return d


@dataclass
class SeqConfig:
    """Classifier over sequences of one-hot symbols laid out on a line."""

    seq_len: int = 16
    vocab: int = 4
    d_model: int = 32
    heads: int = 2
    layers: int = 2
    mlp_ratio: int = 4
    classes: int = 16
    mechanism: MechanismConfig = field(default_factory=MechanismConfig)
    lf: AttenuationParams = None

    @property
    def tokens(self):
        return self.seq_len

    @property
    def patch_dim(self):
        return self.vocab

    def layout(self) -> Layout:
        return Layout.sequence(self.seq_len)

    def to_dict(self):
        d = dict(self.__dict__)
        d["kind"] = "seq"
        d["mechanism"] = self.mechanism.to_dict()
        d["lf"] = None if self.lf is None else self.lf.to_dict()
        return d


def config_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind", "vit")
    d["mechanism"] = MechanismConfig(**d["mechanism"])
    d["lf"] = None if d.get("lf") is None else AttenuationParams(**d["lf"])
    return ViTConfig(**d) if kind == "vit" else SeqConfig(**d)


def extract_patches(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, C, H, W) -> (B, L, C*p*p); tokens row-major, each patch flattened channel-first."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    b, c, h, w = images.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} is not divisible into {patch}x{patch} patches")
    gh, gw = h // patch, w // patch
    x = images.reshape(b, c, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, gh * gw, c * patch * patch)


class TransformerBlock:
    def __init__(self, attn_cfg: AttentionConfig, layout: Layout, mlp_ratio: int, rng, prefix: str):
        d = attn_cfg.d_model
        self.ln1_g = Parameter(np.ones(d), f"{prefix}.ln1.gain")
        self.ln1_b = Parameter(np.zeros(d), f"{prefix}.ln1.bias")
        self.attn = MultiHeadSelfAttention(attn_cfg, layout, rng, f"{prefix}.attn")
        self.ln2_g = Parameter(np.ones(d), f"{prefix}.ln2.gain")
        self.ln2_b = Parameter(np.zeros(d), f"{prefix}.ln2.bias")
        hidden = mlp_ratio * d
        self.w1 = Parameter(_trunc_normal(rng, (d, hidden)), f"{prefix}.mlp.w1")
        self.b1 = Parameter(np.zeros(hidden), f"{prefix}.mlp.b1")
        self.w2 = Parameter(_trunc_normal(rng, (hidden, d)), f"{prefix}.mlp.w2")
        self.b2 = Parameter(np.zeros(d), f"{prefix}.mlp.b2")

    def parameters(self):
        return ([self.ln1_g, self.ln1_b] + self.attn.parameters()
                + [self.ln2_g, self.ln2_b, self.w1, self.b1, self.w2, self.b2])

    def __call__(self, x, record=None):
        x = x + self.attn(T.layer_norm(x, self.ln1_g, self.ln1_b), record)
        h = T.gelu(T.layer_norm(x, self.ln2_g, self.ln2_b) @ self.w1 + self.b1)
        return x + (h @ self.w2 + self.b2)


class Classifier:
    """Embedding, pre-norm blocks, final norm, mean pooling over tokens, linear head.

    ``cfg`` is a :class:`ViTConfig` (image input of shape (B, C, H, W)) or a
    :class:`SeqConfig` (integer symbols of shape (B, L)).
    """

    def __init__(self, cfg, seed=0):
        self.cfg = cfg
        rng = np.random.Generator(np.random.Philox(seed))
        self.layout = cfg.layout()
        d = cfg.d_model
        self.embed = Parameter(_trunc_normal(rng, (cfg.patch_dim, d)), "embed.weight")
        self.embed_b = Parameter(np.zeros(d), "embed.bias")
        attn_cfg = AttentionConfig(cfg.heads, d, cfg.mechanism, cfg.lf)
        self.blocks = [TransformerBlock(attn_cfg, self.layout, cfg.mlp_ratio, rng, f"blocks.{i}")
                       for i in range(cfg.layers)]
        self.norm_g = Parameter(np.ones(d), "norm.gain")
        self.norm_b = Parameter(np.zeros(d), "norm.bias")
        self.head = Parameter(_trunc_normal(rng, (d, cfg.classes)), "head.weight")
        self.head_b = Parameter(np.zeros(cfg.classes), "head.bias")
        self.pos_table = (sinusoidal_encoding(cfg.tokens, d)
                          if cfg.mechanism.kind == "sinusoidal" else None)

    def parameters(self):
        out = [self.embed, self.embed_b]
        for blk in self.blocks:
            out += blk.parameters()
        return out + [self.norm_g, self.norm_b, self.head, self.head_b]

    def named_parameters(self):
        return {p.name: p for p in self.parameters()}

    def embed_inputs(self, x) -> np.ndarray:
        if isinstance(self.cfg, ViTConfig):
            return extract_patches(x, self.cfg.patch_size)
        x = np.asarray(x, dtype=np.int64)
        if x.ndim == 1:
            x = x[None]
        return np.eye(self.cfg.vocab)[x]

    def __call__(self, x, record=None) -> Tensor:
        """Logits of shape (B, classes)."""
        tokens = self.embed_inputs(x)
        h = tokens @ self.embed + self.embed_b
        if self.pos_table is not None:
            h = h + self.pos_table
        for blk in self.blocks:
            h = blk(h, record)
        h = T.layer_norm(h, self.norm_g, self.norm_b)
        return h.mean(axis=1) @ self.head + self.head_b

    def state(self):
        return [(p.name, p.data) for p in self.parameters()]

    def load_state(self, items):
        params = self.named_parameters()
        names = [n for n, _ in items]
        if sorted(names) != sorted(params):
            missing = set(params) - set(names)
            extra = set(names) - set(params)
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, arr in items:
            params[name].assign(np.asarray(arr).reshape(params[name].shape))


def model_forward(image, cfg, model: Classifier = None, seed=0) -> np.ndarray:
    """Logits for a single image (C, H, W) or token sequence (L,)."""
    model = model or Classifier(cfg, seed)
    return model(np.asarray(image)[None]).data[0]


def param_group(name: str) -> str:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "theta":
        return "theta"
    if leaf == "w":
        return "w"
    if leaf == "sigma":
        return "sigma"
    if leaf == "a_factor":
        return "a_factor"
    if leaf.startswith("gen_"):
        return "generator"
    return "weights"


def decays(name: str) -> bool:
    """Weight decay applies to projection/embedding matrices only."""
    leaf = name.rsplit(".", 1)[-1]
    if leaf in GEOMETRY_PARAMS or leaf.startswith("gen_"):
        return False
    parts = name.split(".")
    return leaf == "weight" and parts[0] in ("embed", "head") or leaf in DECAYED_WEIGHTS


def param_count(cfg) -> dict:
    """Learnable scalar counts per group, computed from the configuration alone."""
    d, h, layers = cfg.d_model, cfg.heads, cfg.layers
    d_k = d // h
    hidden = cfg.mlp_ratio * d
    per_block = 2 * 2 * d + 4 * (d * d + d) + d * hidden + hidden + hidden * d + d
    weights = cfg.patch_dim * d + d + layers * per_block + 2 * d + d * cfg.classes + cfg.classes
    groups = {"weights": weights, "theta": 0, "w": 0, "sigma": 0, "a_factor": 0, "generator": 0}
    mech = cfg.mechanism
    two_d = isinstance(cfg, ViTConfig)
    if mech.kind == "riemann":
        if mech.transform == "dense":
            width = d_k // 2 if two_d else d_k
            axes = 2 if two_d else 1
            groups["generator"] = layers * h * axes * width * (width - 1) // 2
        elif mech.learn_theta:
            groups["theta"] = layers * h * (d_k // 2)
        if not mech.fixed_scale:
            groups["w"] = layers * h
    if cfg.lf is not None:
        per_head = 1 if cfg.lf.sigma_mode == "shared" else cfg.tokens
        groups["sigma"] = layers * h * per_head
        if cfg.lf.a_mode == "learnable":
            k = 2 if two_d else 1
            groups["a_factor"] = layers * h * k * (k + 1) // 2
    groups["total"] = sum(groups.values())
    return groups
