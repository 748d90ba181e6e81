"""Cross-modality transformer: overlapping patch tokens, additive position and
modality embeddings, a pre-norm encoder, class-token features and a BN neck.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import _kernels
from . import numerics as nx
from .errors import ContractError, ShapeError
from .numerics import Tensor


class Modality(enum.IntEnum):
    VISIBLE = 0
    INFRARED = 1

    @classmethod
    def parse(cls, value) -> "Modality":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            key = value.strip().lower()
            if key in ("vis", "visible", "rgb"):
                return cls.VISIBLE
            if key in ("ir", "infrared", "thermal"):
                return cls.INFRARED
            raise ContractError(f"unknown modality {value!r}")
        return cls(int(value))

    @property
    def short(self) -> str:
        return "vis" if self is Modality.VISIBLE else "ir"


def modality_array(tags) -> np.ndarray:
    """Coerce a scalar or sequence of modality tags to an int array of 0/1."""
    if np.isscalar(tags) or isinstance(tags, (str, Modality)):
        tags = [tags]
    return np.array([int(Modality.parse(t)) for t in tags], dtype=np.int64)


@dataclass(frozen=True)
class PatchConfig:
    patch: int = 8
    stride: int = 4
    dim: int = 64

    def __post_init__(self):
        if not 1 <= self.stride <= self.patch:
            raise ContractError(f"stride must satisfy 1 <= S <= P, got S={self.stride}, P={self.patch}")


@dataclass
class ModelConfig:
    num_ids: int
    img_h: int = 64
    img_w: int = 32
    channels: int = 3
    patch: int = 8
    stride: int = 4
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    ln_eps: float = 1e-6
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    init_std: float = 0.02
    me_on_class_token: bool = False

    def __post_init__(self):
        if self.dim % self.heads:
            raise ContractError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.depth < 0:
            raise ContractError("depth must be >= 0")
        if self.num_ids < 1:
            raise ContractError("num_ids must be positive")
        PatchConfig(self.patch, self.stride, self.dim)
        seq_len(self.img_h, self.img_w, self.patch, self.stride)

    @property
    def num_patches(self) -> int:
        return seq_len(self.img_h, self.img_w, self.patch, self.stride)

    @property
    def patch_config(self) -> PatchConfig:
        return PatchConfig(self.patch, self.stride, self.dim)

    def to_dict(self) -> dict:
        return asdict(self)


def seq_len(h: int, w: int, patch: int, stride: int) -> int:
    """Number of patches on the grid of top-left anchors 0, S, 2S, ..."""
    if not 1 <= stride <= patch:
        raise ContractError(f"stride must satisfy 1 <= S <= P, got S={stride}, P={patch}")
    if h < patch or w < patch:
        raise ContractError(f"image {h}x{w} smaller than patch {patch}")
    return ((h - patch) // stride + 1) * ((w - patch) // stride + 1)


def extract_patches(images, cfg: PatchConfig) -> np.ndarray:
    """Flatten overlapping patches.

    Accepts (C, H, W) or (B, C, H, W). Patches are enumerated row-major over
    the anchor grid; each is flattened channel-major then row-major, giving
    (N, C*P*P) or (B, N, C*P*P).
    """
    arr = np.asarray(images, dtype=np.float64)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"expected (B, C, H, W) images, got shape {arr.shape}")
    seq_len(arr.shape[2], arr.shape[3], cfg.patch, cfg.stride)
    out = _kernels.extract_patches(arr, cfg.patch, cfg.stride)
    return out[0] if single else out


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


@dataclass
class EmbeddingTables:
    pos: Tensor
    me_vis: Tensor
    me_ir: Tensor
    cls: Tensor

    def modality(self, m) -> Tensor:
        return self.me_vis if Modality.parse(m) is Modality.VISIBLE else self.me_ir


@dataclass
class BlockWeights:
    ln1_w: Tensor
    ln1_b: Tensor
    q_w: Tensor
    q_b: Tensor
    k_w: Tensor
    k_b: Tensor
    v_w: Tensor
    v_b: Tensor
    o_w: Tensor
    o_b: Tensor
    ln2_w: Tensor
    ln2_b: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor


@dataclass
class EncoderWeights:
    proj_w: Tensor
    proj_b: Tensor
    blocks: list
    norm_w: Tensor
    norm_b: Tensor
    heads: int
    eps: float = 1e-6


def embed_input(patches, tables: EmbeddingTables, modalities, proj_w, proj_b, me_on_class_token=False) -> Tensor:
    """Token sequence for a batch: row 0 is the class token, rows 1..N patches.

    Patch rows are LP(patch) + position + modality embedding; the class row
    is cls + position[0], plus the modality embedding only when
    ``me_on_class_token`` is set.
    """
    patches = nx.as_tensor(patches)
    single = patches.ndim == 2
    if single:
        patches = nx.reshape(patches, (1,) + patches.shape)
    b, n, _ = patches.shape
    if tables.pos.shape[0] != n + 1:
        raise ContractError(f"{n} patches but position table has {tables.pos.shape[0]} rows")
    mods = modality_array(modalities)
    if mods.size == 1 and b > 1:
        mods = np.repeat(mods, b)
    if mods.size != b:
        raise ShapeError(f"{mods.size} modality tags for {b} images")

    vis = (mods == Modality.VISIBLE).astype(np.float64)[:, None, None]
    me = nx.add(nx.mul(vis, tables.me_vis), nx.mul(1.0 - vis, tables.me_ir))  # (B, 1, D)

    tokens = nx.add(nx.matmul(patches, proj_w), proj_b)
    tokens = nx.add(nx.add(tokens, tables.pos[1:]), me)
    cls = nx.add(tables.cls, tables.pos[0])
    cls = nx.broadcast_to(nx.reshape(cls, (1, 1, -1)), (b, 1, cls.shape[-1]))
    if me_on_class_token:
        cls = nx.add(cls, me)
    out = nx.concat([cls, tokens], axis=1)
    return nx.reshape(out, out.shape[1:]) if single else out


def _attention(x: Tensor, w: BlockWeights, heads: int) -> Tensor:
    b, t, d = x.shape
    dh = d // heads

    def split(y):
        return nx.transpose(nx.reshape(y, (b, t, heads, dh)), (0, 2, 1, 3))

    q = split(nx.mul(nx.linear(x, w.q_w, w.q_b), dh**-0.5))
    k = split(nx.linear(x, w.k_w, w.k_b))
    v = split(nx.linear(x, w.v_w, w.v_b))
    attn = nx.softmax(nx.matmul(q, nx.swapaxes(k, -1, -2)), axis=-1)
    ctx = nx.reshape(nx.transpose(nx.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
    return nx.linear(ctx, w.o_w, w.o_b)


def encoder_forward(tokens, weights: EncoderWeights) -> Tensor:
    """Pre-norm transformer blocks followed by a final layer norm.

    With zero blocks the encoder is the identity (no final norm either).
    """
    x = nx.as_tensor(tokens)
    single = x.ndim == 2
    if single:
        x = nx.reshape(x, (1,) + x.shape)
    if not weights.blocks:
        return nx.reshape(x, x.shape[1:]) if single else x
    eps = weights.eps
    for blk in weights.blocks:
        x = nx.add(x, _attention(nx.layer_norm(x, blk.ln1_w, blk.ln1_b, eps), blk, weights.heads))
        h = nx.gelu(nx.linear(nx.layer_norm(x, blk.ln2_w, blk.ln2_b, eps), blk.fc1_w, blk.fc1_b))
        x = nx.add(x, nx.linear(h, blk.fc2_w, blk.fc2_b))
    x = nx.layer_norm(x, weights.norm_w, weights.norm_b, eps)
    return nx.reshape(x, x.shape[1:]) if single else x


def class_feature(tokens) -> Tensor:
    """Row 0 of the encoder output: (N+1, D) -> (D,), (B, N+1, D) -> (B, D)."""
    tokens = nx.as_tensor(tokens)
    return tokens[0] if tokens.ndim == 2 else tokens[:, 0, :]


class BNNeck:
    """Per-dimension batch normalization between backbone and classifier.

    Training mode uses the batch mean and biased variance and updates the
    running averages with ``momentum``; inference mode uses the running
    averages.
    """

    def __init__(self, dim: int, eps: float = 1e-5, momentum: float = 0.1):
        self.weight = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.eps = eps
        self.momentum = momentum

    def __call__(self, v, training: bool = True) -> Tensor:
        v = nx.as_tensor(v)
        if training:
            if v.shape[0] < 2:
                raise ContractError("BN neck in training mode needs a batch of at least 2")
            centered = nx.sub(v, nx.mean(v, axis=0, keepdims=True))
            var = nx.mean(nx.mul(centered, centered), axis=0, keepdims=True)
            normed = nx.div(centered, nx.sqrt(nx.add(var, self.eps)))
            m = self.momentum
            self.running_mean = (1.0 - m) * self.running_mean + m * v.data.mean(axis=0)
            self.running_var = (1.0 - m) * self.running_var + m * var.data[0]
        else:
            normed = nx.div(nx.sub(v, self.running_mean), np.sqrt(self.running_var + self.eps))
        return nx.add(nx.mul(normed, self.weight), self.bias)


def id_logits(f, weight, bias=None) -> Tensor:
    """Identity logits, an affine map of the neck features (no softmax)."""
    return nx.linear(f, weight, bias)


class CrossModalityTransformer:
    """The full network. Parameters are addressable by dotted name."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c, d = config, config.dim
        std = c.init_std
        in_dim = c.channels * c.patch * c.patch
        n = c.num_patches

        def param(arr, name):
            return Tensor(arr, requires_grad=True, name=name)

        self.tables = EmbeddingTables(
            pos=param(_trunc_normal(rng, (n + 1, d), std), "pos_embed"),
            me_vis=param(np.zeros(d), "me_vis"),
            me_ir=param(np.zeros(d), "me_ir"),
            cls=param(_trunc_normal(rng, (d,), std), "cls_token"),
        )
        hidden = c.mlp_ratio * d
        blocks = []
        for i in range(c.depth):
            blocks.append(
                BlockWeights(
                    ln1_w=param(np.ones(d), f"blocks.{i}.ln1.weight"),
                    ln1_b=param(np.zeros(d), f"blocks.{i}.ln1.bias"),
                    q_w=param(_trunc_normal(rng, (d, d), std), f"blocks.{i}.attn.q.weight"),
                    q_b=param(np.zeros(d), f"blocks.{i}.attn.q.bias"),
                    k_w=param(_trunc_normal(rng, (d, d), std), f"blocks.{i}.attn.k.weight"),
                    k_b=param(np.zeros(d), f"blocks.{i}.attn.k.bias"),
                    v_w=param(_trunc_normal(rng, (d, d), std), f"blocks.{i}.attn.v.weight"),
                    v_b=param(np.zeros(d), f"blocks.{i}.attn.v.bias"),
                    o_w=param(_trunc_normal(rng, (d, d), std), f"blocks.{i}.attn.out.weight"),
                    o_b=param(np.zeros(d), f"blocks.{i}.attn.out.bias"),
                    ln2_w=param(np.ones(d), f"blocks.{i}.ln2.weight"),
                    ln2_b=param(np.zeros(d), f"blocks.{i}.ln2.bias"),
                    fc1_w=param(_trunc_normal(rng, (d, hidden), std), f"blocks.{i}.mlp.fc1.weight"),
                    fc1_b=param(np.zeros(hidden), f"blocks.{i}.mlp.fc1.bias"),
                    fc2_w=param(_trunc_normal(rng, (hidden, d), std), f"blocks.{i}.mlp.fc2.weight"),
                    fc2_b=param(np.zeros(d), f"blocks.{i}.mlp.fc2.bias"),
                )
            )
        self.encoder = EncoderWeights(
            proj_w=param(_trunc_normal(rng, (in_dim, d), std), "patch_proj.weight"),
            proj_b=param(np.zeros(d), "patch_proj.bias"),
            blocks=blocks,
            norm_w=param(np.ones(d), "norm.weight"),
            norm_b=param(np.zeros(d), "norm.bias"),
            heads=c.heads,
            eps=c.ln_eps,
        )
        self.neck = BNNeck(d, c.bn_eps, c.bn_momentum)
        self.neck.weight.name, self.neck.bias.name = "neck.weight", "neck.bias"
        self.classifier_w = param(_trunc_normal(rng, (d, c.num_ids), std), "classifier.weight")
        self.classifier_b = param(np.zeros(c.num_ids), "classifier.bias")

    # parameter bookkeeping -------------------------------------------------
    def named_parameters(self) -> dict:
        out = {}
        t, e = self.tables, self.encoder
        for p in (e.proj_w, e.proj_b, t.cls, t.pos, t.me_vis, t.me_ir):
            out[p.name] = p
        for blk in e.blocks:
            for p in vars(blk).values():
                out[p.name] = p
        for p in (e.norm_w, e.norm_b, self.neck.weight, self.neck.bias, self.classifier_w, self.classifier_b):
            out[p.name] = p
        return out

    def named_buffers(self) -> dict:
        return {"neck.running_mean": self.neck.running_mean, "neck.running_var": self.neck.running_var}

    def load_state(self, params: dict, buffers: Optional[dict] = None):
        mine = self.named_parameters()
        missing = set(mine) - set(params)
        if missing:
            raise ContractError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name, p in mine.items():
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ContractError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()
        if buffers:
            self.neck.running_mean = np.array(buffers["neck.running_mean"], dtype=np.float64)
            self.neck.running_var = np.array(buffers["neck.running_var"], dtype=np.float64)

    # forward ---------------------------------------------------------------
    def embed(self, images, modalities) -> Tensor:
        patches = extract_patches(images, self.config.patch_config)
        e = self.encoder
        return embed_input(patches, self.tables, modalities, e.proj_w, e.proj_b, self.config.me_on_class_token)

    def backbone(self, images, modalities) -> Tensor:
        """Pre-neck image vectors v, (B, D)."""
        return class_feature(encoder_forward(self.embed(images, modalities), self.encoder))

    def forward(self, images, modalities, training: bool = True):
        """Returns (v, f, logits) for a batch."""
        v = self.backbone(images, modalities)
        f = self.neck(v, training)
        return v, f, id_logits(f, self.classifier_w, self.classifier_b)

    def extract_features(self, images, modalities, batch_size: int = 128) -> np.ndarray:
        """Inference-mode neck features, the vectors used for matching."""
        images = np.asarray(images, dtype=np.float64)
        mods = modality_array(modalities)
        if mods.size == 1 and len(images) > 1:
            mods = np.repeat(mods, len(images))
        chunks = []
        with nx.no_grad():
            for start in range(0, len(images), batch_size):
                sl = slice(start, start + batch_size)
                v = self.backbone(images[sl], mods[sl])
                chunks.append(self.neck(v, training=False).data)
        return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, self.config.dim))
