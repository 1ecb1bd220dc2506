"""3D ViT image encoders: a 12-layer teacher and a 6-layer student.

Blocks are pre-norm. The first ``ffn_only_prefix`` blocks of a stack skip the
attention sublayer entirely and only run ``layernorm -> FFN -> residual``.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, replace

import numpy as np

from .attention import VARIANTS, AttentionConfig, AttentionWeights, build_segment_plan, mhsa
from .counter import flop_tag
from .rng import Rng
from .tensor import Tape, Tensor, add, add_bias, gelu, layernorm, matmul

INIT_STD = 0.02
SCALES = ("toy", "paper")


@dataclass(frozen=True)
class ViTConfig:
    input_extent: int
    patch_size: int
    embed_dim: int
    num_layers: int
    num_heads: int
    ffn_ratio: int = 4
    ffn_only_prefix: int = 0
    attention_variant: str = "flash"
    segment_size: int | None = None
    dilation: int = 1
    block_rows: int = 16
    block_cols: int = 16

    def __post_init__(self):
        if self.input_extent % self.patch_size:
            raise ValueError(f"input extent {self.input_extent} is not divisible by "
                             f"patch size {self.patch_size}")
        if not 0 <= self.ffn_only_prefix <= self.num_layers:
            raise ValueError(f"ffn_only_prefix {self.ffn_only_prefix} outside "
                             f"0..{self.num_layers}")
        if self.attention_variant not in VARIANTS:
            raise ValueError(f"unknown attention variant {self.attention_variant!r}")
        self.attention_config()  # validates heads / segment settings

    @property
    def grid(self) -> int:
        return self.input_extent // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid ** 3

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 3

    @property
    def ffn_dim(self) -> int:
        return self.ffn_ratio * self.embed_dim

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(self.embed_dim, self.num_heads, self.segment_size,
                               self.dilation, self.block_rows, self.block_cols)

    def check_tokens(self) -> None:
        """Raise unless the token count is compatible with the sparse segmentation."""
        if self.attention_variant == "sparse_flash":
            build_segment_plan(self.num_tokens, self.segment_size or self.num_tokens,
                               self.dilation)

    def to_dict(self) -> dict:
        return asdict(self)


def make_teacher_config(scale: str = "toy", **overrides) -> ViTConfig:
    if scale == "paper":
        cfg = ViTConfig(128, 16, 768, 12, 12, attention_variant="naive")
    elif scale == "toy":
        cfg = ViTConfig(32, 8, 64, 12, 8, attention_variant="naive")
    else:
        raise ValueError(f"unknown scale {scale!r}; expected one of {SCALES}")
    return replace(cfg, **overrides)


def make_student_config(scale: str = "toy", **overrides) -> ViTConfig:
    # student width equals the teacher's so layer outputs compare directly
    if scale == "paper":
        cfg = ViTConfig(128, 16, 768, 6, 6, ffn_only_prefix=2,
                        attention_variant="sparse_flash", segment_size=64, dilation=2)
    elif scale == "toy":
        cfg = ViTConfig(32, 8, 64, 6, 4, ffn_only_prefix=2,
                        attention_variant="sparse_flash", segment_size=16, dilation=2)
    else:
        raise ValueError(f"unknown scale {scale!r}; expected one of {SCALES}")
    cfg = replace(cfg, **overrides)
    cfg.check_tokens()
    return cfg


@dataclass
class LayerOutputs:
    layers: list[Tensor]
    final: Tensor

    def __len__(self) -> int:
        return len(self.layers)


Params = dict[str, Tensor]


def init_params(cfg: ViTConfig, rng: Rng, requires_grad: bool = False) -> Params:
    """Truncated-normal (std 0.02) weights with zero biases; layernorm scales start at 1.

    Blocks inside the FFN-only prefix get no attention parameters.
    """
    d, f = cfg.embed_dim, cfg.ffn_dim

    def tn(*shape):
        return Tensor(rng.truncated_normal(shape, INIT_STD), requires_grad=requires_grad)

    def const(value, n):
        return Tensor(np.full(n, value), requires_grad=requires_grad)

    params: Params = {
        "patch.weight": tn(cfg.patch_dim, d),
        "patch.bias": const(0.0, d),
        "pos_embed": tn(cfg.num_tokens, d),
    }
    for i in range(cfg.num_layers):
        pre = f"blocks.{i}."
        if i >= cfg.ffn_only_prefix:
            params[pre + "norm1.gamma"] = const(1.0, d)
            params[pre + "norm1.beta"] = const(0.0, d)
            for n in ("wq", "wk", "wv", "wo"):
                params[pre + "attn." + n] = tn(d, d)
            for n in ("bq", "bk", "bv", "bo"):
                params[pre + "attn." + n] = const(0.0, d)
        params[pre + "norm2.gamma"] = const(1.0, d)
        params[pre + "norm2.beta"] = const(0.0, d)
        params[pre + "ffn.w1"] = tn(d, f)
        params[pre + "ffn.b1"] = const(0.0, f)
        params[pre + "ffn.w2"] = tn(f, d)
        params[pre + "ffn.b2"] = const(0.0, d)
    params["norm.gamma"] = const(1.0, d)
    params["norm.beta"] = const(0.0, d)
    return params


def patchify(volume: np.ndarray, p: int) -> np.ndarray:
    """``(D, H, W) -> (N, p**3)`` patches in raster order."""
    if volume.ndim != 3:
        raise ValueError(f"expected a D x H x W volume, got shape {volume.shape}")
    if any(e % p for e in volume.shape):
        raise ValueError(f"volume shape {volume.shape} is not divisible by patch size {p}")
    gd, gh, gw = (e // p for e in volume.shape)
    v = volume.reshape(gd, p, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(v.reshape(gd * gh * gw, p ** 3))


def patch_embed_3d(volume, cfg: ViTConfig, params: Params) -> Tensor:
    """Linear projection of each flattened patch plus a learned positional embedding."""
    vol = volume.data if isinstance(volume, Tensor) else np.asarray(volume)
    if vol.shape != (cfg.input_extent,) * 3:
        raise ValueError(f"volume shape {vol.shape} does not match config extent "
                         f"{cfg.input_extent}")
    w = params["patch.weight"]
    patches = Tensor.wrap(patchify(vol.astype(w.dtype, copy=False), cfg.patch_size))
    with flop_tag("patch_embed"):
        tokens = add_bias(matmul(patches, w), params["patch.bias"])
    return add(tokens, params["pos_embed"])


def attention_weights(params: Params, i: int) -> AttentionWeights:
    pre = f"blocks.{i}.attn."
    return AttentionWeights(*(params[pre + n] for n in
                              ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo")))


def block(x: Tensor, cfg: ViTConfig, params: Params, i: int) -> Tensor:
    pre = f"blocks.{i}."
    if i >= cfg.ffn_only_prefix:
        h = layernorm(x, params[pre + "norm1.gamma"], params[pre + "norm1.beta"])
        x = add(x, mhsa(h, attention_weights(params, i), cfg.attention_config(),
                        cfg.attention_variant))
    h = layernorm(x, params[pre + "norm2.gamma"], params[pre + "norm2.beta"])
    with flop_tag("ffn"):
        h = gelu(add_bias(matmul(h, params[pre + "ffn.w1"]), params[pre + "ffn.b1"]))
        h = add_bias(matmul(h, params[pre + "ffn.w2"]), params[pre + "ffn.b2"])
    return add(x, h)


def encode(volume, cfg: ViTConfig, params: Params, tape: Tape | None = None) -> LayerOutputs:
    """Patch-embed ``volume`` and run every block, keeping each block's output.

    When ``tape`` is given the forward pass is recorded on it.
    """
    if tape is not None:
        with tape:
            return encode(volume, cfg, params)
    x = patch_embed_3d(volume, cfg, params)
    layers = []
    for i in range(cfg.num_layers):
        x = block(x, cfg, params, i)
        layers.append(x)
    final = layernorm(x, params["norm.gamma"], params["norm.beta"])
    return LayerOutputs(layers, final)


def param_checksum(params: Params) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(params[name].data.tobytes())
    return h.hexdigest()
