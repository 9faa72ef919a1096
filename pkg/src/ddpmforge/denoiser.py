"""
Conditional noise-prediction network.

A small U-Net on (B, C, H, W) float64 images:

    conv_in
    for each stage: resblock -> keep skip -> stride-2 conv
    mid resblock -> self-attention
    for each stage (reversed): 2x nearest upsample -> add skip -> resblock
    groupnorm -> silu -> conv_out (zero-initialised)

Every stage keeps ``base_width`` channels.  Conditioning is a single vector
per sample, ``silu(time_proj(sinusoid(t)) + class_row)``, projected and added
into every residual block after its second group norm.  The last row of the class table is the null
condition used for classifier-free guidance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

GROUP_NORM_EPS = 1e-5


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 16
    channels: int = 3
    base_width: int = 32
    depth: int = 2
    embed_dim: int = 64
    num_classes: int = 9  # real classes plus the trailing null index

    def __post_init__(self):
        for name in ("image_size", "channels", "base_width", "embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.depth < 0:
            raise ValueError("depth must be non-negative")
        if self.image_size % (2**self.depth):
            raise ValueError(f"image_size {self.image_size} not divisible by 2**depth")
        if self.embed_dim % 2:
            raise ValueError("embed_dim must be even")
        if self.num_classes < 2:
            raise ValueError("num_classes must include at least one real class plus null")

    @property
    def null_class(self) -> int:
        return self.num_classes - 1

    @property
    def groups(self) -> int:
        return group_count(self.base_width)

    def to_dict(self) -> dict:
        return asdict(self)


def group_count(channels: int, max_groups: int = 8) -> int:
    """Largest divisor of ``channels`` that is at most ``max_groups``."""
    return max(g for g in range(1, max_groups + 1) if channels % g == 0)


class DenoiserParams:
    """Ordered name -> array mapping of every learnable weight, plus config."""

    def __init__(self, config: DenoiserConfig, arrays: dict[str, np.ndarray]):
        self.config = config
        self.arrays = dict(arrays)

    def names(self) -> list[str]:
        return list(self.arrays)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def __len__(self) -> int:
        return len(self.arrays)

    def items(self):
        return self.arrays.items()

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def num_parameters(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def equals(self, other: "DenoiserParams") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(self[k], other[k]) for k in self.arrays
        )


def param_shapes(config: DenoiserConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in their fixed order."""
    w, e, c = config.base_width, config.embed_dim, config.channels
    shapes: dict[str, tuple[int, ...]] = {
        "time.w": (e, e),
        "time.b": (e,),
        "class.table": (config.num_classes, e),
        "conv_in.w": (w, c, 3, 3),
        "conv_in.b": (1, w, 1, 1),
    }

    def resblock(prefix, cin, cout):
        shapes.update({
            f"{prefix}.norm1.scale": (1, cin, 1, 1),
            f"{prefix}.norm1.shift": (1, cin, 1, 1),
            f"{prefix}.conv1.w": (cout, cin, 3, 3),
            f"{prefix}.conv1.b": (1, cout, 1, 1),
            f"{prefix}.cond.w": (e, cout),
            f"{prefix}.cond.b": (cout,),
            f"{prefix}.norm2.scale": (1, cout, 1, 1),
            f"{prefix}.norm2.shift": (1, cout, 1, 1),
            f"{prefix}.conv2.w": (cout, cout, 3, 3),
            f"{prefix}.conv2.b": (1, cout, 1, 1),
        })
        if cin != cout:
            shapes[f"{prefix}.skip.w"] = (cout, cin, 1, 1)
            shapes[f"{prefix}.skip.b"] = (1, cout, 1, 1)

    for i in range(config.depth):
        resblock(f"down{i}", w, w)
        shapes[f"down{i}.pool.w"] = (w, w, 3, 3)
        shapes[f"down{i}.pool.b"] = (1, w, 1, 1)
    resblock("mid", w, w)
    shapes.update({
        "attn.norm.scale": (1, w, 1, 1),
        "attn.norm.shift": (1, w, 1, 1),
        "attn.wq": (w, w),
        "attn.wk": (w, w),
        "attn.wv": (w, w),
        "attn.wo": (w, w),
        "attn.bo": (1, w, 1),
    })
    for i in reversed(range(config.depth)):
        resblock(f"up{i}", w, w)
    shapes.update({
        "out.norm.scale": (1, w, 1, 1),
        "out.norm.shift": (1, w, 1, 1),
        "conv_out.w": (c, w, 3, 3),
        "conv_out.b": (1, c, 1, 1),
    })
    return shapes


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name.endswith(".w") and len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    if len(shape) == 2:
        return shape[0]
    return 1


def init_params(config: DenoiserConfig, seed: int) -> DenoiserParams:
    """Seeded initialisation.

    Conv and linear weights are U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases
    are zero; norm scales 1, shifts 0; class rows U(-1, 1).  The output conv
    is all zeros so a fresh network predicts zero noise.
    """
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(config).items():
        if name.startswith("conv_out."):
            arr = np.zeros(shape)
        elif name.endswith(".scale"):
            arr = np.ones(shape)
        elif name.endswith((".shift", ".b")) or name == "attn.bo":
            arr = np.zeros(shape)
        elif name == "class.table":
            arr = rng.uniform(-1.0, 1.0, shape)
        else:
            bound = 1.0 / math.sqrt(_fan_in(name, shape))
            arr = rng.uniform(-bound, bound, shape)
        arrays[name] = arr
    return DenoiserParams(config, arrays)


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding; ``t`` scalar gives (dim,), array gives (B, dim)."""
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0):
        raise ValueError("timestep must be non-negative")
    half = dim // 2
    freqs = 10000.0 ** (-2.0 * np.arange(half) / dim)
    angles = t_arr[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


def attention(q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
    """softmax(q k^T / sqrt(d_k)) v over the last two axes."""
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"attention: query width {q.shape[-1]} differs from key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention: {k.shape[-2]} keys but {v.shape[-2]} values")
    logits = ad.scale(ad.matmul(q, k, transpose_b=True), 1.0 / math.sqrt(q.shape[-1]))
    weights = ad.softmax(logits, axis=-1)
    out = ad.matmul(weights, v)
    return (out, weights) if return_weights else out


def _upsample_matrix(h: int, w: int) -> np.ndarray:
    """(h*w, 4*h*w) 0/1 matrix implementing 2x nearest upsampling."""
    dst_r, dst_c = np.meshgrid(np.arange(2 * h), np.arange(2 * w), indexing="ij")
    src = (dst_r // 2) * w + (dst_c // 2)
    m = np.zeros((h * w, 4 * h * w))
    m[src.reshape(-1), np.arange(4 * h * w)] = 1.0
    return m


class _Net:
    """Applies the layer sequence with parameters wrapped as tensors."""

    def __init__(self, p: dict[str, Tensor], config: DenoiserConfig):
        self.p = p
        self.config = config
        self.groups = config.groups

    def norm_act(self, x, prefix):
        h = ad.normalize(x, self.groups, GROUP_NORM_EPS)
        h = ad.add(ad.mul(h, self.p[prefix + ".scale"]), self.p[prefix + ".shift"])
        return ad.silu(h)

    def conv(self, x, prefix, stride=1, padding=1):
        return ad.add(ad.conv2d(x, self.p[prefix + ".w"], stride, padding), self.p[prefix + ".b"])

    def resblock(self, x, emb, prefix):
        h = self.conv(self.norm_act(x, prefix + ".norm1"), prefix + ".conv1")
        # the conditioning shift goes after the second norm, which would otherwise remove it
        cond = ad.add(ad.matmul(emb, self.p[prefix + ".cond.w"]), self.p[prefix + ".cond.b"])
        h = ad.normalize(h, self.groups, GROUP_NORM_EPS)
        h = ad.add(ad.mul(h, self.p[prefix + ".norm2.scale"]), self.p[prefix + ".norm2.shift"])
        h = ad.silu(ad.add(h, ad.reshape(cond, cond.shape + (1, 1))))
        h = self.conv(h, prefix + ".conv2")
        skip = x
        if prefix + ".skip.w" in self.p:
            skip = self.conv(x, prefix + ".skip", padding=0)
        return ad.add(h, skip)

    def attention_block(self, x):
        b, c, hh, ww = x.shape
        h = ad.normalize(x, self.groups, GROUP_NORM_EPS)
        h = ad.add(ad.mul(h, self.p["attn.norm.scale"]), self.p["attn.norm.shift"])
        h = ad.reshape(h, (b, c, hh * ww))
        # tokens are columns of h; q/k/v come out as (B, n, c)
        q = ad.matmul(h, self.p["attn.wq"], transpose_a=True)
        k = ad.matmul(h, self.p["attn.wk"], transpose_a=True)
        v = ad.matmul(h, self.p["attn.wv"], transpose_a=True)
        a = attention(q, k, v)
        out = ad.add(ad.matmul(self.p["attn.wo"], a, transpose_b=True), self.p["attn.bo"])
        return ad.add(x, ad.reshape(out, x.shape))

    def upsample(self, x):
        b, c, hh, ww = x.shape
        up = Tensor(_upsample_matrix(hh, ww))
        y = ad.matmul(ad.reshape(x, (b, c, hh * ww)), up)
        return ad.reshape(y, (b, c, 2 * hh, 2 * ww))

    def __call__(self, x, t, cond):
        cfg = self.config
        temb = Tensor(time_embedding(t, cfg.embed_dim))
        emb = ad.add(ad.matmul(temb, self.p["time.w"]), self.p["time.b"])
        emb = ad.silu(ad.add(emb, ad.embed_lookup(self.p["class.table"], cond)))

        h = self.conv(x, "conv_in")
        skips = []
        for i in range(cfg.depth):
            h = self.resblock(h, emb, f"down{i}")
            skips.append(h)
            h = self.conv(h, f"down{i}.pool", stride=2)
        h = self.resblock(h, emb, "mid")
        h = self.attention_block(h)
        for i in reversed(range(cfg.depth)):
            h = ad.add(self.upsample(h), skips[i])
            h = self.resblock(h, emb, f"up{i}")
        h = self.norm_act(h, "out.norm")
        return self.conv(h, "conv_out")


def denoiser_forward(params: DenoiserParams, x_t, t, cond, tensors: dict | None = None) -> Tensor:
    """Predict the noise in ``x_t``.

    ``t`` and ``cond`` are per-sample integer arrays (or scalars broadcast
    over the batch).  Pass ``tensors`` from :func:`as_tensors` to run on
    wrapped parameters whose gradients can be read off the active tape.
    """
    config = params.config
    p = tensors if tensors is not None else as_tensors(params, requires_grad=False)
    x = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    expected = (config.channels, config.image_size, config.image_size)
    if x.data.ndim != 4 or x.shape[1:] != expected:
        raise ValueError(f"input shape {x.shape} does not match (B, {expected})")
    batch = x.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (batch,))
    cond = np.broadcast_to(np.asarray(cond, dtype=np.int64), (batch,))
    if cond.min() < 0 or cond.max() >= config.num_classes:
        raise ValueError(f"class index out of range [0, {config.num_classes})")
    return _Net(p, config)(x, t, cond)


def as_tensors(params: DenoiserParams, requires_grad: bool = True) -> dict[str, Tensor]:
    """Wrap every array (without copying) in a Tensor."""
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}
