"""Neural building blocks on top of the autograd engine.

Modules own parameter tensors and expose ``named_parameters`` /
``named_linears`` walks. Linear layers carry a dotted ``name`` assigned
once at model-assembly time; adapters and checkpoints address layers by
that name, so names must stay unique within a model.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ShapeError


class Module:
    """Base class providing recursive parameter discovery."""

    def _children(self):
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}{i}", item

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            if isinstance(value, Tensor):
                yield (f"{prefix}{key}", value)
        for key, child in self._children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_linears(self, prefix: str = ""):
        for key, child in self._children():
            if isinstance(child, LinearLayer):
                yield (f"{prefix}{key}", child)
            else:
                yield from child.named_linears(f"{prefix}{key}.")

    def set_requires_grad(self, flag: bool):
        for _, p in self.named_parameters():
            p.requires_grad = flag


class LinearLayer(Module):
    """Affine map over the trailing axis. W is stored (d_out, d_in).

    ``adapter`` is populated by the adaptation module; when present the
    forward adds the factored low-rank path on top of the base path.
    """

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True):
        self.d_in = d_in
        self.d_out = d_out
        bound = 1.0 / np.sqrt(d_in)
        self.W = Tensor(rng.uniform(-bound, bound, (d_out, d_in)))
        self.b = Tensor(np.zeros(d_out)) if bias else None
        self.name = ""
        self.adapter = None

    def base_forward(self, x: Tensor) -> Tensor:
        if x.ndim == 0 or x.shape[-1] != self.d_in:
            raise ShapeError(f"linear '{self.name}' expects trailing dim {self.d_in}, "
                             f"got {x.shape}")
        vector = x.ndim == 1
        if vector:
            x = ag.reshape(x, (1, self.d_in))
        out = ag.matmul(x, ag.transpose(self.W, (1, 0)))
        if self.b is not None:
            out = ag.add(out, self.b)
        return ag.reshape(out, (self.d_out,)) if vector else out

    def forward(self, x: Tensor) -> Tensor:
        if self.adapter is not None:
            from .lora import lora_forward
            return lora_forward(self, self.adapter, x)
        return self.base_forward(x)

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(d))
        self.beta = Tensor(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gamma, self.beta, self.eps)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        bound = 1.0 / np.sqrt(c_in * k * k)
        self.kernel = Tensor(rng.uniform(-bound, bound, (c_out, c_in, k, k)))
        self.bias = Tensor(np.zeros((c_out, 1, 1)))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ag.add(ag.conv2d(x, self.kernel, self.stride, self.padding), self.bias)


class ConvTranspose2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1):
        bound = 1.0 / np.sqrt(c_in * k * k)
        self.kernel = Tensor(rng.uniform(-bound, bound, (c_in, c_out, k, k)))
        self.bias = Tensor(np.zeros((c_out, 1, 1)))
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return ag.add(ag.conv_transpose2d(x, self.kernel, self.stride), self.bias)


@dataclass(frozen=True)
class AttentionSpec:
    d_model: int
    n_heads: int

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ShapeError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def multi_head_attention(q_tokens: Tensor, kv_tokens: Tensor, spec: AttentionSpec,
                         q_proj: LinearLayer, k_proj: LinearLayer,
                         v_proj: LinearLayer, o_proj: LinearLayer,
                         score_bias: Tensor | None = None) -> Tensor:
    """Scaled dot-product attention from q_tokens onto kv_tokens.

    Self-attention is the special case kv_tokens is q_tokens. Softmax over
    the kv axis makes the result invariant to kv permutation and to whole-set
    duplication. ``score_bias`` is added to the scaled scores before the
    softmax; it must broadcast against (n_heads, n_q, n_kv).
    """
    if q_tokens.shape[-1] != spec.d_model or kv_tokens.shape[-1] != spec.d_model:
        raise ShapeError(f"attention expects d_model {spec.d_model}, got "
                         f"{q_tokens.shape} / {kv_tokens.shape}")
    n_q, n_kv = q_tokens.shape[0], kv_tokens.shape[0]
    h, hd = spec.n_heads, spec.head_dim

    def split_heads(tokens: Tensor, n: int) -> Tensor:
        # (n, d) -> (h, n, hd)
        return ag.transpose(ag.reshape(tokens, (n, h, hd)), (1, 0, 2))

    q = split_heads(q_proj(q_tokens), n_q)
    k = split_heads(k_proj(kv_tokens), n_kv)
    v = split_heads(v_proj(kv_tokens), n_kv)
    scores = ag.mul(ag.matmul(q, ag.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(hd))
    if score_bias is not None:
        if score_bias.shape[-2:] != (n_q, n_kv):
            raise ShapeError(f"score bias {score_bias.shape} does not match "
                             f"scores ({h}, {n_q}, {n_kv})")
        scores = ag.add(scores, score_bias)
    weights = ag.softmax(scores, axis=-1)
    mixed = ag.matmul(weights, v)                       # (h, n_q, hd)
    merged = ag.reshape(ag.transpose(mixed, (1, 0, 2)), (n_q, spec.d_model))
    return o_proj(merged)


class AttentionLayers(Module):
    """One attention site: the four projection layers plus the spec."""

    def __init__(self, spec: AttentionSpec, rng: np.random.Generator):
        d = spec.d_model
        self.spec = spec
        self.q = LinearLayer(d, d, rng)
        self.k = LinearLayer(d, d, rng)
        self.v = LinearLayer(d, d, rng)
        self.o = LinearLayer(d, d, rng)

    def __call__(self, q_tokens: Tensor, kv_tokens: Tensor,
                 score_bias: Tensor | None = None) -> Tensor:
        return multi_head_attention(q_tokens, kv_tokens, self.spec,
                                    self.q, self.k, self.v, self.o, score_bias)


class Mlp(Module):
    """Token-wise two-layer net, hidden = 4x width, tanh-GELU inside."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.fc1 = LinearLayer(d, 4 * d, rng)
        self.fc2 = LinearLayer(4 * d, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ag.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm residual block: self-attention, optional cross-attention, MLP."""

    def __init__(self, spec: AttentionSpec, rng: np.random.Generator,
                 cross: bool = False):
        d = spec.d_model
        self.norm_self = LayerNorm(d)
        self.attn = AttentionLayers(spec, rng)
        if cross:
            self.norm_cross = LayerNorm(d)
            self.cross_attn = AttentionLayers(spec, rng)
        else:
            self.norm_cross = None
            self.cross_attn = None
        self.norm_mlp = LayerNorm(d)
        self.mlp = Mlp(d, rng)

    def self_pass(self, x: Tensor) -> Tensor:
        normed = self.norm_self(x)
        return ag.add(x, self.attn(normed, normed))

    def cross_pass(self, x: Tensor, context: Tensor,
                   score_bias: Tensor | None = None) -> Tensor:
        # context goes through the same pre-norm as the queries, so a block
        # whose context equals its own tokens degenerates to self-attention
        return ag.add(x, self.cross_attn(self.norm_cross(x),
                                         self.norm_cross(context), score_bias))

    def mlp_pass(self, x: Tensor) -> Tensor:
        return ag.add(x, self.mlp(self.norm_mlp(x)))

    def __call__(self, tokens: Tensor, context: Tensor | None = None,
                 score_bias: Tensor | None = None) -> Tensor:
        x = self.self_pass(tokens)
        if context is not None:
            if self.cross_attn is None:
                raise ShapeError("block has no cross-attention layers but got context")
            x = self.cross_pass(x, context, score_bias)
        return self.mlp_pass(x)


class PatchEmbed(Module):
    """Split (3, H, W) into non-overlapping patches, project each to d_model."""

    def __init__(self, patch: int, d_model: int, rng: np.random.Generator):
        self.patch = patch
        self.proj = LinearLayer(3 * patch * patch, d_model, rng)

    def __call__(self, image: Tensor) -> Tensor:
        c, height, width = image.shape
        p = self.patch
        if c != 3 or height % p or width % p:
            raise ShapeError(f"patch embed needs (3, H, W) with H, W divisible by "
                             f"{p}, got {image.shape}")
        h, w = height // p, width // p
        # (3, h, p, w, p) -> (h, w, 3, p, p) -> (h*w, 3*p*p), row-major tokens
        x = ag.reshape(image, (3, h, p, w, p))
        x = ag.transpose(x, (1, 3, 0, 2, 4))
        return self.proj(ag.reshape(x, (h * w, 3 * p * p)))


def sinusoidal_positions(h: int, w: int, d_model: int) -> Tensor:
    """Deterministic 2D sine/cosine grid encoding, (h*w, d_model), row-major.

    First half of the channels encodes the row coordinate, second half the
    column; within each half, even channels are sines and odd are cosines
    of geometrically spaced frequencies.
    """
    if d_model % 4 != 0:
        raise ShapeError(f"d_model must be divisible by 4, got {d_model}")
    half = d_model // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half // 2) * 2.0 / half))

    def encode(coord: np.ndarray) -> np.ndarray:
        angles = coord[:, None] * freqs[None, :]
        out = np.empty((coord.size, half))
        out[:, 0::2] = np.sin(angles)
        out[:, 1::2] = np.cos(angles)
        return out

    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return Tensor(np.concatenate([encode(rows.ravel().astype(float)),
                                  encode(cols.ravel().astype(float))], axis=1))


class UpsampleDecodeStack(Module):
    """Tokens on an (h, w) grid -> single-channel mask logits at target size.

    Two stride-2 transposed convolutions with channel halving and a ReLU
    between, a 1x1 projection to one channel, then bilinear resize.
    """

    def __init__(self, d: int, rng: np.random.Generator):
        if d % 4 != 0:
            raise ShapeError(f"decode stack needs d divisible by 4, got {d}")
        self.up1 = ConvTranspose2d(d, d // 2, 2, rng, stride=2)
        self.up2 = ConvTranspose2d(d // 2, d // 4, 2, rng, stride=2)
        self.out = Conv2d(d // 4, 1, 1, rng)

    def __call__(self, tokens: Tensor, h: int, w: int,
                 target_h: int, target_w: int) -> Tensor:
        if tokens.shape[0] != h * w:
            raise ShapeError(f"expected {h * w} tokens for a {h}x{w} grid, "
                             f"got {tokens.shape}")
        if target_h < h or target_w < w:
            raise ShapeError(f"target {target_h}x{target_w} smaller than grid {h}x{w}")
        d = tokens.shape[1]
        grid = ag.transpose(ag.reshape(tokens, (h, w, d)), (2, 0, 1))
        x = self.up2(ag.relu(self.up1(grid)))
        logits = self.out(x)
        return ag.bilinear_resize(logits, target_h, target_w)
