"""Few-shot segmenter: query features conditioned on a support memory bank.

Pipeline: patch-embed + positional encoding + self-attention encoder for
both query and supports; a convolutional memory encoder fuses each support
mask into its features; the K encoded supports are concatenated into one
memory bank the query cross-attends to; a small decoder upsamples the
conditioned tokens back to full-resolution mask logits.

Supports are an unordered set: the bank carries per-frame spatial positions
but no frame-order encoding, so predictions are invariant to support
permutation and duplication.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import Tensor
from .errors import ConfigError, ContractError, ShapeError, WiringError

# Resolution the full-size system normalizes images to; the toy default
# below keeps the same pipeline runnable on a CPU in seconds.
REFERENCE_IMAGE_SIZE = 1024


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch: int = 8
    d_model: int = 64
    enc_depth: int = 4
    n_heads: int = 4
    mem_depth: int = 2
    d_mem: int = 32
    mem_locality: float = 0.5

    def __post_init__(self):
        for name, value in vars(self).items():
            if name == "mem_locality":
                continue
            if value < 1:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.mem_locality < 0.0:
            raise ConfigError(f"mem_locality must be >= 0, got {self.mem_locality}")
        if self.image_size % self.patch:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch {self.patch}")
        if self.patch & (self.patch - 1):
            raise ConfigError(f"patch must be a power of two, got {self.patch}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_model % 4 or self.d_mem % 4:
            raise ConfigError("d_model and d_mem must be divisible by 4 "
                              "(positional encoding pairs)")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch


@dataclass
class FeatureMap:
    tokens: Tensor
    h: int
    w: int

    def __post_init__(self):
        if self.tokens.shape[0] != self.h * self.w:
            raise ShapeError(f"{self.tokens.shape[0]} tokens for a "
                             f"{self.h}x{self.w} grid")


@dataclass
class MemoryBank:
    tokens: Tensor
    boundaries: list[int]


class SegmentationOutput:
    """Mask logits plus their thresholding at probability 0.5 (logit 0)."""

    def __init__(self, logits: Tensor):
        self.logits = logits
        self.mask = logits.data[0] > 0.0


_GROUP_BY_PREFIX = {
    "patch_embed": "image_encoder",
    "enc_block": "image_encoder",
    "mask_down": "memory_encoder",
    "mask_gain": "memory_encoder",
    "feat_proj": "memory_encoder",
    "fuse": "memory_encoder",
    "out_proj": "memory_encoder",
    "bank_proj": "memory_attention",
    "mem_block": "memory_attention",
    "locality_gate": "memory_attention",
    "dec_block": "mask_decoder",
    "decode_stack": "mask_decoder",
}


def _grid_squared_distances(g: int) -> np.ndarray:
    """(g*g, g*g) matrix of squared cell distances on a row-major g x g grid."""
    rows, cols = np.divmod(np.arange(g * g), g)
    return ((rows[:, None] - rows[None, :]) ** 2.0
            + (cols[:, None] - cols[None, :]) ** 2.0)


class FewShotSegmenter(nn.Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.d_model
        spec = nn.AttentionSpec(d, cfg.n_heads)

        self.patch_embed = nn.PatchEmbed(cfg.patch, d, rng)
        self.enc_block = [nn.TransformerBlock(spec, rng) for _ in range(cfg.enc_depth)]

        mid = max(d // 4, 4)
        n_down = cfg.patch.bit_length() - 1
        if n_down == 0:
            self.mask_down = [nn.Conv2d(1, d, 1, rng)]
        else:
            chans = [1] + [mid] * (n_down - 1) + [d]
            self.mask_down = [nn.Conv2d(chans[i], chans[i + 1], 3, rng,
                                        stride=2, padding=1)
                              for i in range(n_down)]
        self.feat_proj = nn.LinearLayer(d, d, rng)
        # the downsampled mask comes out of its conv stack roughly 15x weaker
        # than the projected features; without this gain the fused memory
        # token barely depends on the mask and the propagation circuit
        # receives almost no gradient
        self.mask_gain = Tensor(np.array([8.0]))
        self.fuse = [nn.Conv2d(d, d, 3, rng, padding=1) for _ in range(2)]
        self.out_proj = nn.LinearLayer(d, cfg.d_mem, rng)

        self.bank_proj = nn.LinearLayer(cfg.d_mem, d, rng)
        self.mem_block = [nn.TransformerBlock(spec, rng, cross=True)
                          for _ in range(cfg.mem_depth)]

        self.dec_block = nn.TransformerBlock(spec, rng)
        self.decode_stack = nn.UpsampleDecodeStack(d, rng)

        self._enc_positions = nn.sinusoidal_positions(cfg.grid, cfg.grid, d)
        self._mem_positions = nn.sinusoidal_positions(cfg.grid, cfg.grid, cfg.d_mem)

        # Memory reads favor the spatially aligned support location at init:
        # cross-attention scores get -gate * dist^2 / 2 added per head, with
        # the gate trainable so heads can widen or abandon the prior. This is
        # what lets a fresh model propagate a support mask at all; without it
        # the mask signal is averaged over the whole bank and never trains.
        self.locality_gate = Tensor(np.full(cfg.n_heads, float(cfg.mem_locality)))
        self._grid_sq_dist = _grid_squared_distances(cfg.grid)

        names = []
        for name, layer in self.named_linears():
            layer.name = name
            names.append(name)
        if len(names) != len(set(names)):
            raise WiringError("duplicate linear-layer names in model")

    @staticmethod
    def group_of(name: str) -> str:
        prefix = name.split(".", 1)[0].rstrip("0123456789")
        group = _GROUP_BY_PREFIX.get(prefix)
        if group is None:
            raise WiringError(f"layer '{name}' belongs to no known group")
        return group

    def named_parameters(self, prefix: str = ""):
        for name, p in super().named_parameters(prefix):
            if name.startswith(prefix + "_"):
                continue  # positional constants are not parameters
            yield name, p

    # ------------------------------------------------------------------
    # pipeline stages
    # ------------------------------------------------------------------

    def encode_image(self, image: Tensor) -> FeatureMap:
        image = ag.as_tensor(image)
        s = self.cfg.image_size
        if image.shape != (3, s, s):
            raise ShapeError(f"expected (3, {s}, {s}) image, got {image.shape}")
        tokens = ag.add(self.patch_embed(image), self._enc_positions)
        for block in self.enc_block:
            tokens = block(tokens)
        return FeatureMap(tokens, self.cfg.grid, self.cfg.grid)

    def encode_memory(self, feat: FeatureMap, mask: np.ndarray) -> Tensor:
        s = self.cfg.image_size
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != (s, s):
            raise ShapeError(f"expected ({s}, {s}) mask, got {mask.shape}")
        g, d = self.cfg.grid, self.cfg.d_model
        m = Tensor(mask[None])
        for conv in self.mask_down:
            m = ag.relu(conv(m))
        grid_feat = ag.transpose(ag.reshape(self.feat_proj(feat.tokens),
                                            (g, g, d)), (2, 0, 1))
        x = ag.add(grid_feat, ag.mul(self.mask_gain, m))
        x = self.fuse[1](ag.relu(self.fuse[0](x)))
        tokens = ag.reshape(ag.transpose(x, (1, 2, 0)), (g * g, d))
        return self.out_proj(tokens)

    def build_memory_bank(self, entries: list[Tensor]) -> MemoryBank:
        if not entries:
            raise ContractError("memory bank needs at least one support entry")
        hw = self.cfg.grid * self.cfg.grid
        expected = (hw, self.cfg.d_mem)
        for e in entries:
            if e.shape != expected:
                raise ShapeError(f"memory entry shape {e.shape} != {expected}")
        placed = [ag.add(e, self._mem_positions) for e in entries]
        return MemoryBank(tokens=ag.concat(placed, axis=0),
                          boundaries=[i * hw for i in range(len(entries))])

    def memory_attend(self, query: FeatureMap, bank: MemoryBank) -> FeatureMap:
        if bank.tokens.shape[0] == 0:
            raise ContractError("empty memory bank")
        context = self.bank_proj(bank.tokens)
        # every bank entry is a full grid in row-major order, so the locality
        # kernel tiles along the kv axis; duplicates of an entry get identical
        # biases, which keeps set semantics intact
        n_entries = bank.tokens.shape[0] // (self.cfg.grid * self.cfg.grid)
        kernel = np.tile(-0.5 * self._grid_sq_dist, (1, n_entries))
        bias = ag.mul(ag.reshape(self.locality_gate, (self.cfg.n_heads, 1, 1)),
                      Tensor(kernel))
        tokens = query.tokens
        for block in self.mem_block:
            tokens = block(tokens, context, score_bias=bias)
        return FeatureMap(tokens, query.h, query.w)

    def decode_mask(self, conditioned: FeatureMap) -> SegmentationOutput:
        if (conditioned.h, conditioned.w) != (self.cfg.grid, self.cfg.grid):
            raise ShapeError(f"grid {conditioned.h}x{conditioned.w} does not match "
                             f"config grid {self.cfg.grid}")
        tokens = self.dec_block(conditioned.tokens)
        logits = self.decode_stack(tokens, conditioned.h, conditioned.w,
                                   self.cfg.image_size, self.cfg.image_size)
        return SegmentationOutput(logits)

    def forward_logits(self, query_image, support) -> Tensor:
        """Differentiable end-to-end pass; support is a list of (image, mask)."""
        if not support:
            raise ContractError("support set must contain at least one pair")
        entries = []
        for image, mask in support:
            feat = self.encode_image(ag.as_tensor(image))
            entries.append(self.encode_memory(feat, mask))
        bank = self.build_memory_bank(entries)
        query = self.encode_image(ag.as_tensor(query_image))
        conditioned = self.memory_attend(query, bank)
        tokens = self.dec_block(conditioned.tokens)
        return self.decode_stack(tokens, conditioned.h, conditioned.w,
                                 self.cfg.image_size, self.cfg.image_size)

    def segment(self, query_image, support) -> SegmentationOutput:
        with ag.no_grad():
            return SegmentationOutput(self.forward_logits(query_image, support))
