"""Low-rank adaptation of named linear layers.

An adapter contributes scale * B @ A @ x on top of a frozen base layer.
B starts at zero, so attaching adapters never changes model outputs until
training moves them; merging folds B @ A back into the base weight.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, WiringError
from .nn import LinearLayer

GROUPS = ("image_encoder", "memory_attention", "memory_encoder", "mask_decoder")
PROJECTION_KINDS = frozenset({"q", "k", "v", "o"})


class LoraAdapter:
    """Factored update (A: r x d_in down, B: d_out x r up) for one layer."""

    def __init__(self, d_in: int, d_out: int, rank: int, scale: float,
                 target: str, rng: np.random.Generator):
        self.rank = effective_rank(d_in, d_out, rank)
        bound = 1.0 / np.sqrt(d_in)
        self.A = Tensor(rng.uniform(-bound, bound, (self.rank, d_in)), requires_grad=True)
        self.B = Tensor(np.zeros((d_out, self.rank)), requires_grad=True)
        self.scale = scale
        self.target = target


def effective_rank(d_in: int, d_out: int, rank: int) -> int:
    """Clamp the configured rank below min(d_in, d_out), staying >= 1.

    A full-rank update would defeat the low-rank premise; toy layer widths
    can be smaller than the configured rank, so the clamp keeps configs
    portable between toy and full-size models.
    """
    if rank < 1:
        raise ConfigError(f"rank must be positive, got {rank}")
    return max(1, min(rank, min(d_in, d_out) - 1))


@dataclass
class LoraConfig:
    rank_by_group: dict[str, int] = field(default_factory=dict)
    targets: frozenset[str] = PROJECTION_KINDS
    scale: float = 1.0

    def __post_init__(self):
        for group, rank in self.rank_by_group.items():
            if group not in GROUPS:
                raise ConfigError(f"unknown layer group '{group}'; known: {GROUPS}")
            if rank < 1:
                raise ConfigError(f"rank for group '{group}' must be positive, got {rank}")
        unknown = set(self.targets) - PROJECTION_KINDS
        if unknown:
            raise ConfigError(f"unknown projection kinds {sorted(unknown)}")


def lora_forward(layer: LinearLayer, adapter: LoraAdapter, x: Tensor) -> Tensor:
    """Base forward plus the scaled low-rank path, sharing the input exactly."""
    if adapter.target != layer.name:
        raise WiringError(f"adapter targets '{adapter.target}' but layer is '{layer.name}'")
    base = layer.base_forward(x)
    vector = x.ndim == 1
    x2 = ag.reshape(x, (1, layer.d_in)) if vector else x
    low = ag.matmul(ag.matmul(x2, ag.transpose(adapter.A, (1, 0))),
                    ag.transpose(adapter.B, (1, 0)))
    if vector:
        low = ag.reshape(low, (layer.d_out,))
    return ag.add(base, ag.mul(low, adapter.scale))


def _adaptable(name: str, group: str, targets: frozenset[str]) -> bool:
    # attention-style sites adapt their q/k/v/o projections; the memory
    # encoder has no attention, so its plain linear projections are adapted
    if group == "memory_encoder":
        return True
    return name.rsplit(".", 1)[-1] in targets


def attach_lora(model, config: LoraConfig, rng: np.random.Generator):
    """Attach zero-effect adapters per config; freeze everything else.

    Returns (model, trainable) where trainable lists exactly the adapter
    A/B tensors in deterministic walk order.
    """
    model.set_requires_grad(False)
    trainable: list[Tensor] = []
    for name, layer in model.named_linears():
        group = model.group_of(name)
        rank = config.rank_by_group.get(group)
        if rank is None or not _adaptable(name, group, config.targets):
            continue
        adapter = LoraAdapter(layer.d_in, layer.d_out, rank, config.scale, name, rng)
        layer.adapter = adapter
        trainable.extend([adapter.A, adapter.B])
    model.lora_config = config if config.rank_by_group else None
    return model, trainable


def detach_lora(model):
    """Remove all adapters without merging (used to restore a clean base)."""
    for _, layer in model.named_linears():
        layer.adapter = None
    model.lora_config = None


def iter_adapters(model):
    for name, layer in model.named_linears():
        if layer.adapter is not None:
            yield name, layer, layer.adapter


def merge_lora(layer: LinearLayer, adapter: LoraAdapter) -> LinearLayer:
    """Fold the adapter into the base weight: W' = W + scale * B @ A."""
    if adapter.target != layer.name:
        raise WiringError(f"adapter targets '{adapter.target}' but layer is '{layer.name}'")
    layer.W = Tensor(layer.W.data + adapter.scale * (adapter.B.data @ adapter.A.data))
    layer.adapter = None
    return layer


def merge_all(model):
    for _, layer, adapter in list(iter_adapters(model)):
        merge_lora(layer, adapter)
    model.lora_config = None
    return model


def count_lora_params(manifest, rank: int) -> int:
    """Trainable-parameter count for adapters of the given rank.

    manifest is a sequence of (d_in, d_out) for each targeted layer; each
    contributes r_eff * (d_in + d_out).
    """
    manifest = list(manifest)
    if not manifest:
        raise ConfigError("empty layer manifest")
    return sum(effective_rank(d_in, d_out, rank) * (d_in + d_out)
               for d_in, d_out in manifest)


STRATEGIES = ("none", "full_memory", "lora_mem", "lora_enc", "lora_enc_mem",
              "lora_enc_mem_dec", "lora_enc_full_memory")

ENCODER_RANK = 4
MEMORY_RANK = 32
DECODER_RANK = 32

_STRATEGY_RANKS = {
    "none": {},
    "full_memory": {},
    "lora_mem": {"memory_attention": MEMORY_RANK, "memory_encoder": MEMORY_RANK},
    "lora_enc": {"image_encoder": ENCODER_RANK},
    "lora_enc_mem": {"image_encoder": ENCODER_RANK,
                     "memory_attention": MEMORY_RANK,
                     "memory_encoder": MEMORY_RANK},
    "lora_enc_mem_dec": {"image_encoder": ENCODER_RANK,
                         "memory_attention": MEMORY_RANK,
                         "memory_encoder": MEMORY_RANK,
                         "mask_decoder": DECODER_RANK},
    "lora_enc_full_memory": {"image_encoder": ENCODER_RANK},
}

_MEMORY_GROUPS = ("memory_attention", "memory_encoder")


def select_trainable(model, strategy: str, rng: np.random.Generator,
                     scale: float = 1.0):
    """Map a fine-tuning strategy name to its trainable tensor set.

    LoRA strategies attach adapters; *full_memory variants unfreeze the
    memory-side base parameters instead of (or in addition to) adapters.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy '{strategy}'; known: {STRATEGIES}")
    config = LoraConfig(rank_by_group=_STRATEGY_RANKS[strategy], scale=scale)
    _, trainable = attach_lora(model, config, rng)
    if strategy in ("full_memory", "lora_enc_full_memory"):
        for name, p in model.named_parameters():
            if model.group_of(name) in _MEMORY_GROUPS:
                p.requires_grad = True
                trainable.append(p)
    return trainable
