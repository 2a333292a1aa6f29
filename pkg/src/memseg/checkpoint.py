"""Bit-exact model checkpoints.

Archive layout (uncompressed zip with frozen timestamps, so identical
state produces identical bytes):

  manifest.txt  first line "format factored|merged", then one line per
                array: name, comma-separated shape, byte offset
  params.bin    the arrays as raw little-endian float64, manifest order
  config.txt    "key value" lines: model.* fields, lora.* fields when
                factored, meta.* extras (strings)

Adapter arrays are stored under "<layer>#lora_A" / "#lora_B"; '#' cannot
appear in layer names, so base and adapter entries never collide.
"""
from __future__ import annotations

import dataclasses
import io
import zipfile

import numpy as np

from .errors import IngestionError
from .lora import LoraConfig, attach_lora, iter_adapters
from .model import FewShotSegmenter, ModelConfig

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _write_entry(zf: zipfile.ZipFile, name: str, payload: bytes):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def _state_arrays(model: FewShotSegmenter):
    for name, p in model.named_parameters():
        yield name, p.data
    for name, _, adapter in iter_adapters(model):
        yield f"{name}#lora_A", adapter.A.data
        yield f"{name}#lora_B", adapter.B.data


def _lora_lines(model: FewShotSegmenter) -> list[str]:
    config: LoraConfig | None = getattr(model, "lora_config", None)
    if config is None:
        return []
    lines = [f"lora.{group} {rank}"
             for group, rank in sorted(config.rank_by_group.items())]
    lines.append(f"lora.scale {config.scale!r}")
    return lines


def save_checkpoint(path, model: FewShotSegmenter, extras: dict | None = None):
    arrays = list(_state_arrays(model))
    factored = any("#" in name for name, _ in arrays)

    manifest = [f"format {'factored' if factored else 'merged'}"]
    blob = io.BytesIO()
    for name, arr in arrays:
        shape = ",".join(str(n) for n in arr.shape)
        manifest.append(f"{name} {shape} {blob.tell()}")
        blob.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    config = [f"model.{k} {v}" for k, v in sorted(vars(model.cfg).items())]
    config.extend(_lora_lines(model))
    for key, value in sorted((extras or {}).items()):
        config.append(f"meta.{key} {value}")

    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        _write_entry(zf, "manifest.txt", "\n".join(manifest).encode() + b"\n")
        _write_entry(zf, "config.txt", "\n".join(config).encode() + b"\n")
        _write_entry(zf, "params.bin", blob.getvalue())


def _parse_kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if line.strip():
            key, _, value = line.partition(" ")
            out[key] = value
    return out


def load_checkpoint(path):
    """Rebuild (model, extras) from an archive written by save_checkpoint."""
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as e:
        raise IngestionError(f"cannot read checkpoint '{path}': {e}") from e
    with zf:
        try:
            manifest = zf.read("manifest.txt").decode().splitlines()
            kv = _parse_kv(zf.read("config.txt").decode())
            blob = zf.read("params.bin")
        except KeyError as e:
            raise IngestionError(f"checkpoint '{path}' missing member: {e}") from e

    if not manifest or not manifest[0].startswith("format "):
        raise IngestionError(f"checkpoint '{path}' has no format line")
    factored = manifest[0].split()[1] == "factored"

    types = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
    cfg_fields = {}
    for k, v in kv.items():
        if k.startswith("model."):
            name = k.split(".", 1)[1]
            cfg_fields[name] = float(v) if types.get(name) == "float" else int(v)
    cfg = ModelConfig(**cfg_fields)
    model = FewShotSegmenter(cfg, np.random.default_rng(0))

    if factored:
        ranks = {k.split(".", 1)[1]: int(v) for k, v in kv.items()
                 if k.startswith("lora.") and k != "lora.scale"}
        scale = float(kv.get("lora.scale", "1.0"))
        attach_lora(model, LoraConfig(rank_by_group=ranks, scale=scale),
                    np.random.default_rng(0))

    arrays = _array_table(model)
    restored = set()
    for line in manifest[1:]:
        if not line.strip():
            continue
        name, shape_s, offset_s = line.rsplit(" ", 2)
        shape = tuple(int(n) for n in shape_s.split(","))
        target = arrays.get(name)
        if target is None:
            raise IngestionError(f"checkpoint entry '{name}' matches no model array")
        if target.shape != shape:
            raise IngestionError(f"checkpoint entry '{name}' shape {shape} != "
                                 f"model shape {target.shape}")
        offset = int(offset_s)
        count = int(np.prod(shape)) if shape else 1
        target[...] = np.frombuffer(blob, dtype="<f8", count=count,
                                    offset=offset).reshape(shape)
        restored.add(name)
    missing = set(arrays) - restored
    if missing:
        raise IngestionError(f"checkpoint '{path}' leaves arrays uninitialized: "
                             f"{sorted(missing)[:3]}...")

    extras = {k.split(".", 1)[1]: v for k, v in kv.items() if k.startswith("meta.")}
    return model, extras


def _array_table(model: FewShotSegmenter) -> dict[str, np.ndarray]:
    return dict(_state_arrays(model))


def checkpoint_is_factored(path) -> bool:
    try:
        with zipfile.ZipFile(path) as zf:
            first = zf.read("manifest.txt").decode().splitlines()[0]
    except (OSError, zipfile.BadZipFile, IndexError, KeyError) as e:
        raise IngestionError(f"cannot read checkpoint '{path}': {e}") from e
    return first == "format factored"
