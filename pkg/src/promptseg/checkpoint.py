"""Versioned checkpoint container.

Layout: an 8-byte magic, a little-endian uint32 container version and uint64
manifest length, the JSON manifest, then the raw array bytes concatenated in
manifest order (always little-endian). The manifest records every array's
name / shape / dtype plus one SHA-256 digest per namespace (the part of the
name before the first "/"), computed over that namespace's concatenated
bytes in manifest order. Arrays are stored sorted by name, so the digest of
the "backbone" namespace equals the in-memory freeze digest.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .backbone import BackboneConfig, DenoiserBackbone
from .head import HeadConfig, SegmentationHead
from .model import SegModel
from .prompts import TextPromptEncoder
from .schedule import build_schedule

MAGIC = b"PSEGCKPT"
CONTAINER_VERSION = 1


def _namespace(name: str) -> str:
    return name.split("/", 1)[0]


def _array_le(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False)


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray | torch.Tensor],
                    meta: dict | None = None) -> dict:
    """Write arrays + metadata; returns the manifest (with digests)."""
    named = {}
    for name, a in arrays.items():
        if isinstance(a, torch.Tensor):
            a = a.detach().cpu().numpy()
        named[name] = _array_le(np.asarray(a))

    order = sorted(named)
    digests: dict[str, hashlib._hashlib.HASH] = {}
    entries = []
    for name in order:
        arr = named[name]
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": arr.dtype.str,  # e.g. "<f4"
        })
        digests.setdefault(_namespace(name), hashlib.sha256()).update(arr.tobytes())

    manifest = {
        "format_version": CONTAINER_VERSION,
        "arrays": entries,
        "digests": {ns: h.hexdigest() for ns, h in sorted(digests.items())},
        "meta": meta or {},
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", CONTAINER_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for name in order:
            f.write(named[name].tobytes())
    return manifest


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read arrays + manifest; digests are recomputed and verified."""
    with open(path, "rb") as f:
        if f.read(8) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint container")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CONTAINER_VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        (mlen,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(mlen).decode("utf-8"))
        arrays = {}
        checks: dict[str, hashlib._hashlib.HASH] = {}
        for entry in manifest["arrays"]:
            dtype = np.dtype(entry["dtype"])
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            raw = f.read(count * dtype.itemsize)
            if len(raw) != count * dtype.itemsize:
                raise ValueError(f"{path}: truncated array {entry['name']!r}")
            checks.setdefault(_namespace(entry["name"]), hashlib.sha256()).update(raw)
            arrays[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"]).copy()
    for ns, h in checks.items():
        if manifest["digests"].get(ns) != h.hexdigest():
            raise ValueError(f"{path}: digest mismatch for namespace {ns!r}")
    return arrays, manifest


# --- module <-> array helpers ------------------------------------------


def module_arrays(module: torch.nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_module_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray],
                       prefix: str) -> None:
    state = {}
    want = prefix + "/"
    for name, arr in arrays.items():
        if name.startswith(want):
            state[name[len(want):]] = torch.from_numpy(np.ascontiguousarray(arr))
    module.load_state_dict(state)


# --- full model containers ---------------------------------------------


def save_model(path: str | Path, model: SegModel, text_encoder: TextPromptEncoder,
               extra_meta: dict | None = None) -> dict:
    arrays = {}
    arrays.update(module_arrays(model.backbone, "backbone"))
    arrays.update(module_arrays(model.head, "head"))
    arrays.update(module_arrays(text_encoder, "text_encoder"))
    arrays["prompts/category_tokens"] = model.category_tokens.numpy()
    if model.scene_token is not None:
        arrays["prompts/scene_token"] = model.scene_token.numpy()
    if model.extraction_eps is not None:
        arrays["extraction/eps"] = model.extraction_eps.numpy()
    meta = {
        "kind": "model",
        "backbone_config": model.backbone.config.to_json(),
        "head_config": model.head.config.to_json(),
        "schedule": model.meta.get("schedule"),
        "p_feat": model.p_feat,
        "class_names": list(model.class_names),
        "vocabulary": text_encoder.vocabulary,
        "freeze_digest": model.backbone.frozen_digest,
    }
    meta.update(extra_meta or {})
    return save_checkpoint(path, arrays, meta)


def load_model(path: str | Path) -> tuple[SegModel, TextPromptEncoder, dict]:
    arrays, manifest = load_checkpoint(path)
    meta = manifest["meta"]
    if meta.get("kind") != "model":
        raise ValueError(f"{path}: not a model checkpoint")

    backbone = DenoiserBackbone(BackboneConfig.from_json(meta["backbone_config"]))
    load_module_arrays(backbone, arrays, "backbone")
    digest = backbone.freeze()
    if meta.get("freeze_digest") and digest != meta["freeze_digest"]:
        raise ValueError(f"{path}: reloaded backbone digest differs from freeze digest")

    head = SegmentationHead(HeadConfig.from_json(meta["head_config"]))
    load_module_arrays(head, arrays, "head")
    head.eval()
    head.requires_grad_(False)

    encoder = TextPromptEncoder(meta["vocabulary"], backbone.config.token_dim)
    load_module_arrays(encoder, arrays, "text_encoder")
    encoder.freeze()

    sched = meta["schedule"]
    schedule = build_schedule(sched["P"], sched["beta_start"], sched["beta_end"])

    scene = arrays.get("ttda/scene_token", arrays.get("prompts/scene_token"))
    eps = arrays.get("extraction/eps")
    model = SegModel(
        backbone=backbone,
        schedule=schedule,
        head=head,
        category_tokens=torch.from_numpy(arrays["prompts/category_tokens"]),
        scene_token=torch.from_numpy(scene) if scene is not None else None,
        class_names=tuple(meta["class_names"]),
        p_feat=meta["p_feat"],
        extraction_eps=torch.from_numpy(eps) if eps is not None else None,
        meta=meta,
    )
    return model, encoder, manifest


def save_pretrained(path: str | Path, backbone: DenoiserBackbone,
                    text_encoder: TextPromptEncoder, schedule_params: dict,
                    extra_meta: dict | None = None) -> dict:
    arrays = {}
    arrays.update(module_arrays(backbone, "backbone"))
    arrays.update(module_arrays(text_encoder, "text_encoder"))
    meta = {
        "kind": "pretrained",
        "backbone_config": backbone.config.to_json(),
        "schedule": schedule_params,
        "vocabulary": text_encoder.vocabulary,
        "freeze_digest": backbone.frozen_digest,
    }
    meta.update(extra_meta or {})
    return save_checkpoint(path, arrays, meta)


def load_pretrained(path: str | Path):
    arrays, manifest = load_checkpoint(path)
    meta = manifest["meta"]
    if meta.get("kind") != "pretrained":
        raise ValueError(f"{path}: not a pretrained-backbone checkpoint")
    backbone = DenoiserBackbone(BackboneConfig.from_json(meta["backbone_config"]))
    load_module_arrays(backbone, arrays, "backbone")
    digest = backbone.freeze()
    if meta.get("freeze_digest") and digest != meta["freeze_digest"]:
        raise ValueError(f"{path}: reloaded backbone digest differs from freeze digest")
    encoder = TextPromptEncoder(meta["vocabulary"], backbone.config.token_dim)
    load_module_arrays(encoder, arrays, "text_encoder")
    encoder.freeze()
    sched = meta["schedule"]
    schedule = build_schedule(sched["P"], sched["beta_start"], sched["beta_end"])
    return backbone, encoder, schedule, manifest
