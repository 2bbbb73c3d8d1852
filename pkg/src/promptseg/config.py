"""Declarative experiment configs: JSON files with schema validation,
environment-variable overrides, and content digests for safe resumption."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

SCHEMA_VERSION = 1
ENV_PREFIX = "PROMPTSEG_"

MODES = ("pretrain", "train_baseline", "train_dg", "adapt_ttda", "eval", "oracle_train")
TRAIN_MODES = ("train_baseline", "train_dg", "oracle_train")

SCENE_KINDS_CONFIG = ("source_text", "target_text", "irrelevant_text", "learned", "image")


class ConfigError(ValueError):
    """Invalid experiment config; carries field-level diagnostics."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid config:\n" + "\n".join(f"  - {p}" for p in problems))


def load_config(path: str | Path, apply_env: bool = True) -> dict:
    with open(path) as f:
        cfg = json.load(f)
    if apply_env:
        cfg = apply_env_overrides(cfg)
    validate_config(cfg)
    return cfg


def apply_env_overrides(cfg: dict, env: dict | None = None) -> dict:
    """PROMPTSEG_TRAIN__STEPS=250 overrides cfg["train"]["steps"]. Values are
    parsed as JSON, falling back to plain strings."""
    env = dict(os.environ if env is None else env)
    out = copy.deepcopy(cfg)
    for key, raw in sorted(env.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError([f"env override {key}: {part!r} is not a mapping"])
        node[path[-1]] = value
    return out


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    ).hexdigest()


def _check_scene_spec(spec, where: str, problems: list[str], allow_none: bool):
    if spec is None:
        if not allow_none:
            problems.append(f"{where}: scene spec required")
        return
    if not isinstance(spec, dict) or "kind" not in spec:
        problems.append(f"{where}: scene spec must be a mapping with a 'kind'")
        return
    kind = spec["kind"]
    if kind not in SCENE_KINDS_CONFIG:
        problems.append(f"{where}: unknown scene kind {kind!r}")
        return
    if kind.endswith("_text") and not isinstance(spec.get("text"), str):
        problems.append(f"{where}: text scene prompts need a 'text' string")
    if kind == "learned" and not isinstance(spec.get("seed"), int):
        problems.append(f"{where}: learned scene prompts need an integer 'seed'")
    if kind == "image":
        for field in ("domain", "split"):
            if not isinstance(spec.get(field), str):
                problems.append(f"{where}: image scene prompts need a {field!r} string")
        if not isinstance(spec.get("index", 0), int):
            problems.append(f"{where}: image scene 'index' must be an integer")


def validate_config(cfg: dict) -> None:
    problems: list[str] = []

    if cfg.get("schema_version") != SCHEMA_VERSION:
        problems.append(f"schema_version: expected {SCHEMA_VERSION}, got {cfg.get('schema_version')!r}")
    mode = cfg.get("mode")
    if mode not in MODES:
        problems.append(f"mode: must be one of {MODES}, got {mode!r}")
    if not isinstance(cfg.get("seed", 0), int):
        problems.append("seed: must be an integer")

    if mode == "pretrain":
        if not isinstance(cfg.get("dataset_path"), str):
            problems.append("dataset_path: required for pretraining")
        sched = cfg.get("schedule", {})
        if not isinstance(sched, dict):
            problems.append("schedule: must be a mapping")
    elif mode in TRAIN_MODES:
        if not isinstance(cfg.get("dataset_path"), str):
            problems.append("dataset_path: required for training")
        if not isinstance(cfg.get("init_checkpoint"), str):
            problems.append("init_checkpoint: pretrained-backbone checkpoint required")
        train = cfg.get("train", {})
        if not isinstance(train, dict):
            problems.append("train: must be a mapping")
            train = {}
        if not isinstance(train.get("source_domain"), str):
            problems.append("train.source_domain: required")
        prompts = cfg.get("prompts", {})
        if mode == "train_dg":
            scenes = prompts.get("scenes")
            if not isinstance(scenes, list) or len(scenes) < 2:
                problems.append("prompts.scenes: prompt randomization requires K >= 2 scene prompts")
            else:
                if train.get("k") is not None and train["k"] != len(scenes):
                    problems.append(
                        f"train.k: {train['k']} does not match {len(scenes)} scene prompts"
                    )
                for i, spec in enumerate(scenes):
                    _check_scene_spec(spec, f"prompts.scenes[{i}]", problems, allow_none=False)
            _check_scene_spec(prompts.get("eval_scene"), "prompts.eval_scene",
                              problems, allow_none=True)
        else:
            _check_scene_spec(prompts.get("scene"), "prompts.scene", problems, allow_none=True)
    elif mode == "adapt_ttda":
        if not isinstance(cfg.get("dataset_path"), str):
            problems.append("dataset_path: required for adaptation")
        if not isinstance(cfg.get("init_checkpoint"), str):
            problems.append("init_checkpoint: trained-model checkpoint required")
        adapt = cfg.get("adapt", {})
        if not isinstance(adapt, dict):
            problems.append("adapt: must be a mapping")
            adapt = {}
        for field in ("domain", "split"):
            if not isinstance(adapt.get(field), str):
                problems.append(f"adapt.{field}: required")
        if "lr" in adapt and not (isinstance(adapt["lr"], (int, float)) and adapt["lr"] > 0):
            problems.append("adapt.lr: must be a positive number")
        if "threshold" in adapt and adapt["threshold"] is not None:
            t = adapt["threshold"]
            if not (isinstance(t, (int, float)) and 0.0 <= t < 1.0):
                problems.append("adapt.threshold: must lie in [0, 1)")
    elif mode == "eval":
        if not isinstance(cfg.get("dataset_path"), str):
            problems.append("dataset_path: required for evaluation")
        if not isinstance(cfg.get("init_checkpoint"), str):
            problems.append("init_checkpoint: trained-model checkpoint required")
        ev = cfg.get("eval", {})
        if not isinstance(ev, dict):
            problems.append("eval: must be a mapping")
            ev = {}
        for field in ("domain", "split"):
            if not isinstance(ev.get(field), str):
                problems.append(f"eval.{field}: required")
        _check_scene_spec(ev.get("scene"), "eval.scene", problems, allow_none=True)

    if problems:
        raise ConfigError(problems)


# --- default config builders (the calibrated experiment matrix) ---------


def default_pretrain_config(dataset_path: str, seed: int = 0) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "mode": "pretrain",
        "seed": seed,
        "dataset_path": dataset_path,
        "schedule": {"P": 100, "beta_start": 1e-4, "beta_end": 0.02},
        "pretrain": {"steps": 600, "batch_size": 8, "lr": 1e-3},
    }


def _scene_text(kind: str, word: str) -> dict:
    return {"kind": kind, "text": f"a {word} photo"}


def default_train_config(setting: str, dataset_path: str, backbone_checkpoint: str,
                         seed: int = 0, source_domain: str = "domainA",
                         target_domain: str = "domainC") -> dict:
    """One of the ablation settings: wo_cs, source_cs, target_cs, learned_cs,
    dg_t, dg_i, or oracle."""
    base = {
        "schema_version": SCHEMA_VERSION,
        "mode": "train_baseline",
        "setting": setting,
        "seed": seed,
        "dataset_path": dataset_path,
        "init_checkpoint": backbone_checkpoint,
        "train": {"steps": 500, "batch_size": 8, "lr": 1e-3, "momentum": 0.9,
                  "lam": 0.1, "head_width": 128, "source_domain": source_domain,
                  "split": "train"},
        "prompts": {"scene": None},
    }
    if setting == "wo_cs":
        pass
    elif setting == "source_cs":
        base["prompts"]["scene"] = _scene_text("source_text", source_domain)
    elif setting == "target_cs":
        base["prompts"]["scene"] = _scene_text("target_text", target_domain)
    elif setting == "learned_cs":
        base["prompts"]["scene"] = {"kind": "learned", "seed": seed}
    elif setting == "dg_t":
        base["mode"] = "train_dg"
        base["prompts"] = {"scenes": [
            _scene_text("source_text", source_domain),
            _scene_text("target_text", target_domain),
        ]}
    elif setting == "dg_i":
        base["mode"] = "train_dg"
        base["prompts"] = {"scenes": [
            _scene_text("source_text", source_domain),
            {"kind": "image", "domain": target_domain, "split": "train", "index": 0},
        ]}
    elif setting == "oracle":
        base["mode"] = "oracle_train"
        base["train"]["source_domain"] = target_domain
        base["prompts"]["scene"] = _scene_text("source_text", target_domain)
    else:
        raise ValueError(f"unknown setting {setting!r}")
    return base


def default_adapt_config(dataset_path: str, model_checkpoint: str, seed: int = 0,
                         target_domain: str = "domainC", split: str = "test") -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "mode": "adapt_ttda",
        "setting": "ttda",
        "seed": seed,
        "dataset_path": dataset_path,
        "init_checkpoint": model_checkpoint,
        "adapt": {"lr": 1e-2, "steps_per_image": 5, "threshold": None,
                  "episodic": False, "domain": target_domain, "split": split},
    }


def default_eval_config(dataset_path: str, model_checkpoint: str, seed: int = 0,
                        domain: str = "domainC", split: str = "test",
                        setting: str | None = None) -> dict:
    cfg = {
        "schema_version": SCHEMA_VERSION,
        "mode": "eval",
        "seed": seed,
        "dataset_path": dataset_path,
        "init_checkpoint": model_checkpoint,
        "eval": {"domain": domain, "split": split, "scene": None},
    }
    if setting:
        cfg["setting"] = setting
    return cfg
