"""Experiment runner: executes one validated config (pretrain / train /
adapt / eval), writing self-describing artifacts into its own run directory:
resolved config, config digest, structured logs, checkpoints, metric CSVs,
and loss-curve plots."""

from __future__ import annotations

import json
import subprocess
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import load_model, load_pretrained, save_model, save_pretrained
from .config import config_digest, validate_config
from .data import load_samples, read_dataset_spec
from .dg import DGConfig, train_baseline, train_prompt_randomization
from .metrics import ConfusionMatrix, accumulate, iou
from .model import SegModel
from .pretrain import PretrainConfig, pretrain_backbone
from .prompts import (
    ImagePromptEncoder,
    ScenePrompt,
    build_category_prompt,
    make_scene_prompt,
)
from .schedule import LatentImage, build_schedule
from .ttda import TTDAConfig, adapt, pseudo_label
from .utils import seed_all


class RunError(RuntimeError):
    pass


def code_version() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, timeout=5,
        ).stdout.strip()
    except Exception:
        rev = ""
    return f"promptseg-{__version__}" + (f"+{rev}" if rev else "")


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def _plot_curves(path: Path, series: dict[str, list[float]], title: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for label, values in series.items():
        ax.plot(values, label=label)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _prepare_run_dir(out_dir: Path, cfg: dict, resume: bool, force: bool) -> None:
    digest = config_digest(cfg)
    digest_file = out_dir / "config_digest.txt"
    if out_dir.exists() and any(out_dir.iterdir()):
        if resume:
            if digest_file.exists():
                old = digest_file.read_text().strip()
                if old != digest:
                    raise RunError(
                        f"refusing to resume into {out_dir}: config digest mismatch "
                        f"({old[:12]}... != {digest[:12]}...)"
                    )
            # matching digest: re-running is safe (outputs are deterministic)
        elif not force:
            raise RunError(f"{out_dir} exists and is not empty (use --resume or --force)")
    out_dir.mkdir(parents=True, exist_ok=True)
    digest_file.write_text(digest + "\n")
    _write_json(out_dir / "resolved_config.json", cfg)
    _write_json(out_dir / "run_meta.json", {
        "code_version": code_version(),
        "config_digest": digest,
    })


def _images_tensor(samples) -> torch.Tensor:
    return torch.stack([torch.from_numpy(s.image) for s in samples])


def _predicted_labels(model: SegModel, images: torch.Tensor,
                      scene_override: torch.Tensor | None = None) -> list[np.ndarray]:
    logits = model.predict_batched(images, scene_override=scene_override)
    return [pseudo_label(l).numpy().astype(np.uint8) for l in logits]


def _score(preds, gts, num_classes: int):
    cm = ConfusionMatrix(num_classes)
    for p, g in zip(preds, gts):
        accumulate(cm, p, g)
    return iou(cm)


def _miou_csv_row(class_names, per_class, miou) -> tuple[str, str]:
    header = ",".join(["miou"] + [f"iou_{n}" for n in class_names])
    row = ",".join(f"{100.0 * v:.4f}" if np.isfinite(v) else "nan"
                   for v in [miou] + list(per_class))
    return header, row


def resolve_scene_spec(spec: dict | None, encoder, dataset_path: str | None = None,
                       image_encoder: ImagePromptEncoder | None = None
                       ) -> ScenePrompt | None:
    """Turn a config scene spec into a ScenePrompt."""
    if spec is None:
        return None
    kind = spec["kind"]
    if kind.endswith("_text"):
        return make_scene_prompt(kind, spec["text"], text_encoder=encoder)
    if kind == "learned":
        return make_scene_prompt(kind, spec["seed"], text_encoder=encoder)
    if kind == "image":
        if image_encoder is None or dataset_path is None:
            raise RunError("image scene prompt needs a dataset and a frozen backbone")
        samples = load_samples(dataset_path, spec["split"], spec["domain"])
        image = LatentImage(torch.from_numpy(samples[spec.get("index", 0)].image))
        return make_scene_prompt(kind, image, image_encoder=image_encoder)
    raise RunError(f"unknown scene kind {kind!r}")


@dataclass
class RunResult:
    out_dir: Path
    artifacts: dict


def run(cfg: dict, out_dir: str | Path, resume: bool = False, force: bool = False) -> RunResult:
    validate_config(cfg)
    out = Path(out_dir if out_dir is not None else cfg.get("out_dir"))
    torch.set_num_threads(int(cfg.get("torch_num_threads", 2)))
    _prepare_run_dir(out, cfg, resume, force)
    seed_all(cfg.get("seed", 0))

    mode = cfg["mode"]
    if mode == "pretrain":
        artifacts = _run_pretrain(cfg, out)
    elif mode in ("train_baseline", "train_dg", "oracle_train"):
        artifacts = _run_train(cfg, out)
    elif mode == "adapt_ttda":
        artifacts = _run_adapt(cfg, out)
    elif mode == "eval":
        artifacts = _run_eval(cfg, out)
    else:
        raise RunError(f"unhandled mode {mode!r}")
    return RunResult(out_dir=out, artifacts=artifacts)


def _run_pretrain(cfg: dict, out: Path) -> dict:
    from .backbone import BackboneConfig

    spec = read_dataset_spec(cfg["dataset_path"])
    samples = load_samples(cfg["dataset_path"], cfg.get("pretrain", {}).get("split", "train"))
    sched_cfg = cfg.get("schedule", {})
    schedule = build_schedule(
        sched_cfg.get("P", 100), sched_cfg.get("beta_start", 1e-4),
        sched_cfg.get("beta_end", 0.02),
    )
    p_cfg = cfg.get("pretrain", {})
    pcfg = PretrainConfig(
        steps=p_cfg.get("steps", 600), batch_size=p_cfg.get("batch_size", 8),
        lr=p_cfg.get("lr", 1e-3), seed=cfg.get("seed", 0),
        extra_words=tuple(p_cfg.get("extra_words", PretrainConfig.extra_words)),
        scene_drop_prob=p_cfg.get("scene_drop_prob", PretrainConfig.scene_drop_prob),
        scene_mismatch_prob=p_cfg.get("scene_mismatch_prob",
                                      PretrainConfig.scene_mismatch_prob),
    )
    bcfg = BackboneConfig.from_json(cfg["backbone"]) if "backbone" in cfg else BackboneConfig()
    result = pretrain_backbone(samples, schedule, pcfg, bcfg,
                               class_names=list(spec.layout.class_names))

    ckpt = out / "backbone.ckpt"
    save_pretrained(ckpt, result.backbone, result.text_encoder,
                    schedule_params={"P": schedule.P,
                                     "beta_start": sched_cfg.get("beta_start", 1e-4),
                                     "beta_end": sched_cfg.get("beta_end", 0.02)},
                    extra_meta={"probe": result.probe, "seed": cfg.get("seed", 0)})
    _write_jsonl(out / "pretrain_log.jsonl", result.history)
    _write_json(out / "probe.json", result.probe)
    _plot_curves(out / "loss_curve.png",
                 {"diffusion_loss": [h["loss"] for h in result.history]}, "pretraining")
    return {"checkpoint": str(ckpt), "probe": result.probe}


def _run_train(cfg: dict, out: Path) -> dict:
    backbone, encoder, schedule, _ = load_pretrained(cfg["init_checkpoint"])
    spec = read_dataset_spec(cfg["dataset_path"])
    class_names = list(spec.layout.class_names)
    cat = build_category_prompt(encoder, class_names)

    t = cfg.get("train", {})
    source = load_samples(cfg["dataset_path"], t.get("split", "train"), t["source_domain"])

    prompts_cfg = cfg.get("prompts", {})
    image_encoder = ImagePromptEncoder(
        backbone, schedule, cat.as_tensor(),
        p_feat=t.get("p_feat", 1),
        seed=prompts_cfg.get("image_projection_seed", 0),
    )

    mode = cfg["mode"]
    dg_kwargs = dict(
        lam=t.get("lam", 0.1), steps=t.get("steps", 500),
        batch_size=t.get("batch_size", 8), lr=t.get("lr", 1e-3),
        momentum=t.get("momentum", 0.9), seed=cfg.get("seed", 0),
        head_width=t.get("head_width", 128), p_feat=t.get("p_feat", 1),
        extraction_noise_seed=t.get("extraction_noise_seed"),
        cosine_lr=t.get("cosine_lr", True),
        consistency_detach=t.get("consistency_detach", "none"),
    )
    if mode == "train_dg":
        scenes = [resolve_scene_spec(s, encoder, cfg["dataset_path"], image_encoder)
                  for s in prompts_cfg["scenes"]]
        dgc = DGConfig(K=len(scenes), **dg_kwargs)
        state = train_prompt_randomization(source, backbone, schedule, cat, scenes, dgc)
        eval_spec = prompts_cfg.get("eval_scene")
        if eval_spec is not None:
            eval_scene = resolve_scene_spec(eval_spec, encoder, cfg["dataset_path"],
                                            image_encoder).token.vector
        else:
            eval_scene = state.scene_tokens[-1]
        scene_desc = [s.descriptor for s in scenes]
    else:
        scene = resolve_scene_spec(prompts_cfg.get("scene"), encoder,
                                   cfg["dataset_path"], image_encoder)
        dgc = DGConfig(K=1, **dg_kwargs)
        state = train_baseline(source, backbone, schedule, cat, scene, dgc)
        eval_scene = state.scene_tokens[0] if state.scene_tokens else None
        scene_desc = [scene.descriptor] if scene is not None else []

    from .model import extraction_noise

    model = SegModel(
        backbone=backbone, schedule=schedule, head=state.head,
        category_tokens=cat.as_tensor(), scene_token=eval_scene,
        class_names=tuple(class_names), p_feat=t.get("p_feat", 1),
        extraction_eps=extraction_noise(source[0].image.shape,
                                        t.get("extraction_noise_seed")),
        meta={"schedule": {"P": schedule.P,
                           "beta_start": float(1.0 - schedule.alphas[0]),
                           "beta_end": float(1.0 - schedule.alphas[-1])}},
    )
    ckpt = out / "model.ckpt"
    save_model(ckpt, model, encoder, extra_meta={
        "mode": mode, "setting": cfg.get("setting", mode), "seed": cfg.get("seed", 0),
        "scene_descriptors": scene_desc, "source_domain": t["source_domain"],
    })
    _write_jsonl(out / "train_log.jsonl", state.history)
    series = {"total": [h["total"] for h in state.history]}
    if state.history and len(state.history[0]["ce"]) > 1:
        series["consistency"] = [h["lc"] for h in state.history]
    _plot_curves(out / "loss_curve.png", series, f"head training ({cfg.get('setting', mode)})")
    return {"checkpoint": str(ckpt)}


def _run_adapt(cfg: dict, out: Path) -> dict:
    model, encoder, manifest = load_model(cfg["init_checkpoint"])
    a = cfg["adapt"]
    samples = load_samples(cfg["dataset_path"], a["split"], a["domain"])
    images = [s.image for s in samples]
    gts = [s.labels for s in samples]

    tcfg = TTDAConfig(
        lr=a.get("lr", 1e-2), steps_per_image=a.get("steps_per_image", 5),
        threshold=a.get("threshold"), seed=cfg.get("seed", 0),
        episodic=a.get("episodic", False),
    )
    state, results = adapt(images, model, tcfg, labels_for_scoring=gts)

    frozen_preds = _predicted_labels(model, _images_tensor(samples))
    _, miou_frozen = _score(frozen_preds, gts, model.num_classes)
    _, miou_adapted = _score(results["post_predictions"], gts, model.num_classes)

    ckpt = out / "adapted.ckpt"
    from .checkpoint import module_arrays, save_checkpoint
    arrays = {}
    arrays.update(module_arrays(model.backbone, "backbone"))
    arrays.update(module_arrays(model.head, "head"))
    arrays.update(module_arrays(encoder, "text_encoder"))
    arrays["prompts/category_tokens"] = model.category_tokens.numpy()
    arrays["prompts/scene_token"] = model.scene_token.numpy()
    arrays["ttda/scene_token"] = state.scene_token.numpy()
    if model.extraction_eps is not None:
        arrays["extraction/eps"] = model.extraction_eps.numpy()
    meta = dict(manifest["meta"])
    meta.update({
        "kind": "model", "setting": cfg.get("setting", "ttda"),
        "adapted_from": cfg["init_checkpoint"], "seed": cfg.get("seed", 0),
    })
    save_checkpoint(ckpt, arrays, meta)

    _write_jsonl(out / "adapt_log.jsonl", results["per_image"])
    header = "domain,split,seed,miou_frozen,miou_adapted,delta"
    row = (f"{a['domain']},{a['split']},{cfg.get('seed', 0)},"
           f"{100 * miou_frozen:.4f},{100 * miou_adapted:.4f},"
           f"{100 * (miou_adapted - miou_frozen):.4f}")
    (out / "metrics.csv").write_text(header + "\n" + row + "\n")
    losses = [r["post_loss"] for r in results["per_image"] if r["post_loss"] is not None]
    if losses:
        _plot_curves(out / "loss_curve.png", {"post_update_loss": losses}, "adaptation")
    return {"checkpoint": str(ckpt), "miou_frozen": 100 * miou_frozen,
            "miou_adapted": 100 * miou_adapted}


def _run_eval(cfg: dict, out: Path) -> dict:
    model, encoder, _ = load_model(cfg["init_checkpoint"])
    e = cfg["eval"]
    samples = load_samples(cfg["dataset_path"], e["split"], e["domain"])

    scene_override = None
    if e.get("scene") is not None:
        image_encoder = ImagePromptEncoder(model.backbone, model.schedule,
                                           model.category_tokens, p_feat=model.p_feat)
        scene_override = resolve_scene_spec(
            e["scene"], encoder, cfg["dataset_path"], image_encoder
        ).token.vector

    preds = _predicted_labels(model, _images_tensor(samples), scene_override)
    gts = [s.labels for s in samples]
    per_class, miou = _score(preds, gts, model.num_classes)

    header, row = _miou_csv_row(model.class_names, per_class, miou)
    full_header = "setting,domain,split,seed," + header
    full_row = (f"{cfg.get('setting', model.meta.get('setting', 'eval'))},"
                f"{e['domain']},{e['split']},{cfg.get('seed', 0)}," + row)
    (out / "eval.csv").write_text(full_header + "\n" + full_row + "\n")
    return {"miou": 100 * miou, "per_class": [100 * v for v in per_class]}


# --- report -------------------------------------------------------------

SETTING_ORDER = ["wo_cs", "target_cs", "learned_cs", "source_cs", "ttda",
                 "dg_t", "dg_i", "oracle"]


def _read_csv(path: Path) -> list[dict]:
    lines = path.read_text().strip().splitlines()
    header = lines[0].split(",")
    return [dict(zip(header, line.split(","))) for line in lines[1:]]


def report(run_dirs: list[str | Path], out_path: str | Path) -> dict:
    """Merge eval/adapt metrics across seeds into one ablation table."""
    rows = []
    missing = []
    for d in run_dirs:
        d = Path(d)
        eval_csv = d / "eval.csv"
        adapt_csv = d / "metrics.csv"
        if eval_csv.exists():
            for r in _read_csv(eval_csv):
                rows.append({"setting": r["setting"], "seed": int(r["seed"]),
                             "domain": r["domain"], "miou": float(r["miou"])})
        elif adapt_csv.exists():
            for r in _read_csv(adapt_csv):
                rows.append({"setting": "ttda", "seed": int(r["seed"]),
                             "domain": r["domain"], "miou": float(r["miou_adapted"])})
        else:
            missing.append(str(d))
    if missing:
        raise RunError("missing eval artifacts in: " + ", ".join(missing))

    by_setting: dict[str, list[float]] = {}
    for r in rows:
        by_setting.setdefault(r["setting"], []).append(r["miou"])

    def order_key(s):
        return (SETTING_ORDER.index(s), s) if s in SETTING_ORDER else (len(SETTING_ORDER), s)

    settings = sorted(by_setting, key=order_key)
    summary = {}
    csv_lines = ["setting,n_seeds,miou_mean,miou_std"]
    md = ["| setting | seeds | mIoU (mean ± std) |", "|---|---|---|"]
    for s in settings:
        vals = np.asarray(by_setting[s])
        mean, std = float(vals.mean()), float(vals.std(ddof=0))
        summary[s] = {"mean": mean, "std": std, "n": len(vals)}
        csv_lines.append(f"{s},{len(vals)},{mean:.4f},{std:.4f}")
        md.append(f"| {s} | {len(vals)} | {mean:.2f} ± {std:.2f} |")

    out_path = Path(out_path)
    out_path.mkdir(parents=True, exist_ok=True)
    (out_path / "report.csv").write_text("\n".join(csv_lines) + "\n")
    (out_path / "report.md").write_text("\n".join(md) + "\n")
    return summary
