"""Test-time domain adaptation by tuning the scene token alone.

For each target image, the current model produces a pseudo-label (per-pixel
argmax, optionally confidence-thresholded); the scene token then takes
gradient-descent steps on the cross entropy against that pseudo-label. The
denoiser, head, and category tokens are verified bit-frozen at every step,
and only the N entries of the scene token are ever trainable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .head import ce_loss
from .metrics import IGNORE_INDEX, ConfusionMatrix, accumulate, iou
from .model import SegModel
from .utils import module_digest, params_digest


@dataclass
class TTDAConfig:
    lr: float = 1e-2
    steps_per_image: int = 5
    threshold: float | None = None
    seed: int = 0
    episodic: bool = False

    def __post_init__(self):
        # lr 0 is the degenerate null update, kept legal for testing
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.steps_per_image < 1:
            raise ValueError("steps_per_image must be >= 1")
        if self.threshold is not None and not (0.0 <= self.threshold < 1.0):
            raise ValueError("threshold must lie in [0, 1)")

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class AdaptState:
    scene_token: torch.Tensor
    frozen_digests: dict[str, str]
    log: list[dict] = field(default_factory=list)


def pseudo_label(logits: torch.Tensor, threshold: float | None = None) -> torch.Tensor:
    """Argmax class map; exact ties resolve to the smaller class index.

    With a threshold, pixels whose top softmax probability falls below it
    are marked ignore.
    """
    if threshold is not None and not (0.0 <= threshold < 1.0):
        raise ValueError("threshold must lie in [0, 1)")
    if not bool(torch.isfinite(logits).all()):
        raise ValueError("non-finite logits")
    C = logits.shape[0]
    maxv = logits.max(dim=0).values
    out = torch.full(logits.shape[1:], -1, dtype=torch.long)
    for c in range(C):
        hit = (logits[c] == maxv) & (out < 0)
        out[hit] = c
    if threshold is not None:
        top_prob = torch.softmax(logits, dim=0).max(dim=0).values
        out[top_prob < threshold] = IGNORE_INDEX
    return out


def _check_frozen(model: SegModel, digests: dict[str, str]) -> None:
    model.backbone.verify_frozen()
    if module_digest(model.head) != digests["head"]:
        raise RuntimeError("head parameters changed during adaptation")
    if params_digest({"category_tokens": model.category_tokens}) != digests["category_tokens"]:
        raise RuntimeError("category tokens changed during adaptation")


def _assert_adaptation_surface(model: SegModel, scene: torch.Tensor) -> None:
    trainable = [p for p in model.backbone.parameters() if p.requires_grad]
    trainable += [p for p in model.head.parameters() if p.requires_grad]
    if trainable:
        raise RuntimeError("backbone/head must not require grad during adaptation")
    n = scene.numel()
    if n != model.backbone.config.token_dim:
        raise RuntimeError(f"scene token has {n} entries, expected the token dimension")


def adapt_step(image: torch.Tensor, state: AdaptState, model: SegModel,
               cfg: TTDAConfig) -> AdaptState:
    """One descent step of the scene token on the current pseudo-label."""
    scene = state.scene_token.detach().clone().requires_grad_(True)
    _assert_adaptation_surface(model, scene)

    logits = model.logits(image[None], scene_override=scene)[0]
    target = pseudo_label(logits.detach(), cfg.threshold)
    entry = {"loss": None, "grad_norm": 0.0, "displacement": 0.0, "skipped": False}
    if not bool((target != IGNORE_INDEX).any()):
        entry["skipped"] = True
        new_token = state.scene_token
    else:
        loss = ce_loss(logits, target)
        (grad,) = torch.autograd.grad(loss, scene)
        new_token = (scene - cfg.lr * grad).detach()
        entry["loss"] = float(loss.detach())
        entry["grad_norm"] = float(grad.norm())
        entry["displacement"] = float((new_token - state.scene_token).norm())

    _check_frozen(model, state.frozen_digests)
    return AdaptState(scene_token=new_token, frozen_digests=state.frozen_digests,
                      log=state.log + [entry])


def adapt(target_stream: list[np.ndarray] | list[torch.Tensor], model: SegModel,
          cfg: TTDAConfig, labels_for_scoring: list[np.ndarray] | None = None
          ) -> tuple[AdaptState, dict]:
    """Single pass over the unlabeled target stream, state carried across
    images (episodic mode resets the token per image).

    Returns the final state plus per-image predictions made before and after
    the token updates at each image.
    """
    if len(target_stream) == 0:
        raise ValueError("empty target stream")
    if model.scene_token is None:
        raise ValueError("adaptation requires a model trained with a scene prompt")

    model.head.requires_grad_(False)
    model.head.eval()
    digests = {
        "backbone": model.backbone.frozen_digest,
        "head": module_digest(model.head),
        "category_tokens": params_digest({"category_tokens": model.category_tokens}),
    }
    init_token = model.scene_token.detach().clone()
    state = AdaptState(scene_token=init_token.clone(), frozen_digests=digests)

    pre_preds, post_preds = [], []
    running_cm = ConfusionMatrix(model.num_classes) if labels_for_scoring else None
    per_image = []
    for i, img in enumerate(target_stream):
        if isinstance(img, np.ndarray):
            img = torch.from_numpy(img)
        if cfg.episodic:
            state = AdaptState(scene_token=init_token.clone(), frozen_digests=digests,
                               log=state.log)

        with torch.no_grad():
            pre_logits = model.logits(img[None], scene_override=state.scene_token)[0]
        pre_preds.append(pseudo_label(pre_logits).numpy().astype(np.uint8))

        first = len(state.log)
        for _ in range(cfg.steps_per_image):
            state = adapt_step(img, state, model, cfg)

        with torch.no_grad():
            post_logits = model.logits(img[None], scene_override=state.scene_token)[0]
        post = pseudo_label(post_logits).numpy().astype(np.uint8)
        post_preds.append(post)

        steps = state.log[first:]
        record = {
            "image": i,
            "pre_loss": steps[0]["loss"],
            "post_loss": steps[-1]["loss"],
            "grad_norms": [s["grad_norm"] for s in steps],
            "token_displacement": float((state.scene_token - init_token).norm()),
            "skipped_steps": sum(1 for s in steps if s["skipped"]),
        }
        if running_cm is not None:
            accumulate(running_cm, post, labels_for_scoring[i])
            record["running_miou"] = iou(running_cm)[1]
        per_image.append(record)

    _check_frozen(model, digests)
    results = {
        "pre_predictions": pre_preds,
        "post_predictions": post_preds,
        "per_image": per_image,
    }
    return state, results
