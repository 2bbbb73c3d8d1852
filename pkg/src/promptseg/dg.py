"""Source-domain training of the segmentation head.

Baseline mode conditions every forward pass on one fixed prompt bundle.
Prompt-randomization mode runs K forward passes per step, one per scene
prompt, and adds a pairwise KL consistency penalty between the K predicted
distributions:

    L_total = sum_k CE(logits_k, labels) + lambda * L_c
    L_c     = sum_{p != q} mean_pixels KL(probs_p || probs_q)

The denoiser stays frozen throughout; only the head (and, for a learned
scene prompt, that single token) receives gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .backbone import DenoiserBackbone
from .data import SceneSample
from .head import HeadConfig, SegmentationHead, ce_loss
from .model import extraction_forward, extraction_noise
from .prompts import CategoryPrompt, ScenePrompt
from .schedule import NoiseSchedule
from .utils import derive_seed, seed_all


@dataclass
class DGConfig:
    K: int = 1
    lam: float = 0.1
    steps: int = 500
    batch_size: int = 8
    lr: float = 1e-3
    momentum: float = 0.9
    seed: int = 0
    head_width: int = 128
    p_feat: int = 1
    # seed of the frozen extraction-noise pattern; None extracts from the
    # scaled clean image
    extraction_noise_seed: int | None = None
    cosine_lr: bool = True
    # gradient flow through the KL terms: "none" keeps both sides live,
    # "first"/"second" detaches that argument of every ordered pair
    consistency_detach: str = "none"

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.consistency_detach not in ("none", "first", "second"):
            raise ValueError(f"bad consistency_detach {self.consistency_detach!r}")

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class TrainState:
    head: SegmentationHead
    history: list[dict]
    scene_tokens: list[torch.Tensor] | None
    optimizer_state: dict = field(default_factory=dict)
    step: int = 0


def consistency_loss(prob_maps: list[torch.Tensor]) -> torch.Tensor:
    """Pairwise KL over K probability maps, summed over ordered pairs and
    averaged over pixels. Zero iff all maps coincide."""
    K = len(prob_maps)
    if K < 2:
        raise ValueError("consistency needs at least two probability maps")
    shapes = {tuple(m.shape) for m in prob_maps}
    if len(shapes) != 1:
        raise ValueError(f"probability maps disagree in shape: {shapes}")
    total = None
    for i in range(K):
        for j in range(K):
            if i == j:
                continue
            p, q = prob_maps[i], prob_maps[j]
            kl = (torch.xlogy(p, p) - torch.xlogy(p, q)).sum(dim=-3).mean()
            total = kl if total is None else total + kl
    return total


def _consistency_from_logits(logit_maps: list[torch.Tensor], detach: str = "none") -> torch.Tensor:
    """Numerically stable variant used inside the training loop."""
    K = len(logit_maps)
    logp = [torch.log_softmax(m, dim=-3) for m in logit_maps]
    probs = [lp.exp() for lp in logp]
    total = None
    for i in range(K):
        for j in range(K):
            if i == j:
                continue
            p, lp, lq = probs[i], logp[i], logp[j]
            if detach == "first":
                p, lp = p.detach(), lp.detach()
            elif detach == "second":
                lq = lq.detach()
            kl = (p * (lp - lq)).sum(dim=-3).mean()
            total = kl if total is None else total + kl
    return total


def total_loss(logit_maps: list[torch.Tensor], labels: torch.Tensor, lam: float) -> torch.Tensor:
    """Sum of the K cross-entropy terms plus the weighted consistency loss."""
    if len(logit_maps) == 0:
        raise ValueError("need at least one logit map")
    ces = [ce_loss(m, labels) for m in logit_maps]
    if len(ces) == 1:
        return ces[0]
    ce_sum = ces[0]
    for ce in ces[1:]:
        ce_sum = ce_sum + ce
    if lam == 0.0:
        return ce_sum
    return ce_sum + lam * _consistency_from_logits(logit_maps)


class _FeatureCache:
    """Frozen-backbone features for every (sample, bundle) pair, extracted
    once so head training never re-runs the denoiser."""

    def __init__(self, backbone, schedule, images: torch.Tensor,
                 token_sets: list[torch.Tensor], p_feat: int,
                 eps: torch.Tensor | None = None, batch_size: int = 16):
        self.per_bundle = []
        backbone.eval()
        with torch.no_grad():
            for tokens in token_sets:
                feats, attns = None, None
                for i in range(0, images.shape[0], batch_size):
                    out = extraction_forward(backbone, images[i:i + batch_size],
                                             tokens, schedule, p_feat, eps)
                    if feats is None:
                        feats = [[f] for f in out.features]
                        attns = [[a] for a in out.attentions]
                    else:
                        for s in range(len(feats)):
                            feats[s].append(out.features[s])
                            attns[s].append(out.attentions[s])
                self.per_bundle.append((
                    [torch.cat(f, dim=0) for f in feats],
                    [torch.cat(a, dim=0) for a in attns],
                ))

    def batch(self, k: int, idx: torch.Tensor):
        feats, attns = self.per_bundle[k]
        return [f[idx] for f in feats], [a[idx] for a in attns]


def _lr_at(cfg: DGConfig, step: int) -> float:
    if not cfg.cosine_lr or cfg.steps <= 1:
        return cfg.lr
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / cfg.steps))


def _train(source: list[SceneSample], backbone: DenoiserBackbone, schedule: NoiseSchedule,
           cat: CategoryPrompt, scenes: list[ScenePrompt] | None, cfg: DGConfig) -> TrainState:
    if not source:
        raise ValueError("empty training dataset")
    backbone.verify_frozen()
    cat_tokens = cat.as_tensor()
    cat_before = cat_tokens.clone()

    # token set per scene prompt; a learned scene token trains with the head
    trainable_scene = None
    if scenes is None:
        token_sets = [cat_tokens]
    else:
        token_sets = []
        for sp in scenes:
            vec = sp.token.vector.detach().clone()
            if sp.kind == "learned":
                if trainable_scene is not None:
                    raise ValueError("at most one learned scene prompt per run")
                trainable_scene = torch.nn.Parameter(vec)
                token_sets.append(trainable_scene)
            else:
                token_sets.append(vec)
    K = len(token_sets)

    seed_all(derive_seed(cfg.seed, "head-init"))
    M = cat.C + (0 if scenes is None else 1)
    head = SegmentationHead(HeadConfig(
        feature_channels=backbone.feature_channels, num_tokens=M,
        num_classes=cat.C, width=cfg.head_width,
    ))

    images = torch.stack([torch.from_numpy(s.image) for s in source])
    labels = torch.stack([torch.from_numpy(s.labels.astype(np.int64)) for s in source])
    eps = extraction_noise(images.shape[1:], cfg.extraction_noise_seed)

    cache = None
    if trainable_scene is None:
        full_sets = [torch.cat([cat_tokens, t[None]], dim=0) for t in token_sets] \
            if scenes is not None else [cat_tokens]
        cache = _FeatureCache(backbone, schedule, images, full_sets, cfg.p_feat, eps)

    params = list(head.parameters()) + ([trainable_scene] if trainable_scene is not None else [])
    opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum)
    order_rng = np.random.default_rng(derive_seed(cfg.seed, "head-order") % 2**32)

    n = len(source)
    history = []
    head.train()
    for step in range(cfg.steps):
        for group in opt.param_groups:
            group["lr"] = _lr_at(cfg, step)
        take = min(cfg.batch_size, n)
        idx = torch.from_numpy(order_rng.choice(n, size=take, replace=False))
        batch_labels = labels[idx]

        logit_maps = []
        for k in range(K):
            if cache is not None:
                feats, attns = cache.batch(k, idx)
            else:
                tokens = torch.cat([cat_tokens, token_sets[k][None]], dim=0) \
                    if scenes is not None else cat_tokens
                out = extraction_forward(backbone, images[idx], tokens, schedule,
                                         cfg.p_feat, eps)
                feats, attns = out.features, out.attentions
            logit_maps.append(head(feats, attns))

        ces = [ce_loss(m, batch_labels) for m in logit_maps]
        lc = _consistency_from_logits(logit_maps, cfg.consistency_detach) if K >= 2 else None
        loss = ces[0]
        for ce in ces[1:]:
            loss = loss + ce
        if lc is not None and cfg.lam != 0.0:
            loss = loss + cfg.lam * lc

        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite training loss at step {step}; aborting")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append({
            "step": step,
            "ce": [float(c.detach()) for c in ces],
            "lc": float(lc.detach()) if lc is not None else 0.0,
            "total": float(loss.detach()),
            "lr": _lr_at(cfg, step),
        })

    backbone.verify_frozen()
    if not torch.equal(cat_tokens, cat_before):
        raise RuntimeError("category tokens changed during training")

    final_scenes = None
    if scenes is not None:
        final_scenes = [t.detach().clone() for t in token_sets]
    return TrainState(head=head, history=history, scene_tokens=final_scenes,
                      optimizer_state=opt.state_dict(), step=cfg.steps)


def train_baseline(source: list[SceneSample], backbone: DenoiserBackbone,
                   schedule: NoiseSchedule, cat: CategoryPrompt,
                   scene: ScenePrompt | None, cfg: DGConfig) -> TrainState:
    """Single-prompt training; scene=None drops the scene token entirely."""
    if cfg.K != 1:
        raise ValueError("baseline training uses K=1")
    scenes = None if scene is None else [scene]
    return _train(source, backbone, schedule, cat, scenes, cfg)


def train_prompt_randomization(source: list[SceneSample], backbone: DenoiserBackbone,
                               schedule: NoiseSchedule, cat: CategoryPrompt,
                               scenes: list[ScenePrompt], cfg: DGConfig) -> TrainState:
    """K-prompt training with the pairwise consistency penalty."""
    if len(scenes) < 2:
        raise ValueError("prompt randomization requires K >= 2 scene prompts")
    if cfg.K != len(scenes):
        raise ValueError(f"config K={cfg.K} but {len(scenes)} scene prompts given")
    return _train(source, backbone, schedule, cat, list(scenes), cfg)
