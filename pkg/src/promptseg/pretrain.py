"""Diffusion pretraining of the denoiser on the multi-domain corpus.

Each image is captioned with its domain's scene template plus the category
templates of the classes present in its label map; the caption tokens come
from the jointly-trained word-embedding table. Timesteps are sampled
uniformly, the network regresses the injected noise, and both the denoiser
and the text encoder are frozen afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .backbone import BackboneConfig, DenoiserBackbone
from .data import SceneSample
from .prompts import (
    CATEGORY_TEMPLATE,
    DEFAULT_EXTRA_WORDS,
    SCENE_TEMPLATE,
    TextPromptEncoder,
    build_vocabulary,
)
from .schedule import NoiseSchedule, diffusion_loss
from .utils import derive_seed, seed_all


@dataclass
class PretrainConfig:
    steps: int = 600
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    probe_size: int = 18
    extra_words: tuple[str, ...] = DEFAULT_EXTRA_WORDS
    # stochastic caption policy: with these probabilities a sample's scene
    # token is dropped or swapped for another domain's, so that scene-less
    # bundles and mismatched (image, scene) pairings stay in-distribution
    # for the downstream ablations
    scene_drop_prob: float = 0.1
    scene_mismatch_prob: float = 0.25

    def __post_init__(self):
        if not (0 <= self.scene_drop_prob and 0 <= self.scene_mismatch_prob
                and self.scene_drop_prob + self.scene_mismatch_prob <= 1):
            raise ValueError("caption policy probabilities must be in [0,1] and sum to <= 1")

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["extra_words"] = list(self.extra_words)
        return d


@dataclass
class PretrainResult:
    backbone: DenoiserBackbone
    text_encoder: TextPromptEncoder
    history: list[dict] = field(default_factory=list)
    probe: dict = field(default_factory=dict)


def build_pretrain_modules(
    config: PretrainConfig,
    backbone_config: BackboneConfig,
    class_names: list[str],
    domain_names: list[str],
) -> tuple[DenoiserBackbone, TextPromptEncoder]:
    """Seeded construction so initialization is reproducible bit-for-bit."""
    seed_all(derive_seed(config.seed, "pretrain-init"))
    vocab = build_vocabulary(class_names, domain_names, config.extra_words)
    backbone = DenoiserBackbone(backbone_config)
    encoder = TextPromptEncoder(vocab, backbone_config.token_dim)
    return backbone, encoder


def _caption_tokens(encoder: TextPromptEncoder, class_names, present: tuple[int, ...],
                    scene_word: str | None) -> torch.Tensor:
    """Differentiable caption bundle: present-category tokens (+ scene token)."""
    rows = [encoder.encode_template(CATEGORY_TEMPLATE.format(name=class_names[j]))
            for j in present]
    if scene_word is not None:
        rows.append(encoder.encode_template(SCENE_TEMPLATE.format(scene=scene_word)))
    return torch.stack(rows)


def _present_classes(sample: SceneSample, num_classes: int) -> tuple[int, ...]:
    return tuple(sorted(int(c) for c in np.unique(sample.labels) if c < num_classes))


def _batch_loss(backbone, encoder, class_names, captions, z0, p, eps, schedule):
    """Diffusion loss over a batch; captions is one (scene_word | None,
    present_classes) pair per sample, and samples sharing a caption bundle
    are processed together."""
    a_bar = schedule.alpha_bars.to(z0.dtype)[p][:, None, None, None]
    z_p = torch.sqrt(a_bar) * z0 + torch.sqrt(1.0 - a_bar) * eps

    groups: dict[tuple, list[int]] = {}
    for i, key in enumerate(captions):
        groups.setdefault(key, []).append(i)

    total = 0.0
    B = len(captions)
    for (scene_word, present), idx in sorted(groups.items(),
                                             key=lambda kv: (kv[0][0] or "", kv[0][1])):
        tokens = _caption_tokens(encoder, class_names, present, scene_word)
        eps_hat, _ = backbone(z_p[idx], p[idx], tokens)
        total = total + (len(idx) / B) * diffusion_loss(eps[idx], eps_hat)
    return total


def _assign_scene_words(batch, domain_names, cfg: PretrainConfig,
                        g: torch.Generator) -> list[str | None]:
    """Per-sample scene word under the stochastic caption policy."""
    words: list[str | None] = []
    u = torch.rand(len(batch), generator=g)
    for i, s in enumerate(batch):
        if float(u[i]) < cfg.scene_drop_prob:
            words.append(None)
        elif float(u[i]) < cfg.scene_drop_prob + cfg.scene_mismatch_prob and len(domain_names) > 1:
            others = [d for d in domain_names if d != s.domain]
            pick = int(torch.randint(len(others), (1,), generator=g))
            words.append(others[pick])
        else:
            words.append(s.domain)
    return words


def _probe_batches(samples_by_domain: dict[str, list[SceneSample]], config, schedule):
    """A fixed evaluation set: stratified samples, fixed timesteps and noise."""
    g = torch.Generator().manual_seed(derive_seed(config.seed, "pretrain-probe"))
    domains = sorted(samples_by_domain)
    picks = []
    i = 0
    while len(picks) < config.probe_size:
        dom = domains[i % len(domains)]
        pool = samples_by_domain[dom]
        picks.append(pool[(i // len(domains)) % len(pool)])
        i += 1
    z0 = torch.stack([torch.from_numpy(s.image) for s in picks])
    p = torch.linspace(0, schedule.P - 1, len(picks)).round().long()
    eps = torch.randn(z0.shape, generator=g)
    return picks, z0, p, eps


def pretrain_backbone(
    samples: list[SceneSample],
    schedule: NoiseSchedule,
    config: PretrainConfig,
    backbone_config: BackboneConfig | None = None,
    class_names: list[str] | None = None,
) -> PretrainResult:
    """Train the denoiser + text encoder, then freeze both."""
    if not samples:
        raise ValueError("empty pretraining dataset")
    backbone_config = backbone_config or BackboneConfig()
    if class_names is None:
        raise ValueError("class_names required (caption vocabulary)")

    samples_by_domain: dict[str, list[SceneSample]] = {}
    for s in samples:
        samples_by_domain.setdefault(s.domain, []).append(s)
    domain_names = sorted(samples_by_domain)

    backbone, encoder = build_pretrain_modules(
        config, backbone_config, list(class_names), domain_names
    )
    opt = torch.optim.Adam(
        list(backbone.parameters()) + list(encoder.parameters()), lr=config.lr
    )
    g = torch.Generator().manual_seed(derive_seed(config.seed, "pretrain-noise"))
    order_rng = np.random.default_rng(derive_seed(config.seed, "pretrain-order") % 2**32)

    probe_picks, probe_z0, probe_p, probe_eps = _probe_batches(
        samples_by_domain, config, schedule
    )

    probe_captions = [(s.domain, _present_classes(s, len(class_names)))
                      for s in probe_picks]

    def probe_loss() -> float:
        backbone.eval()
        with torch.no_grad():
            loss = _batch_loss(backbone, encoder, class_names, probe_captions,
                               probe_z0, probe_p, probe_eps, schedule)
        backbone.train()
        return float(loss)

    initial = probe_loss()
    history = []
    for step in range(config.steps):
        dom = domain_names[step % len(domain_names)]
        pool = samples_by_domain[dom]
        take = min(config.batch_size, len(pool))
        idx = order_rng.choice(len(pool), size=take, replace=False)
        batch = [pool[int(i)] for i in idx]
        z0 = torch.stack([torch.from_numpy(s.image) for s in batch])
        p = torch.randint(0, schedule.P, (take,), generator=g)
        eps = torch.randn(z0.shape, generator=g)
        scene_words = _assign_scene_words(batch, domain_names, config, g)
        captions = [(w, _present_classes(s, len(class_names)))
                    for w, s in zip(scene_words, batch)]

        opt.zero_grad()
        loss = _batch_loss(backbone, encoder, class_names, captions, z0, p, eps, schedule)
        if not torch.isfinite(loss):
            raise RuntimeError(
                f"non-finite diffusion loss at step {step} (domain {dom}); aborting"
            )
        loss.backward()
        opt.step()
        history.append({"step": step, "loss": float(loss.detach()), "domain": dom})

    final = probe_loss()
    backbone.freeze()
    encoder.freeze()
    probe = {
        "initial_probe_loss": initial,
        "final_probe_loss": final,
        "improvement_factor": initial / final if final > 0 else float("inf"),
    }
    return PretrainResult(backbone=backbone, text_encoder=encoder,
                          history=history, probe=probe)
