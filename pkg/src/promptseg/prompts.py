"""Category and scene prompts.

The conditioning input to the denoiser is a bundle of M = C + 1 tokens: one
token per segmentation class (from the template "a photo of a {class}") plus
a single scene token describing the domain ("a {scene} photo", an example
image, or a learned vector). Token order is the class-index order, scene
token always last.

Text encoding is a frozen vocabulary embedding table (one vector per
whitespace-separated word, averaged over the template). The table is trained
jointly with the denoiser during diffusion pretraining and frozen afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .schedule import LatentImage, NoiseSchedule
from .utils import module_digest

CATEGORY_TEMPLATE = "a photo of a {name}"
SCENE_TEMPLATE = "a {scene} photo"

SCENE_KINDS = ("source_text", "target_text", "irrelevant_text", "learned", "image")


class OutOfVocabularyError(ValueError):
    def __init__(self, words):
        self.words = list(words)
        super().__init__(f"words not in the prompt vocabulary: {self.words}")


@dataclass(frozen=True)
class TokenEmbedding:
    vector: torch.Tensor  # [N]
    source: str           # "text" | "image" | "learned"

    def __post_init__(self):
        if self.vector.ndim != 1:
            raise ValueError("token embedding must be a 1-d vector")
        if not bool(torch.isfinite(self.vector).all()):
            raise ValueError("token embedding has non-finite entries")
        if self.source not in ("text", "image", "learned"):
            raise ValueError(f"unknown token source {self.source!r}")


def build_vocabulary(class_names, domain_names, extra_words=()) -> list[str]:
    """Sorted union of template words, class names, domain names, extras."""
    words = {"a", "photo", "of"}
    for name in list(class_names) + list(domain_names) + list(extra_words):
        words.update(name.lower().split())
    return sorted(words)


DEFAULT_EXTRA_WORDS = ("water", "grass", "sand", "painting", "night")


class TextPromptEncoder(nn.Module):
    """Word-embedding table; a template encodes to the mean of its word rows."""

    def __init__(self, vocabulary: list[str], dim: int):
        super().__init__()
        if len(set(vocabulary)) != len(vocabulary):
            raise ValueError("vocabulary has duplicate words")
        self.vocabulary = list(vocabulary)
        self.word_index = {w: i for i, w in enumerate(self.vocabulary)}
        self.dim = dim
        self.table = nn.Embedding(len(vocabulary), dim)
        nn.init.normal_(self.table.weight, std=0.02)
        self._frozen_digest: str | None = None

    def template_indices(self, template: str) -> torch.Tensor:
        words = template.lower().split()
        if not words:
            raise ValueError("empty prompt template")
        missing = [w for w in words if w not in self.word_index]
        if missing:
            raise OutOfVocabularyError(missing)
        return torch.tensor([self.word_index[w] for w in words], dtype=torch.long)

    def encode_template(self, template: str) -> torch.Tensor:
        """Differentiable mean of the word embeddings (used in pretraining)."""
        return self.table(self.template_indices(template)).mean(dim=0)

    def freeze(self) -> str:
        self.requires_grad_(False)
        self.eval()
        self._frozen_digest = module_digest(self)
        return self._frozen_digest

    def verify_frozen(self) -> None:
        if self._frozen_digest is None:
            raise RuntimeError("text encoder has not been frozen")
        if module_digest(self) != self._frozen_digest:
            raise RuntimeError("frozen text encoder parameters changed")


def encode_text_prompt(encoder: TextPromptEncoder, template: str) -> TokenEmbedding:
    with torch.no_grad():
        vec = encoder.encode_template(template)
    return TokenEmbedding(vector=vec.detach().clone(), source="text")


class ImagePromptEncoder:
    """Scene embedding from an example image: global average of the frozen
    backbone's deepest feature map, sent through a frozen random projection.

    The extraction pass is conditioned on the category tokens alone.
    """

    def __init__(self, backbone, schedule: NoiseSchedule, category_tokens: torch.Tensor,
                 p_feat: int = 1, seed: int = 0):
        self.backbone = backbone
        self.schedule = schedule
        self.category_tokens = category_tokens.detach().clone()
        self.p_feat = p_feat
        deep_channels = backbone.feature_channels[-1]
        g = torch.Generator().manual_seed(seed)
        self.projection = torch.randn(
            backbone.config.token_dim, deep_channels, generator=g
        ) / deep_channels ** 0.5

    def project_pooled(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.projection.to(pooled.dtype) @ pooled

    def encode(self, image: LatentImage) -> TokenEmbedding:
        from .backbone import extract_features

        out = extract_features(
            self.backbone, image, self.category_tokens, self.schedule, self.p_feat
        )
        pooled = out.features[-1].mean(dim=(-2, -1))
        return TokenEmbedding(vector=self.project_pooled(pooled), source="image")


def encode_image_prompt(encoder: ImagePromptEncoder, image: LatentImage) -> TokenEmbedding:
    return encoder.encode(image)


@dataclass(frozen=True)
class CategoryPrompt:
    class_names: tuple[str, ...]
    tokens: tuple[TokenEmbedding, ...]

    def __post_init__(self):
        if len(self.class_names) < 1:
            raise ValueError("need at least one class")
        if len(self.class_names) != len(self.tokens):
            raise ValueError("one token per class required")

    @property
    def C(self) -> int:
        return len(self.class_names)

    def as_tensor(self) -> torch.Tensor:
        return torch.stack([t.vector for t in self.tokens])


@dataclass(frozen=True)
class ScenePrompt:
    token: TokenEmbedding
    descriptor: str
    kind: str

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ValueError(f"unknown scene prompt kind {self.kind!r}")


def build_category_prompt(encoder: TextPromptEncoder, class_names) -> CategoryPrompt:
    names = list(class_names)
    if len(set(names)) != len(names):
        raise ValueError("duplicate class names")
    tokens = tuple(
        encode_text_prompt(encoder, CATEGORY_TEMPLATE.format(name=name)) for name in names
    )
    return CategoryPrompt(class_names=tuple(names), tokens=tokens)


def make_scene_prompt(kind: str, payload, *, text_encoder: TextPromptEncoder | None = None,
                      image_encoder: ImagePromptEncoder | None = None) -> ScenePrompt:
    """Build the single scene token from text, a seed, or an example image."""
    if kind in ("source_text", "target_text", "irrelevant_text"):
        if not isinstance(payload, str):
            raise ValueError(f"kind {kind!r} expects a template string")
        if text_encoder is None:
            raise ValueError("text scene prompts need a text encoder")
        return ScenePrompt(token=encode_text_prompt(text_encoder, payload),
                           descriptor=payload, kind=kind)
    if kind == "learned":
        if not isinstance(payload, int):
            raise ValueError("kind 'learned' expects an integer seed")
        if text_encoder is None:
            raise ValueError("learned scene prompts need a text encoder (for the dimension)")
        g = torch.Generator().manual_seed(payload)
        vec = torch.randn(text_encoder.dim, generator=g) * 0.02
        return ScenePrompt(token=TokenEmbedding(vector=vec, source="learned"),
                           descriptor=f"learned(seed={payload})", kind=kind)
    if kind == "image":
        if not isinstance(payload, LatentImage):
            raise ValueError("kind 'image' expects a LatentImage")
        if image_encoder is None:
            raise ValueError("image scene prompts need an image encoder")
        return ScenePrompt(token=image_encoder.encode(payload),
                           descriptor="image-prompt", kind=kind)
    raise ValueError(f"unknown scene prompt kind {kind!r}")


@dataclass(frozen=True)
class PromptBundle:
    """Ordered conditioning tokens: C category tokens, then the scene token.

    A scene-less bundle (category tokens only, M = C) is the ablation case.
    """

    tokens: tuple[TokenEmbedding, ...]
    num_categories: int
    has_scene: bool

    def __post_init__(self):
        expected = self.num_categories + (1 if self.has_scene else 0)
        if len(self.tokens) != expected:
            raise ValueError(
                f"bundle must hold {expected} tokens, got {len(self.tokens)}"
            )
        dims = {t.vector.shape[0] for t in self.tokens}
        if len(dims) != 1:
            raise ValueError(f"mixed token dimensions in bundle: {dims}")

    @property
    def M(self) -> int:
        return len(self.tokens)

    @property
    def scene_token(self) -> TokenEmbedding | None:
        return self.tokens[-1] if self.has_scene else None

    def as_tensor(self) -> torch.Tensor:
        return torch.stack([t.vector for t in self.tokens])


def bundle(cat: CategoryPrompt, scene: ScenePrompt | None) -> PromptBundle:
    """Concatenate category tokens with the scene token (scene last)."""
    dims = {t.vector.shape[0] for t in cat.tokens}
    if scene is not None:
        dims.add(scene.token.vector.shape[0])
    if len(dims) != 1:
        raise ValueError(f"token dimension mismatch: {dims}")
    tokens = tuple(cat.tokens) + ((scene.token,) if scene is not None else ())
    return PromptBundle(tokens=tokens, num_categories=cat.C, has_scene=scene is not None)
