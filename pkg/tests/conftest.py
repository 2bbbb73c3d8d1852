import numpy as np
import pytest
import torch

from promptseg.backbone import BackboneConfig, DenoiserBackbone
from promptseg.data import (
    DEFAULT_PALETTE,
    DatasetSpec,
    DomainSpec,
    LayoutConfig,
    gen_dataset,
)
from promptseg.schedule import build_schedule


def tiny_layout(size: int = 32) -> LayoutConfig:
    """Scaled-down scene layout for fast tests."""
    return LayoutConfig(
        height=size, width=size, margin=5,
        box_w=(5.0, 10.0), box_h=(4.0, 8.0), ball_r=(2.0, 4.5),
        pole_w=(1.5, 2.5), pole_h=(9.0, 17.0),
        wedge_w=(5.0, 11.0), wedge_h=(4.0, 9.0),
        min_visible_px=4,
    )


def tiny_domains() -> list[DomainSpec]:
    return [
        DomainSpec(name="domainA", palette=dict(DEFAULT_PALETTE)),
        DomainSpec(name="domainC", palette=dict(DEFAULT_PALETTE),
                   contrast=0.40, fog=0.30, noise_level=0.06, hue_degrees=-40.0),
    ]


def tiny_backbone_config() -> BackboneConfig:
    return BackboneConfig(widths=(8, 12, 16), token_dim=12, attn_dim=8, time_dim=8)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Two-domain 32x32 dataset for fixture pipelines."""
    root = tmp_path_factory.mktemp("tinydata")
    spec = DatasetSpec(
        domains=tuple(tiny_domains()),
        layout=tiny_layout(),
        splits={"train": (0, 12), "val": (500, 4), "test": (900, 6)},
    )
    return gen_dataset(spec, root / "bench")


@pytest.fixture(scope="session")
def small_pretrained():
    """A quickly pretrained tiny backbone + text encoder on in-memory data."""
    from promptseg.data import gen_scene
    from promptseg.pretrain import PretrainConfig, pretrain_backbone

    layout = tiny_layout()
    samples = [gen_scene(seed, dom, layout)
               for dom in tiny_domains() for seed in range(10)]
    schedule = build_schedule(20)
    cfg = PretrainConfig(steps=30, batch_size=4, lr=2e-3, seed=7)
    result = pretrain_backbone(samples, schedule, cfg, tiny_backbone_config(),
                               class_names=list(layout.class_names))
    return result, schedule, samples, layout


def rand_probs(rng: np.random.Generator, shape) -> torch.Tensor:
    """Random strictly-positive probability maps over the class axis."""
    x = rng.gamma(1.0, 1.0, size=shape) + 1e-4
    x = x / x.sum(axis=0, keepdims=True)
    return torch.from_numpy(x)
