"""Small shared fixtures: a fast model configuration and toy image sets."""

import numpy as np

from dualflow.attention import DualAttnConfig
from dualflow.config import RunConfig
from dualflow.encoder import EncoderConfig, PatchEmbedConfig
from dualflow.flow import FlowConfig
from dualflow.pipeline import TrainConfig
from dualflow.scoring import ScoringConfig


def tiny_run_config(**train_kw) -> RunConfig:
    """A configuration small enough to train in well under a second."""
    train_args = dict(batch_size=2, stage1_epochs=2, stage2_epochs=2)
    train_args.update(train_kw)
    return RunConfig(
        encoder=EncoderConfig(in_size=32, stage_channels=(4, 6, 8)),
        patch_embed=PatchEmbedConfig(token_dim=24),
        attention=DualAttnConfig(depth=1, heads=2, token_dim=24),
        flow=FlowConfig(n_blocks=2, hidden_ratio=1.0),
        train=TrainConfig(**train_args),
        scoring=ScoringConfig(),
    )


def tiny_images(n, size=32, seed=0):
    """Banded textures with mild noise, values in [0, 1]."""
    rng = np.random.default_rng(seed)
    base = 0.5 + 0.2 * np.sin(np.linspace(0, 4 * np.pi, size))[None, :, None]
    return [np.clip(base + rng.normal(0, 0.05, size=(size, size, 3)), 0, 1)
            for _ in range(n)]
