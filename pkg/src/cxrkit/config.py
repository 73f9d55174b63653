"""Run configuration: every field has a default, unknown keys are rejected,
and `MEDX_<FIELD>` environment variables override file values."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass

from .corpus import PATHOLOGIES, CorpusConfig

ENV_PREFIX = "MEDX_"


@dataclass
class Config:
    # corpus
    corpus_train: int = 2000
    corpus_val: int = 200
    corpus_test: int = 200
    image_size: int = 64
    seed: int = 1234
    nofindings_rate: float = 0.25
    second_finding_rate: float = 0.2

    # aligner (shared image/text embedding)
    embed_dim: int = 64
    patch: int = 8
    aligner_layers: int = 2
    aligner_heads: int = 4
    aligner_epochs: int = 22
    aligner_batch: int = 96
    aligner_lr: float = 3e-3

    # view classifier
    view_dim: int = 32
    view_layers: int = 2
    view_heads: int = 4
    view_epochs: int = 3
    view_lr: float = 2e-3

    # language model
    lm_dim: int = 128
    lm_layers: int = 4
    lm_heads: int = 4
    context_len: int = 256
    lora_rank: int = 16
    lora_alpha: float = 32.0
    lm_pretrain_epochs: int = 4
    lm_epochs: int = 6
    lm_batch: int = 16
    lm_lr: float = 1e-3
    lm_tune_lr: float = 2e-3

    # diffusion
    diffusion_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sd_channels: int = 24
    sd_epochs: int = 10
    sd_batch: int = 16
    sd_lr: float = 2e-3
    ctrl_epochs: int = 6
    uncond_rate: float = 0.1
    sd_guidance: float = 4.0
    sd_guidance_stride: int = 2  # guide every Nth step (plus the final few)

    # downstream classifier
    clf_epochs: int = 4
    clf_batch: int = 32
    clf_lr: float = 2e-3

    # service
    host: str = "127.0.0.1"
    port: int = 8800

    # instructor
    instructor: str = "template"
    instructor_url: str = ""
    instructor_timeout: float = 10.0
    instructor_retries: int = 1

    @classmethod
    def field_names(cls):
        return {f.name for f in dataclasses.fields(cls)}

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        unknown = set(d) - cls.field_names()
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        return cfg.apply_env()

    @classmethod
    def from_file(cls, path) -> "Config":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def apply_env(self) -> "Config":
        for f in dataclasses.fields(self):
            env = os.environ.get(ENV_PREFIX + f.name.upper())
            if env is None:
                continue
            current = getattr(self, f.name)
            caster = type(current)
            setattr(self, f.name, caster(env) if caster is not bool
                    else env.lower() in ("1", "true", "yes"))
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def corpus_config(self) -> CorpusConfig:
        return CorpusConfig(
            counts={"train": self.corpus_train, "val": self.corpus_val,
                    "test": self.corpus_test},
            image_size=self.image_size, seed=self.seed,
            nofindings_rate=self.nofindings_rate,
            category_mix={c: 1.0 for c in PATHOLOGIES},
            second_finding_rate=self.second_finding_rate)
