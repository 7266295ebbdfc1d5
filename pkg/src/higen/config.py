"""Pipeline configuration: published defaults, a desk-scale preset, env-var
overrides (HIGEN_*), and validation."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .errors import ConfigError

ENV_PREFIX = "HIGEN_"


@dataclass
class PipelineConfig:
    # data
    catalog_path: str = ""
    train_path: str = ""
    test_path: str = ""
    oracle_path: str = ""
    workdir: str = "work"
    data_schema: str = "jsonl"
    seed: int = 0
    stages: tuple[str, ...] = ("embed", "metric", "docids", "decoder", "eval")

    # embedding model
    lr_embed: float = 1e-4
    batch_embed: int = 512
    epochs_embed: int = 10
    embed_dim: int = 256        # tower output and atomic embedding width
    d_k: int = 32               # attention token width
    d_u: int = 32
    embed_hidden: tuple[int, ...] = (64,)
    tau: float = 0.2
    w_c: float = 1.0
    query_len: int = 4
    context_len: int = 4
    sem_len: int = 4

    # metric learning
    lr_metric: float = 1e-5
    batch_metric: int = 10
    epochs_metric: int = 5
    fusion_dim: int = 768
    fusion_hidden: tuple[int, ...] = (64,)
    margin: float = 0.1
    cap_per_pv: int = 20
    normalize_fusion: bool = False

    # docID generation
    kmeans_k: int = 10
    max_cluster: int = 100
    docid_max_len: int = 8
    semantic_len: int = 1
    category_clustering: bool = True

    # decoder
    lr_decoder: float = 5e-5
    batch_decoder: int = 64
    epochs_decoder: int = 10
    dec_emb: int = 24
    dec_model: int = 48
    dec_hidden: tuple[int, ...] = (64,)
    dec_activation: str = "tanh"
    lambda_h: float = 0.8
    lambda_s: float = 0.1
    lambda_e: float = 0.1
    position_aware: bool = True

    # serving / evaluation
    beam_width: int = 10
    topk: int = 10
    eval_ks: tuple[int, ...] = (1, 5, 10)
    variant: str = "direct"
    cap: int = 5000
    i2i_alpha: float = 1.0
    i2i_top_n: int = 50
    per_seed_n: int = 10
    kfold: int = 0

    @classmethod
    def desk(cls, **overrides) -> "PipelineConfig":
        """Small dims and aggressive learning rates sized for toy corpora."""
        base = dict(
            lr_embed=5e-3, batch_embed=64, epochs_embed=30, embed_dim=32, d_k=16, d_u=16,
            lr_metric=3e-3, batch_metric=32, epochs_metric=10, fusion_dim=64,
            kmeans_k=4, max_cluster=8,
            lr_decoder=8e-3, batch_decoder=32, epochs_decoder=120,
            dec_emb=24, dec_model=48,
            beam_width=16, topk=10, variant="cluster-2-i2i",
        )
        base.update(overrides)
        return cls(**base)

    _TUPLE_FIELDS = ("stages", "embed_hidden", "fusion_hidden", "dec_hidden", "eval_ks")

    def validate(self) -> "PipelineConfig":
        checks = [
            (self.lr_embed > 0 and self.lr_metric > 0 and self.lr_decoder > 0,
             "learning rates must be positive"),
            (self.batch_embed >= 1 and self.batch_metric >= 1 and self.batch_decoder >= 1,
             "batch sizes must be >= 1"),
            (self.epochs_embed >= 1 and self.epochs_metric >= 1 and self.epochs_decoder >= 1,
             "epoch counts must be >= 1"),
            (self.embed_dim >= 1 and self.fusion_dim >= 1 and self.d_k >= 1 and self.d_u >= 1,
             "dimensions must be >= 1"),
            (self.tau > 0, "tau must be positive"),
            (self.w_c >= 0, "w_c must be >= 0"),
            (self.margin > 0, "margin must be positive"),
            (self.kmeans_k >= 1, "kmeans_k must be >= 1"),
            (self.max_cluster >= 1, "max_cluster must be >= 1"),
            (self.semantic_len >= 0, "semantic_len must be >= 0"),
            (self.docid_max_len >= self.semantic_len + 2,
             "docid_max_len must fit the category path plus cluster and ordinal tokens"),
            (all(v >= 0 for v in (self.lambda_h, self.lambda_s, self.lambda_e)),
             "lambda weights must be >= 0"),
            (1 <= self.topk <= self.beam_width, "need beam_width >= topk >= 1"),
            (all(k >= 1 for k in self.eval_ks), "eval_ks must be >= 1"),
            (self.cap >= 0, "cap must be >= 0"),
            (self.i2i_alpha > 0, "i2i_alpha must be positive"),
            (self.per_seed_n >= 0, "per_seed_n must be >= 0"),
            (self.kfold == 0 or self.kfold >= 2, "kfold must be 0 or >= 2"),
            (self.data_schema in ("jsonl", "tsv"), "data_schema must be jsonl or tsv"),
            (self.dec_activation in ("relu", "tanh", "identity"),
             "dec_activation must be relu, tanh, or identity"),
            (all(s in ("embed", "metric", "docids", "decoder", "eval") for s in self.stages),
             "unknown stage name"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        variant_parse(self.variant)   # raises ConfigError on bad syntax
        return self

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in dataclasses.fields(cls)}

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        unknown = sorted(set(d) - cls.field_names())
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        clean = dict(d)
        for name in cls._TUPLE_FIELDS:
            if name in clean and isinstance(clean[name], list):
                clean[name] = tuple(clean[name])
        return cls(**clean)

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                d = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        return cls.from_dict(d)

    def apply_env(self, environ=None) -> "PipelineConfig":
        """HIGEN_<FIELD>=value overrides, parsed as JSON when possible."""
        environ = os.environ if environ is None else environ
        for key, raw in sorted(environ.items()):
            if not key.startswith(ENV_PREFIX):
                continue
            name = key[len(ENV_PREFIX):].lower()
            if name not in self.field_names():
                raise ConfigError(f"unknown config field in env var {key}")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            if name in self._TUPLE_FIELDS and isinstance(value, list):
                value = tuple(value)
            setattr(self, name, value)
        return self

    def echo(self) -> dict:
        out = dataclasses.asdict(self)
        for name in self._TUPLE_FIELDS:
            out[name] = list(out[name])
        return out


def variant_parse(variant: str) -> tuple[int | None, bool]:
    """'direct' | 'cluster-K' | 'i2i' | 'cluster-K-i2i' ->
    (cluster prefix length or None, use i2i)."""
    if variant == "direct":
        return None, False
    if variant == "i2i":
        return None, True
    parts = variant.split("-")
    if parts[0] == "cluster" and len(parts) >= 2:
        try:
            k = int(parts[1])
        except ValueError:
            raise ConfigError(f"bad cluster prefix in variant '{variant}'") from None
        if k < 1:
            raise ConfigError(f"cluster prefix must be >= 1 in variant '{variant}'")
        if len(parts) == 2:
            return k, False
        if parts[2:] == ["i2i"]:
            return k, True
    raise ConfigError(f"unknown variant '{variant}'")
