"""Experiment configuration: flat key=value files, CLI overrides, validation."""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass

from .errors import ConfigError

_KIND_CHOICES = ("relational", "attribute")


@dataclass
class ExperimentConfig:
    # data: either a prepared workspace directory or a synthetic generator spec
    data_dir: str = ""
    synthetic: bool = False
    synthetic_entities: int = 200
    synthetic_rel_density: float = 5.0
    synthetic_attr_density: float = 3.0
    noise_name: float = 0.0
    noise_dropout: float = 0.0
    noise_value: float = 0.0
    train_ratio: float = 0.3
    val_ratio_of_train: float = 0.1
    # encoder
    encoder: str = "reference"
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 0  # 0 -> 4 * d_model
    emb_size: int = 300
    max_positions: int = 0  # 0 -> max_len
    vocab_cap: int = 30000
    n_soft_tokens: int = 8
    freeze_base: bool = False
    # aligner and template
    aligner: str = "nsp"
    template_style: str = "soft"
    template_text: str = "? {MASK}. I know that"
    soft_length: int = 1
    verbalizer_positive: str = "Yes"
    verbalizer_negative: str = "No"
    # objectives
    margin_emb: float = 1.0
    margin_prompt: float = 0.5
    prompt_margin_mode: str = "prob"
    # training
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 16
    max_epochs: int = 20
    patience: int = 3
    pool_size: int = 50
    train_kinds: str = "both"
    unit_dropout: float = 0.0
    name_word_dropout: float = 0.0
    # sequencing
    max_len: int = 128
    max_units: int = 12
    # inference
    c_size: int = 64
    delta: float = 0.9
    rerank_symmetric: bool = False
    embedding_only: bool = False
    info_kind: str = "auto"
    eval_ks: str = "1,10"
    rng_seed: int = 0

    # ---- parsing -----------------------------------------------------------

    @classmethod
    def load(cls, path, overrides=()):
        """Read a flat ``key = value`` document, then apply ``k=v`` overrides."""
        pairs = []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
                key, value = line.split("=", 1)
                pairs.append((key.strip(), value.strip()))
        config = cls()
        config._apply(pairs, source=path)
        config._apply(_split_overrides(overrides), source="override")
        return config

    @classmethod
    def from_overrides(cls, overrides=()):
        config = cls()
        config._apply(_split_overrides(overrides), source="override")
        return config

    def _apply(self, pairs, source):
        defaults = type(self)()
        for key, raw in pairs:
            if not hasattr(defaults, key):
                raise ConfigError(f"{source}: unknown config key {key!r}")
            current = getattr(defaults, key)
            try:
                setattr(self, key, _coerce(raw, type(current)))
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for {key!r}: {exc}") from exc

    # ---- validation --------------------------------------------------------

    def validate(self, check_paths=True):
        if self.aligner not in ("nsp", "mlm"):
            raise ConfigError(f"aligner must be nsp/mlm, got {self.aligner!r}")
        if self.template_style not in ("hard", "soft", "none"):
            raise ConfigError(f"template_style must be hard/soft/none, got {self.template_style!r}")
        if self.aligner == "mlm" and self.template_style == "none":
            raise ConfigError("the mlm aligner needs a template with a mask slot (style hard or soft)")
        if self.template_style == "soft" and not 1 <= self.soft_length <= self.n_soft_tokens:
            raise ConfigError(f"soft_length must be in [1, {self.n_soft_tokens}], got {self.soft_length}")
        if not 0.0 <= self.delta <= 1.0:
            raise ConfigError(f"delta must be in [0, 1], got {self.delta}")
        if not 0.0 < self.train_ratio <= 1.0:
            raise ConfigError(f"train_ratio must be in (0, 1], got {self.train_ratio}")
        if not 0.0 <= self.val_ratio_of_train < 1.0:
            raise ConfigError(f"val_ratio_of_train must be in [0, 1), got {self.val_ratio_of_train}")
        for name in ("noise_name", "noise_dropout", "noise_value"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")
        if self.margin_emb < 0 or self.margin_prompt < 0:
            raise ConfigError("margins must be >= 0")
        if self.train_kinds not in ("both",) + _KIND_CHOICES:
            raise ConfigError(f"train_kinds must be both/relational/attribute, got {self.train_kinds!r}")
        if self.info_kind not in ("auto",) + _KIND_CHOICES:
            raise ConfigError(f"info_kind must be auto/relational/attribute, got {self.info_kind!r}")
        if self.c_size < 1 or self.pool_size < 1:
            raise ConfigError("c_size and pool_size must be >= 1")
        if self.max_len < 8:
            raise ConfigError(f"max_len must be >= 8, got {self.max_len}")
        if not self.synthetic and not self.data_dir:
            raise ConfigError("either data_dir or synthetic=true is required")
        if check_paths and self.data_dir and not self.synthetic:
            missing = [p for p in self.workspace_files().values() if not os.path.exists(p)]
            if missing:
                raise ConfigError(f"missing data files: {missing}")
        try:
            self.ks()
        except ValueError as exc:
            raise ConfigError(f"bad eval_ks: {exc}") from exc
        return self

    def ks(self):
        return tuple(int(k) for k in str(self.eval_ks).split(","))

    def workspace_files(self):
        d = self.data_dir
        return {
            "kg1_rel": os.path.join(d, "kg1_rel.tsv"),
            "kg1_attr": os.path.join(d, "kg1_attr.tsv"),
            "kg2_rel": os.path.join(d, "kg2_rel.tsv"),
            "kg2_attr": os.path.join(d, "kg2_attr.tsv"),
            "links_train": os.path.join(d, "links_train.tsv"),
            "links_valid": os.path.join(d, "links_valid.tsv"),
            "links_test": os.path.join(d, "links_test.tsv"),
        }

    # ---- serialization -----------------------------------------------------

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def config_hash(self):
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:12]

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def _coerce(raw, target_type):
    if target_type is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if target_type is int:
        return int(raw)
    if target_type is float:
        return float(raw)
    return raw


def _split_overrides(overrides):
    pairs = []
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, value = item.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def artifact_root():
    """Directory experiment runs are written under (env override supported)."""
    return os.environ.get("ENTAIL_ALIGN_ROOT", "runs")
