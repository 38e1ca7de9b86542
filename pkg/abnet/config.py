"""
Configuration for abnet experiments.

A run is described by one flat TOML file (`key = value` per line) plus
`--set key=value` overrides. Every key lands on exactly one field of the
data, model, training or decoding configuration; `seed` goes to all of
them. Ablation suites are YAML files listing named override sets.
"""

import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, Iterable, List, Mapping, Optional

import toml
import yaml

from abnet.data import DataConfig
from abnet.decoding import DecodeConfig
from abnet.errors import ConfigurationError
from abnet.model import ModelConfig
from abnet.training import TrainConfig

DEFAULT_CONFIG_PATH = "./abnet.toml"
ENV_CONFIG_VAR = "ABNET_CONFIG"

DATA_KEYS = {f.name for f in fields(DataConfig)} - {"seed"}
MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"seed", "src_vocab_size", "tgt_vocab_size"}
FINETUNE_KEYS = {
    "mode", "learning_rate", "adam_beta1", "adam_beta2", "adam_eps",
    "batch_size", "epochs", "length_loss_weight",
}
PRETRAIN_KEYS = {
    "pretrain_epochs": "epochs",
    "pretrain_batch_size": "batch_size",
    "pretrain_learning_rate": "learning_rate",
    "mlm_mask_fraction": "mlm_mask_fraction",
}
DECODE_KEYS = {
    "iterations": "iterations",
    "length_beam": "length_beam",
    "beam_width": "beam_width",
    "decode_mode": "mode",
    "workers": "workers",
}
SPEC_KEYS = {"src_vocab_size", "tgt_vocab_size", "lowercase", "output_dir", "data_dir", "seed"}

KNOWN_KEYS = (
    DATA_KEYS | MODEL_KEYS | FINETUNE_KEYS | set(PRETRAIN_KEYS) | set(DECODE_KEYS) | SPEC_KEYS
)


def load_config(cli_config_path=None):
    """
    Load configuration from a flat TOML file.

    Precedence:
      1. cli_config_path if provided.
      2. Environment variable ABNET_CONFIG (path to the file).
      3. Default to ./abnet.toml.

    Returns:
        dict: The configuration settings.
    """
    if cli_config_path:
        config_path = cli_config_path
    elif os.environ.get(ENV_CONFIG_VAR):
        config_path = os.environ[ENV_CONFIG_VAR]
    else:
        config_path = DEFAULT_CONFIG_PATH

    if not os.path.exists(config_path):
        raise FileNotFoundError(f"Configuration file not found: {config_path}")

    try:
        with open(config_path, "r") as f:
            config_data = toml.load(f)
    except toml.TomlDecodeError as e:
        raise ConfigurationError(f"{config_path}: {e}") from None

    for key, value in config_data.items():
        if isinstance(value, dict):
            raise ConfigurationError(
                f"{config_path}: nested table [{key}] is not supported; use flat keys"
            )
    return config_data


def parse_override(text: str):
    """Split `key=value`; the value is read as a TOML scalar or list, else kept as a string."""
    if "=" not in text:
        raise ConfigurationError(f"override {text!r} is not of the form key=value")
    key, raw = (part.strip() for part in text.split("=", 1))
    if not key:
        raise ConfigurationError(f"override {text!r} has an empty key")
    try:
        value = toml.loads(f"value = {raw}")["value"]
    except (ValueError, IndexError):
        value = raw
    return key, value


def parse_overrides(items: Iterable[str]) -> Dict[str, Any]:
    return dict(parse_override(item) for item in items)


@dataclass
class ExperimentSpec:
    """Everything one pipeline run needs."""

    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: TrainConfig = field(
        default_factory=lambda: TrainConfig(mode="pretrain-mlm", epochs=5)
    )
    finetune: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    src_vocab_size: int = 64
    tgt_vocab_size: int = 64
    lowercase: bool = True
    output_dir: str = "runs/abnet"
    data_dir: Optional[str] = None
    seed: int = 1

    @property
    def resolved_data_dir(self) -> str:
        return self.data_dir or os.path.join(self.output_dir, "data")

    def max_target_symbols(self) -> int:
        """Longest target sentence the model can emit (autoregressive targets need [EOS] room)."""
        if self.model.parallel:
            return self.model.max_target_length
        return self.model.max_target_length - 1

    def to_flat_dict(self) -> Dict[str, Any]:
        """The flat key/value view of this spec, as accepted by build_spec."""
        out: Dict[str, Any] = {}
        data = asdict(self.data)
        out.update({k: data[k] for k in sorted(DATA_KEYS)})
        model = asdict(self.model)
        out.update({k: model[k] for k in sorted(MODEL_KEYS)})
        finetune = asdict(self.finetune)
        out.update({k: finetune[k] for k in sorted(FINETUNE_KEYS)})
        pretrain = asdict(self.pretrain)
        out.update({k: pretrain[v] for k, v in PRETRAIN_KEYS.items()})
        decode = asdict(self.decode)
        out.update({k: decode[v] for k, v in DECODE_KEYS.items()})
        out.update(
            src_vocab_size=self.src_vocab_size,
            tgt_vocab_size=self.tgt_vocab_size,
            lowercase=self.lowercase,
            output_dir=self.output_dir,
            data_dir=self.resolved_data_dir,
            seed=self.seed,
        )
        return out


def build_spec(values: Mapping[str, Any]) -> ExperimentSpec:
    """
    Route flat keys to their configuration sections.

    Raises:
        ConfigurationError: unknown key or invalid value.
    """
    for key in values:
        if key not in KNOWN_KEYS:
            raise ConfigurationError(f"unknown configuration key {key!r}")

    seed = values.get("seed", 1)
    data = {k: v for k, v in values.items() if k in DATA_KEYS}
    model = {k: v for k, v in values.items() if k in MODEL_KEYS}
    finetune = {k: v for k, v in values.items() if k in FINETUNE_KEYS}
    pretrain = {PRETRAIN_KEYS[k]: v for k, v in values.items() if k in PRETRAIN_KEYS}
    pretrain.setdefault("epochs", 5)
    decode = {DECODE_KEYS[k]: v for k, v in values.items() if k in DECODE_KEYS}
    try:
        spec = ExperimentSpec(
            data=DataConfig(seed=seed, **data),
            model=ModelConfig(seed=seed, **model),
            pretrain=TrainConfig(mode="pretrain-mlm", seed=seed, **pretrain),
            finetune=TrainConfig(seed=seed, **finetune),
            decode=DecodeConfig(**decode),
            src_vocab_size=values.get("src_vocab_size", 64),
            tgt_vocab_size=values.get("tgt_vocab_size", 64),
            lowercase=values.get("lowercase", True),
            output_dir=values.get("output_dir", "runs/abnet"),
            data_dir=values.get("data_dir"),
            seed=seed,
        )
    except TypeError as e:
        raise ConfigurationError(f"invalid configuration value: {e}") from None
    if not isinstance(spec.lowercase, bool):
        raise ConfigurationError(f"lowercase must be true or false, got {spec.lowercase!r}")
    if spec.finetune.mode == "pretrain-mlm":
        raise ConfigurationError("mode must be a fine-tuning mode, not pretrain-mlm")
    spec.data.validate(spec.max_target_symbols())
    return spec


@dataclass
class Variant:
    name: str
    overrides: Dict[str, Any]


def _variants_from(data, source: str) -> List[Variant]:
    if not isinstance(data, dict) or not isinstance(data.get("variants"), list):
        raise ConfigurationError(f"{source}: expected a top-level 'variants' list")
    variants = []
    for entry in data["variants"]:
        if not isinstance(entry, dict) or not isinstance(entry.get("name"), str):
            raise ConfigurationError(f"{source}: every variant needs a 'name'")
        overrides = entry.get("overrides") or {}
        if not isinstance(overrides, dict):
            raise ConfigurationError(f"{source}: overrides of {entry['name']} must be a mapping")
        for key in overrides:
            if key not in KNOWN_KEYS:
                raise ConfigurationError(
                    f"{source}: unknown configuration key {key!r} in variant {entry['name']}"
                )
        variants.append(Variant(entry["name"], dict(overrides)))
    return variants


def load_suite(path) -> List[Variant]:
    """
    Load ablation variants from a YAML file or a directory of YAML files.

    Args:
        path (str): File with a `variants` list of {name, overrides}, or a
            directory whose .yaml/.yml files are read in name order.

    Returns:
        list of Variant.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Suite file not found: {path}")
    if os.path.isdir(path):
        variants = []
        for filename in sorted(os.listdir(path)):
            if filename.endswith((".yaml", ".yml")):
                file_path = os.path.join(path, filename)
                with open(file_path, "r") as f:
                    variants.extend(_variants_from(yaml.safe_load(f), file_path))
    else:
        with open(path, "r") as f:
            variants = _variants_from(yaml.safe_load(f), path)
    names = [v.name for v in variants]
    if len(set(names)) != len(names):
        raise ConfigurationError(f"{path}: duplicate variant names")
    if not variants:
        raise ConfigurationError(f"{path}: no variants")
    return variants
