"""Experiment configuration: a sectioned ``key = value`` text format.

Every key has a documented default; an empty file yields the standard
setting (T=1000, K=100, C=0.1, E=5, batch 50, lr 0.1 / 0.01 decayed by 0.998
per round, weight decay 1e-3, I=10, I_g=1, I_d=5, lambda_cls = lambda_dis = 1).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

from fedftg.autodiff import SgdConfig
from fedftg.clients import OPTIMIZERS, LocalUpdateConfig
from fedftg.datasets import PartitionSpec
from fedftg.models import ClassifierConfig, GeneratorConfig
from fedftg.server import MD_METRICS, FtgHyper


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        if source:
            where = f"{source}:{line}:" if line is not None else f"{source}:"
        else:
            where = f"line {line}:" if line is not None else ""
        super().__init__(f"{where} {message}".strip())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "on", "1"):
        return True
    if t in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.replace(" ", "").split(",") if p)


def _beta(text: str) -> float | None:
    return None if text.strip().lower() == "iid" else float(text)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return "iid"
    if isinstance(value, float):
        return repr(value)
    return str(value)


# (section, key) -> (attribute, parser, default, doc)
SCHEMA: dict[tuple[str, str], tuple[str, object, object, str]] = {
    ("dataset", "kind"): ("dataset", str, "synthetic", "synthetic | idx"),
    ("dataset", "classes"): ("classes", int, 5, "synthetic class count"),
    ("dataset", "train_per_class"): ("train_per_class", int, 200, "synthetic training examples per class"),
    ("dataset", "test_per_class"): ("test_per_class", int, 100, "synthetic test examples per class"),
    ("dataset", "dims"): ("dims", int, 8, "synthetic feature dimension"),
    ("dataset", "spread"): ("spread", float, 0.5, "synthetic cluster standard deviation"),
    ("dataset", "seed"): ("data_seed", int, 0, "synthetic generation seed"),
    ("dataset", "train_images"): ("train_images", str, "", "IDX training images"),
    ("dataset", "train_labels"): ("train_labels", str, "", "IDX training labels"),
    ("dataset", "test_images"): ("test_images", str, "", "IDX test images"),
    ("dataset", "test_labels"): ("test_labels", str, "", "IDX test labels"),
    ("partition", "clients"): ("clients", int, 100, "K"),
    ("partition", "beta"): ("beta", _beta, 0.3, "Dirichlet concentration, or iid"),
    ("partition", "seed"): ("partition_seed", int, 0, "partition seed"),
    ("federation", "rounds"): ("rounds", int, 1000, "T"),
    ("federation", "fraction"): ("fraction", float, 0.1, "C, share of clients selected per round"),
    ("federation", "optimizer"): ("optimizer", str, "fedavg", "fedavg | fedprox | scaffold | feddyn"),
    ("federation", "mu"): ("mu", float, 1e-4, "FedProx proximal weight"),
    ("federation", "alpha_dyn"): ("alpha_dyn", float, 1e-2, "FedDyn penalty weight"),
    ("federation", "scaffold_max_steps"): ("scaffold_max_steps", int, 50, "local step cap for SCAFFOLD"),
    ("federation", "finetune"): ("finetune", _bool, True, "run server-side fine-tuning after aggregation"),
    ("federation", "eta_g"): ("eta_g", float, 1.0, "global step size"),
    ("federation", "noise_ratio"): ("noise_ratio", float, 0.0, "relative noise on reported label counts"),
    ("local", "epochs"): ("epochs", int, 5, "E"),
    ("local", "batch_size"): ("batch_size", int, 50, "local mini-batch size"),
    ("local", "lr"): ("lr", float, 0.1, "classifier learning rate"),
    ("local", "decay"): ("decay", float, 0.998, "per-round learning-rate decay factor"),
    ("local", "weight_decay"): ("weight_decay", float, 1e-3, "L2 weight decay"),
    ("model", "hidden"): ("hidden", _ints, (64, 64), "classifier hidden widths"),
    ("model", "gen_hidden"): ("gen_hidden", _ints, (64,), "generator hidden widths"),
    ("model", "noise_dim"): ("noise_dim", int, 100, "dimension of z"),
    ("model", "embed_dim"): ("embed_dim", int, 0, "label embedding width, 0 means noise_dim"),
    ("server", "iterations"): ("iterations", int, 10, "I"),
    ("server", "gen_steps"): ("gen_steps", int, 1, "I_g"),
    ("server", "dist_steps"): ("dist_steps", int, 5, "I_d"),
    ("server", "lambda_cls"): ("lambda_cls", float, 1.0, "fidelity loss weight"),
    ("server", "lambda_dis"): ("lambda_dis", float, 1.0, "diversity loss weight"),
    ("server", "batch_size"): ("server_batch", int, 64, "Q, pseudo samples per batch"),
    ("server", "lr"): ("server_lr", float, 0.1, "global-model distillation learning rate"),
    ("server", "gen_lr"): ("gen_lr", float, 0.01, "generator learning rate"),
    ("server", "decay"): ("server_decay", float, 0.998, "per-round decay for both server learning rates"),
    ("server", "weight_decay"): ("server_weight_decay", float, 1e-3, "global-model weight decay"),
    ("server", "gen_weight_decay"): ("gen_weight_decay", float, 1e-3, "generator weight decay"),
    ("server", "hsm"): ("hsm", _bool, True, "hard sample mining"),
    ("server", "cls_sampling"): ("cls_sampling", _bool, True, "customized label sampling"),
    ("server", "class_ensemble"): ("class_ensemble", _bool, True, "class-level ensemble weights"),
    ("server", "md_metric"): ("md_metric", str, "kl", "kl | mse"),
    ("run", "seed"): ("seed", int, 0, "global seed for initialisation, selection and batches"),
}

_BY_ATTR = {attr: (section, key) for (section, key), (attr, *_rest) in SCHEMA.items()}


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "synthetic"
    classes: int = 5
    train_per_class: int = 200
    test_per_class: int = 100
    dims: int = 8
    spread: float = 0.5
    data_seed: int = 0
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    clients: int = 100
    beta: float | None = 0.3
    partition_seed: int = 0
    rounds: int = 1000
    fraction: float = 0.1
    optimizer: str = "fedavg"
    mu: float = 1e-4
    alpha_dyn: float = 1e-2
    scaffold_max_steps: int = 50
    finetune: bool = True
    eta_g: float = 1.0
    noise_ratio: float = 0.0
    epochs: int = 5
    batch_size: int = 50
    lr: float = 0.1
    decay: float = 0.998
    weight_decay: float = 1e-3
    hidden: tuple[int, ...] = (64, 64)
    gen_hidden: tuple[int, ...] = (64,)
    noise_dim: int = 100
    embed_dim: int = 0
    iterations: int = 10
    gen_steps: int = 1
    dist_steps: int = 5
    lambda_cls: float = 1.0
    lambda_dis: float = 1.0
    server_batch: int = 64
    server_lr: float = 0.1
    gen_lr: float = 0.01
    server_decay: float = 0.998
    server_weight_decay: float = 1e-3
    gen_weight_decay: float = 1e-3
    hsm: bool = True
    cls_sampling: bool = True
    class_ensemble: bool = True
    md_metric: str = "kl"
    seed: int = 0

    def validate(self) -> "ExperimentConfig":
        """Raise ValueError naming the offending attribute; returns self."""
        checks = [
            ("dataset", self.dataset in ("synthetic", "idx"), "must be synthetic or idx"),
            ("fraction", 0 < self.fraction <= 1, "must lie in (0, 1]"),
            ("clients", self.clients >= 1, "must be >= 1"),
            ("rounds", self.rounds >= 1, "must be >= 1"),
            ("beta", self.beta is None or self.beta > 0, "must be positive or iid"),
            ("optimizer", self.optimizer in OPTIMIZERS, f"must be one of {', '.join(OPTIMIZERS)}"),
            ("md_metric", self.md_metric in MD_METRICS, f"must be one of {', '.join(MD_METRICS)}"),
            ("noise_ratio", 0 <= self.noise_ratio <= 1, "must lie in [0, 1]"),
            ("epochs", self.epochs >= 1, "must be >= 1"),
            ("batch_size", self.batch_size >= 1, "must be >= 1"),
            ("server_batch", self.server_batch >= 2, "must be >= 2"),
            ("iterations", self.iterations >= 1, "must be >= 1"),
            ("gen_steps", self.gen_steps >= 1, "must be >= 1"),
            ("dist_steps", self.dist_steps >= 1, "must be >= 1"),
            ("noise_dim", self.noise_dim >= 1, "must be >= 1"),
            ("embed_dim", self.embed_dim >= 0, "must be >= 0"),
            ("scaffold_max_steps", self.scaffold_max_steps >= 1, "must be >= 1"),
            ("decay", 0 < self.decay <= 1, "must lie in (0, 1]"),
            ("server_decay", 0 < self.server_decay <= 1, "must lie in (0, 1]"),
        ]
        for attr in ("lr", "server_lr", "gen_lr", "weight_decay", "server_weight_decay", "gen_weight_decay",
                     "mu", "alpha_dyn", "lambda_cls", "lambda_dis", "eta_g"):
            checks.append((attr, getattr(self, attr) >= 0, "must be non-negative"))
        for attr, ok, msg in checks:
            if not ok:
                section, key = _BY_ATTR[attr]
                raise ValueError(f"{section}.{key} {msg}")
        return self

    @property
    def clients_per_round(self) -> int:
        return max(1, math.ceil(self.fraction * self.clients - 1e-9))

    def classifier_config(self, input_dim: int, classes: int) -> ClassifierConfig:
        return ClassifierConfig(input_dim, classes, self.hidden)

    def generator_config(self, output_dim: int, classes: int) -> GeneratorConfig:
        return GeneratorConfig(self.noise_dim, classes, output_dim, self.gen_hidden, self.embed_dim or None)

    def partition_spec(self) -> PartitionSpec:
        return PartitionSpec(self.clients, self.beta, self.partition_seed)

    def local_config(self) -> LocalUpdateConfig:
        return LocalUpdateConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            sgd=SgdConfig(self.lr, self.weight_decay, self.decay),
            optimizer=self.optimizer,
            mu=self.mu,
            alpha_dyn=self.alpha_dyn,
            scaffold_max_steps=self.scaffold_max_steps,
        )

    def hyper(self) -> FtgHyper:
        return FtgHyper(
            iterations=self.iterations,
            gen_steps=self.gen_steps,
            dist_steps=self.dist_steps,
            lambda_cls=self.lambda_cls,
            lambda_dis=self.lambda_dis,
            batch_size=self.server_batch,
            noise_dim=self.noise_dim,
            hsm=self.hsm,
            cls_sampling=self.cls_sampling,
            class_ensemble=self.class_ensemble,
            md_metric=self.md_metric,
        )

    def classifier_sgd(self) -> SgdConfig:
        return SgdConfig(self.server_lr, self.server_weight_decay, self.server_decay)

    def generator_sgd(self) -> SgdConfig:
        return SgdConfig(self.gen_lr, self.gen_weight_decay, self.server_decay)

    def with_overrides(self, overrides: dict[str, str]) -> "ExperimentConfig":
        """Apply ``{"section.key": "text"}`` overrides, parsed like file values."""
        changes = {}
        for dotted, text in overrides.items():
            section, _, key = dotted.partition(".")
            if (section, key) not in SCHEMA:
                raise ConfigError(f"unknown key {dotted!r}")
            attr, parse, _default, _doc = SCHEMA[(section, key)]
            try:
                changes[attr] = parse(str(text))
            except ValueError as exc:
                raise ConfigError(f"bad value for {dotted}: {exc}") from None
        cfg = replace(self, **changes)
        try:
            return cfg.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def dump(self) -> str:
        lines, current = [], None
        for (section, key), (attr, *_rest) in SCHEMA.items():
            if section != current:
                if current is not None:
                    lines.append("")
                lines.append(f"[{section}]")
                current = section
            lines.append(f"{key} = {_fmt(getattr(self, attr))}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.dump().encode()).hexdigest()[:16]


def parse_sections(text: str, source: str | None = None) -> list[tuple[str, str, str, int]]:
    """Tokenise into ``(section, key, value, line)``; ``#`` and ``;`` start comments."""
    out = []
    section = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                raise ConfigError(f"malformed section header {raw.strip()!r}", lineno, source)
            section = line[1:-1].strip()
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno, source)
        out.append((section, key.strip(), value.strip(), lineno))
    return out


def parse_config_text(text: str, source: str | None = None) -> ExperimentConfig:
    values: dict[str, object] = {}
    lines: dict[str, int] = {}
    for section, key, value, lineno in parse_sections(text, source):
        if not section:
            raise ConfigError(f"key {key!r} outside any section", lineno, source)
        if (section, key) not in SCHEMA:
            raise ConfigError(f"unknown key {section}.{key}", lineno, source)
        attr, parse, _default, _doc = SCHEMA[(section, key)]
        try:
            values[attr] = parse(value)
        except ValueError as exc:
            raise ConfigError(f"malformed value for {section}.{key}: {exc}", lineno, source) from None
        lines[attr] = lineno
    cfg = ExperimentConfig(**values)
    try:
        return cfg.validate()
    except ValueError as exc:
        bad = str(exc).split(" ", 1)[0]
        section, _, key = bad.partition(".")
        attr = SCHEMA.get((section, key), (None,))[0]
        raise ConfigError(str(exc), lines.get(attr), source) from None


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config_text(path.read_text(), str(path))


def parse_variants(path) -> dict[str, dict[str, str]]:
    """Variant file: one section per variant, keys are ``section.key`` overrides."""
    path = Path(path)
    text = path.read_text()
    variants: dict[str, dict[str, str]] = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if line.startswith("[") and line.endswith("]"):
            variants.setdefault(line[1:-1].strip(), {})  # a variant may override nothing
    for section, key, value, lineno in parse_sections(text, str(path)):
        if not section:
            raise ConfigError(f"override {key!r} outside any variant section", lineno, str(path))
        s, _, k = key.partition(".")
        if (s, k) not in SCHEMA:
            raise ConfigError(f"unknown key {key}", lineno, str(path))
        variants.setdefault(section, {})[key] = value
    return variants


def defaults_table() -> str:
    rows = []
    for (section, key), (_attr, _parse, default, doc) in SCHEMA.items():
        rows.append(f"{section}.{key} = {_fmt(default)}  # {doc}")
    return "\n".join(rows)


assert {f.name for f in fields(ExperimentConfig)} == {v[0] for v in SCHEMA.values()}
