"""Run configuration: one TOML document with a table per pipeline stage.

Unknown keys are rejected and every module-level invariant is checked while
parsing, so a bad value fails before any stage runs. Command-line overrides
use dotted key paths (``--set knn.k=5``).
"""

from __future__ import annotations

import dataclasses
import re
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .dataset import CropSpec, SynthSpec
from .errors import ConfigError
from .knn import METRICS, KernelParams
from .metrics import METHODS
from .pseudolabel import PseudoLabelConfig
from .trainer import TrainConfig
from .tsne import TsneConfig


@dataclass
class SynthSection:
    num_classes: int = 11
    images_per_class: int = 20
    image_size: tuple[int, int] = (256, 256)
    separation: str = "high"
    wafers_per_class: int = 5
    seed: Optional[int] = None


@dataclass
class DataSection:
    manifest: str = "data/manifest.jsonl"
    split_ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    split_seed: Optional[int] = None


@dataclass
class CropSection:
    origin: Optional[tuple[int, int]] = None
    size: Optional[tuple[int, int]] = None
    output: tuple[int, int] = (224, 224)

    def spec(self) -> CropSpec:
        return CropSpec(self.origin, self.size, self.output)


@dataclass
class EmbedSection:
    backend: str = "reference"
    model_path: Optional[str] = None
    output_name: Optional[str] = None


@dataclass
class KnnSection:
    k: int = 10
    k_values: list[int] = field(default_factory=list)
    bandwidth: Optional[float] = None
    bandwidth_mode: str = "median"
    metric: str = "euclidean"
    normalize: bool = False
    shots: int = 15


@dataclass
class TrainSection:
    head: str = "linear"
    hidden: int = 512
    epochs: int = 200
    peak_lr: float = 1e-2
    lr_values: list[float] = field(default_factory=list)
    min_lr: float = 0.0
    warmup_steps: Optional[int] = None
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    shots: int = 15


@dataclass
class PseudoSection:
    threshold: float = 0.9
    alpha: float = 1.0
    rounds: int = 1
    ramp: bool = False
    fresh_init: bool = True
    shots: int = 5
    max_unlabeled: Optional[int] = None


@dataclass
class TsneSection:
    perplexity: float = 30.0
    iterations: int = 1000
    exaggeration: float = 12.0
    exaggeration_iters: int = 250
    momentum_initial: float = 0.5
    momentum_final: float = 0.8
    momentum_switch: int = 250
    learning_rate: float = 200.0
    init_scale: float = 1e-2
    split: str = "test"
    representation: str = "raw"  # or "head" (needs a trained head)
    max_points: Optional[int] = None


@dataclass
class SweepSection:
    shots: list[int] = field(default_factory=lambda: [1, 2, 5, 10, 15, 25, 50])
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    per_layer: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    synth: SynthSection = field(default_factory=SynthSection)
    data: DataSection = field(default_factory=DataSection)
    crop: dict[str, CropSection] = field(default_factory=dict)
    embed: EmbedSection = field(default_factory=EmbedSection)
    knn: KnnSection = field(default_factory=KnnSection)
    train: TrainSection = field(default_factory=TrainSection)
    pseudo: PseudoSection = field(default_factory=PseudoSection)
    tsne: TsneSection = field(default_factory=TsneSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    # -- module objects ----------------------------------------------------

    def synth_spec(self) -> SynthSpec:
        s = self.synth
        return SynthSpec(s.num_classes, s.images_per_class, tuple(s.image_size), s.separation,
                         s.wafers_per_class, self.seed if s.seed is None else s.seed)

    def crop_for(self, layer: int) -> CropSpec:
        sec = self.crop.get(f"layer{layer}") or self.crop.get("default") or CropSection()
        return sec.spec()

    def kernel(self, k: Optional[int] = None) -> KernelParams:
        mode = "fixed" if self.knn.bandwidth_mode == "fixed" else "median"
        return KernelParams(k if k is not None else self.knn.k, self.knn.bandwidth, mode)

    def train_config(self, seed: Optional[int] = None, peak_lr: Optional[float] = None) -> TrainConfig:
        t = self.train
        return TrainConfig(
            epochs=t.epochs,
            peak_lr=t.peak_lr if peak_lr is None else peak_lr,
            min_lr=t.min_lr,
            warmup_steps=t.warmup_steps,
            weight_decay=t.weight_decay,
            beta1=t.beta1,
            beta2=t.beta2,
            eps=t.eps,
            hidden=t.hidden if t.head == "mlp" else None,
            seed=self.seed if seed is None else seed,
        )

    def pseudo_config(self, seed: Optional[int] = None) -> PseudoLabelConfig:
        p = self.pseudo
        return PseudoLabelConfig(p.threshold, p.alpha, p.rounds, p.ramp, p.fresh_init, self.train_config(seed))

    def tsne_config(self) -> TsneConfig:
        t = self.tsne
        return TsneConfig(t.perplexity, t.iterations, t.exaggeration, t.exaggeration_iters,
                          t.momentum_initial, t.momentum_final, t.momentum_switch,
                          t.learning_rate, t.init_scale, self.seed)

    def validate(self) -> None:
        checks = [
            ("synth", self.synth_spec),
            ("train", self.train_config),
            ("pseudo", self.pseudo_config),
            ("tsne", self.tsne_config),
            ("knn", self.kernel),
        ]
        for name, build in checks:
            try:
                build()
            except ValueError as exc:
                raise ConfigError(f"[{name}] {exc}") from None
        for name, sec in self.crop.items():
            if not re.fullmatch(r"default|layer\d+", name):
                raise ConfigError(f"unknown key 'crop.{name}' (expected 'default' or 'layer<N>')")
            try:
                sec.spec()
            except ValueError as exc:
                raise ConfigError(f"[crop.{name}] {exc}") from None
        r = self.data.split_ratios
        if len(r) != 3 or min(r) < 0 or abs(sum(r) - 1.0) > 1e-9:
            raise ConfigError(f"data.split_ratios must be 3 nonnegative fractions summing to 1, got {list(r)}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.embed.backend not in ("reference", "onnx"):
            raise ConfigError(f"embed.backend must be 'reference' or 'onnx', got {self.embed.backend!r}")
        if self.knn.bandwidth_mode not in ("fixed", "median"):
            raise ConfigError("knn.bandwidth_mode must be 'fixed' or 'median'")
        if self.knn.metric not in METRICS:
            raise ConfigError(f"knn.metric must be one of {list(METRICS)}")
        if any(k < 1 for k in self.knn.k_values):
            raise ConfigError("knn.k_values entries must be >= 1")
        if self.train.head not in ("linear", "mlp"):
            raise ConfigError("train.head must be 'linear' or 'mlp'")
        for name in ("knn", "train", "pseudo"):
            if getattr(self, name).shots < 1:
                raise ConfigError(f"{name}.shots must be >= 1")
        if self.tsne.split not in ("train", "val", "test"):
            raise ConfigError("tsne.split must be train, val or test")
        if self.tsne.representation not in ("raw", "head"):
            raise ConfigError("tsne.representation must be 'raw' or 'head'")
        shots = self.sweep.shots
        if not shots or any(s < 1 for s in shots) or sorted(set(shots)) != list(shots):
            raise ConfigError("sweep.shots must be a strictly increasing list of positive integers")
        bad = [m for m in self.sweep.methods if m not in METHODS]
        if bad or not self.sweep.methods:
            raise ConfigError(f"sweep.methods must be drawn from {list(METHODS)}, got {self.sweep.methods}")

    def to_dict(self) -> dict:
        return _strip_none(dataclasses.asdict(self))


def _strip_none(obj):
    if isinstance(obj, dict):
        return {k: _strip_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_strip_none(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# parsing

_NULLS = ("none", "null")


def _coerce(value: Any, tp, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:  # Optional[X]
        inner = [a for a in args if a is not type(None)][0]
        if value is None or (isinstance(value, str) and value.lower() in _NULLS):
            return None
        return _coerce(value, inner, where)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a table")
        return _build(tp, value, where)
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a table")
        return {k: _coerce(v, args[1], f"{where}.{k}") for k, v in value.items()}
    if origin in (list, tuple):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        item = args[0]
        if origin is tuple and len(args) > 1 and args[1] is not Ellipsis:
            if len(value) != len(args):
                raise ConfigError(f"{where}: expected {len(args)} values, got {len(value)}")
        out = [_coerce(v, item, f"{where}[{i}]") for i, v in enumerate(value)]
        return tuple(out) if origin is tuple else out
    if tp is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigError(f"{where}: expected true or false, got {value!r}")
    if tp is int:
        if isinstance(value, bool):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        try:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(str(value).strip()) if isinstance(value, str) else int(value)
        except ValueError:
            raise ConfigError(f"{where}: expected an integer, got {value!r}") from None
    if tp is float:
        if isinstance(value, bool):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: expected a number, got {value!r}") from None
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported type {tp}")


def _build(cls, table: dict, where: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - names)
    if unknown:
        key = f"{where}.{unknown[0]}" if where else unknown[0]
        raise ConfigError(f"unknown config key '{key}'")
    kwargs = {k: _coerce(v, hints[k], f"{where}.{k}" if where else k) for k, v in table.items()}
    return cls(**kwargs)


def _parse_scalar(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _set_path(doc: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = doc
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set '{dotted}': '{p}' is not a table")
    node[parts[-1]] = value


def load_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    """Read ``path`` (optional), apply dotted-key overrides, validate."""
    doc: dict = {}
    if path is not None:
        path = Path(path)
        try:
            doc = tomllib.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        _checked(doc, str(path), text=path.read_text(encoding="utf-8"))
    for key, value in (overrides or {}).items():
        _set_path(doc, key, _parse_scalar(value) if isinstance(value, str) else value)
    return _checked(doc, "command-line override" if path is None else f"{path} + command-line overrides")


def _checked(doc: dict, where: str, text: Optional[str] = None) -> RunConfig:
    try:
        cfg = _build(RunConfig, doc, "")
        cfg.validate()
    except ConfigError as exc:
        m = re.search(r"'([\w.]+)'", str(exc))
        if text is not None and m:
            leaf = re.escape(m.group(1).split(".")[-1])
            for lineno, line in enumerate(text.splitlines(), 1):
                if re.match(rf"\s*{leaf}\s*=", line):
                    where = f"{where}:{lineno}"
                    break
        raise ConfigError(f"{where}: {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    return cfg


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def dump_toml(cfg: RunConfig) -> str:
    """Serialize a config as TOML (only the value types used above)."""

    def val(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (int, float)):
            return repr(v)
        if isinstance(v, str):
            return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(val(x) for x in v) + "]"
        raise TypeError(v)

    d = cfg.to_dict()
    lines = [f"{k} = {val(v)}" for k, v in d.items() if not isinstance(v, dict)]
    for name, table in d.items():
        if not isinstance(table, dict):
            continue
        if name == "crop":
            for sub, t in table.items():
                lines.append(f"\n[crop.{sub}]")
                lines += [f"{k} = {val(v)}" for k, v in t.items()]
            continue
        lines.append(f"\n[{name}]")
        lines += [f"{k} = {val(v)}" for k, v in table.items()]
    return "\n".join(lines) + "\n"
