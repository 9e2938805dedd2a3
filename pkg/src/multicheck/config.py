"""INI experiment configuration: parsing, validation, resolution and fingerprints.

An empty file resolves to the built-in defaults. Sections::

    [data]       path (directory holding train/val/test.jsonl; empty = synthetic)
    [synthetic]  SyntheticSpec fields; alignment.<Label> = <text rule> <image rule>
    [model]      ModelConfig fields
    [objective]  contrastive (on/off), tau, lam
    [training]   seeds and the remaining TrainConfig fields
    [output]     dir
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import LABEL_NAMES, SPLITS, SyntheticSpec, resolve_split_path
from .errors import ConfigError
from .model import ModelConfig
from .trainer import TrainConfig

SECTIONS = ("data", "synthetic", "model", "objective", "training", "output")
_OBJECTIVE_KEYS = {"contrastive": "contrastive_enabled", "tau": "tau", "lam": "lam"}
_TRAINING_SKIP = {"model", "contrastive_enabled", "tau", "lam"}


@dataclass
class ExperimentConfig:
    data_path: str | None = None
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: str = "runs"

    @property
    def arm(self) -> str:
        return "contrastive" if self.train.contrastive_enabled else "ablation"

    def validate(self) -> None:
        self.train.validate()
        if self.data_path is None:
            self.synthetic.validate()

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        model = train.pop("model")
        objective = {"contrastive": "on" if train.pop("contrastive_enabled") else "off"}
        objective["tau"] = train.pop("tau")
        objective["lam"] = train.pop("lam")
        return {
            "data": {"path": self.data_path or ""},
            "synthetic": self.synthetic.to_dict(),
            "model": model,
            "objective": objective,
            "training": train,
            "output": {"dir": self.out_dir},
        }

    def fingerprint(self) -> str:
        """Hash of the settings that can change results.

        The output dir and data location are excluded; dataset content is
        covered separately by :func:`input_fingerprint`.
        """
        d = self.to_dict()
        d.pop("output")
        d.pop("data")
        if self.data_path is not None:
            d.pop("synthetic")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def to_ini(self) -> str:
        parser = _new_parser()
        for section, values in self.to_dict().items():
            parser.add_section(section)
            for key, value in values.items():
                if section == "synthetic" and key == "alignment":
                    for label, rules in value.items():
                        parser.set(section, f"alignment.{label}", " ".join(rules))
                else:
                    parser.set(section, key, _format(value))
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()


def _new_parser() -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep label names case-sensitive
    return parser


def _format(value) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, (list, tuple)):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _parse_bool(raw: str, where: str) -> bool:
    v = raw.strip().lower()
    if v in ("on", "true", "yes", "1"):
        return True
    if v in ("off", "false", "no", "0"):
        return False
    raise ConfigError(f"{where}: expected on/off, got {raw!r}")


def _coerce(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            return _parse_bool(raw, where)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(x) for x in items)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} ({exc})") from None


def _apply(obj, section: str, items: dict, skip=()) -> None:
    names = {f.name for f in dataclasses.fields(obj)} - set(skip)
    for key, raw in items.items():
        if key not in names:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        setattr(obj, key, _coerce(raw, getattr(obj, key), f"[{section}] {key}"))


def parse_config(text: str, base_dir: str | Path | None = None) -> ExperimentConfig:
    parser = _new_parser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]; expected one of {', '.join(SECTIONS)}")

    cfg = ExperimentConfig()
    get = lambda s: dict(parser.items(s)) if parser.has_section(s) else {}

    data = get("data")
    for key in data:
        if key != "path":
            raise ConfigError(f"[data] unknown key {key!r}")
    path = data.get("path", "").strip()
    if path:
        p = Path(path)
        if base_dir is not None and not p.is_absolute():
            p = Path(base_dir) / p
        cfg.data_path = str(p.resolve())

    synth = get("synthetic")
    alignment = dict(cfg.synthetic.alignment)
    for key in [k for k in synth if k.startswith("alignment.")]:
        label = key.split(".", 1)[1]
        if label not in LABEL_NAMES:
            raise ConfigError(f"[synthetic] {key}: unknown label {label!r}")
        rules = synth.pop(key).split()
        if len(rules) != 2:
            raise ConfigError(f"[synthetic] {key}: expected '<text rule> <image rule>'")
        alignment[label] = tuple(rules)
    _apply(cfg.synthetic, "synthetic", synth, skip={"alignment"})
    cfg.synthetic.alignment = alignment

    _apply(cfg.train.model, "model", get("model"))

    for key, raw in get("objective").items():
        if key not in _OBJECTIVE_KEYS:
            raise ConfigError(f"[objective] unknown key {key!r}")
        attr = _OBJECTIVE_KEYS[key]
        setattr(cfg.train, attr, _coerce(raw, getattr(cfg.train, attr), f"[objective] {key}"))

    _apply(cfg.train, "training", get("training"), skip=_TRAINING_SKIP)

    out = get("output")
    for key in out:
        if key != "dir":
            raise ConfigError(f"[output] unknown key {key!r}")
    if out.get("dir", "").strip():
        cfg.out_dir = out["dir"].strip()

    cfg.validate()
    return cfg


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Read and validate a config file; ``None`` gives the defaults.

    A relative ``[data] path`` is resolved against the config file's directory.
    """
    if path is None:
        cfg = ExperimentConfig()
        cfg.validate()
        return cfg
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), base_dir=path.parent)


def git_blob_hash(data: bytes) -> str:
    """Content hash in git's blob format: sha1(b"blob <len>\\0" + data)."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def input_fingerprint(cfg: ExperimentConfig) -> dict:
    """Identify the training inputs: dataset file hashes or the synthetic spec."""
    if cfg.data_path is None:
        spec = json.dumps(cfg.synthetic.to_dict(), sort_keys=True).encode()
        files = {"synthetic_spec": git_blob_hash(spec)}
        source = "synthetic"
    else:
        files = {}
        for split in SPLITS:
            p = resolve_split_path(cfg.data_path, split)
            files[split] = git_blob_hash(Path(p).read_bytes()) if Path(p).is_file() else None
        images = Path(cfg.data_path) / "images"
        if images.is_dir():
            h = hashlib.sha256()
            for f in sorted(images.rglob("*")):
                if f.is_file():
                    h.update(f"{f.relative_to(images).as_posix()} {git_blob_hash(f.read_bytes())}\n".encode())
            files["images"] = h.hexdigest()
        source = "jsonl"
    combined = hashlib.sha256(json.dumps(files, sort_keys=True).encode()).hexdigest()
    return {"source": source, "files": files, "fingerprint": combined}
