"""Strict INI-style run configuration.

Layout::

    seed = 0                  # global keys come before any section
    out = runs/mnist
    [model]
    hidden = 256, 128
    [data]
    source = mnist
    [attack.bim]              # adversarial-corpus generation
    epsilon = 0.3
    [defense.bim]             # defense attacks (fingerprint columns, in order)
    [detector]
    type = ensemble
    [sweep]
    kappas = 0, 2, 4, 6, 8

Unknown keys, unknown sections, duplicates and bad values are errors that
carry the file name and line number. Attack sections named after a known
attack (fgsm, bim, jsma, cw for [attack.*]; bim, bim2, jsma, dba for
[defense.*]) start from that attack's defaults; any other name must set
``kind``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from . import attacks as A


class ConfigError(ValueError):
    def __init__(self, message, path=None, line=None):
        where = f"{path or '<config>'}:{line}: " if line else (f"{path}: " if path else "")
        super().__init__(where + message)
        self.line = line


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _list(conv):
    def parse(text: str):
        return tuple(conv(v.strip()) for v in text.split(",") if v.strip())
    return parse


def _text(text: str) -> str:
    return text.strip()


_int_list = _list(int)
_float_list = _list(float)
_str_list = _list(str)

GLOBAL_KEYS = {"seed": (int, 0), "out": (_text, "runs"), "workers": (int, 1), "data_dir": (_text, "")}

SECTIONS = {
    "model": {
        "hidden": (_int_list, (256, 128)),
        "learning_rate": (float, 0.1),
        "epochs": (int, 15),
        "batch_size": (int, 64),
        "weight_init_scale": (float, 1.0),
        "adversarial_training": (_text, ""),  # name of an [attack.*] BIM_Linf section
    },
    "data": {
        "source": (_text, "mnist"),  # mnist | blobs
        "train_n": (int, 60000),
        "fit_n": (int, 500),
        "eval_n": (int, 500),
        "classes": (int, 10),  # blobs only
        "per_class": (int, 200),
        "dim": (int, 16),
        "spread": (float, 0.15),
    },
    "detector": {
        "type": (_text, "auto"),  # zscore | ensemble | knn; auto = zscore for one defense, else ensemble
        "defenses": (_str_list, ()),  # default: every [defense.*] section
        "h": (float, -1.281552),
        "vote_k": (int, 2),
        "k": (int, 100),
    },
    "sweep": {
        "kappas": (_float_list, (0.0, 2.0, 4.0, 6.0, 8.0)),
        "l2_cap": (float, 8.4),
        "attack": (_text, ""),  # an [attack.*] CW_L2 section; default: built-in cw
        "n": (int, 100),
        "ae": (_bool, True),
        "ae_fpr": (float, 0.01),
        "ae_train_n": (int, 20000),
        "ae_epochs": (int, 20),
        "ae_learning_rate": (float, 2.0),
        "ae_bottleneck": (int, 32),
    },
}

ATTACK_KEYS = {
    "kind": _text,
    "epsilon": float,
    "alpha": float,
    "max_iter": int,
    "theta": float,
    "gamma": float,
    "mse_threshold": float,
    "kappa": float,
    "c": float,
    "targeting": A.Targeting.parse,
    "seed": int,
    "norm": _text,
    "spherical_step": float,
    "source_step": float,
    "max_init_draws": int,
    "init_search_steps": int,
}

_SECTION_RE = re.compile(r"^\[\s*([A-Za-z0-9_.\-]+)\s*\]$")


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs"
    workers: int = 1
    data_dir: str = ""
    model: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    detector: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    attacks: dict = field(default_factory=dict)  # name -> AttackConfig, file order
    defenses: dict = field(default_factory=dict)
    source: str = ""

    def canonical(self) -> dict:
        """Everything that influences results (not out/workers/data_dir)."""
        def cfg(c):
            d = dataclasses.asdict(c)
            d["targeting"] = str(c.targeting)
            return d
        return {
            "seed": self.seed,
            "model": _plain(self.model),
            "data": _plain(self.data),
            "detector": _plain(self.detector),
            "sweep": _plain(self.sweep),
            "attacks": {k: cfg(v) for k, v in self.attacks.items()},
            "defenses": {k: cfg(v) for k, v in self.defenses.items()},
        }

    def sha256(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def detector_defenses(self) -> list:
        names = list(self.detector["defenses"]) or list(self.defenses)
        return names

    def sweep_attack(self) -> A.AttackConfig:
        name = self.sweep["attack"]
        return self.attacks[name] if name else A.GENERATION_DEFAULTS["cw"]


def _plain(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _attack_from(kind_defaults: dict, name: str, values: dict, path, line) -> A.AttackConfig:
    base = kind_defaults.get(name)
    kind = values.pop("kind", None)
    if base is None:
        if kind is None:
            raise ConfigError(f"section for {name!r} needs 'kind' (one of {', '.join(A.KINDS)})", path, line)
        base = A.AttackConfig(kind, targeting=A.target_rank(2) if kind in ("JSMA", "CW_L2") else A.UNTARGETED)
    elif kind is not None and kind != base.kind:
        base = A.AttackConfig(kind, targeting=base.targeting if kind in ("JSMA", "CW_L2") else A.UNTARGETED)
    try:
        return base.replace(**values)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{name}]: {exc}", path, line) from exc


def parse_config(text: str = "", path=None, overrides: dict | None = None) -> RunConfig:
    """Parse config text; `overrides` (seed/out/workers/data_dir) win over the file."""
    cfg = RunConfig(source=str(path or ""))
    cfg.seed, cfg.out, cfg.workers, cfg.data_dir = (d for _, d in GLOBAL_KEYS.values())
    plain = {name: {k: d for k, (_, d) in keys.items()} for name, keys in SECTIONS.items()}
    raw_attacks: dict = {}
    seen: dict = {}
    current = None  # (kind, name) of the open section
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        m = _SECTION_RE.match(line)
        if m:
            sec = m.group(1).lower()
            if sec in seen:
                raise ConfigError(f"duplicate section [{sec}] (first at line {seen[sec]})", path, lineno)
            seen[sec] = lineno
            head, _, tail = sec.partition(".")
            if head in ("attack", "defense") and tail:
                current = (head, tail)
                raw_attacks[current] = ({}, lineno)
            elif sec in SECTIONS:
                current = ("plain", sec)
            else:
                raise ConfigError(f"unknown section [{sec}]", path, lineno)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", path, lineno)
        key, _, value = (part.strip() for part in line.partition("="))
        key = key.lower()
        if current is None:
            if key not in GLOBAL_KEYS:
                raise ConfigError(f"unknown global key {key!r}", path, lineno)
            conv = GLOBAL_KEYS[key][0]
            setattr(cfg, key, _convert(conv, key, value, path, lineno))
        elif current[0] == "plain":
            keys = SECTIONS[current[1]]
            if key not in keys:
                raise ConfigError(f"unknown key {key!r} in [{current[1]}]", path, lineno)
            plain[current[1]][key] = _convert(keys[key][0], key, value, path, lineno)
        else:
            if key not in ATTACK_KEYS:
                raise ConfigError(f"unknown key {key!r} in [{current[0]}.{current[1]}]", path, lineno)
            values = raw_attacks[current][0]
            if key in values:
                raise ConfigError(f"duplicate key {key!r}", path, lineno)
            values[key] = _convert(ATTACK_KEYS[key], key, value, path, lineno)

    for (kind, name), (values, lineno) in raw_attacks.items():
        defaults = A.GENERATION_DEFAULTS if kind == "attack" else A.DEFENSE_DEFAULTS
        attack = _attack_from(defaults, name, dict(values), path, lineno)
        if kind == "defense" and not attack.is_iterative:
            raise ConfigError(f"[defense.{name}]: {attack.kind} is not iterative", path, lineno)
        (cfg.attacks if kind == "attack" else cfg.defenses)[name] = attack
    cfg.model, cfg.data, cfg.detector, cfg.sweep = (plain[s] for s in ("model", "data", "detector", "sweep"))

    for key, value in (overrides or {}).items():
        if value is not None:
            setattr(cfg, key, GLOBAL_KEYS[key][0](value) if isinstance(value, str) else value)
    _validate(cfg, path, seen)
    return cfg


def _convert(conv, key, value, path, lineno):
    try:
        return conv(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}", path, lineno) from exc


def _validate(cfg: RunConfig, path, seen: dict) -> None:
    def line_of(sec):
        return seen.get(sec)

    if not cfg.defenses:
        cfg.defenses = {"bim": A.DEFENSE_DEFAULTS["bim"]}
    for name in cfg.detector["defenses"]:
        if name not in cfg.defenses:
            raise ConfigError(f"[detector] refers to missing section [defense.{name}]", path, line_of("detector"))
    det = cfg.detector
    n_def = len(cfg.detector_defenses())
    if det["type"] == "auto":
        det["type"] = "zscore" if n_def == 1 else "ensemble"
    if det["type"] not in ("zscore", "ensemble", "knn"):
        raise ConfigError(f"[detector] type must be zscore, ensemble or knn, not {det['type']!r}",
                          path, line_of("detector"))
    if det["type"] == "zscore" and n_def != 1:
        raise ConfigError("a zscore detector reads exactly one defense; list it in 'defenses'",
                          path, line_of("detector"))
    if det["type"] == "ensemble" and not 1 <= det["vote_k"] <= n_def:
        raise ConfigError(f"vote_k must lie in [1, {n_def}]", path, line_of("detector"))
    if det["k"] < 1:
        raise ConfigError("k must be positive", path, line_of("detector"))
    at = cfg.model["adversarial_training"]
    if at:
        if at not in cfg.attacks:
            raise ConfigError(f"[model] refers to missing section [attack.{at}]", path, line_of("model"))
        if cfg.attacks[at].kind != "BIM_Linf":
            raise ConfigError("adversarial_training needs a BIM_Linf attack section", path, line_of("model"))
    sw = cfg.sweep["attack"]
    if sw:
        if sw not in cfg.attacks:
            raise ConfigError(f"[sweep] refers to missing section [attack.{sw}]", path, line_of("sweep"))
        if cfg.attacks[sw].kind != "CW_L2":
            raise ConfigError("[sweep] attack must be a CW_L2 section", path, line_of("sweep"))
    if cfg.data["source"] not in ("mnist", "blobs"):
        raise ConfigError("[data] source must be mnist or blobs", path, line_of("data"))
    for key in ("train_n", "fit_n", "eval_n", "classes", "per_class", "dim"):
        if cfg.data[key] < 1:
            raise ConfigError(f"[data] {key} must be positive", path, line_of("data"))
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1", path)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    if path is None:
        return parse_config("", None, overrides)
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", path) from exc
    return parse_config(text, p, overrides)
