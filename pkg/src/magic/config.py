"""INI-style run configuration with strict key validation.

Sections and keys are declared in SCHEMA; unknown sections or keys are
rejected so typos fail loudly. `echo` serializes the fully resolved
configuration (defaults included) for the run directory.
"""

from __future__ import annotations

import configparser
import hashlib
import io

MODALITIES = ("edge", "sketch", "segmentation", "depth")


class ConfigError(ValueError):
    pass


def _bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _int_list(text):
    return tuple(int(v) for v in str(text).replace(",", " ").split())


def _float_list(text):
    return tuple(float(v) for v in str(text).replace(",", " ").split())


def _str_list(text):
    return tuple(v.strip() for v in str(text).split(",") if v.strip())


_TRAIN_KEYS = {
    "steps": (int, 2000),
    "batch_size": (int, 32),
    "lr": (float, 2e-4),
    "seed": (int, 0),
}

SCHEMA = {
    "data": {
        "size": (int, 32),
        "train_limit": (int, 2000),
        "val_limit": (int, 200),
        "test_limit": (int, 500),
    },
    "schedule": {
        "t_train": (int, 1000),
        "beta_start": (float, 1e-4),
        "beta_end": (float, 0.02),
        "t_sample": (int, 50),
        "eta": (float, 0.0),
    },
    "backbone": {
        "base_channels": (int, 32),
        "channel_mults": (_int_list, (1, 2, 4)),
        "blocks_per_scale": (int, 2),
        "time_embed_dim": (int, 128),
        "cond_embed_classes": (int, 0),
        "checkpoint": (str, ""),
        **_TRAIN_KEYS,
    },
    "cmb": {
        "p": (int, 30),
        "q": (int, 5),
        "gamma": (float, 0.5),
        "eta": (float, 1.0),
        "q_mode": (str, "time_travel"),
        "normalize_grad": (_bool, False),
        **{f"delta.{m}": (float, 0.0) for m in MODALITIES},
    },
    "complete": {
        "mode": (str, "unguided"),  # unguided | single | cmb | fla
        "modality": (str, "edge"),
        "fla_steps": (int, 50),
        "scene_seeds": (_int_list, (11000,)),
        "samples_per_input": (int, 5),
        "mask_mode": (str, "random"),  # random | rect | brush | border | half
        "mask_ratio": (float, 0.4),
    },
    "sweep": {
        "axis": (str, "P"),  # P | Q | gamma | modality_subsets
        "values": (_float_list, (0.0, 30.0)),
        "subsets": (_str_list, ()),
        "n_samples": (int, 100),
    },
    "eval": {
        "n_samples": (int, 200),
        "extractor_checkpoint": (str, ""),
        "extractor_steps": (int, 3000),
        "run_a": (str, ""),
        "run_b": (str, ""),
    },
    "run": {
        "seed": (int, 0),
        "out": (str, "runs/out"),
    },
}
for _m in MODALITIES:
    SCHEMA[f"mcu.{_m}"] = {"checkpoint": (str, ""), **_TRAIN_KEYS}


class RunConfig:
    def __init__(self, values, explicit=()):
        self._values = values
        self.explicit_sections = frozenset(explicit)

    def __getitem__(self, section):
        return self._values[section]

    def get(self, section, key):
        return self._values[section][key]

    def sections(self):
        return self._values.keys()

    def echo(self):
        """Fully resolved INI text, deterministic ordering."""
        out = io.StringIO()
        for section in sorted(self._values):
            out.write(f"[{section}]\n")
            for key in sorted(self._values[section]):
                val = self._values[section][key]
                if isinstance(val, tuple):
                    val = ", ".join(str(v) for v in val)
                elif isinstance(val, bool):
                    val = "true" if val else "false"
                out.write(f"{key} = {val}\n")
            out.write("\n")
        return out.getvalue()

    def digest(self):
        return hashlib.sha256(self.echo().encode("utf-8")).hexdigest()

    def delta_map(self):
        return {
            m: self.get("cmb", f"delta.{m}")
            for m in MODALITIES
            if self.get("cmb", f"delta.{m}") > 0
        }


def _defaults():
    return {
        section: {key: default for key, (_, default) in keys.items()}
        for section, keys in SCHEMA.items()
    }


def parse_config(text) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.optionxform = str  # keep key case as written
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    values = _defaults()
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            kind, _ = SCHEMA[section][key]
            try:
                values[section][key] = kind(raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for [{section}] {key}: {raw!r}") from exc
    return RunConfig(values, explicit=parser.sections())


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())
