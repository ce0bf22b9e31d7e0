"""Run configuration files.

Grammar: UTF-8 text in INI form. ``[section]`` headers, ``key = value``
lines, ``#`` starts a comment (whole line or after a value). Keys and
sections are fixed by ``SCHEMA``; anything else is an error that carries
its line and column. Values:

* numbers may be written with ``pi`` factors, e.g. ``2*pi`` or ``pi/2``;
* lists are comma separated, e.g. ``sizes = 8, 16, 32``;
* an empty value keeps the default.
"""
from __future__ import annotations

import configparser
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

EXPERIMENTS = (
    "validate-weight", "gff-check", "gmc-scaling", "bd-value", "el-residual", "apriori-sweep",
    "coupling-compare", "sandwich", "derivative", "exp-model", "semiclassical", "cutoff-growth",
)


class ConfigError(ValueError):
    def __init__(self, msg: str, line: int | None = None, column: int | None = None, path: str = "<config>"):
        self.line, self.column, self.path = line, column, path
        loc = f"{path}:{line}:{column}" if line is not None else path
        super().__init__(f"{loc}: {msg}")


def parse_number(text: str) -> float:
    """Float with optional ``pi`` factors joined by ``*`` or ``/``."""
    s = text.strip().replace(" ", "")
    if not s:
        raise ValueError("empty number")
    if not re.fullmatch(r"[0-9eE.+\-*/pi]+", s):
        raise ValueError(f"not a number: {text!r}")
    tokens = re.split(r"([*/])", s)
    value = None
    op = "*"
    for tok in tokens:
        if tok in "*/" and tok:
            op = tok
            continue
        neg = tok.startswith("-")
        core = tok[1:] if neg or tok.startswith("+") else tok
        x = math.pi if core == "pi" else float(core)
        x = -x if neg else x
        value = x if value is None else (value * x if op == "*" else value / x)
    return float(value)


def _int(text):
    v = parse_number(text)
    if v != int(v):
        raise ValueError(f"expected an integer, got {text!r}")
    return int(v)


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _floats(text):
    return tuple(parse_number(x) for x in text.split(",") if x.strip())


def _ints(text):
    return tuple(_int(x) for x in text.split(",") if x.strip())


def _str(text):
    return text.strip()


def _opt_float(text):
    return None if text.strip().lower() in ("", "none") else parse_number(text)


# section -> key -> (parser, default)
SCHEMA = {
    "run": {
        "experiment": (_str, None),
        "seed": (_int, 1),
        "output": (_str, "runs"),
    },
    "lattice": {
        "L": (_int, 8),
        "a": (parse_number, 1.0),
        "m": (parse_number, 1.0),
        "n_t": (_int, 16),
    },
    "interaction": {
        "kind": (_str, "phi4"),
        "lam": (parse_number, 0.5),
        "beta2": (parse_number, 0.0),
        "hbar": (parse_number, 1.0),
        "cutoff_radius": (_opt_float, None),
    },
    "optimizer": {
        "method": (_str, "natural"),
        "iterations": (_int, 100),
        "step_size": (parse_number, 1.0),
        "decay": (parse_number, 0.995),
        "ridge": (parse_number, 1e-4),
        "patience": (_int, 50),
        "n_train": (_int, 1000),
        "n_eval": (_int, 4000),
    },
    "oracle": {
        "algorithm": (_str, "hmc"),
        "n_samples": (_int, 2000),
        "n_burn": (_int, 200),
        "n_chains": (_int, 4),
        "n_leapfrog": (_int, 5),
        "step_size": (parse_number, 0.3),
        "n_direct": (_int, 100000),
        "ti_points": (_int, 9),
    },
    "params": {
        "gammas": (_floats, (0.0, 0.25, 0.5, 1.0, 2.0)),
        "weight_gamma": (parse_number, 0.5),
        "eps": (parse_number, 0.5),
        "offsets": (_ints, (0, 0, 0, 1, 1, 1, 0, 2)),
        "n_gff": (_int, 10000),
        "n_gmc": (_int, 1000),
        "gmc_pairs": (_floats, (2 * math.pi, 2.0, 4 * math.pi, 1.5)),
        "gmc_radii": (_floats, (4.0, 8.0, 16.0)),
        "observable": (_str, "quadratic"),
        "obs_C": (parse_number, 0.1),
        "obs_amplitude": (parse_number, 1.0),
        "obs_radius": (_opt_float, None),
        "weight_center_gamma": (parse_number, 0.5),
        "alphas": (_floats, (0.0, 0.5, 1.0)),
        "hbars": (_floats, (1.0, 0.5, 0.25, 0.125)),
        "chain_alphas": (_floats, (0.5, 1.0)),
        "sizes": (_ints, (8, 16, 32)),
        "cutoff_radii": (_floats, ()),
        "n_bumps": (_int, 20),
        "nt_sweep": (_ints, ()),
        "exp_delta": (parse_number, 1e-3),
        "exp_ratio_max": (parse_number, 10.0),
        "fd_directions": (_int, 10),
    },
}


@dataclass
class RunConfig:
    experiment: str
    seed: int
    output: str
    lattice: dict
    interaction: dict
    optimizer: dict
    oracle: dict
    params: dict
    source: str = ""
    text: str = field(default="", repr=False)

    def echo(self) -> dict:
        return {"experiment": self.experiment, "seed": self.seed, "output": self.output,
                "lattice": self.lattice, "interaction": self.interaction, "optimizer": self.optimizer,
                "oracle": self.oracle, "params": {k: list(v) if isinstance(v, tuple) else v
                                                  for k, v in self.params.items()}}


def _locate(lines: list[str], section: str | None, key: str | None = None) -> tuple[int, int]:
    current = None
    for n, raw in enumerate(lines, 1):
        s = raw.strip()
        m = re.match(r"\[(.+)\]", s)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return n, raw.index("[") + 1
            continue
        if key is not None and current == section and "=" in raw and not s.startswith("#"):
            k = raw.split("=", 1)[0]
            if k.strip() == key:
                return n, len(k) - len(k.lstrip()) + 1
    return 1, 1


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), comment_prefixes=("#",),
                                   interpolation=None, strict=True, empty_lines_in_values=False)
    cp.optionxform = str  # keys are case sensitive
    lines = text.splitlines()
    try:
        cp.read_string(text, source=source)
    except configparser.DuplicateOptionError as e:
        raise ConfigError(f"duplicate key {e.option!r} in [{e.section}]", e.lineno, 1, source) from None
    except configparser.DuplicateSectionError as e:
        raise ConfigError(f"duplicate section [{e.section}]", e.lineno, 1, source) from None
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError("key outside of any section", e.lineno, 1, source) from None
    except configparser.ParsingError as e:
        ln, bad = e.errors[0]
        raise ConfigError(f"cannot parse line {bad.strip()!r}", ln, 1, source) from None

    values = {}
    for section in cp.sections():
        if section not in SCHEMA:
            ln, col = _locate(lines, section)
            raise ConfigError(f"unknown section [{section}]", ln, col, source)
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                ln, col = _locate(lines, section, key)
                raise ConfigError(f"unknown key {key!r} in [{section}]", ln, col, source)
            parser, _ = SCHEMA[section][key]
            if raw.strip() == "":
                continue
            try:
                values[(section, key)] = parser(raw)
            except ValueError as e:
                ln, _ = _locate(lines, section, key)
                col = lines[ln - 1].index("=") + 2 if "=" in lines[ln - 1] else 1
                raise ConfigError(f"bad value for {key!r}: {e}", ln, col, source) from None

    merged = {s: {k: values.get((s, k), d) for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    run = merged["run"]
    if run["experiment"] is None:
        raise ConfigError("missing [run] experiment", None, None, source)
    if run["experiment"] not in EXPERIMENTS:
        ln, col = _locate(lines, "run", "experiment")
        raise ConfigError(f"unknown experiment {run['experiment']!r}; expected one of {', '.join(EXPERIMENTS)}",
                          ln, col, source)
    _check_ranges(merged, lines, source)
    return RunConfig(run["experiment"], run["seed"], run["output"], merged["lattice"], merged["interaction"],
                     merged["optimizer"], merged["oracle"], merged["params"], source, text)


def _check_ranges(merged: dict, lines: list[str], source: str):
    def fail(section, key, msg):
        ln, col = _locate(lines, section, key)
        raise ConfigError(msg, ln, col, source)

    lat = merged["lattice"]
    L = lat["L"]
    if L < 2 or L & (L - 1):
        fail("lattice", "L", "L must be a power of two")
    if lat["a"] <= 0:
        fail("lattice", "a", "a must be positive")
    if lat["m"] <= 0:
        fail("lattice", "m", "m must be positive")
    if lat["n_t"] < 1:
        fail("lattice", "n_t", "n_t must be at least 1")
    it = merged["interaction"]
    if it["kind"] not in ("none", "phi4", "exponential"):
        fail("interaction", "kind", "kind must be none, phi4 or exponential")
    if it["lam"] < 0:
        fail("interaction", "lam", "lam must be non-negative")
    if not 0 < it["hbar"] <= 1:
        fail("interaction", "hbar", "hbar must lie in (0, 1]")
    if it["kind"] == "exponential" and not 0 < it["beta2"] < 8 * math.pi:
        fail("interaction", "beta2", "beta2 must lie in (0, 8 pi) for the exponential model")
    if merged["optimizer"]["method"] not in ("natural", "lbfgs"):
        fail("optimizer", "method", "method must be natural or lbfgs")
    if merged["oracle"]["algorithm"] not in ("hmc", "rwm"):
        fail("oracle", "algorithm", "algorithm must be hmc or rwm")
    if merged["params"]["observable"] not in ("none", "linear", "quadratic", "bump_average"):
        fail("params", "observable", "observable must be none, linear, quadratic or bump_average")
    if len(merged["params"]["offsets"]) % 2:
        fail("params", "offsets", "offsets must be a flat list of (dx, dy) pairs")
    if len(merged["params"]["gmc_pairs"]) % 2:
        fail("params", "gmc_pairs", "gmc_pairs must be a flat list of (beta2, p) pairs")


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise ConfigError(f"not valid UTF-8: {e}", None, None, str(path)) from None
    except OSError as e:
        raise ConfigError(f"cannot read: {e.strerror}", None, None, str(path)) from None
    return parse_config(text, str(path))
