"""Plain ``key = value`` run configuration and the run manifest.

A config file holds one assignment per line.  ``#`` starts a comment,
``[section]`` headers prefix the keys that follow (``[grid]`` then
``L = 40`` is the same as ``grid.L = 40``).  Lists are comma separated.
Every value is checked before any output is written, and errors carry
the offending line number.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .errors import ConditionViolated, ConfigError, UnknownName
from .levy_models import LevyModel, check_condition2
from .mass_functions import builtin_mass, load_mass_csv


def _float(text):
    return float(text)


def _int(text):
    value = float(text)
    if value != int(value):
        raise ValueError(f"expected an integer, got {text!r}")
    return int(value)


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _floats(text):
    return tuple(float(t) for t in text.split(",") if t.strip())


def _ints(text):
    """Comma list of integers; ``a:b`` expands to ``a..b`` inclusive."""
    out = []
    for tok in (t.strip() for t in text.split(",")):
        if not tok:
            continue
        if ":" in tok:
            lo, hi = (int(s) for s in tok.split(":"))
            out.extend(range(lo, hi + 1))
        else:
            out.append(_int(tok))
    return tuple(out)


def _str(text):
    return text.strip()


# key -> (parser, default)
SCHEMA = {
    "model.kind": (_str, "brownian"),
    "model.A": (_float, 1.0),
    "model.alpha": (_float, 2.0),
    "model.c": (_float, 1.0),
    "model.jump_rate": (_float, 0.0),
    "model.jump_kind": (_str, "two_point"),
    "model.jump_size": (_float, 1.0),
    "kill_rate": (_float, 0.5),
    "mass.name": (_str, "inv_linear"),
    "mass.param": (_float, None),
    "mass.csv": (_str, None),
    "mass.decay": (_float, 2.0),
    "grid.L": (_float, None),
    "grid.N": (_int, None),
    "spectrum.k": (_int, 40),
    "potential.x_max": (_float, 20.0),
    "potential.points": (_int, 401),
    "potential.r_list": (_floats, (1e-2, 1e-3, 1e-4)),
    "partition.n": (_ints, tuple(range(2, 17)) + (32, 64, 128)),
    "partition.dual": (_bool, True),
    "moments.x": (_float, 0.0),
    "moments.n_max": (_int, 30),
    "mc.paths": (_int, 200_000),
    "mc.dt": (_float, 1e-2),
    "mc.seed": (_int, 0),
    "mc.x": (_float, 0.0),
    "mc.t": (_floats, (0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0)),
    "mc.window": (_floats, (2.0, 6.0)),
    "mc.moments": (_int, 3),
    "mcmc.sweeps": (_int, 1_000_000),
    "mcmc.chains": (_int, 4),
    "mcmc.ring_n": (_int, 64),
    "mcmc.burn_in": (_int, 10_000),
    "mcmc.k": (_ints, tuple(range(1, 11))),
    "smallr.r_list": (_floats, (1e-2, 1e-3, 1e-4)),
    "smallr.h": (_float, 0.05),
    "verify.tamper": (_bool, False),
    "verify.mc": (_bool, False),
    "output.dir": (_str, "out"),
    "cache": (_bool, True),
}


def parse_text(text):
    """Parse config text into ``{key: (raw_value, line_number)}``.

    Raises
    ------
    ConfigError
        On syntax errors, unknown keys or duplicates.
    """
    entries = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if section and "." not in key:
            key = f"{section}.{key}"
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in entries:
            raise ConfigError(f"duplicate key {key!r} (first on line "
                              f"{entries[key][1]})", lineno)
        entries[key] = (value, lineno)
    return entries


@dataclass
class RunConfig:
    """Validated settings for one CLI run."""

    values: dict
    lines: dict = field(default_factory=dict)
    text: str = ""

    def __getitem__(self, key):
        return self.values[key]

    def line(self, key):
        return self.lines.get(key)

    @property
    def digest(self):
        """sha256 of the canonical (sorted, typed) settings.

        The output directory is left out: it says where results go, not
        what they are.
        """
        values = {k: v for k, v in self.values.items() if k != "output.dir"}
        canon = json.dumps(values, sort_keys=True, default=str)
        return hashlib.sha256(canon.encode()).hexdigest()

    def model(self):
        kind = self["model.kind"]
        try:
            if kind == "brownian":
                return LevyModel.brownian(self["model.A"])
            if kind == "stable":
                alpha = self["model.alpha"]
                model = LevyModel.unchecked_stable(alpha, self["model.c"])
                report = check_condition2(model)
                if not report or alpha > 2.0:
                    raise ConditionViolated(
                        f"stable index {alpha:g} outside (1, 2]: {report.detail}")
                return LevyModel.stable(alpha, self["model.c"])
            if kind == "brownian_jumps":
                return LevyModel.brownian_with_jumps(
                    self["model.A"], self["model.jump_rate"],
                    self["model.jump_kind"], self["model.jump_size"])
        except ConditionViolated as exc:
            raise ConfigError(str(exc), self.line("model.alpha")) from exc
        except ValueError as exc:
            raise ConfigError(str(exc), self.line("model.kind")) from exc
        raise ConfigError(f"unknown model kind {kind!r}", self.line("model.kind"))

    def mass(self):
        path = self["mass.csv"]
        if path:
            try:
                return load_mass_csv(path, self["mass.decay"])
            except (OSError, ValueError) as exc:
                raise ConfigError(f"cannot load mass table: {exc}",
                                  self.line("mass.csv")) from exc
        try:
            return builtin_mass(self["mass.name"], self["mass.param"])
        except (UnknownName, ValueError) as exc:
            raise ConfigError(str(exc), self.line("mass.name")) from exc

    def grid_shape(self):
        """``(L, N)`` or ``None`` to use the mass default."""
        L, N = self["grid.L"], self["grid.N"]
        if L is None and N is None:
            return None
        mass = self.mass()
        L = mass.default_half_width() if L is None else L
        N = (3001 if L >= 60 else 2001) if N is None else N
        return L, N


def _check(cfg):
    """Range checks that need more than one key."""
    def fail(msg, key):
        raise ConfigError(msg, cfg.line(key))

    if not cfg["kill_rate"] > 0:
        fail("kill_rate must be positive", "kill_rate")
    N = cfg["grid.N"]
    if N is not None and (N < 3 or N % 2 == 0):
        fail(f"grid.N must be odd and at least 3, got {N}", "grid.N")
    L = cfg["grid.L"]
    if L is not None and not L > 0:
        fail("grid.L must be positive", "grid.L")
    if cfg["spectrum.k"] < 2:
        fail("spectrum.k must be at least 2", "spectrum.k")
    if not 0 < cfg["mc.dt"] <= 1e-2:
        fail("mc.dt must lie in (0, 0.01]", "mc.dt")
    if cfg["mc.paths"] < 1:
        fail("mc.paths must be positive", "mc.paths")
    if len(cfg["mc.window"]) != 2:
        fail("mc.window needs two values", "mc.window")
    if cfg["mcmc.ring_n"] < 2:
        fail("mcmc.ring_n must be at least 2", "mcmc.ring_n")
    if cfg["mcmc.chains"] < 1:
        fail("mcmc.chains must be positive", "mcmc.chains")
    if any(n < 2 for n in cfg["partition.n"]):
        fail("partition.n entries must be at least 2", "partition.n")
    if any(not r > 0 for r in cfg["smallr.r_list"]):
        fail("smallr.r_list entries must be positive", "smallr.r_list")
    cfg.model()
    cfg.mass()


def load_config(text="", overrides=None):
    """Parse, type and validate config text.

    ``overrides`` maps keys to already-typed values (e.g. ``--seed``).
    """
    entries = parse_text(text)
    values, lines = {}, {}
    for key, (parse, default) in SCHEMA.items():
        if key in entries:
            raw, lineno = entries[key]
            try:
                values[key] = parse(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}", lineno) from exc
            lines[key] = lineno
        else:
            values[key] = default
    for key, value in (overrides or {}).items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = value
    cfg = RunConfig(values, lines, text)
    _check(cfg)
    return cfg


def load_config_file(path, overrides=None):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    return load_config(text, overrides)


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    """Record of one run: config hash, version, times and output checksums.

    Timestamps live only here, never inside the data files, so output
    checksums are reproducible.
    """

    command: str
    config_hash: str
    version: str = __version__
    started: str = ""
    finished: str = ""
    files: dict = field(default_factory=dict)

    @staticmethod
    def now():
        return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")

    def record(self, path):
        self.files[os.path.basename(path)] = sha256_file(path)

    def write(self, out_dir):
        self.finished = self.now()
        path = Path(out_dir) / f"manifest_{self.command}.json"
        path.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")
        return path
