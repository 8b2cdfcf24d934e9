"""Experiment configuration: TOML file with nested sections over embedded defaults."""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import InvalidArgument

# Physical constants are in GeV (G_F in GeV^-2); everything downstream uses GeV.
DEFAULTS: dict = {
    "seed": 0,
    "out_dir": "zdecay_out",
    "workers": 1,
    "physics": {"m_z": 91.18, "m_w": 80.41, "g_fermi": 1.16e-5, "gamma": 0.25, "sigma0": None},
    "grid": {
        "kind": "geometric",      # "geometric" or "toy"
        "quadrature": "log-midpoint",
        "n_nodes": 6,
        "p_min": None,            # default m_z / 256
        "p_max": None,            # default 2 m_z
        "n_boson": 2,
        "k_max": None,            # default 1.2 m_z
        "polarizations": [1, -1],
        "toy_nodes": [1, 1, 1],
    },
    "caps": {"nu": 2, "nubar": 2, "boson": 2},
    "kernel": {"mode": "quadrature", "resolution": 1.0, "radius": 1.0, "amplitude": 1.0, "edge": 1.2,
               "derivatives": True},
    "cascade": {"g": [0.0, 0.01, 0.05, 0.1], "g_main": 0.05, "depth": 3, "weyl_lambda": 10.0,
                "weyl_length": 4},
    "mourre": {"g": [0.0, 0.01, 0.05], "levels": [0, 1, 2], "s": 1.0, "n_re": 9, "im_floor": 1e-3,
               "rho_floor": 0.5},
    "dynamics": {"s": 1.0, "mu": 0.25, "chi_plateau": None, "chi_stop": None, "t_min": 1e-3,
                 "n_times": 240, "onset_levels": [0, 1]},
    "checks": {"trials": 200, "eps": [0.1, 1.0, 10.0], "algebra_tol": 1e-12, "lanczos_tol": 1e-9,
               "pull_through_tol": 1e-10, "pull_through_g": [0.0, 0.1], "dense_limit": 4096,
               "determinism": True},
}

GRID_KINDS = ("geometric", "toy")
QUADRATURES = ("log-midpoint",)
KERNEL_MODES = ("quadrature", "surrogate")


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise InvalidArgument(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise InvalidArgument(f"config key {path + k!r} must be a table")
            out[k] = _merge(base[k], v, path + k + ".")
        else:
            out[k] = v
    return out


@dataclass
class ExperimentConfig:
    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    source: Optional[str] = None

    def __post_init__(self):
        self.validate()

    @classmethod
    def from_dict(cls, over: dict, source: Optional[str] = None) -> "ExperimentConfig":
        return cls(_merge(DEFAULTS, over), source)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise InvalidArgument(f"config file {path} does not exist")
        with open(path, "rb") as fh:
            try:
                over = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise InvalidArgument(f"{path}: {exc}") from exc
        return cls.from_dict(over, str(path))

    @classmethod
    def toy(cls, **over) -> "ExperimentConfig":
        """The dimension-8 instance: one mode per species, caps (1, 1, 1)."""
        base = {"grid": {"kind": "toy", "toy_nodes": [1, 1, 1]}, "caps": {"nu": 1, "nubar": 1, "boson": 1},
                "kernel": {"mode": "surrogate"}}
        return cls.from_dict(_merge(_merge(DEFAULTS, base), over))

    def __getitem__(self, key: str) -> Any:
        return self.get(key)

    def get(self, dotted: str) -> Any:
        node = self.data
        for part in dotted.split("."):
            if not isinstance(node, dict) or part not in node:
                raise InvalidArgument(f"unknown config key {dotted!r}")
            node = node[part]
        return node

    def set(self, dotted: str, value) -> None:
        parts = dotted.split(".")
        self.get(dotted)
        node = self.data
        for part in parts[:-1]:
            node = node[part]
        node[parts[-1]] = value
        self.validate()

    # resolved physical defaults
    @property
    def m_z(self) -> float:
        return float(self.data["physics"]["m_z"])

    @property
    def sigma0(self) -> float:
        s = self.data["physics"]["sigma0"]
        return self.m_z if s is None else float(s)

    @property
    def gamma(self) -> float:
        return float(self.data["physics"]["gamma"])

    def validate(self) -> None:
        d = self.data
        ph = d["physics"]
        for key in ("m_z", "m_w", "g_fermi"):
            if not ph[key] > 0:
                raise InvalidArgument(f"physics.{key} must be positive")
        if not 0 < ph["gamma"] < 1:
            raise InvalidArgument("physics.gamma must lie in (0, 1)")
        if d["grid"]["kind"] not in GRID_KINDS:
            raise InvalidArgument(f"grid.kind must be one of {GRID_KINDS}")
        if d["grid"]["quadrature"] not in QUADRATURES:
            raise InvalidArgument(f"grid.quadrature must be one of {QUADRATURES}")
        if d["kernel"]["mode"] not in KERNEL_MODES:
            raise InvalidArgument(f"kernel.mode must be one of {KERNEL_MODES}")
        if int(d["grid"]["n_nodes"]) < 1 or int(d["grid"]["n_boson"]) < 1:
            raise InvalidArgument("grid node counts must be positive")
        if min(d["caps"].values()) < 0:
            raise InvalidArgument("caps must be non-negative")
        gs = list(d["cascade"]["g"]) + list(d["mourre"]["g"]) + [d["cascade"]["g_main"]]
        if any(g < 0 for g in gs):
            raise InvalidArgument("couplings must be non-negative")
        dyn = d["dynamics"]
        if not (0 < dyn["s"] <= 1 and 0 < dyn["mu"] < dyn["s"]):
            raise InvalidArgument("dynamics needs 0 < s <= 1 and 0 < mu < s")
        if not 0.5 < d["mourre"]["s"] <= 1:
            raise InvalidArgument("mourre.s must lie in (1/2, 1]")
        if int(d["workers"]) < 1:
            raise InvalidArgument("workers must be at least 1")

    def canonical(self) -> str:
        return json.dumps(self.data, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def parse_value(text: str):
    """A command-line override: TOML scalar/array syntax, bare strings otherwise."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text
