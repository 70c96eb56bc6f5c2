"""Run configuration: INI-style sections, typed keys, ``--set`` overrides.

A config file looks like::

    [hierarchy]
    N = 50
    v_star = [1.0, 0.0]

    [output]
    dir = runs/n50

Values are parsed as JSON when possible (numbers, lists, true/false, null),
otherwise kept as strings.  Sections other than the subcommand's own and
``output`` are rejected, as are unknown keys and badly typed values.
"""

from __future__ import annotations

import configparser
import json
import math
import os
import typing
from dataclasses import MISSING, dataclass, fields
from pathlib import Path
from typing import Any

from ..hierarchy_sim import HierarchyConfig

OUTPUT_ROOT_ENV = "KINLAB_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "kinlab-runs"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Param:
    default: Any
    kind: str  # int | float | bool | str | floats | ints | pairs | float? | choice
    doc: str
    choices: tuple = ()


def _geom(a: float, b: float, n: int) -> list[float]:
    return [float(a * (b / a) ** (i / (n - 1))) for i in range(n)]


SCHEMAS: dict[str, dict[str, Param]] = {
    "diagrams": {
        "m0": Param(2, "int", "truncation order"),
        "max_len": Param(3, "int", "closure length K"),
        "enumerate": Param(False, "bool", "print the closure as JSON on stdout"),
        "audit_len": Param(0, "int", "bad-index audit up to this length (0 skips)"),
        "samples": Param(0, "int", "random histories checked for momentum conservation"),
        "sample_len": Param(12, "int", "maximal length of sampled histories"),
        "seed": Param(0, "int", "RNG seed"),
    },
    "landau": {
        "d": Param(3, "int", "dimension"),
        "amplitude": Param(1.0, "float", "Gaussian potential amplitude"),
        "samples": Param(5, "int", "number of random w"),
        "w_min": Param(0.5, "float", "smallest |w|"),
        "w_max": Param(2.0, "float", "largest |w|"),
        "delta": Param(0.1, "float", "largest regularisation in the extrapolation"),
        "levels": Param(3, "int", "extrapolation levels"),
        "rtol": Param(0.01, "float", "relative operator-norm tolerance"),
        "seed": Param(0, "int", "RNG seed"),
        "beta": Param(1.0, "float", "inverse temperature for A0"),
        "tensor_points": Param(5, "int", "velocities per axis for the A0 table"),
        "tensor_extent": Param(3.0, "float", "A0 table covers [-extent, extent]^2"),
    },
    "resolvent": {
        "green_cases": Param([[1, 256, 0.01, 0.3, 1.0, 1.0, 0.0], [1, 256, 0.01, 0.05, -2.0, 3.0, 0.0],
                              [2, 96, 0.01, 0.3, 1.0, 1.0, 0.5], [2, 96, 0.01, 0.05, -2.0, 3.0, -1.0]],
                             "rows", "Green vs direct cases: d, n_pts, sigma, Re omega, Im omega, k..."),
        "green_rtol": Param(1e-6, "float", "relative agreement"),
        "airy_N": Param(_geom(1e2, 1e5, 7), "floats", "N values for the scaling fit"),
        "airy_k": Param(_geom(0.5, 8.0, 5), "floats", "|k| values for the scaling fit"),
        "airy_kappa": Param(1.0, "float", "kappa for the scaling fit"),
        "airy_tol": Param(0.05, "float", "allowed deviation from 1/3 and -2/3"),
        "contour_k": Param(_geom(0.1, 30.0, 8), "floats", "|k| values for the deformation identity"),
        "contour_d": Param(1, "int", "dimension for the deformation identity"),
        "t_N": Param(100.0, "float", "time scale"),
        "N": Param(100.0, "float", "particle number"),
        "kappa": Param(1.0, "float", "diffusion"),
        "contour_rtol": Param(1e-6, "float", "two-sided agreement"),
        "contour_bound": Param(2.0, "float", "bound on |k| |average|"),
        "hat_fields": Param(100, "int", "random fields for the positivity check"),
        "hat_n_pts": Param(32, "int", "grid points per axis for the positivity check"),
        "hat_alphas": Param([0.0, 5.0, -20.0, 50.0], "floats", "Laplace frequencies sampled"),
        "hat_tol": Param(1e-8, "float", "allowed negative part relative to |grad g|^2"),
        "adjoint_tol": Param(1e-10, "float", "adjointness of creation and annihilation"),
        "hat_seed": Param(0, "int", "RNG seed"),
    },
    "geometry": {
        "samples": Param(1000, "int", "random simplices for the pyramid formula"),
        "n_max": Param(6, "int", "largest number of vertices"),
        "d_max": Param(8, "int", "largest ambient dimension"),
        "pyramid_rtol": Param(1e-9, "float", "pyramid residual tolerance"),
        "scan": Param([[3, 4], [4, 5], [2, 2]], "pairs", "(n, d) pairs for the integrability scan"),
        "offset": Param(0.2, "float", "distance of the tested exponents from the threshold"),
        "scan_samples": Param([20_000, 200_000], "ints", "coarse and fine sample sizes"),
        "seed": Param(0, "int", "RNG seed"),
    },
    "hierarchy": {
        "mode": Param("run", "choice", "what to compute", ("run", "convergence", "ansatz", "refine")),
        "N_list": Param([25.0, 50.0, 100.0, 200.0], "floats", "N values for mode=convergence"),
        "sizes": Param([24, 32, 40], "ints", "grid sizes for mode=refine"),
    },
    "audit": {
        "quick": Param(False, "bool", "combinatorial and closed-form checks only"),
        "only": Param([], "ints", "run only these criteria"),
    },
    "output": {
        "dir": Param("", "str", f"output directory (default ${OUTPUT_ROOT_ENV}/<subcommand>)"),
    },
}


def _hierarchy_params() -> dict[str, Param]:
    hints = typing.get_type_hints(HierarchyConfig)
    out = {}
    for f in fields(HierarchyConfig):
        hint = hints[f.name]
        default = f.default if f.default is not MISSING else None
        if hint is bool:
            kind = "bool"
        elif hint is int:
            kind = "int"
        elif hint is float:
            kind = "float"
        elif hint == (float | None):
            kind = "float?"
        else:
            kind = "floats"
            default = list(default)
        out[f.name] = Param(default, kind, f"hierarchy parameter {f.name}")
    return out


SCHEMAS["hierarchy"].update(_hierarchy_params())


def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except ValueError:
        return text.strip()


def _coerce(section: str, key: str, p: Param, value: Any) -> Any:
    where = f"{section}.{key}"

    def bad(expected: str):
        return ConfigError(f"{where}: expected {expected}, got {value!r}")

    def num(x, integral: bool):
        if isinstance(x, bool) or not isinstance(x, (int, float)):
            raise bad("an integer" if integral else "a number")
        if integral:
            if isinstance(x, float) and not x.is_integer():
                raise bad("an integer")
            return int(x)
        if not math.isfinite(x):
            raise bad("a finite number")
        return float(x)

    kind = p.kind
    if kind == "bool":
        if not isinstance(value, bool):
            raise bad("true or false")
        return value
    if kind == "int":
        return num(value, True)
    if kind == "float":
        return num(value, False)
    if kind == "float?":
        return None if value is None else num(value, False)
    if kind == "str":
        if not isinstance(value, str):
            raise bad("a string")
        return value
    if kind == "choice":
        if value not in p.choices:
            raise bad(f"one of {', '.join(p.choices)}")
        return value
    if kind in ("floats", "ints"):
        if not isinstance(value, list):
            raise bad("a list")
        return [num(x, kind == "ints") for x in value]
    if kind in ("pairs", "rows"):
        if not isinstance(value, list) or not all(isinstance(r, list) for r in value):
            raise bad("a list of lists")
        rows = [[num(x, False) for x in r] for r in value]
        if kind == "pairs":
            if any(len(r) != 2 for r in rows):
                raise bad("a list of [n, d] pairs")
            return [[int(a), int(b)] for a, b in rows]
        return rows
    raise AssertionError(kind)


@dataclass
class RunConfig:
    """Validated parameters of one subcommand plus the output directory."""
    subcommand: str
    params: dict
    out_dir: Path
    source: str | None = None

    def echo(self) -> dict:
        return {"subcommand": self.subcommand, "params": self.params}

    def hierarchy_config(self, threads: int | None = None) -> HierarchyConfig:
        names = {f.name for f in fields(HierarchyConfig)}
        data = {k: v for k, v in self.params.items() if k in names}
        if threads is not None:
            data["workers"] = max(1, min(int(data.get("workers", 1)), threads))
        try:
            return HierarchyConfig.from_dict(data)
        except ValueError as exc:
            raise ConfigError(f"hierarchy: {exc}") from exc


def defaults(subcommand: str) -> dict:
    return {k: (list(p.default) if isinstance(p.default, list) else p.default)
            for k, p in SCHEMAS[subcommand].items()}


def read_config_file(path: str | Path) -> dict[str, dict[str, Any]]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    parser.optionxform = str
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return {s: {k: parse_value(v) for k, v in parser.items(s)} for s in parser.sections()}


def parse_override(text: str, subcommand: str) -> tuple[str, str, Any]:
    """'key=value' or 'section.key=value'; the section defaults to the subcommand."""
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    key, value = text.split("=", 1)
    key = key.strip()
    section, _, name = key.rpartition(".")
    return section or subcommand, name, parse_value(value)


def build_config(subcommand: str, path: str | None = None, overrides: list[str] = (),
                 extra: dict | None = None) -> RunConfig:
    """Merge defaults, file, flags (``extra``) and ``--set`` overrides, in that order."""
    layers: list[tuple[str, str, Any]] = []
    if path is not None:
        for section, items in read_config_file(path).items():
            layers += [(section, k, v) for k, v in items.items()]
    for k, v in (extra or {}).items():
        layers.append((subcommand, k, v))
    layers += [parse_override(o, subcommand) for o in overrides]

    values = {"output": defaults("output"), subcommand: defaults(subcommand)}
    for section, key, value in layers:
        if section not in values:
            raise ConfigError(f"unknown section [{section}] for subcommand {subcommand!r}")
        schema = SCHEMAS[section]
        if key not in schema:
            raise ConfigError(f"unknown key {section}.{key}")
        values[section][key] = _coerce(section, key, schema[key], value)

    params = values[subcommand]
    if subcommand == "hierarchy":
        RunConfig(subcommand, params, Path(".")).hierarchy_config()
    out_dir = values["output"]["dir"]
    if not out_dir:
        out_dir = os.path.join(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT), subcommand)
    return RunConfig(subcommand, params, Path(out_dir), None if path is None else str(path))
