"""Run configuration: a TOML file with operator, integrand, grid, solver and output sections.

Example::

    seed = 0

    [operator]
    name = "divergence_perturbed"
    a = "3/4 + sin(2*pi*x1)/4"

    [integrand]
    f = "(xi1^2 + xi2^2 - 1)^2"
    p = 2

    [grids]
    macro = [16, 16]
    micro = [64, 64]

    [solver]
    random_starts = 8
    n_max = 8
    eps = ["1/4", "1/8", "1/16"]
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .envelope import EnvelopeOptions
from .errors import ConfigError, ExprError, IncompatibleEpsilon
from .integrand import IntegrandSpec
from .operator import OperatorSpec, curl_perturbed, custom, divergence_perturbed, scaled_constant
from .twoscale import parse_eps

OUTPUT_ENV = "AQX_OUTPUT_DIR"

_SECTIONS = {"seed", "operator", "integrand", "grids", "solver", "output", "twoscale"}


def _dims(value, N: int, what: str) -> tuple[int, ...]:
    if isinstance(value, int):
        value = [value] * N
    if not isinstance(value, (list, tuple)) or len(value) != N or not all(isinstance(v, int) for v in value):
        raise ConfigError(f"grids.{what} must be an integer or a list of {N} integers, got {value!r}")
    if any(v < 2 or v % 2 for v in value):
        raise ConfigError(f"grids.{what} sizes must be even and at least 2, got {value!r}")
    return tuple(value)


def build_operator(section: dict) -> OperatorSpec:
    name = section.get("name")
    if name == "divergence_perturbed":
        return divergence_perturbed(str(section.get("a", "1")))
    if name == "curl_perturbed":
        return curl_perturbed(str(section.get("a1", "1")))
    if name == "scaled_constant":
        if "A_c" not in section:
            raise ConfigError("operator.A_c is required for scaled_constant")
        return scaled_constant(str(section.get("m", "1")), section["A_c"])
    if name == "custom":
        try:
            N, d, l = int(section["N"]), int(section["d"]), int(section["l"])
            coeffs = section["coeffs"]
        except KeyError as exc:
            raise ConfigError(f"operator.{exc.args[0]} is required for custom operators") from None
        rank = section.get("rank")
        return custom(N, d, l, coeffs, None if rank is None else int(rank))
    raise ConfigError(f"unknown operator name {name!r}")


@dataclass
class RunConfig:
    op: OperatorSpec
    integrand: IntegrandSpec
    macro: tuple[int, ...]
    micro: tuple[int, ...]
    options: EnvelopeOptions
    n_max: int = 8
    eps_list: list = field(default_factory=list)
    membership_tol: float = 1e-7
    seed: int = 0
    output_dir: Path = Path(".")
    twoscale: dict = field(default_factory=dict)
    source: str = "<memory>"

    def with_threads(self, threads: int | None) -> RunConfig:
        if threads is None:
            return self
        if threads < 1:
            raise ConfigError("--threads must be at least 1")
        return replace(self, options=replace(self.options, threads=threads))

    def metadata(self) -> dict:
        return {
            "operator": self.op.describe(),
            "integrand": {"f": self.integrand.canonical, "p": self.integrand.p, "C": self.integrand.C},
            "grids": {"macro": list(self.macro), "micro": list(self.micro)},
            "solver": self.options.as_dict() | {"n_max": self.n_max, "eps": [str(e) for e in self.eps_list],
                                                "membership_tol": self.membership_tol},
            "seed": self.seed,
        }


def parse_config(data: dict, source: str = "<memory>") -> RunConfig:
    unknown = set(data) - _SECTIONS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        op = build_operator(dict(data.get("operator", {"name": "divergence_perturbed"})))
        integ = dict(data.get("integrand", {}))
        if "f" not in integ:
            raise ConfigError("integrand.f is required")
        f = IntegrandSpec(str(integ["f"]), op.d, op.N, float(integ.get("p", 2.0)),
                          None if integ.get("C") is None else float(integ["C"]))
    except (ExprError, ValueError, TypeError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    grids = dict(data.get("grids", {}))
    macro = _dims(grids.get("macro", 16), op.N, "macro")
    micro = _dims(grids.get("micro", 64), op.N, "micro")
    solver = dict(data.get("solver", {}))
    seed = int(data.get("seed", 0))
    try:
        options = EnvelopeOptions(
            grid=micro,
            random_starts=int(solver.get("random_starts", 8)),
            sigmas=tuple(float(s) for s in solver.get("sigmas", (0.5, 1.0, 2.0))),
            max_iter=int(solver.get("max_iter", 5000)),
            tol=float(solver.get("tol", 1e-8)),
            seed=seed,
            threads=int(solver.get("threads", 1)),
        )
        eps_list = [parse_eps(e) for e in solver.get("eps", ["1/4", "1/8", "1/16"])]
    except (TypeError, ValueError, IncompatibleEpsilon) as exc:
        raise ConfigError(f"{source}: invalid solver section: {exc}") from exc
    n_max = int(solver.get("n_max", 8))
    if n_max < 1 or n_max & (n_max - 1):
        raise ConfigError(f"solver.n_max must be a power of 2, got {n_max}")
    out = dict(data.get("output", {}))
    output_dir = Path(os.environ.get(OUTPUT_ENV) or out.get("dir", "."))
    return RunConfig(op, f, macro, micro, options, n_max, eps_list,
                     float(solver.get("membership_tol", 1e-7)), seed, output_dir,
                     dict(data.get("twoscale", {})), source)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(data, str(path))
