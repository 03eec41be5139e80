"""Experiment configuration read from an INI file.

Sections and fields (``*`` marks fields without a default; a missing
starred field aborts with its name):

``[model]``
    ``tag*`` (case_study | price_impact | delay_toy), ``horizon`` 1.0,
    ``x0`` 0.0, ``sigma`` 1.0, ``a_min`` -1.0, ``a_max`` 1.0, ``a_ref`` (the
    point of A closest to 0), ``lipschitz`` (model value).
    case_study: ``kappa1`` 1.0, ``kappa2`` 0.0, ``k`` 0.0, ``f`` tanh,
    ``f_scale`` 1.0, ``g`` zero, ``g_scale`` 1.0.
    price_impact: ``gamma0`` 0.5, ``k0`` 0.2, ``g0`` 0.5.
    delay_toy: ``tau`` 0.25, ``kappa`` 0.5, ``g_scale`` 0.5.
``[numerics]``
    ``K*``, ``M*`` (mean-field paths), ``seed*``, ``scenario_budget`` 10000,
    ``min_scenarios`` 256, ``basis_degree`` 3, ``ridge`` (1e-8 times rows),
    ``tol_picard`` 1e-3, ``tol_fp`` 1e-6, ``max_iter`` 15,
    ``nplayer_max_iter`` 30, ``beta`` auto, ``z_clip`` 10.0, ``q`` 3.0,
    ``budget_cap`` 200000000.
``[sweep]``
    ``N*`` (comma-separated, required by converge and rates), ``n_rep`` 200.
``[output]``
    ``directory`` out, ``emit_paths`` false.
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .core import ModelSpec, TimeGrid
from .errors import ConfigError
from .models import case_study, delay_toy, price_impact, resolve_function

MODEL_DEFAULTS = {
    "common": dict(horizon=1.0, x0=0.0, sigma=1.0, a_min=-1.0, a_max=1.0, a_ref=None,
                   lipschitz=None),
    "case_study": dict(kappa1=1.0, kappa2=0.0, k=0.0, f="tanh", f_scale=1.0, g="zero",
                       g_scale=1.0),
    "price_impact": dict(gamma0=0.5, k0=0.2, g0=0.5),
    "delay_toy": dict(tau=0.25, kappa=0.5, g_scale=0.5),
}
NUMERICS_DEFAULTS = dict(scenario_budget=10000, min_scenarios=256, basis_degree=3, ridge=None,
                         tol_picard=1e-3, tol_fp=1e-6, max_iter=15, nplayer_max_iter=30,
                         beta="auto", z_clip=10.0, q=3.0, budget_cap=200000000)
NUMERICS_REQUIRED = ("K", "M", "seed")
STRING_FIELDS = {"tag", "f", "g"}


@dataclass
class ExperimentConfig:
    model: Dict[str, object]
    K: int
    M: int
    seed: int
    numerics: Dict[str, object]
    sweep_N: List[int] = field(default_factory=list)
    n_rep: int = 200
    directory: str = "out"
    emit_paths: bool = False
    source_text: str = ""

    @property
    def tag(self) -> str:
        return str(self.model["tag"])

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(float(self.model["horizon"]), self.K)

    def scenarios(self, N: int) -> int:
        return max(int(self.numerics["scenario_budget"]) // N, int(self.numerics["min_scenarios"]))

    @property
    def beta(self) -> Optional[float]:
        b = self.numerics["beta"]
        return None if str(b).lower() == "auto" else float(b)

    def content_hash(self) -> str:
        canon = repr(sorted(self.as_dict().items()))
        return hashlib.sha256(canon.encode()).hexdigest()

    def as_dict(self) -> Dict[str, object]:
        d = asdict(self)
        d.pop("source_text")
        d["model"] = dict(sorted(d["model"].items()))
        d["numerics"] = dict(sorted(d["numerics"].items()))
        return d

    def build_model(self) -> ModelSpec:
        p = self.model
        common = dict(a_min=p["a_min"], a_max=p["a_max"], a_ref=p["a_ref"], sigma=p["sigma"])
        try:
            if self.tag == "case_study":
                model = case_study(kappa1=p["kappa1"], kappa2=p["kappa2"], k=p["k"],
                                   f=resolve_function(p["f"], p["f_scale"]),
                                   g=resolve_function(p["g"], p["g_scale"]), **common)
            elif self.tag == "price_impact":
                model = price_impact(gamma0=p["gamma0"], k0=p["k0"], g0=p["g0"], **common)
            else:
                model = delay_toy(tau=p["tau"], kappa=p["kappa"], g_scale=p["g_scale"], **common)
        except ValueError as exc:
            raise ConfigError(f"[model] {exc}") from None
        if p["lipschitz"] is not None:
            from dataclasses import replace
            model = replace(model, lipschitz=float(p["lipschitz"]))
        return model


def _convert(section: str, key: str, raw: str, default):
    if key in STRING_FIELDS:
        return raw.strip()
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int) and not isinstance(default, bool):
            return int(text)
        if key == "beta" and text.lower() == "auto":
            return "auto"
        return float(text)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None


def load_config(path, seed_override: Optional[int] = None,
                out_override: Optional[str] = None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    return parse_config(text, seed_override, out_override)


def parse_config(text: str, seed_override: Optional[int] = None,
                 out_override: Optional[str] = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for sec in cp.sections():
        if sec not in ("model", "numerics", "sweep", "output"):
            raise ConfigError(f"unknown section [{sec}]")
    msec = cp["model"] if cp.has_section("model") else {}
    if "tag" not in msec:
        raise ConfigError("missing required field [model] tag")
    tag = msec["tag"].strip()
    if tag not in ("case_study", "price_impact", "delay_toy"):
        raise ConfigError(f"[model] tag: unknown model {tag!r}")
    defaults = dict(MODEL_DEFAULTS["common"], **MODEL_DEFAULTS[tag])
    model: Dict[str, object] = {"tag": tag}
    for key, default in defaults.items():
        if key in msec:
            model[key] = _convert("model", key, msec[key], default if default is not None else 0.0)
        else:
            model[key] = default
    unknown = set(msec) - set(defaults) - {"tag"}
    if unknown:
        raise ConfigError(f"[model] unknown field(s) for {tag}: {', '.join(sorted(unknown))}")

    nsec = cp["numerics"] if cp.has_section("numerics") else {}
    for key in NUMERICS_REQUIRED:
        if key not in nsec and not (key == "seed" and seed_override is not None):
            raise ConfigError(f"missing required field [numerics] {key}")
    numerics: Dict[str, object] = {}
    for key, default in NUMERICS_DEFAULTS.items():
        if key in nsec:
            numerics[key] = _convert("numerics", key, nsec[key],
                                     default if default is not None else 0.0)
        else:
            numerics[key] = default
    unknown = set(nsec) - set(NUMERICS_DEFAULTS) - set(NUMERICS_REQUIRED)
    if unknown:
        raise ConfigError(f"[numerics] unknown field(s): {', '.join(sorted(unknown))}")
    K = _convert("numerics", "K", nsec["K"], 0)
    M = _convert("numerics", "M", nsec["M"], 0)
    seed = seed_override if seed_override is not None else _convert("numerics", "seed", nsec["seed"], 0)

    ssec = cp["sweep"] if cp.has_section("sweep") else {}
    sweep: List[int] = []
    if "N" in ssec:
        try:
            sweep = [int(v) for v in ssec["N"].replace(";", ",").split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"[sweep] N: cannot parse {ssec['N']!r}") from None
    n_rep = _convert("sweep", "n_rep", ssec["n_rep"], 0) if "n_rep" in ssec else 200
    osec = cp["output"] if cp.has_section("output") else {}
    directory = osec["directory"].strip() if "directory" in osec else "out"
    emit = _convert("output", "emit_paths", osec["emit_paths"], False) if "emit_paths" in osec else False
    if out_override is not None:
        directory = out_override

    cfg = ExperimentConfig(model, K, M, int(seed), numerics, sweep, n_rep, directory, emit, text)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    n = cfg.numerics
    for key in ("tol_picard", "tol_fp"):
        if not float(n[key]) > 0:
            raise ConfigError(f"[numerics] {key} must be > 0")
    if cfg.K < 1 or cfg.M < 2:
        raise ConfigError("[numerics] K must be >= 1 and M >= 2")
    if not 0 <= cfg.seed < 2 ** 64:
        raise ConfigError("[numerics] seed must be an unsigned 64-bit integer")
    if len(set(cfg.sweep_N)) != len(cfg.sweep_N) or any(N < 1 for N in cfg.sweep_N):
        raise ConfigError("[sweep] N values must be distinct and >= 1")
    if float(cfg.model["horizon"]) <= 0:
        raise ConfigError("[model] horizon must be > 0")
    if float(cfg.model["a_min"]) > float(cfg.model["a_max"]):
        raise ConfigError("[model] a_min must not exceed a_max")
    if float(n["q"]) <= 2:
        raise ConfigError("[numerics] q must exceed 2")
    if cfg.n_rep < 2:
        raise ConfigError("[sweep] n_rep must be >= 2")


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic child seed for a sub-experiment."""
    ss = np.random.SeedSequence([int(seed) & (2 ** 64 - 1), *keys])
    return int(ss.generate_state(1, dtype=np.uint64)[0])
