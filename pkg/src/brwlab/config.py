"""Run configuration files: strict key-value sections, exact round-trip.

Format: INI-like sections. [experiment] holds kind/replicas/seed,
[kernel] and [domain] describe the system, [run] the dynamics, and an
optional section named after the kind carries that experiment's extras.
Unknown sections or keys are rejected (all violations reported at once,
not just the first), and parse(serialize(parse(f))) == parse(f).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .engine import SimulationParams
from .errors import ValidationError
from .geometry import CubeDomain
from .kernels import DispersalKernel

KINDS = ("simulate", "couple", "percolate", "renorm", "tail", "fit", "oracle", "probe")

_KERNEL_KEYS = {
    "lazy_nearest_neighbor": ("q0",),
    "uniform_range": ("radius",),
    "point_symmetric_pair": ("distance",),
    "uniform_ball": ("radius",),
    "gaussian": ("sigma", "truncation"),
}

# typed extras per experiment kind: key -> converter
_EXTRA_KEYS = {
    "percolate": {"p": float, "height": int},
    "couple": {"resolution": str},
    "renorm": {
        "p": float,
        "height": int,
        "m_grid": str,
        "t_grid": str,
        "search_replicas": int,
        "refine_replicas": int,
        "max_attempts": int,
        "variant": str,
    },
    "probe": {"grid": str},
    "tail": {"input": str, "grid": str},
    "fit": {"input": str, "floor": float, "ceil": float, "s_hi": float},
    "oracle": {"t": float},
    "simulate": {},
}


@dataclass
class RunConfig:
    kind: str = "simulate"
    replicas: int = 1000
    seed: int = 0
    kernel: DispersalKernel | None = None
    domain: CubeDomain | None = None
    lam: float = 1.0
    t_max: float = 100.0
    n_cap: int = 1_000_000
    extra: dict = field(default_factory=dict)

    def params(self) -> SimulationParams:
        if self.kernel is None or self.domain is None:
            raise ValidationError("this experiment needs [kernel] and [domain] sections")
        return SimulationParams(
            lam=self.lam,
            kernel=self.kernel,
            domain=self.domain,
            t_max=self.t_max,
            n_cap=self.n_cap,
            seed=self.seed,
        )


def _read_sections(text: str) -> dict:
    sections: dict[str, dict] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current in sections:
                raise ValidationError(f"line {lineno}: duplicate section [{current}]")
            sections[current] = {}
            continue
        if "=" not in line:
            raise ValidationError(f"line {lineno}: expected key = value, got {raw!r}")
        if current is None:
            raise ValidationError(f"line {lineno}: key outside any section")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in sections[current]:
            raise ValidationError(f"line {lineno}: duplicate key {key!r} in [{current}]")
        sections[current][key] = val
    return sections


def parse_config_text(text: str) -> RunConfig:
    sections = _read_sections(text)
    errors: list[str] = []
    cfg = RunConfig()

    def take(section: str, key: str, conv, default=None, required=False):
        sec = sections.get(section, {})
        if key not in sec:
            if required:
                errors.append(f"[{section}] {key} is required")
            return default
        raw = sec.pop(key)
        try:
            return conv(raw)
        except (ValueError, TypeError):
            errors.append(f"[{section}] {key}: cannot parse {raw!r}")
            return default

    kind = take("experiment", "kind", str, "simulate")
    if kind not in KINDS:
        errors.append(f"[experiment] kind must be one of {', '.join(KINDS)}; got {kind!r}")
        kind = "simulate"
    cfg.kind = kind
    cfg.replicas = take("experiment", "replicas", int, 1000)
    cfg.seed = take("experiment", "seed", int, 0)
    if cfg.replicas is not None and cfg.replicas < 0:
        errors.append("[experiment] replicas must be >= 0")

    dim = 1
    if "domain" in sections:
        space = take("domain", "space", str, required=True)
        side = take("domain", "side", float, required=True)
        dim = take("domain", "dimension", int, 1)
        if space is not None and side is not None:
            try:
                cfg.domain = CubeDomain(space, dim, side)
            except ValidationError as exc:
                errors.append(f"[domain] {exc}")

    if "kernel" in sections:
        family = take("kernel", "family", str, required=True)
        params = {}
        if family in _KERNEL_KEYS:
            for key in _KERNEL_KEYS[family]:
                val = take("kernel", key, float, required=True)
                if val is not None:
                    params[key] = (
                        int(val)
                        if key in ("radius", "distance") and family != "uniform_ball"
                        else val
                    )
            try:
                cfg.kernel = DispersalKernel(family, dim, params)
            except ValidationError as exc:
                errors.append(f"[kernel] {exc}")
        elif family is not None:
            errors.append(f"[kernel] unknown family {family!r}")

    cfg.lam = take("run", "lambda", float, 1.0)
    cfg.t_max = take("run", "t_max", float, 100.0)
    cfg.n_cap = take("run", "n_cap", int, 1_000_000)
    if cfg.lam is not None and cfg.lam <= 0:
        errors.append("[run] lambda must be > 0")
    if cfg.t_max is not None and cfg.t_max <= 0:
        errors.append("[run] t_max must be > 0")
    if cfg.n_cap is not None and cfg.n_cap < 1:
        errors.append("[run] n_cap must be >= 1")

    extra_spec = _EXTRA_KEYS.get(cfg.kind, {})
    if cfg.kind in sections:
        for key, conv in extra_spec.items():
            if key in sections[cfg.kind]:
                raw = sections[cfg.kind].pop(key)
                try:
                    cfg.extra[key] = conv(raw)
                except (ValueError, TypeError):
                    errors.append(f"[{cfg.kind}] {key}: cannot parse {raw!r}")

    # cross-field checks
    if cfg.kernel is not None and cfg.domain is not None:
        if cfg.kernel.is_discrete != cfg.domain.is_discrete:
            errors.append(
                "[kernel]/[domain] space mismatch: "
                f"{cfg.kernel.family} is {cfg.kernel.space} but the domain is {cfg.domain.space}"
            )

    # strict mode: anything left over is unknown
    for name, sec in sections.items():
        if name not in ("experiment", "kernel", "domain", "run") and name not in KINDS:
            errors.append(f"unknown section [{name}]")
            continue
        for key in sec:
            errors.append(f"unknown key {key!r} in section [{name}]")

    if errors:
        raise ValidationError("invalid config:\n  " + "\n  ".join(errors))
    return cfg


def parse_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}")
    return parse_config_text(text)


def serialize_config(cfg: RunConfig) -> str:
    out = ["[experiment]"]
    out.append(f"kind = {cfg.kind}")
    out.append(f"replicas = {cfg.replicas}")
    out.append(f"seed = {cfg.seed}")
    if cfg.kernel is not None:
        out.append("")
        out.append("[kernel]")
        out.append(f"family = {cfg.kernel.family}")
        for key in _KERNEL_KEYS[cfg.kernel.family]:
            out.append(f"{key} = {cfg.kernel.params[key]!r}")
    if cfg.domain is not None:
        out.append("")
        out.append("[domain]")
        out.append(f"space = {cfg.domain.space}")
        out.append(f"dimension = {cfg.domain.dimension}")
        side = cfg.domain.side
        out.append(f"side = {int(side) if float(side).is_integer() else side!r}")
    out.append("")
    out.append("[run]")
    out.append(f"lambda = {cfg.lam!r}")
    out.append(f"t_max = {cfg.t_max!r}")
    out.append(f"n_cap = {cfg.n_cap}")
    if cfg.extra:
        out.append("")
        out.append(f"[{cfg.kind}]")
        for key in sorted(cfg.extra):
            out.append(f"{key} = {cfg.extra[key]}")
    return "\n".join(out) + "\n"
