"""Scenario file parsing, serialization, scaling, and built-in instances.

Format: line-oriented key/value text with the versioned header
``aoi-nest-scenario v1``. Group lines carry ``key=value`` tokens; a group's
``p`` is either one probability (server independent) or M comma-separated
per-server values. ``#`` starts a comment.
"""

from __future__ import annotations

import os

from .model import GroupSpec, ModelError, ScenarioConfig, scaled

__all__ = [
    "ScenarioParseError",
    "parse_scenario",
    "parse_scenario_text",
    "serialize_scenario",
    "write_scenario",
    "scale_scenario",
    "base_scenario",
    "base_scenario_server_p",
    "appendix_regime_scenario",
]

HEADER = "aoi-nest-scenario v1"

_SCALARS = {
    "num_users": int,
    "num_servers": int,
    "horizon": int,
    "smoothing": float,
    "truncation": int,
    "rng_seed": int,
    "scale": int,
}
_FLAGS = {"allow_server_switch"}


class ScenarioParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


def parse_scenario(path: str | os.PathLike) -> ScenarioConfig:
    """Read and validate a scenario file."""
    with open(path, "r", encoding="utf-8") as fh:
        return parse_scenario_text(fh.read())


def parse_scenario_text(text: str) -> ScenarioConfig:
    lines = text.splitlines()
    if not lines or lines[0].strip() != HEADER:
        raise ScenarioParseError(1, f"missing header {HEADER!r}")
    fields: dict = {}
    groups: list[GroupSpec] = []
    group_lines: list[int] = []
    for no, raw in enumerate(lines[1:], start=2):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, rest = line.partition(" ")
        rest = rest.strip()
        if key == "group":
            groups.append(_parse_group(no, rest))
            group_lines.append(no)
        elif key in _SCALARS:
            try:
                fields[key] = _SCALARS[key](rest)
            except ValueError:
                raise ScenarioParseError(no, f"{key}: expected a number, got {rest!r}")
        elif key in _FLAGS:
            if rest not in ("on", "off", "true", "false"):
                raise ScenarioParseError(no, f"{key}: expected on|off, got {rest!r}")
            fields[key] = rest in ("on", "true")
        elif key == "on_unassigned":
            fields[key] = rest
        elif key == "initial_costs":
            try:
                fields[key] = tuple(float(x) for x in rest.split())
            except ValueError:
                raise ScenarioParseError(no, f"initial_costs: bad number in {rest!r}")
        else:
            raise ScenarioParseError(no, f"unknown field {key!r}")

    for required in ("num_users", "num_servers", "horizon", "smoothing"):
        if required not in fields:
            raise ScenarioParseError(len(lines), f"missing required field {required!r}")
    if not groups:
        raise ScenarioParseError(len(lines), "at least one group line is required")
    M = fields["num_servers"]
    if fields["num_users"] < 1:
        raise ScenarioParseError(1, "num_users must be >= 1")

    expanded = []
    for no, g in zip(group_lines, groups):
        p = g.success_prob_per_server
        if len(p) == 1:
            p = p * M
        elif len(p) != M:
            raise ScenarioParseError(
                no, f"group p has {len(p)} entries, expected 1 or {M}"
            )
        expanded.append(GroupSpec(g.count, g.tau_min, p))
    ic = fields.get("initial_costs", (0.0,))
    if len(ic) == 1:
        ic = ic * M
    if "truncation" in fields:
        max_tau = max(g.tau_min for g in groups)
        if fields["truncation"] <= max_tau + 1:
            raise ScenarioParseError(
                len(lines), f"truncation {fields['truncation']} must exceed max tau_min + 1"
            )
    try:
        return ScenarioConfig(
            num_users=fields["num_users"],
            num_servers=M,
            groups=tuple(expanded),
            horizon=fields["horizon"],
            smoothing=fields["smoothing"],
            initial_costs=ic,
            truncation=fields.get("truncation"),
            rng_seed=fields.get("rng_seed", 0),
            scale=fields.get("scale", 1),
            allow_server_switch=fields.get("allow_server_switch", True),
            on_unassigned=fields.get("on_unassigned", "drop"),
        )
    except ModelError as exc:
        raise ScenarioParseError(len(lines), str(exc)) from exc


def _parse_group(no: int, rest: str) -> GroupSpec:
    kv = {}
    for token in rest.split():
        key, eq, val = token.partition("=")
        if not eq:
            raise ScenarioParseError(no, f"group token {token!r} is not key=value")
        kv[key] = val
    for required in ("count", "tau_min", "p"):
        if required not in kv:
            raise ScenarioParseError(no, f"group missing {required!r}")
    try:
        count = int(kv["count"])
        tau_min = int(kv["tau_min"])
        p = tuple(float(x) for x in kv["p"].split(","))
    except ValueError as exc:
        raise ScenarioParseError(no, f"group: {exc}")
    extras = set(kv) - {"count", "tau_min", "p"}
    if extras:
        raise ScenarioParseError(no, f"group has unknown keys {sorted(extras)}")
    return GroupSpec(count, tau_min, p)


def serialize_scenario(config: ScenarioConfig) -> str:
    """Canonical text form; parse(serialize(c)) == c."""
    out = [HEADER]
    out.append(f"num_users {config.num_users}")
    out.append(f"num_servers {config.num_servers}")
    out.append(f"horizon {config.horizon}")
    out.append(f"smoothing {config.smoothing:g}")
    out.append(f"truncation {config.truncation}")
    out.append(f"rng_seed {config.rng_seed}")
    out.append(f"scale {config.scale}")
    out.append(f"allow_server_switch {'on' if config.allow_server_switch else 'off'}")
    out.append(f"on_unassigned {config.on_unassigned}")
    out.append("initial_costs " + " ".join(f"{c:g}" for c in config.initial_costs))
    for g in config.groups:
        ps = set(g.success_prob_per_server)
        p_txt = (
            f"{g.success_prob_per_server[0]:g}"
            if len(ps) == 1
            else ",".join(f"{p:g}" for p in g.success_prob_per_server)
        )
        out.append(f"group count={g.count} tau_min={g.tau_min} p={p_txt}")
    return "\n".join(out) + "\n"


def write_scenario(config: ScenarioConfig, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(serialize_scenario(config))


def scale_scenario(config: ScenarioConfig, r: int) -> ScenarioConfig:
    """Replicate users, servers, and group structure r-fold."""
    return scaled(config, r)


_BASE_TAUS = (2, 4, 8, 16, 32, 64)
_BASE_PS = (0.8, 0.7, 0.6, 0.5, 0.3, 0.1)
_BASE_COUNTS = (5, 10, 5, 5, 10, 15)


def base_scenario(
    horizon: int = 10_000,
    truncation: int = 800,
    num_servers: int = 10,
    rng_seed: int = 20260808,
) -> ScenarioConfig:
    """Six user groups with group-wise success probabilities (servers equal)."""
    groups = tuple(
        GroupSpec(c, t, (p,) * num_servers)
        for c, t, p in zip(_BASE_COUNTS, _BASE_TAUS, _BASE_PS)
    )
    return ScenarioConfig(
        num_users=sum(_BASE_COUNTS),
        num_servers=num_servers,
        groups=groups,
        horizon=horizon,
        smoothing=50,
        truncation=truncation,
        rng_seed=rng_seed,
    )


def base_scenario_server_p(
    horizon: int = 10_000,
    truncation: int = 800,
    rng_seed: int = 20260808,
) -> ScenarioConfig:
    """Variant reading the probability vector as per-server: M=6 heterogeneous
    servers shared by all groups."""
    groups = tuple(
        GroupSpec(c, t, _BASE_PS) for c, t in zip(_BASE_COUNTS, _BASE_TAUS)
    )
    return ScenarioConfig(
        num_users=sum(_BASE_COUNTS),
        num_servers=len(_BASE_PS),
        groups=groups,
        horizon=horizon,
        smoothing=50,
        truncation=truncation,
        rng_seed=rng_seed,
    )


def appendix_regime_scenario(
    p_values: tuple[float, ...] = (0.5, 0.8),
    num_users: int = 4,
    horizon: int = 2000,
    truncation: int = 60,
    rng_seed: int = 7,
) -> ScenarioConfig:
    """No-warm-up instance (tasks may finish after one computing slot)."""
    return ScenarioConfig(
        num_users=num_users,
        num_servers=len(p_values),
        groups=(GroupSpec(num_users, 0, p_values),),
        horizon=horizon,
        smoothing=50,
        truncation=truncation,
        rng_seed=rng_seed,
    )
