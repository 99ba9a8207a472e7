"""Scenario files: YAML documents that describe one simulation run.

Errors carry the file name and line of the offending node.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from importlib import resources
from pathlib import Path

import yaml

from ..replica import VARIANTS
from ..simnet.config import (
    BEHAVIORS,
    MODES,
    SCRIPTS,
    ClusterSpec,
    FaultSpec,
    LinkDelay,
    PlanViolation,
    SimConfig,
    Workload,
    check_plan,
)

SCHEMA_VERSION = 1


class ScenarioError(ValueError):
    def __init__(self, message: str, source: str = "<scenario>", line: int | None = None):
        self.source = source
        self.line = line
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True)
class Assertions:
    oracle: bool = True
    all_complete: bool | None = None  # None: oracle default for the mode
    single_ack: bool | None = None
    fast_path_fraction: float | None = None  # exact expected value
    max_prepares: int | None = None
    min_prepares: int | None = None
    min_view_changes: int | None = None
    max_view_changes: int | None = None


@dataclass(frozen=True)
class Outputs:
    trace: str | None = None
    csv: str | None = None


@dataclass(frozen=True)
class Scenario:
    name: str
    cluster: ClusterSpec
    sim: SimConfig
    workload: Workload
    assertions: Assertions = Assertions()
    outputs: Outputs = Outputs()
    description: str = ""
    source: str = "<scenario>"

    @property
    def n(self) -> int:
        return 3 * self.cluster.f + 2 * self.cluster.c + 1

    def with_overrides(self, seed: int | None = None, variant: str | None = None,
                       n: int | None = None) -> "Scenario":
        s = self
        if seed is not None:
            s = replace(s, sim=replace(s.sim, seed=seed))
        if variant is not None:
            if variant not in VARIANTS:
                raise ScenarioError(f"unknown variant {variant!r}", s.source)
            s = replace(s, cluster=replace(s.cluster, variant=variant))
        if n is not None:
            c = s.cluster.c
            if (n - 1 - 2 * c) % 3 or n - 1 - 2 * c < 0:
                raise ScenarioError(f"n={n} is not 3f+2c+1 for c={c}", s.source)
            s = replace(s, cluster=replace(s.cluster, f=(n - 1 - 2 * c) // 3))
        return s


# -- YAML with line numbers --------------------------------------------------

@dataclass
class _Node:
    value: object
    line: int


def _convert(node, source: str) -> _Node:
    line = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            key = _convert(k, source)
            if not isinstance(key.value, str):
                raise ScenarioError("mapping keys must be strings", source, key.line)
            if key.value in out:
                raise ScenarioError(f"duplicate key {key.value!r}", source, key.line)
            out[key.value] = _convert(v, source)
        return _Node(out, line)
    if isinstance(node, yaml.SequenceNode):
        return _Node([_convert(v, source) for v in node.value], line)
    return _Node(yaml.safe_load(yaml.serialize(node)), line)


class _Section:
    """Reads typed fields out of one mapping and rejects unknown keys."""

    def __init__(self, node: _Node | None, name: str, source: str):
        self.name = name
        self.source = source
        if node is None:
            self.items, self.line = {}, None
        elif not isinstance(node.value, dict):
            raise ScenarioError(f"section '{name}' must be a mapping", source, node.line)
        else:
            self.items, self.line = node.value, node.line
        self.used: set = set()

    def err(self, msg: str, key: str | None = None) -> ScenarioError:
        line = self.items[key].line if key in self.items else self.line
        return ScenarioError(msg, self.source, line)

    def get(self, key: str, kind, default=None, check=None):
        self.used.add(key)
        node = self.items.get(key)
        if node is None or node.value is None:
            return default
        v = node.value
        if kind is float and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        if kind is int and isinstance(v, bool) or not isinstance(v, kind):
            raise self.err(f"{self.name}.{key} must be {kind.__name__}, got {v!r}", key)
        if check is not None:
            problem = check(v)
            if problem:
                raise self.err(f"{self.name}.{key}: {problem}", key)
        return v

    def node(self, key: str) -> _Node | None:
        self.used.add(key)
        return self.items.get(key)

    def finish(self) -> None:
        for key in self.items:
            if key not in self.used:
                raise self.err(f"unknown field {self.name}.{key}", key)


def _nonneg(v):
    return "must be >= 0" if v < 0 else None


def _positive(v):
    return "must be > 0" if v <= 0 else None


def _one_of(options):
    return lambda v: None if v in options else f"must be one of {', '.join(options)}"


def _probability(v):
    return None if 0.0 <= v <= 1.0 else "must be in [0, 1]"


def _window(v):
    return None if v >= 4 and v % 4 == 0 else "must be a positive multiple of 4"


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ScenarioError(f"invalid YAML: {getattr(exc, 'problem', exc)}", source,
                            mark.line + 1 if mark else None) from exc
    if root is None:
        raise ScenarioError("empty scenario", source)
    top = _Section(_convert(root, source), "scenario", source)
    version = top.get("version", int, None)
    if version is None:
        raise top.err("missing field version")
    if version != SCHEMA_VERSION:
        raise top.err(f"unsupported scenario version {version} (expected {SCHEMA_VERSION})", "version")
    name = top.get("name", str, Path(source).stem)
    description = top.get("description", str, "")

    cl = _Section(top.node("cluster"), "cluster", source)
    cluster = ClusterSpec(
        f=cl.get("f", int, 1, _nonneg),
        c=cl.get("c", int, 0, _nonneg),
        window=cl.get("window", int, 256, _window),
        variant=cl.get("variant", str, "redundant_c", _one_of(tuple(VARIANTS))),
        stagger_delta=cl.get("stagger_delta", int, None, _positive),
        fast_timeout=cl.get("fast_timeout", int, None, _positive),
        view_timeout=cl.get("view_timeout", int, None, _positive),
        batch_timeout=cl.get("batch_timeout", int, None, _positive),
        batch_target=0,
        client_timeout=cl.get("client_timeout", int, None, _positive),
        mutations=tuple(_str_list(cl, "mutations")),
    )
    cl.finish()
    wl = _Section(top.node("workload"), "workload", source)
    workload = Workload(
        clients=wl.get("clients", int, 1, _positive),
        ops_per_client=wl.get("ops_per_client", int, 1, _nonneg),
        put_ratio=wl.get("put_ratio", float, 0.5, _probability),
        keys=wl.get("keys", int, 16, _positive),
        value_size=wl.get("value_size", int, 8, _nonneg),
        start=wl.get("start", int, 0, _nonneg),
        stagger=wl.get("stagger", int, 0, _nonneg),
        think=wl.get("think", int, 0, _nonneg),
    )
    batch_target = wl.get("batch_target", int, 0, _nonneg)
    wl.finish()
    cluster = replace(cluster, batch_target=batch_target)

    sm = _Section(top.node("sim"), "sim", source)
    ln = _Section(sm.node("link"), "sim.link", source)
    link = LinkDelay(
        base=ln.get("base", int, 1_000, _positive),
        jitter=ln.get("jitter", int, 0, _nonneg),
        ceiling=ln.get("ceiling", int, 20_000, _nonneg),
    )
    ln.finish()
    dk = _Section(sm.node("drop_kinds"), "sim.drop_kinds", source)
    drop_kinds = tuple(sorted((k, dk.get(k, float, 0.0, _probability)) for k in list(dk.items)))
    faults = _faults(top.node("faults"), source)
    sim = SimConfig(
        seed=sm.get("seed", int, 1, _nonneg),
        mode=sm.get("mode", str, "synchronous", _one_of(MODES)),
        link=link,
        drop_budget=sm.get("drop_budget", int, 0, _nonneg),
        drop_rate=sm.get("drop_rate", float, 0.0, _probability),
        faults=faults,
        horizon=sm.get("horizon", int, 10_000_000, _positive),
        settle=sm.get("settle", int, 0, _nonneg),
        trace_level=sm.get("trace_level", str, "protocol", _one_of(("full", "protocol", "safety"))),
        strict=sm.get("strict", bool, True),
        drop_kinds=drop_kinds,
    )
    sm.finish()
    n = 3 * cluster.f + 2 * cluster.c + 1
    for fault, node in zip(faults, top.node("faults").value if top.node("faults") else ()):
        if not 1 <= fault.replica <= n:
            raise ScenarioError(f"fault replica {fault.replica} outside 1..{n}", source, node.line)
    if sim.strict:
        try:
            check_plan(sim, cluster.f, cluster.c)
        except PlanViolation as exc:
            node = top.node("faults")
            raise ScenarioError(f"fault plan: {exc}", source, node.line if node else None) from None

    asn = _Section(top.node("assertions"), "assertions", source)
    assertions = Assertions(
        oracle=asn.get("oracle", bool, True),
        all_complete=asn.get("all_complete", bool, None),
        single_ack=asn.get("single_ack", bool, None),
        fast_path_fraction=asn.get("fast_path_fraction", float, None, _probability),
        max_prepares=asn.get("max_prepares", int, None, _nonneg),
        min_prepares=asn.get("min_prepares", int, None, _nonneg),
        min_view_changes=asn.get("min_view_changes", int, None, _nonneg),
        max_view_changes=asn.get("max_view_changes", int, None, _nonneg),
    )
    asn.finish()
    out = _Section(top.node("outputs"), "outputs", source)
    outputs = Outputs(trace=out.get("trace", str, None), csv=out.get("csv", str, None))
    out.finish()
    top.finish()
    return Scenario(name, cluster, sim, workload, assertions, outputs, description, source)


def _str_list(section: _Section, key: str) -> list:
    node = section.node(key)
    if node is None or node.value is None:
        return []
    if not isinstance(node.value, list) or not all(isinstance(x.value, str) for x in node.value):
        raise section.err(f"{section.name}.{key} must be a list of strings", key)
    return [x.value for x in node.value]


def _faults(node: _Node | None, source: str) -> tuple:
    if node is None or node.value is None:
        return ()
    if not isinstance(node.value, list):
        raise ScenarioError("faults must be a list", source, node.line)
    out = []
    for item in node.value:
        sec = _Section(item, "faults[]", source)
        behavior = sec.get("behavior", str, None, _one_of(BEHAVIORS))
        if behavior is None:
            raise sec.err("fault needs a behavior")
        replica = sec.get("replica", int, None, _positive)
        if replica is None:
            raise sec.err("fault needs a replica")
        script = sec.get("script", str, None, _one_of(SCRIPTS))
        if behavior == "byzantine" and script is None:
            raise sec.err("byzantine fault needs a script")
        spec = FaultSpec(replica, behavior, at=sec.get("at", int, 0, _nonneg),
                         recover=sec.get("recover", int, None, _nonneg),
                         delay=sec.get("delay", int, 0, _nonneg), script=script)
        sec.finish()
        out.append(spec)
    return tuple(out)


def load_scenario(path) -> Scenario:
    """Load a scenario from a path, or a bundled scenario by bare name."""
    p = Path(path)
    if not p.exists() and p.suffix == "" and p.parent == Path("."):
        res = resources.files(__package__).joinpath("scenarios", f"{p.name}.yaml")
        if res.is_file():
            return parse_scenario(res.read_text(encoding="utf-8"), f"{p.name}.yaml")
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario: {exc.strerror}", str(path)) from None
    return parse_scenario(text, str(path))


def bundled_scenarios() -> list[str]:
    root = resources.files(__package__).joinpath("scenarios")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def scenario_fields() -> dict:
    """Field names per section, for documentation and tests."""
    return {
        "cluster": [f.name for f in fields(ClusterSpec)],
        "workload": [f.name for f in fields(Workload)],
        "assertions": [f.name for f in fields(Assertions)],
    }


