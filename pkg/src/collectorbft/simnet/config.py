"""Simulation configuration records."""

from __future__ import annotations

from dataclasses import dataclass, field

MODES = ("synchronous", "common", "asynchronous")
BEHAVIORS = ("crash", "slow", "byzantine")
SCRIPTS = (
    "equivocate_preprepare",
    "stale_viewchange",
    "invalid_shares",
    "silent_collector",
    "partial_send",
    "future_view_preprepare",
)


class PlanViolation(ValueError):
    pass


@dataclass(frozen=True)
class LinkDelay:
    """One-way delay in virtual microseconds: base + uniform jitter."""

    base: int = 1_000
    jitter: int = 0
    ceiling: int = 20_000  # asynchronous mode: extra delay drawn from [0, ceiling]


@dataclass(frozen=True)
class FaultSpec:
    replica: int
    behavior: str
    at: int = 0  # crash time
    recover: int | None = None  # crash recovery time
    delay: int = 0  # slow: added outbound delay
    script: str | None = None  # byzantine behaviour

    def __post_init__(self):
        if self.behavior not in BEHAVIORS:
            raise ValueError(f"unknown fault behavior {self.behavior!r}")
        if self.behavior == "byzantine" and self.script not in SCRIPTS:
            raise ValueError(f"unknown byzantine script {self.script!r}")


@dataclass(frozen=True)
class SimConfig:
    seed: int = 1
    mode: str = "synchronous"
    link: LinkDelay = LinkDelay()
    drop_budget: int = 0
    drop_rate: float = 0.0  # asynchronous mode: chance each attempt is dropped
    faults: tuple = ()
    horizon: int = 10_000_000
    settle: int = 0  # extra time simulated after the workload finishes; 0 = 20 base delays
    trace_level: str = "protocol"  # full | protocol | safety
    strict: bool = True
    # kind name -> probability that a message of that kind is lost for good
    drop_kinds: tuple = ()

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.trace_level not in ("full", "protocol", "safety"):
            raise ValueError(f"unknown trace level {self.trace_level!r}")


@dataclass(frozen=True)
class ClusterSpec:
    f: int = 1
    c: int = 0
    window: int = 256
    variant: str = "redundant_c"
    # timing knobs; None derives a multiple of the base link delay
    stagger_delta: int | None = None
    fast_timeout: int | None = None
    view_timeout: int | None = None
    batch_timeout: int | None = None
    batch_target: int = 0
    client_timeout: int | None = None
    mutations: tuple = ()


@dataclass(frozen=True)
class Workload:
    clients: int = 1
    ops_per_client: int = 1
    put_ratio: float = 0.5
    keys: int = 16
    value_size: int = 8
    start: int = 0
    stagger: int = 0  # client k starts at start + k * stagger
    think: int = 0  # delay between a completion and the next submit
    ops: tuple = field(default=())  # explicit op list; overrides the generator

    @property
    def total_ops(self) -> int:
        return self.clients * (len(self.ops) if self.ops else self.ops_per_client)


def check_plan(config: SimConfig, f: int, c: int) -> None:
    """Raise PlanViolation when the fault plan exceeds the model's bounds."""
    byz = {x.replica for x in config.faults if x.behavior == "byzantine"}
    benign = {x.replica for x in config.faults if x.behavior in ("crash", "slow")}
    if len(byz) > f:
        raise PlanViolation(f"{len(byz)} byzantine replicas exceed f={f}")
    if config.mode == "common" and byz:
        raise PlanViolation("common mode admits no byzantine replicas")
    if config.mode == "common" and len(benign) > c:
        raise PlanViolation(f"{len(benign)} crash/slow replicas exceed c={c}")
