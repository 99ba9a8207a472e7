"""Deterministic discrete-event driver for replicas and clients.

Time is virtual (microseconds). Every random choice comes from one
``random.Random`` seeded by the run's seed, so a run is a pure function of
(config, cluster, workload) and its trace hash is reproducible.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field

from .. import kvstore
from ..client import Client, ClientConfig
from ..crypto import KeyRing
from ..messages import KIND_NAMES, accounted_size
from ..params import derive_cluster
from ..replica import CLIENT_BASE, VARIANTS, Replica, ReplicaConfig
from .byzantine import wrap
from .config import ClusterSpec, SimConfig, Workload, check_plan
from .trace import Trace

_DELIVER, _TIMER, _START = 0, 1, 2
KEY_SEED = b"collectorbft-sim"


def _hexify(x):
    if isinstance(x, bytes):
        return x.hex()
    if isinstance(x, tuple):
        return [_hexify(y) for y in x]
    return x


def replica_config(cluster: ClusterSpec, base: int) -> ReplicaConfig:
    return ReplicaConfig(
        variant=VARIANTS[cluster.variant],
        stagger_delta=cluster.stagger_delta or 4 * base,
        fast_timeout=cluster.fast_timeout or 4 * base,
        batch_timeout=cluster.batch_timeout or base,
        batch_target=cluster.batch_target,
        view_timeout=cluster.view_timeout or 40 * base,
        fetch_timeout=8 * base,
        mutations=frozenset(cluster.mutations),
    )


def expected_latency(cluster: ClusterSpec, link) -> int:
    """End-to-end latency budget: six one-way hops, one fast-path timeout, one stagger step."""
    rcfg = replica_config(cluster, link.base)
    return 6 * (link.base + link.jitter) + rcfg.fast_timeout + rcfg.stagger_delta + rcfg.batch_timeout


def client_config(cluster: ClusterSpec, link) -> ClientConfig:
    return ClientConfig(retry_timeout=cluster.client_timeout or 2 * expected_latency(cluster, link))


def generate_ops(workload: Workload, seed: int) -> list[list[bytes]]:
    """Per-client op lists, drawn from a stream independent of network choices."""
    if workload.ops:
        return [list(workload.ops) for _ in range(workload.clients)]
    rng = random.Random(f"workload-{seed}")
    out = []
    for _ in range(workload.clients):
        ops = []
        for _ in range(workload.ops_per_client):
            key = b"k%d" % rng.randrange(workload.keys)
            if rng.random() < workload.put_ratio:
                ops.append(kvstore.encode_put(key, rng.randbytes(workload.value_size)))
            else:
                ops.append(kvstore.encode_get(key))
        out.append(ops)
    return out


@dataclass
class RunResult:
    trace: Trace
    replicas: dict
    clients: dict
    end_time: int
    finished: bool
    completions: list = field(default_factory=list)

    @property
    def trace_hash(self) -> str:
        return self.trace.digest()


class Simulation:
    def __init__(self, config: SimConfig, cluster: ClusterSpec = ClusterSpec(),
                 workload: Workload = Workload(), keys: KeyRing | None = None):
        self.cfg = config
        self.cluster = cluster
        self.workload = workload
        self.params = derive_cluster(cluster.f, cluster.c, cluster.window)
        if config.strict:
            check_plan(config, cluster.f, cluster.c)
        self.keys = keys or KeyRing.for_cluster(self.params, n_clients=workload.clients,
                                                seed=KEY_SEED)
        self.rng = random.Random(config.seed)
        base = config.link.base
        rcfg = replica_config(cluster, base)
        self.byzantine = set()
        self.crashes: dict[int, tuple] = {}
        self.slow: dict[int, int] = {}
        scripts = {}
        for fault in config.faults:
            if fault.behavior == "byzantine":
                self.byzantine.add(fault.replica)
                scripts[fault.replica] = fault.script
            elif fault.behavior == "crash":
                self.crashes[fault.replica] = (fault.at, fault.recover)
            else:
                self.slow[fault.replica] = fault.delay
        self.nodes: dict = {}
        for rid in self.params.replica_ids:
            node = Replica(rid, self.params, self.keys, rcfg)
            if rid in scripts:
                node = wrap(node, scripts[rid])
            self.nodes[rid] = node
        ccfg = client_config(cluster, config.link)
        self.clients: dict[int, Client] = {}
        for cid in range(1, workload.clients + 1):
            cl = Client(cid, self.params, self.keys, ccfg)
            self.clients[cid] = cl
            self.nodes[CLIENT_BASE + cid] = cl
        self.ops = generate_ops(workload, config.seed)
        self.next_op = {cid: 0 for cid in self.clients}
        self.remaining = workload.total_ops
        self.drop_kinds = dict(config.drop_kinds)
        self.level = config.trace_level
        self.trace = Trace(self.level, self._meta())
        self.heap: list = []
        self.counter = 0
        self.now = 0
        self.timers: dict = {}
        self.completions: list = []

    def _meta(self) -> dict:
        p, cl, w, c = self.params, self.cluster, self.workload, self.cfg
        return {
            "seed": c.seed, "mode": c.mode, "n": p.n, "f": p.f, "c": p.c, "window": p.window,
            "variant": cl.variant, "byzantine": sorted(self.byzantine),
            "crashed": sorted(self.crashes), "slow": sorted(self.slow),
            "clients": w.clients, "ops": w.total_ops, "base_delay": c.link.base,
            "fault_free": not c.faults and not c.drop_kinds and c.mode != "asynchronous",
            "mutations": sorted(cl.mutations),
        }

    # -- scheduling ----------------------------------------------------------
    def _push(self, at: int, kind: int, a, b=None, c=None) -> None:
        self.counter += 1
        heapq.heappush(self.heap, (at, self.counter, kind, a, b, c))

    def _crashed(self, node: int, at: int) -> bool:
        window = self.crashes.get(node)
        if window is None:
            return False
        start, recover = window
        return start <= at and (recover is None or at < recover)

    def _delay(self, src: int, dst: int) -> tuple[int, int]:
        """(delay, drops) for one message."""
        link = self.cfg.link
        if src == dst:
            return link.base, 0  # loopback: one fixed hop, never jittered or dropped
        mode = self.cfg.mode
        d = link.base
        if mode == "asynchronous":
            d += self.rng.randint(0, link.ceiling)
            drops = 0
            while drops < self.cfg.drop_budget and self.rng.random() < self.cfg.drop_rate:
                drops += 1
            # a dropped attempt is retransmitted after one worst-case round trip
            d += drops * 2 * (link.base + link.ceiling)
            return d, drops
        if link.jitter:
            d += self.rng.randint(0, link.jitter)
        return d + self.slow.get(src, 0), 0

    def send(self, src: int, dst: int, msg, extra: int = 0) -> None:
        kind = KIND_NAMES.get(type(msg), type(msg).__name__)
        rate = self.drop_kinds.get(kind)
        if rate and self.rng.random() < rate:
            self.trace.add(self.now, "drop", src, (dst, kind, getattr(msg, "seq", -1), "injected"))
            return
        delay, drops = self._delay(src, dst)
        if self.level != "safety":
            self.trace.add(self.now, "send", src,
                           (dst, kind, getattr(msg, "seq", -1), accounted_size(msg), drops))
        self._push(self.now + delay + extra, _DELIVER, src, dst, msg)

    def _drain(self, nid: int, node) -> None:
        if node.outbox:
            out, node.outbox = node.outbox, []
            for dst, msg, extra in out:
                self.send(nid, dst, msg, extra)
        if node.timer_ops:
            ops, node.timer_ops = node.timer_ops, []
            for op in ops:
                key = (nid, op[1])
                if op[0] == "set":
                    self.counter += 1
                    self.timers[key] = self.counter
                    heapq.heappush(self.heap, (self.now + op[2], self.counter, _TIMER, nid, op[1],
                                               self.counter))
                else:
                    self.timers.pop(key, None)
        if node.events:
            evs, node.events = node.events, []
            for ev in evs:
                self.trace.add(self.now, ev[0], nid, tuple(_hexify(x) for x in ev[1:]))

    # -- clients -------------------------------------------------------------
    def _submit(self, cid: int) -> None:
        cl = self.clients[cid]
        i = self.next_op[cid]
        ops = self.ops[cid - 1]
        if i >= len(ops):
            return
        self.next_op[cid] = i + 1
        cl.now = self.now
        cl.submit(ops[i])
        self._drain(CLIENT_BASE + cid, cl)

    def _client_done(self, cid: int) -> None:
        self.remaining -= 1
        if self.next_op[cid] < len(self.ops[cid - 1]):
            if self.workload.think:
                self._push(self.now + self.workload.think, _START, cid)
            else:
                self._submit(cid)

    # -- main loop -----------------------------------------------------------
    def run(self) -> RunResult:
        w = self.workload
        for cid in self.clients:
            self._push(w.start + (cid - 1) * w.stagger, _START, cid)
        settle = self.cfg.settle or 20 * self.cfg.link.base
        stop_at = self.cfg.horizon
        finished = False
        heap = self.heap
        while heap:
            at, _, kind, a, b, c = heapq.heappop(heap)
            if at > stop_at:
                break
            self.now = at
            if kind == _DELIVER:
                src, dst, msg = a, b, c
                if self._crashed(dst, at):
                    if self.level == "full":
                        self.trace.add(at, "lost", dst, (src, KIND_NAMES.get(type(msg), "?")))
                    continue
                node = self.nodes.get(dst)
                if node is None:
                    continue
                if self.level == "full":
                    self.trace.add(at, "deliver", dst, (src, KIND_NAMES.get(type(msg), "?")))
                if dst > CLIENT_BASE:
                    node.now = at
                    done = node.handle(src, msg)
                    self._drain(dst, node)
                    if done is not None:
                        self.completions.append((dst - CLIENT_BASE, done))
                        self._client_done(dst - CLIENT_BASE)
                else:
                    node.handle(src, msg)
                    self._drain(dst, node)
            elif kind == _TIMER:
                nid, name, token = a, b, c
                key = (nid, name)
                if self.timers.get(key) != token:
                    continue
                if self._crashed(nid, at):
                    recover = self.crashes[nid][1]
                    if recover is not None:
                        heapq.heappush(heap, (recover, token, _TIMER, nid, name, token))
                    else:
                        del self.timers[key]
                    continue
                del self.timers[key]
                if self.level == "full":
                    self.trace.add(at, "timer", nid, (_hexify(name),))
                node = self.nodes[nid]
                if nid > CLIENT_BASE:
                    node.now = at
                    before = len(node.failed)
                    node.on_timer(name)
                    self._drain(nid, node)
                    if len(node.failed) > before:
                        self._client_done(nid - CLIENT_BASE)
                else:
                    node.on_timer(name)
                    self._drain(nid, node)
            else:
                self._submit(a)
            if self.remaining <= 0 and not finished:
                finished = True
                stop_at = min(stop_at, self.now + settle)
        return self._finish(finished)

    def _finish(self, finished: bool) -> RunResult:
        end = self.now
        for rid in self.params.replica_ids:
            s = self.nodes[rid].summary()
            self.trace.add(end, "summary", rid,
                           (s["view"], s["ls"], s["le"], s["max_log"], s["window_violations"]))
        for cid, cl in self.clients.items():
            received = sorted(cl.received.items())
            self.trace.add(end, "client-summary", CLIENT_BASE + cid,
                           (len(cl.completed), len(cl.failed), len(cl.inflight),
                            [list(x) for x in received]))
        return RunResult(self.trace, {r: self.nodes[r] for r in self.params.replica_ids},
                         self.clients, end, finished, self.completions)


def run(config: SimConfig, cluster: ClusterSpec = ClusterSpec(),
        workload: Workload = Workload()) -> RunResult:
    return Simulation(config, cluster, workload).run()
