"""Zero-delay in-memory wiring of replicas for handler-level tests."""

from collections import deque

from collectorbft.crypto import KeyRing
from collectorbft.params import derive_cluster
from collectorbft.replica import CLIENT_BASE, Replica, ReplicaConfig


class Net:
    def __init__(self, f=1, c=0, window=16, config=ReplicaConfig(), clients=4):
        self.params = derive_cluster(f, c, window)
        self.keys = KeyRing.for_cluster(self.params, n_clients=clients)
        self.replicas = {i: Replica(i, self.params, self.keys, config)
                         for i in self.params.replica_ids}
        self.queue = deque()
        self.sent = []  # (src, dst, msg) in send order
        self.to_clients = []
        self.timers = {i: {} for i in self.replicas}
        self.down = set()
        self.drop = lambda src, dst, msg: False

    def inject(self, src, dst, msg):
        self.queue.append((src, dst, msg))

    def _collect(self, rid):
        r = self.replicas[rid]
        for dst, msg, _ in r.outbox:
            self.sent.append((rid, dst, msg))
            if dst > CLIENT_BASE:
                self.to_clients.append((rid, dst, msg))
            elif not self.drop(rid, dst, msg):
                self.queue.append((rid, dst, msg))
        r.outbox = []
        for op in r.timer_ops:
            if op[0] == "set":
                self.timers[rid][op[1]] = op[2]
            else:
                self.timers[rid].pop(op[1], None)
        r.timer_ops = []

    def run(self, limit=100_000):
        steps = 0
        while self.queue and steps < limit:
            src, dst, msg = self.queue.popleft()
            steps += 1
            if dst in self.down:
                continue
            self.replicas[dst].handle(src, msg)
            self._collect(dst)
        return steps

    def fire(self, rid, name):
        self.timers[rid].pop(name, None)
        self.replicas[rid].on_timer(name)
        self._collect(rid)
        self.run()

    def fire_all(self, kind):
        for rid in self.replicas:
            if rid in self.down:
                continue
            for name in [t for t in self.timers[rid] if t[0] == kind]:
                self.fire(rid, name)

    def events(self, kind):
        return [(rid, e) for rid, r in self.replicas.items() for e in r.events if e[0] == kind]

    def of_type(self, cls, src=None):
        return [(s, d, m) for s, d, m in self.sent if type(m) is cls and (src is None or s == src)]
