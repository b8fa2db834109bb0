"""Discrete-event simulation of compute-communicate cycles under contention.

Each rank repeats: move ``work`` bytes through its memory domain, then
exchange one message with each direct neighbor and block until both
neighbor messages for the current iteration have arrived.  The recorded
observable is the blocking time per rank and iteration.

Memory traffic is modeled as processor sharing with a per-rank cap: a
rank computing on domain d receives ``min(single_rank_bw,
domain_bw_cap / a_d)`` bytes/s, where ``a_d`` is the number of ranks on
d currently in their work segment.  Rates are piecewise constant and
recomputed whenever a rank enters or leaves a work segment, so event
times are exact up to float rounding.  Scalable kernels bypass the cap
entirely.  Noise and injected one-off delays extend the compute phase
by a stall that consumes no bandwidth; the work segment itself always
moves exactly ``work`` bytes.

A message sent by rank s for iteration i becomes available to its
neighbor at ``compute_end(s, i) + latency + message_bytes / bandwidth``.
The waiting time is ``comm_complete - compute_end``, never negative.

The event queue orders ties by (time, rank), making runs bit-identical
for a fixed config and seed.  Noise is drawn from one PCG64 stream per
rank (spawned off the config seed), so the draw order is independent of
event interleaving.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field

import numpy as np

from .trace import PerfSeries, TraceMatrix

OPEN_CHAIN = "open_chain"
CLOSED_RING = "closed_ring"
NOISE_KINDS = ("none", "gaussian", "exponential")
RNG_NAME = "numpy-pcg64-spawn"

_EVT_WORK = 0   # domain's earliest work-segment finisher (invalidated by epoch)
_EVT_CEND = 1   # compute phase over (stall included)
_EVT_COMM = 2   # both neighbor messages arrived


@dataclass(frozen=True)
class Topology:
    n_ranks: int
    domain_size: int
    boundary: str = CLOSED_RING

    def validate(self) -> None:
        if self.n_ranks < 2:
            raise ValueError(f"need at least 2 ranks, got {self.n_ranks}")
        if self.domain_size < 1 or self.n_ranks % self.domain_size != 0:
            raise ValueError(f"domain_size {self.domain_size} does not divide n_ranks {self.n_ranks}")
        if self.boundary not in (OPEN_CHAIN, CLOSED_RING):
            raise ValueError(f"boundary must be one of {OPEN_CHAIN!r}, {CLOSED_RING!r}, got {self.boundary!r}")

    @property
    def n_domains(self) -> int:
        return self.n_ranks // self.domain_size


@dataclass(frozen=True)
class KernelModel:
    work: float                  # bytes of memory traffic per rank per iteration
    single_rank_bw: float        # bytes/s a lone rank achieves
    domain_bw_cap: float = 0.0   # aggregate bytes/s ceiling per domain (ignored if scalable)
    scalable: bool = False

    def validate(self) -> None:
        if self.work <= 0:
            raise ValueError(f"work must be positive, got {self.work}")
        if self.single_rank_bw <= 0:
            raise ValueError(f"single_rank_bw must be positive, got {self.single_rank_bw}")
        if not self.scalable and not (0 < self.single_rank_bw <= self.domain_bw_cap):
            raise ValueError(
                f"saturating kernel needs 0 < single_rank_bw <= domain_bw_cap, "
                f"got {self.single_rank_bw} vs {self.domain_bw_cap}"
            )


@dataclass(frozen=True)
class CommModel:
    message_bytes: float = 0.0
    latency: float = 0.0         # seconds per message
    bandwidth: float = 1.0       # bytes/s on the link
    mode: str = "blocking_neighbor_sync"

    def validate(self) -> None:
        if self.latency < 0 or self.bandwidth <= 0 or self.message_bytes < 0:
            raise ValueError("comm model needs latency >= 0, bandwidth > 0, message_bytes >= 0")
        if self.mode != "blocking_neighbor_sync":
            raise ValueError(f"unsupported comm mode {self.mode!r}")

    @property
    def transfer_time(self) -> float:
        return self.latency + self.message_bytes / self.bandwidth


@dataclass(frozen=True)
class NoiseModel:
    kind: str = "none"
    amplitude: float = 0.0       # std-dev (gaussian) or mean (exponential), seconds
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"noise kind must be one of {NOISE_KINDS}, got {self.kind!r}")
        if self.amplitude < 0:
            raise ValueError(f"noise amplitude must be >= 0, got {self.amplitude}")


@dataclass(frozen=True)
class Injection:
    rank: int
    iteration: int
    delay: float


@dataclass(frozen=True)
class SimConfig:
    topology: Topology
    kernel: KernelModel
    comm: CommModel = CommModel()
    noise: NoiseModel = NoiseModel()
    injections: tuple[Injection, ...] = ()
    n_iterations: int = 1000
    perf_window: int = 100

    def validate(self) -> None:
        self.topology.validate()
        self.kernel.validate()
        self.comm.validate()
        self.noise.validate()
        if self.n_iterations < 1:
            raise ValueError(f"n_iterations must be >= 1, got {self.n_iterations}")
        if not 1 <= self.perf_window <= self.n_iterations:
            raise ValueError(f"perf_window must be in [1, {self.n_iterations}], got {self.perf_window}")
        for inj in self.injections:
            if not 0 <= inj.rank < self.topology.n_ranks:
                raise ValueError(f"injection rank {inj.rank} out of range")
            if not 0 <= inj.iteration < self.n_iterations:
                raise ValueError(f"injection iteration {inj.iteration} out of range")
            if inj.delay <= 0:
                raise ValueError(f"injection delay must be positive, got {inj.delay}")

    def to_json(self) -> str:
        d = {
            "topology": vars(self.topology).copy(),
            "kernel": vars(self.kernel).copy(),
            "comm": vars(self.comm).copy(),
            "noise": vars(self.noise).copy(),
            "injections": [vars(i).copy() for i in self.injections],
            "n_iterations": self.n_iterations,
            "perf_window": self.perf_window,
        }
        return json.dumps(d, sort_keys=True)

    @staticmethod
    def from_dict(d: dict) -> "SimConfig":
        return SimConfig(
            topology=Topology(**d["topology"]),
            kernel=KernelModel(**d["kernel"]),
            comm=CommModel(**d.get("comm", {})),
            noise=NoiseModel(**d.get("noise", {})),
            injections=tuple(Injection(**i) for i in d.get("injections", ())),
            n_iterations=d.get("n_iterations", 1000),
            perf_window=d.get("perf_window", 100),
        )


class _NoiseStream:
    """Per-rank noise draws in iteration order, buffered in chunks."""

    __slots__ = ("gen", "kind", "amplitude", "buf", "pos")
    CHUNK = 4096

    def __init__(self, seed_seq: np.random.SeedSequence, kind: str, amplitude: float):
        self.gen = np.random.Generator(np.random.PCG64(seed_seq))
        self.kind = kind
        self.amplitude = amplitude
        self.buf = np.empty(0)
        self.pos = 0

    def draw(self) -> float:
        if self.pos >= self.buf.size:
            if self.kind == "gaussian":
                self.buf = self.gen.normal(0.0, self.amplitude, size=self.CHUNK)
            else:
                self.buf = self.gen.exponential(self.amplitude, size=self.CHUNK)
            self.pos = 0
        v = self.buf[self.pos]
        self.pos += 1
        return v if v > 0.0 else 0.0


class _Domain:
    """Ranks currently in their work segment on one memory domain."""

    __slots__ = ("bw1", "cap", "active", "rate", "last_t", "epoch")

    def __init__(self, bw1: float, cap: float):
        self.bw1 = bw1
        self.cap = cap
        self.active: dict[int, float] = {}   # rank -> remaining bytes
        self.rate = 0.0
        self.last_t = 0.0
        self.epoch = 0

    def advance(self, now: float) -> None:
        dt = now - self.last_t
        if dt > 0.0 and self.active:
            done = self.rate * dt
            for r in self.active:
                self.active[r] -= done
        self.last_t = now

    def next_finish(self) -> tuple[float, int]:
        """(remaining, rank) of the earliest finisher; ties go to the lowest rank."""
        best_r = -1
        best_rem = np.inf
        for r, rem in self.active.items():
            if rem < best_rem or (rem == best_rem and r < best_r):
                best_r, best_rem = r, rem
        return best_rem, best_r


def simulate(config: SimConfig) -> tuple[TraceMatrix, PerfSeries]:
    """Run one simulation; deterministic for a fixed config and seed."""
    config.validate()
    topo, kernel, comm = config.topology, config.kernel, config.comm
    n = topo.n_ranks
    n_iter = config.n_iterations
    transfer = comm.transfer_time
    work_time = kernel.work / kernel.single_rank_bw

    ring = topo.boundary == CLOSED_RING
    neighbors: list[tuple[int, ...]] = []
    for r in range(n):
        nbrs = set()
        if r > 0 or ring:
            nbrs.add((r - 1) % n)
        if r < n - 1 or ring:
            nbrs.add((r + 1) % n)
        nbrs.discard(r)
        neighbors.append(tuple(sorted(nbrs)))

    injection_delay: dict[tuple[int, int], float] = {}
    for inj in config.injections:
        key = (inj.rank, inj.iteration)
        injection_delay[key] = injection_delay.get(key, 0.0) + inj.delay

    noise: list[_NoiseStream] | None = None
    if config.noise.kind != "none" and config.noise.amplitude > 0.0:
        children = np.random.SeedSequence(config.noise.seed).spawn(n)
        noise = [_NoiseStream(c, config.noise.kind, config.noise.amplitude) for c in children]

    domains: list[_Domain] = []
    domain_of_rank = [r // topo.domain_size for r in range(n)]
    if not kernel.scalable:
        domains = [_Domain(kernel.single_rank_bw, kernel.domain_bw_cap) for _ in range(topo.n_domains)]

    waits = np.zeros((n, n_iter), dtype=np.float64)
    n_windows = n_iter // config.perf_window
    perf = np.empty((n, n_windows), dtype=np.float64)
    window_start = [0.0] * n

    it = [0] * n                      # current iteration per rank
    stall = [0.0] * n                 # noise + injection tail of the current compute phase
    ce_time = [0.0] * n               # compute end of (rank, it[rank])
    prev_ce = [(-1, 0.0)] * n         # (iteration, compute end) one iteration back
    waiting = [False] * n
    pending = [0] * n                 # count of neighbor messages still unknown
    arrived = [0.0] * n               # running max of own ce and known arrival times

    heap: list[tuple[float, int, int, int, int]] = []  # (time, rank, kind, seq, epoch)
    seq = 0

    def push(t: float, rank: int, kind: int, epoch: int = 0) -> None:
        nonlocal seq
        heapq.heappush(heap, (t, rank, kind, seq, epoch))
        seq += 1

    def reschedule(d: _Domain, now: float) -> None:
        d.epoch += 1
        if not d.active:
            d.rate = 0.0
            return
        d.rate = min(d.bw1, d.cap / len(d.active))
        rem, rank = d.next_finish()
        t_fin = now + (rem if rem > 0.0 else 0.0) / d.rate
        push(t_fin, rank, _EVT_WORK, d.epoch)

    def start_compute(r: int, t: float) -> None:
        i = it[r]
        s = noise[r].draw() if noise is not None else 0.0
        inj = injection_delay.get((r, i))
        if inj is not None:
            s += inj
        stall[r] = s
        if kernel.scalable:
            push(t + work_time + s, r, _EVT_CEND)
        else:
            d = domains[domain_of_rank[r]]
            d.advance(t)
            d.active[r] = kernel.work
            reschedule(d, t)

    def compute_end(r: int, t: float) -> None:
        i = it[r]
        prev_ce[r] = (i - 1, ce_time[r])
        ce_time[r] = t
        waiting[r] = True
        best = t
        missing = 0
        for nb in neighbors[r]:
            nb_it = it[nb]
            if nb_it == i:
                if not waiting[nb]:   # still computing iteration i
                    missing += 1
                    continue
                arr = ce_time[nb] + transfer
            elif nb_it == i + 1:
                # nb is past i; ce(nb, i) moved to prev_ce once nb ended compute i+1
                arr = (prev_ce[nb][1] if waiting[nb] else ce_time[nb]) + transfer
            else:                     # nb has not reached iteration i yet
                missing += 1
                continue
            if arr > best:
                best = arr
        arrived[r] = best
        pending[r] = missing
        if missing == 0:
            push(best, r, _EVT_COMM)
        # a neighbor blocked on rank r's iteration-i message can now resolve
        for nb in neighbors[r]:
            if waiting[nb] and it[nb] == i and pending[nb] > 0:
                arr = t + transfer
                if arr > arrived[nb]:
                    arrived[nb] = arr
                pending[nb] -= 1
                if pending[nb] == 0:
                    push(arrived[nb], nb, _EVT_COMM)

    for r in range(n):
        start_compute(r, 0.0)

    finished = 0
    while finished < n:
        t, r, kind, _, epoch = heapq.heappop(heap)
        if kind == _EVT_WORK:
            d = domains[domain_of_rank[r]]
            if epoch != d.epoch:
                continue
            d.advance(t)
            del d.active[r]
            reschedule(d, t)
            if stall[r] > 0.0:
                push(t + stall[r], r, _EVT_CEND)
            else:
                compute_end(r, t)
        elif kind == _EVT_CEND:
            compute_end(r, t)
        else:  # _EVT_COMM
            i = it[r]
            waits[r, i] = t - ce_time[r]
            waiting[r] = False
            nxt = i + 1
            if nxt % config.perf_window == 0:
                w = nxt // config.perf_window - 1
                if w < n_windows:
                    perf[r, w] = config.perf_window / (t - window_start[r])
                    window_start[r] = t
            it[r] = nxt
            if nxt < n_iter:
                start_compute(r, t)
            else:
                finished += 1

    meta = {
        "ranks": str(n),
        "iterations": str(n_iter),
        "domain_size": str(topo.domain_size),
        "topology": topo.boundary,
        "seed": str(config.noise.seed),
        "rng": RNG_NAME,
        "perf_window": str(config.perf_window),
        "config": config.to_json(),
    }
    trace = TraceMatrix(
        waits,
        rank_labels=tuple(range(n)),
        domain_of={r: domain_of_rank[r] for r in range(n)},
        meta=meta,
    )
    return trace, PerfSeries(perf, window=config.perf_window)
