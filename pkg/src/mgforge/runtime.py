"""Thread-based SPMD runtime.

Every rank is an OS thread running the same program on private data.  Ranks
only interact through the synchronous collectives of :class:`Communicator`,
which are shaped after their MPI counterparts so a message passing backend
could be substituted.  Payloads are copied on delivery, so no rank ever holds
a reference into another rank's arrays.

Environment
-----------
``MGFORGE_MAX_RANKS``
    Upper bound on the team size; larger requests are clamped (with a
    warning) to keep CI machines responsive.
``MGFORGE_DEBUG_COLLECTIVES``
    When set to ``1``, every collective checks that all ranks issued the
    same operation with the same sequence number.
"""
from __future__ import annotations

import logging
import os
import threading
import time
from collections import defaultdict
from contextlib import contextmanager

import numpy as np
import scipy.sparse

from .errors import CollectiveOrderViolation, LayoutMismatch, TeamAborted

logger = logging.getLogger(__name__)

_TIMEOUT = float(os.environ.get("MGFORGE_COLLECTIVE_TIMEOUT", "3600"))


def _private(value):
    if isinstance(value, np.ndarray) or scipy.sparse.issparse(value):
        return value.copy()
    if isinstance(value, (list, tuple)):
        return type(value)(_private(v) for v in value)
    if isinstance(value, dict):
        return {k: _private(v) for k, v in value.items()}
    return value


class _Team:
    """State shared by the members of one communicator."""

    def __init__(self, size, debug, registry):
        self.size = size
        self.debug = debug
        self.slots = [None] * size
        self.barrier = threading.Barrier(size, timeout=_TIMEOUT) if size > 1 else None
        self.registry = registry
        if self.barrier is not None:
            registry.append(self.barrier)

    def wait(self):
        if self.barrier is not None:
            self.barrier.wait()


class StageTimer:
    """Per-rank wall-clock stage timer with nesting discipline."""

    def __init__(self):
        self.totals = defaultdict(float)
        self.calls = defaultdict(int)
        self._stack = []

    @contextmanager
    def stage(self, name):
        self._stack.append(name)
        t0 = time.perf_counter()
        try:
            yield
        finally:
            dt = time.perf_counter() - t0
            top = self._stack.pop()
            assert top == name, f"timer stack corrupted: closing {name}, top {top}"
            self.totals[name] += dt
            self.calls[name] += 1

    @property
    def depth(self):
        return len(self._stack)

    def snapshot(self):
        return {k: (self.totals[k], self.calls[k]) for k in self.totals}

    def reset(self):
        if self._stack:
            raise RuntimeError("cannot reset a timer with open stages")
        self.totals.clear()
        self.calls.clear()


class Communicator:
    def __init__(self, team: _Team, rank: int, timer: StageTimer | None = None, world_rank=None):
        self._team = team
        self.rank = rank
        self.size = team.size
        self._seq = 0
        self.timer = timer if timer is not None else StageTimer()
        self.world_rank = rank if world_rank is None else world_rank

    def __repr__(self):
        return f"<Communicator rank {self.rank}/{self.size}>"

    def _collective(self, op, value, pick=None):
        self._seq += 1
        team = self._team
        pick = pick or (lambda v: v)
        if team.size == 1:
            return [_private(pick(value))]
        team.slots[self.rank] = (op, self._seq, value)
        team.wait()
        items = list(team.slots)
        # copy before releasing the senders, who may then mutate their buffers
        values = [_private(pick(v)) for _, _, v in items]
        team.wait()
        if team.debug:
            tags = {(o, s) for o, s, _ in items}
            if len(tags) != 1:
                raise CollectiveOrderViolation(
                    f"rank {self.rank} called {op}#{self._seq}; team issued {sorted(tags)}")
        return values

    def _handoff(self, handle):
        # team objects are shared handles, not data: skip the copying path
        self._seq += 1
        team = self._team
        if team.size == 1:
            return [handle]
        team.slots[self.rank] = ("handoff", self._seq, handle)
        team.wait()
        items = [v for _, _, v in team.slots]
        team.wait()
        return items

    # -- collectives ----------------------------------------------------
    def barrier(self):
        self._collective("barrier", None)

    def allgather(self, value):
        return self._collective("allgather", value)

    def gather(self, value, root=0):
        out = self._collective("gather", value)
        return out if self.rank == root else None

    def bcast(self, value, root=0):
        return self._collective("bcast", value if self.rank == root else None)[root]

    def allreduce(self, value, op="sum"):
        return allreduce(self, value, op)

    def alltoall(self, outgoing: dict):
        """Personalised exchange: ``outgoing[dest]`` is delivered to ``dest``.

        Returns a list, indexed by source rank, of the payloads addressed to
        this rank (``None`` where a source sent nothing).
        """
        return self._collective("alltoall", outgoing,
                                pick=lambda box: box.get(self.rank) if box else None)

    def split(self, color: int) -> "Communicator":
        return split(self, color)

    def self_comm(self) -> "Communicator":
        """A private singleton team sharing this rank's timer (not collective)."""
        return Communicator(_Team(1, self._team.debug, self._team.registry), 0, self.timer,
                            self.world_rank)


def allreduce(comm: Communicator, value, op: str = "sum"):
    """Reduce over the team in fixed rank order; every rank gets the result."""
    vals = comm._collective(f"allreduce_{op}", value)
    if op == "sum":
        out = vals[0]
        for v in vals[1:]:
            out = out + v
        return out
    if op == "max":
        return max(vals) if np.isscalar(vals[0]) else np.maximum.reduce(vals)
    if op == "min":
        return min(vals) if np.isscalar(vals[0]) else np.minimum.reduce(vals)
    raise ValueError(f"unknown reduction {op!r}")


def split(comm: Communicator, color: int) -> Communicator:
    """Ranks with equal ``color`` form a new team, ranked by old rank order."""
    colors = comm._collective("split", int(color))
    members = [r for r, c in enumerate(colors) if c == color]
    leader = members[0]
    team = None
    if comm.rank == leader:
        team = _Team(len(members), comm._team.debug, comm._team.registry)
    teams = comm._handoff(team)
    return Communicator(teams[leader], members.index(comm.rank), comm.timer, comm.world_rank)


def halo_exchange(comm: Communicator, vector):
    """Refresh the ghost entries of ``vector`` from their owners."""
    plan = getattr(vector, "plan", None)
    if plan is None:
        raise LayoutMismatch("vector has no ghost plan")
    if plan.nranks != comm.size or vector.owned.shape[0] != plan.n_owned:
        raise LayoutMismatch("vector layout does not match the communicator/plan")
    outgoing = {dest: vector.owned[idx] for dest, idx in plan.send.items()}
    got = comm.alltoall(outgoing)
    for src, pos in plan.recv.items():
        vector.ghosts[pos] = got[src]
    vector.fresh = True
    return vector


def spmd_run(R: int, program, *args, debug: bool | None = None, **kwargs):
    """Run ``program(comm, *args, **kwargs)`` on ``R`` ranks and join.

    Returns the per-rank return values in rank order.  If any rank raises,
    the whole team is aborted and :class:`TeamAborted` names the first rank
    that failed.
    """
    if R < 1:
        raise ValueError("team size must be >= 1")
    cap = os.environ.get("MGFORGE_MAX_RANKS")
    if cap is not None and R > int(cap):
        logger.warning("clamping team size %d to MGFORGE_MAX_RANKS=%s", R, cap)
        R = int(cap)
    if debug is None:
        debug = os.environ.get("MGFORGE_DEBUG_COLLECTIVES", "0") == "1"
    registry = []
    team = _Team(R, debug, registry)

    if R == 1:
        try:
            return [program(Communicator(team, 0), *args, **kwargs)]
        except Exception as exc:
            raise TeamAborted(0, exc) from exc

    results = [None] * R
    failures = []
    lock = threading.Lock()

    def worker(rank):
        try:
            results[rank] = program(Communicator(team, rank), *args, **kwargs)
        except threading.BrokenBarrierError as exc:
            with lock:
                failures.append((rank, exc, False))
        except Exception as exc:      # abort everybody still waiting
            with lock:
                failures.append((rank, exc, True))
            for b in list(registry):
                b.abort()

    threads = [threading.Thread(target=worker, args=(r,), name=f"rank-{r}") for r in range(R)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if failures:
        primary = [f for f in failures if f[2]] or failures
        rank, exc, _ = min(primary, key=lambda f: f[0])
        raise TeamAborted(rank, exc) from exc
    return results


def reduce_stage_times(comm: Communicator, timer: StageTimer | None = None):
    """Team max/min/avg seconds and max call count for every stage."""
    snap = (timer or comm.timer).snapshot()
    allsnaps = comm.allgather(snap)
    names = sorted(set().union(*[s.keys() for s in allsnaps]))
    out = {}
    for name in names:
        secs = [s.get(name, (0.0, 0))[0] for s in allsnaps]
        calls = [s.get(name, (0.0, 0))[1] for s in allsnaps]
        out[name] = {"max": max(secs), "min": min(secs), "avg": sum(secs) / len(secs),
                     "calls": max(calls)}
    return out
