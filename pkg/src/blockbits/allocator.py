"""Bitwidth search: classic greedy, the batched relaxed greedy, and oracles.

Budgets are element-weighted: an assignment ``b`` is feasible when
``sum(b * sizes) <= B * sum(sizes)``. All comparisons are done in exact
arithmetic on the integer bit totals.
"""

from __future__ import annotations

import itertools
import json
import math
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ContractError, NumericError


class Budget:
    """Element-weighted bit budget with exact feasibility checks."""

    def __init__(self, B, sizes):
        self.B = float(B)
        self.sizes = np.asarray(sizes, dtype=np.int64)
        self.total = int(self.sizes.sum())
        self._cap = Fraction(self.B) * self.total  # exact: B is a binary float

    def used(self, b) -> int:
        return int((np.asarray(b, dtype=np.int64) * self.sizes).sum())

    def headroom(self, b) -> Fraction:
        return self._cap - self.used(b)

    def feasible(self, b) -> bool:
        return self.used(b) <= self._cap

    def average(self, b) -> float:
        return self.used(b) / self.total


# ---------------------------------------------------------------------------
# classic greedy and oracles
# ---------------------------------------------------------------------------

@dataclass
class GreedyResult:
    assignment: np.ndarray
    values: list
    saturated: bool = False


def classic_greedy(value_fn, n: int, B, bit_max: int, sizes=None, start=None) -> GreedyResult:
    """Raise the block with the largest gain by one bit until the budget is spent.

    ``value_fn(b)`` is maximized (pass a negated loss). Candidates whose
    extra bits would overshoot the budget are skipped; ties go to the
    lowest index. If ``value_fn`` has a ``rebase`` method it is called
    with every accepted assignment, which lets callers cache work.
    """
    sizes = np.ones(n, dtype=np.int64) if sizes is None else np.asarray(sizes, dtype=np.int64)
    budget = Budget(B, sizes)
    b = np.zeros(n, dtype=np.int64) if start is None else np.array(start, dtype=np.int64)
    if not budget.feasible(b):
        raise ContractError("greedy start point exceeds the budget")
    rebase = getattr(value_fn, "rebase", None)
    if rebase is not None:
        rebase(b)
    cur = value_fn(b)
    values = [cur]
    while True:
        room = budget.headroom(b)
        cand = [i for i in range(n) if b[i] < bit_max and sizes[i] <= room]
        if not cand:
            break
        best_i, best_v = -1, -math.inf
        for i in cand:
            b[i] += 1
            v = value_fn(b)
            b[i] -= 1
            if v > best_v:
                best_i, best_v = i, v
        b[best_i] += 1
        cur = best_v
        values.append(cur)
        if rebase is not None:
            rebase(b)
    saturated = bool(np.all(b >= bit_max)) and budget.headroom(b) > 0
    return GreedyResult(b, values, saturated)


def exhaustive_oracle(value_fn, n: int, bits, B, sizes=None):
    """Best feasible assignment by enumeration; ties go to the lexicographically smallest."""
    bits = sorted(bits)
    if len(bits) ** n > 10**6:
        raise ContractError(f"{len(bits)}^{n} assignments exceed the enumeration cap")
    sizes = np.ones(n, dtype=np.int64) if sizes is None else np.asarray(sizes, dtype=np.int64)
    budget = Budget(B, sizes)
    best, best_v, count = None, -math.inf, 0
    for combo in itertools.product(bits, repeat=n):
        b = np.array(combo, dtype=np.int64)
        if not budget.feasible(b):
            continue
        count += 1
        v = value_fn(b)
        if v > best_v:
            best, best_v = b, v
    return best, best_v, count


def separable_value(a):
    """v(b) = sum a_i (1 - 2^-b_i): monotone and DR-submodular."""
    a = np.asarray(a, dtype=np.float64)
    return lambda b: float((a * (1.0 - np.exp2(-np.asarray(b, dtype=np.float64)))).sum())


def random_drsub_instance(rng, n: int, n_items: int = 6):
    """Weighted probabilistic coverage plus separable concave terms.

    ``f(b) = sum_k c_k (1 - prod_i (1 - p_ki)^b_i) + sum_i a_i (1 - r_i^b_i)``
    is monotone and DR-submodular on the integer lattice.
    """
    c = rng.uniform(0.1, 1.0, n_items)
    p = rng.uniform(0.0, 0.6, (n_items, n)) * (rng.random((n_items, n)) < 0.6)
    a = rng.uniform(0.0, 0.5, n)
    r = rng.uniform(0.2, 0.9, n)
    log_keep = np.log1p(-p)

    def f(b):
        b = np.asarray(b, dtype=np.float64)
        return float((c * (1.0 - np.exp(log_keep @ b))).sum() + (a * (1.0 - r ** b)).sum())

    return f


# ---------------------------------------------------------------------------
# lattice probes
# ---------------------------------------------------------------------------

@dataclass
class ProbeReport:
    chains: int
    monotone_checks: int
    monotone_violations: int
    dr_checks: int
    dr_violations: int
    details: list = field(default_factory=list)

    @property
    def monotone_rate(self) -> float:
        return self.monotone_violations / self.monotone_checks if self.monotone_checks else 0.0

    @property
    def dr_rate(self) -> float:
        return self.dr_violations / self.dr_checks if self.dr_checks else 0.0


def random_chain(rng, n: int, length: int, bit_lo: int, bit_hi: int, bit_max: int, start=None,
                 step: int = 1):
    """Monotone chain b^1 < ... < b^K; each step adds ``step`` single-bit raises at random coordinates."""
    b = rng.integers(bit_lo, bit_hi + 1, size=n) if start is None else np.array(start)
    chain = [b.copy()]
    while len(chain) < length:
        moved = False
        for _ in range(step):
            open_ = np.flatnonzero(b < bit_max)
            if open_.size == 0:
                break
            b[rng.choice(open_)] += 1
            moved = True
        if not moved:
            break
        chain.append(b.copy())
    return chain


def lattice_probe(value_fn, n: int, chains: int, seed: int, length: int = 6,
                  bit_lo: int = 2, bit_hi: int = 3, bit_max: int = 8, tol: float = 0.0,
                  step: int = 1) -> ProbeReport:
    """Empirical monotonicity and diminishing-returns checks along random chains.

    For each chain ``b^1 < ... < b^K`` and a random coordinate ``i`` whose
    bits stay below ``bit_max``, counts steps where ``f`` decreases and steps
    where the marginal ``f(b^k + e_i) - f(b^k)`` grows.
    """
    rng = np.random.default_rng(seed)
    rep = ProbeReport(chains, 0, 0, 0, 0)
    for _ in range(chains):
        chain = random_chain(rng, n, length, bit_lo, bit_hi, bit_max - 1, step=step)
        i = int(rng.integers(n))
        f = [value_fn(b) for b in chain]
        marg = []
        for b, fb in zip(chain, f):
            e = b.copy()
            e[i] += 1
            marg.append(value_fn(e) - fb)
        mono = [f[k + 1] < f[k] - tol for k in range(len(f) - 1)]
        dr = [marg[k + 1] > marg[k] + tol for k in range(len(marg) - 1)]
        rep.monotone_checks += len(mono)
        rep.monotone_violations += sum(mono)
        rep.dr_checks += len(dr)
        rep.dr_violations += sum(dr)
        rep.details.append({"coord": i, "values": f, "marginals": marg})
    return rep


# ---------------------------------------------------------------------------
# relaxed step and scalable greedy
# ---------------------------------------------------------------------------

def _top(scores, eligible, k):
    """Indices of the ``k`` largest scores among ``eligible``; ties -> lowest index."""
    idx = np.flatnonzero(eligible)
    order = np.lexsort((idx, -scores[idx]))
    return idx[order[:k]]


def _bottom(scores, eligible, k):
    idx = np.flatnonzero(eligible)
    order = np.lexsort((idx, scores[idx]))
    return idx[order[:k]]


def relaxed_step(b, s_up, s_down, k: int, budget: Budget, bit_min: int, bit_max: int):
    """One proposal. Returns ``(new_b, phase, raised, lowered)``.

    While some raisable block still fits the remaining headroom the step is
    a pure expansion of up to ``k`` blocks by ``s_up``; otherwise it is a
    balanced swap of ``k // 2`` raises and ``k // 2`` lowers that keeps the
    weight-bit total within budget.
    """
    b = np.asarray(b, dtype=np.int64)
    s_up, s_down = np.asarray(s_up, dtype=np.float64), np.asarray(s_down, dtype=np.float64)
    sizes = budget.sizes
    up_ok = (b < bit_max) & np.isfinite(s_up)
    room = budget.headroom(b)
    new = b.copy()
    if np.any(up_ok & (sizes <= room)):
        raised = []
        for i in _top(s_up, up_ok, up_ok.sum()):
            if len(raised) == k:
                break
            if sizes[i] <= room:
                raised.append(int(i))
                room -= int(sizes[i])
        new[raised] += 1
        return new, "expand", raised, []
    h = k // 2
    raise_set = _top(s_up, up_ok, h)
    down_ok = (b > bit_min) & np.isfinite(s_down)
    down_ok[raise_set] = False
    lower_set = _bottom(s_down, down_ok, h)
    m = min(len(raise_set), len(lower_set))
    raise_set, lower_set = list(map(int, raise_set[:m])), list(map(int, lower_set[:m]))
    new[lower_set] -= 1
    # unequal block sizes: keep raises in priority order while the total fits
    kept = []
    room = budget.headroom(new)
    for i in raise_set:
        if sizes[i] <= room:
            kept.append(i)
            room -= int(sizes[i])
    new[kept] += 1
    return new, "balanced", kept, lower_set


@dataclass
class SearchConfig:
    gamma0: float = 0.05
    gamma_t: float = 0.02
    bit_min: int = 1
    bit_max: int = 8
    max_iters: int = 200
    batch_seqs: int = 8
    adaptive: bool = True
    signed_up: bool = True
    seed: int = 0


@dataclass
class TraceRecord:
    t: int
    k: int
    batch_id: int
    phase: str
    avg_bits: float
    loss_before: float
    loss_after: float
    accepted: bool
    raised: int
    lowered: int


@dataclass
class SearchTrace:
    records: list = field(default_factory=list)
    assignment: np.ndarray | None = None
    saturated: bool = False
    wall_time: float = 0.0

    def to_jsonl(self) -> str:
        lines = [json.dumps(asdict(r), sort_keys=True) for r in self.records]
        lines.append(json.dumps({"final": [int(v) for v in self.assignment], "saturated": self.saturated}))
        return "\n".join(lines) + "\n"


def warm_start(n: int, B, bit_min: int, bit_max: int) -> np.ndarray:
    return np.full(n, min(max(int(math.floor(B)), bit_min), bit_max), dtype=np.int64)


def scalable_greedy(problem, B, config: SearchConfig, start=None):
    """Batched greedy refinement from the warm start ``floor(B)``.

    ``problem`` supplies ``n_blocks``, ``sizes``, ``n_calib``,
    ``loss(b, batch_idx)``, ``grads(b, batch_idx)`` and
    ``scores(b, grads, signed)`` returning ``(s_up, s_down)``. Each
    iteration samples a calibration batch, scores the blocks at the current
    assignment and applies one relaxed step. Balanced proposals that raise
    the batch loss are reverted and halve ``k``. With ``adaptive=False`` the
    gradients of the first iteration are reused throughout. Returns
    ``(assignment, SearchTrace)``.
    """
    t0 = time.perf_counter()
    n = problem.n_blocks
    budget = Budget(B, problem.sizes)
    if B < config.bit_min:
        raise ContractError(f"budget {B} is below bit_min={config.bit_min}")
    if config.gamma_t > config.gamma0:
        raise ContractError("gamma_t must not exceed gamma0")
    b = warm_start(n, B, config.bit_min, config.bit_max) if start is None else np.array(start, dtype=np.int64)
    if not budget.feasible(b):
        raise ContractError("search start exceeds the budget")
    rng = np.random.default_rng(config.seed)
    k = max(1, int(math.floor(config.gamma0 * n)))
    k_stop = max(1, int(math.floor(config.gamma_t * n)))
    trace = SearchTrace()
    grads = None
    t = 0
    while k >= k_stop and t < config.max_iters:
        if np.all(b >= config.bit_max):
            trace.saturated = budget.headroom(b) > 0
            break
        size = min(config.batch_seqs, problem.n_calib)
        batch_idx = np.sort(rng.choice(problem.n_calib, size=size, replace=False))
        if config.adaptive or grads is None:
            grads = problem.grads(b, batch_idx)
        s_up, s_down = problem.scores(b, grads, config.signed_up)
        new, phase, raised, lowered = relaxed_step(b, s_up, s_down, k, budget, config.bit_min, config.bit_max)
        loss_before = loss_after = float("nan")
        if phase == "expand":
            accepted = True
        elif not raised:
            accepted = False
        else:
            loss_before = problem.loss(b, batch_idx)
            loss_after = problem.loss(new, batch_idx)
            if not (math.isfinite(loss_before) and math.isfinite(loss_after)):
                trace.records.append(TraceRecord(t, k, t, phase, budget.average(b), loss_before,
                                                 loss_after, False, len(raised), len(lowered)))
                trace.assignment = b
                trace.wall_time = time.perf_counter() - t0
                raise NumericError(f"non-finite batch loss at iteration {t}")
            accepted = loss_after <= loss_before
        trace.records.append(TraceRecord(t, k, t, phase, budget.average(new if accepted else b),
                                         loss_before, loss_after, accepted, len(raised), len(lowered)))
        if accepted:
            b = new
        else:
            k //= 2
        t += 1
    trace.assignment = b
    trace.wall_time = time.perf_counter() - t0
    return b, trace
