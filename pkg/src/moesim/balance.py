"""Expert routing traces, balance metrics, and placement policies.

A routing trace records, for every step and token, the top-k expert ids
and their normalized gate scores. Traces come from `generate_trace`
(synthetic, seeded) or from a saved file. On top of a trace the module
computes the auxiliary balance loss at a chosen accounting window,
capacity-overflow drop rates, device load imbalance for a given expert
placement, and runs a replanning benchmark that compares a managed
placement against a static one.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyWindowError, ParseError, SlotMismatchError, ZeroMeanError

TRACE_HEADER = "# moesim-trace v1"

OPTIMIZER_BYTES_PER_PARAM = 14  # bf16 weight + fp32 master + two fp32 moments


@dataclass(frozen=True)
class TraceSpec:
    num_experts: int
    tokens_per_step: int
    steps: int
    top_k: int
    concentration: float = 0.3
    autocorr: float = 0.0
    num_tasks: int = 1
    task_mix: tuple = ()

    def __post_init__(self):
        if self.num_experts < 1 or self.tokens_per_step < 1 or self.steps < 1:
            raise ValueError("num_experts, tokens_per_step, steps must be >= 1")
        if not 1 <= self.top_k <= self.num_experts:
            raise ValueError("top_k must be in [1, num_experts]")
        if self.concentration <= 0:
            raise ValueError("concentration must be > 0")
        if not 0.0 <= self.autocorr < 1.0:
            raise ValueError("autocorr must be in [0, 1)")
        if self.num_tasks < 1:
            raise ValueError("num_tasks must be >= 1")
        if self.task_mix and len(self.task_mix) != self.num_tasks:
            raise ValueError("task_mix length must equal num_tasks")


@dataclass
class RoutingTrace:
    num_experts: int
    experts: np.ndarray  # (steps, tokens, k) int
    scores: np.ndarray  # (steps, tokens, k) float, rows sum to 1
    tasks: np.ndarray  # (steps, tokens) int

    def __post_init__(self):
        if self.experts.shape != self.scores.shape:
            raise ValueError("experts and scores shapes differ")
        if self.tasks.shape != self.experts.shape[:2]:
            raise ValueError("tasks shape must be (steps, tokens)")

    @property
    def steps(self) -> int:
        return self.experts.shape[0]

    @property
    def tokens_per_step(self) -> int:
        return self.experts.shape[1]

    @property
    def top_k(self) -> int:
        return self.experts.shape[2]

    def expert_counts(self, step: int | None = None) -> np.ndarray:
        """Tokens routed to each expert, per step or for one step."""
        if step is None:
            out = np.zeros((self.steps, self.num_experts), dtype=np.int64)
            for s in range(self.steps):
                out[s] = np.bincount(
                    self.experts[s].ravel(), minlength=self.num_experts
                )
            return out
        return np.bincount(
            self.experts[step].ravel(), minlength=self.num_experts
        )

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(TRACE_HEADER + "\n")
            fh.write(f"# num_experts={self.num_experts}\n")
            writer = csv.writer(fh)
            writer.writerow(["step", "token", "task", "experts", "scores"])
            for s in range(self.steps):
                for t in range(self.tokens_per_step):
                    writer.writerow(
                        [
                            s,
                            t,
                            int(self.tasks[s, t]),
                            " ".join(str(int(e)) for e in self.experts[s, t]),
                            " ".join(repr(float(x)) for x in self.scores[s, t]),
                        ]
                    )

    @staticmethod
    def load(path) -> "RoutingTrace":
        with open(path, newline="") as fh:
            first = fh.readline().rstrip("\n")
            if first != TRACE_HEADER:
                raise ParseError(f"not a routing trace file: header {first!r}")
            meta = fh.readline().rstrip("\n")
            if not meta.startswith("# num_experts="):
                raise ParseError("missing num_experts line")
            num_experts = int(meta.split("=", 1)[1])
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["step", "token", "task", "experts", "scores"]:
                raise ParseError("unexpected trace columns")
            rows = list(reader)
        if not rows:
            raise ParseError("trace has no rows")
        steps = int(rows[-1][0]) + 1
        tokens = int(rows[-1][1]) + 1
        k = len(rows[0][3].split())
        experts = np.zeros((steps, tokens, k), dtype=np.int64)
        scores = np.zeros((steps, tokens, k), dtype=np.float64)
        tasks = np.zeros((steps, tokens), dtype=np.int64)
        for row in rows:
            s, t = int(row[0]), int(row[1])
            tasks[s, t] = int(row[2])
            experts[s, t] = [int(x) for x in row[3].split()]
            scores[s, t] = [float(x) for x in row[4].split()]
        return RoutingTrace(num_experts, experts, scores, tasks)


def generate_trace(spec: TraceSpec, seed: int = 0) -> RoutingTrace:
    """Synthetic routing with skewed, drifting expert popularity.

    Each task holds a probability vector over experts drawn from a
    symmetric Dirichlet (low concentration gives heavy skew). Per step the
    vector follows an AR(1) blend with a fresh draw. Tokens pick k distinct
    experts via Gumbel perturbation of the log probabilities and carry
    softmax-normalized scores over the selected set.
    """
    rng = np.random.default_rng(seed)
    e, k = spec.num_experts, spec.top_k
    alpha = np.full(e, spec.concentration)
    state = rng.dirichlet(alpha, size=spec.num_tasks)
    mix = np.asarray(spec.task_mix, dtype=np.float64) if spec.task_mix else None
    if mix is not None:
        mix = mix / mix.sum()

    experts = np.zeros((spec.steps, spec.tokens_per_step, k), dtype=np.int64)
    scores = np.zeros((spec.steps, spec.tokens_per_step, k), dtype=np.float64)
    tasks = np.zeros((spec.steps, spec.tokens_per_step), dtype=np.int64)
    tiny = 1e-12
    for s in range(spec.steps):
        if s > 0:
            fresh = rng.dirichlet(alpha, size=spec.num_tasks)
            state = spec.autocorr * state + (1.0 - spec.autocorr) * fresh
            state = state / state.sum(axis=1, keepdims=True)
        step_tasks = rng.choice(spec.num_tasks, size=spec.tokens_per_step, p=mix)
        logits = np.log(state[step_tasks] + tiny)
        gumbel = rng.gumbel(size=(spec.tokens_per_step, e))
        order = np.argsort(-(logits + gumbel), axis=1, kind="stable")
        picked = order[:, :k]
        picked_logits = np.take_along_axis(logits, picked, axis=1)
        shifted = picked_logits - picked_logits.max(axis=1, keepdims=True)
        weights = np.exp(shifted)
        tasks[s] = step_tasks
        experts[s] = picked
        scores[s] = weights / weights.sum(axis=1, keepdims=True)
    return RoutingTrace(e, experts, scores, tasks)


def balance_window_tokens(
    level: str,
    seq_len: int,
    micro_batch_size: int = 1,
    ep: int = 1,
    dp: int = 1,
) -> int:
    """Token count over which the balance loss statistics are pooled."""
    sizes = {
        "sequence": seq_len,
        "micro_batch": micro_batch_size * seq_len,
        "ep_group": ep * micro_batch_size * seq_len,
        "dp_group": dp * micro_batch_size * seq_len,
    }
    if level not in sizes:
        raise ValueError(f"unknown balance level {level!r}, expected one of {sorted(sizes)}")
    return sizes[level]


@dataclass(frozen=True)
class AuxLossReport:
    mean_loss: float
    per_window: np.ndarray
    window_tokens: int


def aux_loss(trace: RoutingTrace, window_tokens: int | None = None) -> AuxLossReport:
    """Mean auxiliary balance loss over consecutive token windows.

    Per window of T tokens: loss = sum_i f_i * p_i with
    f_i = N / (k * T) * count_i and p_i the sum of expert i's gate scores
    divided by T. Perfectly uniform routing gives exactly 1.
    """
    n = trace.num_experts
    k = trace.top_k
    flat_e = trace.experts.reshape(-1, k)
    flat_s = trace.scores.reshape(-1, k)
    total = flat_e.shape[0]
    if window_tokens is None:
        window_tokens = total
    if window_tokens < 1:
        raise ValueError("window_tokens must be >= 1")
    num_windows = total // window_tokens
    if num_windows == 0:
        raise EmptyWindowError(
            f"trace has {total} tokens, fewer than one window of {window_tokens}"
        )
    losses = np.zeros(num_windows)
    for w in range(num_windows):
        lo, hi = w * window_tokens, (w + 1) * window_tokens
        ids = flat_e[lo:hi].ravel()
        counts = np.bincount(ids, minlength=n).astype(np.float64)
        score_sums = np.bincount(ids, weights=flat_s[lo:hi].ravel(), minlength=n)
        f = n / (k * window_tokens) * counts
        p = score_sums / window_tokens
        losses[w] = float(f @ p)
    return AuxLossReport(float(losses.mean()), losses, window_tokens)


@dataclass(frozen=True)
class DropStats:
    drop_rate: float
    dropped_per_expert: np.ndarray
    capacity: float


def capacity_drop_stats(trace: RoutingTrace, capacity_factor: float) -> DropStats:
    """Tokens dropped when each expert accepts at most
    ceil(capacity_factor * T * k / N) routed tokens per step, in arrival
    (token index) order."""
    n, k = trace.num_experts, trace.top_k
    t = trace.tokens_per_step
    if math.isinf(capacity_factor):
        return DropStats(0.0, np.zeros(n, dtype=np.int64), math.inf)
    cap = math.ceil(capacity_factor * t * k / n)
    dropped = np.zeros(n, dtype=np.int64)
    total = 0
    for s in range(trace.steps):
        ids = trace.experts[s].ravel()  # token-major arrival order
        order = np.argsort(ids, kind="stable")
        sorted_ids = ids[order]
        boundaries = np.flatnonzero(np.diff(sorted_ids)) + 1
        start = 0
        for end in list(boundaries) + [len(sorted_ids)]:
            if end > start:
                over = max(0, (end - start) - cap)
                dropped[sorted_ids[start]] += over
                total += over
            start = end
    return DropStats(total / (trace.steps * t * k), dropped, float(cap))


def device_load_stats(loads) -> float:
    """Coefficient of variation (population std over mean) of device loads."""
    arr = np.asarray(loads, dtype=np.float64)
    mean = arr.mean()
    if mean == 0:
        raise ZeroMeanError("device loads sum to zero")
    return float(arr.std() / mean)


def predict_loads(
    history: np.ndarray,
    window: int,
    num_experts: int | None = None,
    expected_tokens: float | None = None,
) -> np.ndarray:
    """Mean per-expert load over the last `window` observed steps.

    With no history yet, falls back to a uniform prior, which requires
    num_experts and expected_tokens.
    """
    hist = np.asarray(history, dtype=np.float64)
    if hist.size == 0:
        if num_experts is None or expected_tokens is None:
            raise ValueError("uniform prior needs num_experts and expected_tokens")
        return np.full(num_experts, expected_tokens / num_experts)
    if hist.ndim != 2:
        raise ValueError("history must be (steps, num_experts)")
    return hist[-window:].mean(axis=0)


@dataclass(frozen=True)
class Placement:
    device_of_expert: np.ndarray
    device_loads: np.ndarray
    moved_experts: int
    swap_bytes: float

    @property
    def cv(self) -> float:
        return device_load_stats(self.device_loads)


def contiguous_placement(num_experts: int, num_devices: int) -> np.ndarray:
    if num_experts % num_devices != 0:
        raise SlotMismatchError(
            f"{num_experts} experts do not split evenly over {num_devices} devices"
        )
    per = num_experts // num_devices
    return np.repeat(np.arange(num_devices), per)


_EXACT_PLACEMENT_LIMIT = 100_000


def _exact_assignment_count(n: int, devices: int, slots: int) -> float:
    total = 1.0
    remaining = n
    for _ in range(devices):
        total *= math.comb(remaining, slots)
        remaining -= slots
        if total > _EXACT_PLACEMENT_LIMIT:
            return math.inf
    return total


def _exact_place(arr: np.ndarray, num_devices: int, slots: int) -> np.ndarray:
    """Minimum max-load assignment by exhaustive slot-respecting search.

    Ties prefer the flattest sorted load vector, then the lexicographically
    smallest expert-to-device map, so the result is deterministic."""
    n = arr.shape[0]
    best_key = None
    best = None
    device_of = np.zeros(n, dtype=np.int64)

    def recurse(remaining: tuple, device: int):
        nonlocal best_key, best
        if device == num_devices:
            loads = np.bincount(device_of, weights=arr, minlength=num_devices)
            key = (tuple(sorted(loads, reverse=True)), tuple(device_of))
            if best_key is None or key < best_key:
                best_key = key
                best = device_of.copy()
            return
        for combo in itertools.combinations(remaining, slots):
            for i in combo:
                device_of[i] = device
            rest = tuple(i for i in remaining if i not in combo)
            recurse(rest, device + 1)

    recurse(tuple(range(n)), 0)
    return best


def _lpt_place(arr: np.ndarray, num_devices: int, slots: int) -> np.ndarray:
    """Heaviest expert first onto the least-loaded device with a free slot,
    then pairwise swaps while any swap reduces the sum of squared device
    loads (the mean is fixed, so this descends directly on the CV)."""
    n = arr.shape[0]
    order = sorted(range(n), key=lambda i: (-arr[i], i))
    device_of = np.zeros(n, dtype=np.int64)
    dev_load = np.zeros(num_devices)
    dev_free = np.full(num_devices, slots, dtype=np.int64)
    for i in order:
        best = min(
            (d for d in range(num_devices) if dev_free[d] > 0),
            key=lambda d: (dev_load[d], d),
        )
        device_of[i] = best
        dev_load[best] += arr[i]
        dev_free[best] -= 1

    # Swapping experts i and j changes the squared-load sum by
    # 2*delta*(L[di] - L[dj]) + 2*delta^2 with delta = arr[j] - arr[i].
    for _ in range(4 * n):
        delta = arr[None, :] - arr[:, None]
        per_dev = dev_load[device_of]
        gain = 2.0 * delta * (per_dev[:, None] - per_dev[None, :]) + 2.0 * delta * delta
        gain[device_of[:, None] == device_of[None, :]] = np.inf
        gain[np.tril_indices(n)] = np.inf
        flat = int(np.argmin(gain))
        i, j = divmod(flat, n)
        if gain[i, j] >= -1e-12:
            break
        di, dj = device_of[i], device_of[j]
        dev_load[di] += arr[j] - arr[i]
        dev_load[dj] -= arr[j] - arr[i]
        device_of[i], device_of[j] = dj, di
    return device_of


def greedy_place(
    loads,
    num_devices: int,
    slots_per_device: int,
    previous: np.ndarray | None = None,
    bytes_per_expert: float = 0.0,
) -> Placement:
    """Assign experts to devices minimizing the heaviest device.

    Small instances are solved exactly by exhaustive search; larger ones
    fall back to heaviest-first greedy placement followed by pairwise swap
    refinement. The result is deterministic for a given input."""
    arr = np.asarray(loads, dtype=np.float64)
    n = arr.shape[0]
    if num_devices * slots_per_device != n:
        raise SlotMismatchError(
            f"{num_devices} devices x {slots_per_device} slots != {n} experts"
        )
    if _exact_assignment_count(n, num_devices, slots_per_device) <= _EXACT_PLACEMENT_LIMIT:
        device_of = _exact_place(arr, num_devices, slots_per_device)
    else:
        device_of = _lpt_place(arr, num_devices, slots_per_device)
    dev_load = np.bincount(device_of, weights=arr, minlength=num_devices)
    base = previous if previous is not None else contiguous_placement(n, num_devices)
    moved = int(np.count_nonzero(device_of != np.asarray(base)))
    return Placement(
        device_of_expert=device_of,
        device_loads=dev_load,
        moved_experts=moved,
        swap_bytes=moved * bytes_per_expert * OPTIMIZER_BYTES_PER_PARAM
        if bytes_per_expert
        else 0.0,
    )


def placement_loads(counts: np.ndarray, device_of_expert: np.ndarray, num_devices: int) -> np.ndarray:
    return np.bincount(
        np.asarray(device_of_expert), weights=np.asarray(counts, dtype=np.float64), minlength=num_devices
    )


class RebalanceController:
    """Decides when to pay for an expert replacement.

    mode "pretrain": replan when the observed imbalance has grown more than
    `threshold` above its value at the last replan. mode "sft": replan once
    on the first observation and never again.
    """

    def __init__(self, mode: str = "pretrain", threshold: float = 0.1):
        if mode not in ("pretrain", "sft"):
            raise ValueError(f"unknown controller mode {mode!r}")
        self.mode = mode
        self.threshold = threshold
        self._baseline: float | None = None
        self._fired = False

    def observe(self, cv: float) -> bool:
        if self.mode == "sft":
            if not self._fired:
                self._fired = True
                return True
            return False
        if self._baseline is None:
            self._baseline = cv
            return False
        if cv - self._baseline > self.threshold:
            self._baseline = cv
            return True
        return False


def controller_replan_steps(series, mode: str = "pretrain", threshold: float = 0.1) -> list:
    """1-based steps at which the controller fires for a CV series."""
    ctl = RebalanceController(mode, threshold)
    return [i + 1 for i, cv in enumerate(series) if ctl.observe(cv)]


@dataclass(frozen=True)
class TraceStats:
    coactivation: np.ndarray
    task_expert_share: np.ndarray
    uniform_share: float


def trace_statistics(trace: RoutingTrace) -> TraceStats:
    """Pairwise co-selection probabilities and per-task routing shares.

    coactivation[i, j] is P(expert j also selected | expert i selected)
    over tokens. task_expert_share[t, i] is the fraction of task t's
    routed slots that went to expert i; a perfectly uniform router puts
    every entry at 1/N (= top_k / (N * top_k))."""
    n = trace.num_experts
    flat_e = trace.experts.reshape(-1, trace.top_k)
    onehot = np.zeros((flat_e.shape[0], n), dtype=np.float64)
    rows = np.repeat(np.arange(flat_e.shape[0]), trace.top_k)
    onehot[rows, flat_e.ravel()] = 1.0
    joint = onehot.T @ onehot
    selected = np.diag(joint).copy()
    with np.errstate(divide="ignore", invalid="ignore"):
        coact = np.where(selected[:, None] > 0, joint / selected[:, None], 0.0)
    flat_t = trace.tasks.ravel()
    num_tasks = int(flat_t.max()) + 1 if flat_t.size else 1
    share = np.zeros((num_tasks, n))
    for t in range(num_tasks):
        mask = flat_t == t
        if mask.any():
            ids = flat_e[mask].ravel()
            counts = np.bincount(ids, minlength=n).astype(np.float64)
            share[t] = counts / counts.sum()
    return TraceStats(coact, share, 1.0 / n)


@dataclass(frozen=True)
class BalanceRunResult:
    static_cv: np.ndarray
    managed_cv: np.ndarray
    replan_steps: tuple
    total_swap_bytes: float

    @property
    def mean_cv_reduction(self) -> float:
        return 1.0 - self.managed_cv.mean() / self.static_cv.mean()


def run_balance_simulation(
    spec: TraceSpec,
    num_devices: int,
    replan_interval: int = 1,
    history_window: int = 1,
    seed: int = 0,
    bytes_per_expert: float = 0.0,
) -> BalanceRunResult:
    """Replay a trace against a static placement and a managed one that
    replans from recent load history every `replan_interval` steps."""
    if spec.num_experts % num_devices != 0:
        raise SlotMismatchError(
            f"{spec.num_experts} experts do not split evenly over {num_devices} devices"
        )
    slots = spec.num_experts // num_devices
    trace = generate_trace(spec, seed)
    counts = trace.expert_counts()
    static = contiguous_placement(spec.num_experts, num_devices)
    managed = static.copy()
    static_cv = np.zeros(spec.steps)
    managed_cv = np.zeros(spec.steps)
    replans = []
    swap_total = 0.0
    for s in range(spec.steps):
        if s > 0 and s % replan_interval == 0:
            pred = predict_loads(counts[:s], history_window)
            placed = greedy_place(
                pred, num_devices, slots, previous=managed, bytes_per_expert=bytes_per_expert
            )
            if placed.moved_experts:
                replans.append(s)
                swap_total += placed.swap_bytes
            managed = placed.device_of_expert
        static_cv[s] = device_load_stats(placement_loads(counts[s], static, num_devices))
        managed_cv[s] = device_load_stats(placement_loads(counts[s], managed, num_devices))
    return BalanceRunResult(static_cv, managed_cv, tuple(replans), swap_total)
