"""Absorbing-state corruption of token sequences, the masked-token
training loss, and the iterative reverse samplers.

The forward process masks each visible position independently with the
schedule's marginal probability at time t; masked positions never
recover during corruption. Reverse sampling starts from an all-masked
sequence and commits a budgeted number of positions per step, choosing
them by confidence, at random, or left to right. An exact enumeration
of the reverse chain's likelihood is provided for tiny instances as a
verification oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .bridge import Modality, SemanticVector
from .schedules import NoiseSchedule, unmask_budget

MASK_TOKEN = -1
PAD_TOKEN = -2

POLICIES = ("confidence", "random", "left_to_right")


@dataclass(frozen=True)
class TokenSequence:
    """Fixed-length token IDs with MASK/PAD sentinels (< 0)."""

    tokens: np.ndarray
    modality: Modality

    def __post_init__(self):
        arr = np.asarray(self.tokens, dtype=np.int64)
        object.__setattr__(self, "tokens", arr)

    @property
    def length(self) -> int:
        return int(self.tokens.shape[0])

    def content_length(self) -> int:
        """Positions before the PAD suffix."""
        pads = self.tokens == PAD_TOKEN
        return int(np.argmax(pads)) if pads.any() else self.length

    def validate(self, vocab_size: int) -> None:
        """Check ID range and that PAD forms a contiguous suffix."""
        t = self.tokens
        bad = (t >= vocab_size) | ((t < 0) & (t != MASK_TOKEN) & (t != PAD_TOKEN))
        if bad.any():
            raise ValueError(f"token IDs out of range for vocab {vocab_size}: "
                             f"{t[bad][:5].tolist()}")
        pads = t == PAD_TOKEN
        if pads.any() and not pads[int(np.argmax(pads)):].all():
            raise ValueError("PAD tokens must form a contiguous suffix")


@dataclass(frozen=True)
class CorruptionState:
    """A partially masked sequence, its mask positions, and its time."""

    corrupted: TokenSequence
    mask_set: frozenset
    time: float

    def __post_init__(self):
        tokens = self.corrupted.tokens
        masked = set(np.nonzero(tokens == MASK_TOKEN)[0].tolist())
        if masked != set(self.mask_set):
            raise ValueError("mask_set disagrees with MASK positions")


def mask_with_prob(seq: TokenSequence, prob: float,
                   rng: np.random.Generator) -> TokenSequence:
    """Mask each visible position independently; MASK stays MASK."""
    tokens = seq.tokens.copy()
    eligible = (tokens != PAD_TOKEN) & (tokens != MASK_TOKEN)
    draws = rng.random(seq.length)
    tokens[eligible & (draws < prob)] = MASK_TOKEN
    return TokenSequence(tokens, seq.modality)


def corrupt(x0: TokenSequence, t: float, schedule: NoiseSchedule,
            rng: np.random.Generator) -> CorruptionState:
    """Sample the forward corruption of ``x0`` at time ``t``."""
    prob = schedule.mask_prob(t)
    corrupted = mask_with_prob(x0, prob, rng)
    mask_set = frozenset(np.nonzero(corrupted.tokens == MASK_TOKEN)[0].tolist())
    return CorruptionState(corrupted, mask_set, t)


def _check_state_matches(x0: TokenSequence, state: CorruptionState) -> None:
    a, b = x0.tokens, state.corrupted.tokens
    visible = b != MASK_TOKEN
    if a.shape != b.shape or not np.array_equal(a[visible], b[visible]):
        raise ValueError("corruption state was not derived from this sequence")


def masked_nll_batch(targets: np.ndarray, corrupted: np.ndarray,
                     mask: np.ndarray, condition: T.Tensor, times: np.ndarray,
                     store: T.ParamStore, net, modality: Modality,
                     reduction: str = "mean",
                     block_injection: bool = False) -> tuple[T.Tensor, float]:
    """Batched negative log-likelihood over masked positions.

    ``targets``/``corrupted`` are (B, L) int arrays, ``mask`` a (B, L)
    bool array. Per sample, the loss is the mean (or sum) of masked-token
    NLLs; samples with no masked positions are skipped and excluded from
    the batch denominator. Returns the scalar loss tensor and the mean
    masked fraction.
    """
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    batch, length = targets.shape
    counts = mask.sum(axis=1)
    nonempty = int((counts > 0).sum())
    masked_fraction = float(mask.mean())
    if nonempty == 0:
        return T.Tensor(0.0), masked_fraction

    logits = net.logits(corrupted, condition, times, store, modality,
                        block_injection=block_injection)
    logp = T.log_softmax(logits)
    flat = T.reshape(logp, (batch * length, logits.shape[-1]))
    flat_pos = np.nonzero(mask.reshape(-1))[0]
    picked = T.gather_rows(flat, flat_pos)
    token_lp = T.gather_last(picked, targets.reshape(-1)[flat_pos])

    sample_of = np.repeat(np.arange(batch), length)[flat_pos]
    if reduction == "mean":
        weights = 1.0 / counts[sample_of]
    else:
        weights = np.ones(flat_pos.shape[0])
    weights = weights / nonempty
    return T.neg(T.tsum(T.mul(token_lp, T.Tensor(weights)))), masked_fraction


def discrete_loss(x0: TokenSequence, state: CorruptionState, r: SemanticVector,
                  store: T.ParamStore, net, reduction: str = "mean",
                  block_injection: bool = False) -> T.Tensor:
    """Masked-token NLL for one sequence (zero, gradient-free, if
    nothing is masked)."""
    _check_state_matches(x0, state)
    mask = np.zeros(x0.length, dtype=bool)
    mask[list(state.mask_set)] = True
    loss, _ = masked_nll_batch(
        x0.tokens[None, :], state.corrupted.tokens[None, :], mask[None, :],
        T.Tensor(r.values[None, :]), np.array([state.time]),
        store, net, x0.modality, reduction=reduction,
        block_injection=block_injection)
    return loss


@dataclass
class StepRecord:
    """One reverse step of a sampling run."""

    step: int
    time: float
    committed_positions: list[int]
    committed_tokens: list[int]
    confidences: list[float]

    def to_json_dict(self) -> dict:
        return {
            "step": self.step,
            "time": self.time,
            "positions": self.committed_positions,
            "tokens": self.committed_tokens,
            "confidences": self.confidences,
        }


@dataclass
class SampleRun:
    """A finished sampling session with its instrumentation."""

    sequence: TokenSequence
    trajectory: list[StepRecord]
    num_evals: int
    steps: int
    policy: str
    temperature: float


def _categorical_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Sample one index per row of a (N, V) probability matrix."""
    cdf = probs.cumsum(axis=1)
    cdf[:, -1] = 1.0  # guard against rounding
    u = rng.random((probs.shape[0], 1))
    return (cdf < u).sum(axis=1)


def reverse_step(state: CorruptionState, r: SemanticVector, store: T.ParamStore,
                 net, budget: int, policy: str, temperature: float,
                 rng: np.random.Generator, next_time: float | None = None,
                 _counter: list | None = None) -> tuple[CorruptionState, StepRecord]:
    """Commit ``budget`` masked positions after one denoiser evaluation.

    Candidates are drawn at every masked position from the
    temperature-scaled categorical; the policy decides which candidates
    to keep. Committed positions leave the mask set permanently.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    remaining = sorted(state.mask_set)
    if budget < 1 or budget > len(remaining):
        raise ValueError(f"budget {budget} invalid for {len(remaining)} masked positions")

    tokens = state.corrupted.tokens
    logits = net.logits(tokens[None, :], T.Tensor(r.values[None, :]),
                        np.array([state.time]), store, state.corrupted.modality)
    if _counter is not None:
        _counter[0] += 1
    scaled = logits.numpy()[0] / temperature
    scaled = scaled - scaled.max(axis=-1, keepdims=True)
    probs = np.exp(scaled)
    probs /= probs.sum(axis=-1, keepdims=True)

    rows = probs[remaining]
    candidates = _categorical_rows(rows, rng)
    confidence = rows[np.arange(len(remaining)), candidates]

    if policy == "confidence":
        order = np.lexsort((remaining, -confidence))
    elif policy == "left_to_right":
        order = np.arange(len(remaining))
    else:  # random
        order = rng.permutation(len(remaining))
    chosen = order[:budget]

    new_tokens = tokens.copy()
    committed_positions = [int(remaining[i]) for i in chosen]
    committed_tokens = [int(candidates[i]) for i in chosen]
    for pos, tok in zip(committed_positions, committed_tokens):
        new_tokens[pos] = tok

    new_time = state.time if next_time is None else next_time
    new_state = CorruptionState(
        TokenSequence(new_tokens, state.corrupted.modality),
        frozenset(p for p in remaining if p not in set(committed_positions)),
        new_time)
    record = StepRecord(
        step=-1, time=state.time,
        committed_positions=committed_positions,
        committed_tokens=committed_tokens,
        confidences=[float(confidence[i]) for i in chosen])
    return new_state, record


def sample(r: SemanticVector, length: int, steps: int, policy: str,
           temperature: float, store: T.ParamStore, net,
           schedule: NoiseSchedule, rng: np.random.Generator,
           modality: Modality | None = None) -> SampleRun:
    """Generate a sequence from the fully masked state.

    Runs ``steps`` reverse steps on the grid t = 1 - k/steps with
    budgets from the schedule, evaluating the denoiser once per step.
    """
    modality = r.modality if modality is None else modality
    budgets = unmask_budget(schedule, length, steps)
    tokens = np.full(length, MASK_TOKEN, dtype=np.int64)
    state = CorruptionState(TokenSequence(tokens, modality),
                            frozenset(range(length)), 1.0)
    counter = [0]
    trajectory: list[StepRecord] = []
    for k, budget in enumerate(budgets):
        state, record = reverse_step(
            state, r, store, net, budget, policy, temperature, rng,
            next_time=1.0 - (k + 1) / steps, _counter=counter)
        record.step = k
        trajectory.append(record)
    assert not state.mask_set
    return SampleRun(sequence=state.corrupted, trajectory=trajectory,
                     num_evals=counter[0], steps=steps, policy=policy,
                     temperature=temperature)


def chain_log_likelihood_oracle(x: TokenSequence, r: SemanticVector,
                                steps: int, store: T.ParamStore, net,
                                schedule: NoiseSchedule,
                                temperature: float = 1.0) -> float:
    """Exact log-likelihood of ``x`` under the random-policy reverse chain.

    Sums over every ordered way the positions can be committed across
    the budgeted steps; only feasible on tiny instances, so the guard
    rejects length > 4, vocab > 5, or steps > 3.
    """
    length = x.length
    vocab = net.vocab_size(x.modality)
    if length > 4 or vocab > 5 or steps > 3:
        raise ValueError("oracle guard: requires length<=4, vocab<=5, steps<=3")
    if (x.tokens < 0).any():
        raise ValueError("oracle requires a fully visible sequence")

    budgets = unmask_budget(schedule, length, steps)
    target = x.tokens

    def token_logprobs(committed: frozenset, t: float) -> np.ndarray:
        tokens = np.full(length, MASK_TOKEN, dtype=np.int64)
        for p in committed:
            tokens[p] = target[p]
        logits = net.logits(tokens[None, :], T.Tensor(r.values[None, :]),
                            np.array([t]), store, x.modality).numpy()[0]
        scaled = logits / temperature
        scaled = scaled - scaled.max(axis=-1, keepdims=True)
        logz = np.log(np.exp(scaled).sum(axis=-1))
        return scaled[np.arange(length), np.clip(target, 0, vocab - 1)] - logz

    from itertools import combinations
    from math import comb, inf, log

    def logsumexp(values: list[float]) -> float:
        m = max(values)
        if m == -inf:
            return -inf
        return m + log(sum(np.exp(np.array(values) - m)))

    level: dict[frozenset, float] = {frozenset(): 0.0}
    for k, budget in enumerate(budgets):
        t = 1.0 - k / steps
        cache: dict[frozenset, np.ndarray] = {}
        nxt: dict[frozenset, list[float]] = {}
        for committed, logp in level.items():
            if committed not in cache:
                cache[committed] = token_logprobs(committed, t)
            lp_tokens = cache[committed]
            free = [p for p in range(length) if p not in committed]
            choose = -log(comb(len(free), budget))
            for subset in combinations(free, budget):
                term = logp + choose + sum(lp_tokens[p] for p in subset)
                key = committed | frozenset(subset)
                nxt.setdefault(key, []).append(term)
        level = {key: logsumexp(terms) for key, terms in nxt.items()}

    (final,) = level.items()
    assert final[0] == frozenset(range(length))
    return float(final[1])
