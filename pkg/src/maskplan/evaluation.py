"""Measurement: n-gram fidelity and diversity, the reconstruction bound
estimator, cross-modal factor matching, unmask-order statistics, and
decoding-cost accounting.

BLEU here is the corpus-level modified n-gram precision with brevity
penalty and a geometric mean over orders 1..n, with an epsilon floor
(1e-9) on zero precisions; all candidates share one reference pool.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .bridge import Modality, SemanticVector, adapt, swap_direction
from .discrete import MASK_TOKEN, SampleRun, TokenSequence, sample
from .schedules import NoiseSchedule, unmask_budget

_EPSILON = 1e-9


def _ngrams(tokens, n: int) -> Counter:
    seq = tuple(int(x) for x in tokens)
    return Counter(seq[i:i + n] for i in range(len(seq) - n + 1))


def bleu_n(candidates, references, n: int) -> float:
    """Corpus BLEU against a shared reference pool, as a percentage."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not candidates or not references:
        raise ValueError("need at least one candidate and one reference")
    cand_tokens = [np.asarray(getattr(c, "tokens", c)) for c in candidates]
    ref_tokens = [np.asarray(getattr(r, "tokens", r)) for r in references]

    log_precision_sum = 0.0
    for order in range(1, n + 1):
        ref_counts: Counter = Counter()
        for ref in ref_tokens:
            for gram, count in _ngrams(ref, order).items():
                ref_counts[gram] = max(ref_counts[gram], count)
        matched = 0
        total = 0
        for cand in cand_tokens:
            grams = _ngrams(cand, order)
            total += sum(grams.values())
            matched += sum(min(count, ref_counts.get(gram, 0))
                           for gram, count in grams.items())
        precision = matched / total if total else 0.0
        log_precision_sum += math.log(max(precision, _EPSILON))

    cand_len = sum(len(c) for c in cand_tokens)
    ref_len = 0
    lengths = sorted({len(r) for r in ref_tokens})
    for cand in cand_tokens:
        ref_len += min(lengths, key=lambda L: (abs(L - len(cand)), L))
    brevity = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / max(cand_len, 1))
    return 100.0 * brevity * math.exp(log_precision_sum / n)


def self_bleu(samples, n: int) -> float:
    """Mean BLEU of each sample against all the others (lower = more
    diverse)."""
    if len(samples) < 2:
        raise ValueError("self-BLEU needs at least 2 samples")
    scores = [bleu_n([samples[i]], samples[:i] + samples[i + 1:], n)
              for i in range(len(samples))]
    return float(np.mean(scores))


def elbo_estimate(x: TokenSequence, r: SemanticVector, steps: int, num_mc: int,
                  store: T.ParamStore, net, schedule: NoiseSchedule,
                  rng: np.random.Generator,
                  temperature: float = 1.0) -> tuple[float, float]:
    """Monte-Carlo lower bound on the reverse chain's log-likelihood.

    Each draw picks a uniformly random order in which the positions are
    committed across the budgeted steps (equivalently, a forward masking
    trajectory on the step grid) and accumulates the log-probability of
    the true token at each commit, under the state the chain would see.
    The subset-choice terms of the chain and of the trajectory posterior
    cancel exactly, so the mean is a true lower bound of the enumerated
    chain likelihood. Returns (mean, standard error).
    """
    if num_mc < 1:
        raise ValueError("num_mc must be >= 1")
    length = x.length
    budgets = unmask_budget(schedule, length, steps)
    target = x.tokens
    vocab = net.vocab_size(x.modality)
    draws = []
    for _ in range(num_mc):
        order = rng.permutation(length)
        committed: list[int] = []
        total = 0.0
        cursor = 0
        for k, budget in enumerate(budgets):
            t_k = 1.0 - k / steps
            tokens = np.full(length, MASK_TOKEN, dtype=np.int64)
            tokens[committed] = target[committed]
            logits = net.logits(tokens[None, :], T.Tensor(r.values[None, :]),
                                np.array([t_k]), store, x.modality).numpy()[0]
            scaled = logits / temperature
            scaled = scaled - scaled.max(axis=-1, keepdims=True)
            logz = np.log(np.exp(scaled).sum(axis=-1))
            group = order[cursor:cursor + budget]
            cursor += budget
            total += float((scaled[group, target[group]] - logz[group]).sum())
            committed = committed + [int(p) for p in group]
        draws.append(total)
    mean = float(np.mean(draws))
    se = float(np.std(draws, ddof=1) / np.sqrt(num_mc)) if num_mc > 1 else 0.0
    return mean, se


@dataclass
class DecodeCost:
    denoiser_evals: int
    tokens_emitted: int

    @property
    def tokens_per_eval(self) -> float:
        return self.tokens_emitted / self.denoiser_evals


def decode_cost(run: SampleRun) -> DecodeCost:
    """Exact evaluation-count accounting for a sampling run."""
    emitted = sum(len(rec.committed_positions) for rec in run.trajectory)
    return DecodeCost(denoiser_evals=run.num_evals, tokens_emitted=emitted)


@dataclass
class UnmaskOrderStats:
    mean_content_step: float
    mean_filler_step: float
    per_sample_gaps: list[float] = field(repr=False, default_factory=list)

    @property
    def gap(self) -> float:
        """Filler minus content mean commit step; positive means content
        tokens were committed earlier."""
        return self.mean_filler_step - self.mean_content_step


def unmask_order_stats(runs: list[SampleRun],
                       content: tuple[int, ...]) -> UnmaskOrderStats:
    """Mean commit step of content vs filler positions across runs."""
    content_set = set(content)
    content_steps: list[float] = []
    filler_steps: list[float] = []
    gaps: list[float] = []
    for run in runs:
        c_steps, f_steps = [], []
        for rec in run.trajectory:
            for pos in rec.committed_positions:
                (c_steps if pos in content_set else f_steps).append(rec.step)
        content_steps.extend(c_steps)
        filler_steps.extend(f_steps)
        if c_steps and f_steps:
            gaps.append(float(np.mean(f_steps) - np.mean(c_steps)))
    return UnmaskOrderStats(
        mean_content_step=float(np.mean(content_steps)),
        mean_filler_step=float(np.mean(filler_steps)),
        per_sample_gaps=gaps)


def bootstrap_ci(values, rng: np.random.Generator, num_resamples: int = 2000,
                 coverage: float = 0.95) -> tuple[float, float]:
    """Percentile bootstrap confidence interval for the mean."""
    values = np.asarray(values, dtype=np.float64)
    means = np.empty(num_resamples)
    for i in range(num_resamples):
        means[i] = values[rng.integers(0, len(values), size=len(values))].mean()
    lo = float(np.quantile(means, (1.0 - coverage) / 2.0))
    hi = float(np.quantile(means, 1.0 - (1.0 - coverage) / 2.0))
    return lo, hi


def cross_modal_score(corpus, encoders, store: T.ParamStore, net,
                      schedule: NoiseSchedule, rng: np.random.Generator,
                      steps: int, temperature: float = 1.0,
                      self_conditioning: bool = False,
                      max_pairs: int | None = None) -> float:
    """Factor-match accuracy of images generated from text conditions.

    For each held-out pair, image tokens are sampled conditioned on the
    adapted text encoding (or, with ``self_conditioning``, on the
    image's own encoding) and the generated pattern is decoded back to a
    factor; unrecoverable patterns count as mismatches.
    """
    world = corpus.world
    pairs = corpus.pairs["eval"]
    count = len(pairs) if max_pairs is None else min(max_pairs, len(pairs))
    hits = 0
    for index in range(count):
        true_factor = corpus.ground_truth_factor("pairs", "eval", index)
        if self_conditioning:
            condition = corpus.representation(encoders, Modality.IMAGE, "eval",
                                              index, pair=True)
        else:
            text_rep = corpus.representation(encoders, Modality.TEXT, "eval",
                                             index, pair=True)
            condition = adapt(text_rep, swap_direction(Modality.IMAGE), store)
        run = sample(condition, world.image_len, steps, "confidence", temperature,
                     store, net, schedule, rng, modality=Modality.IMAGE)
        decoded = world.decode_factor(run.sequence.tokens, Modality.IMAGE)
        if decoded == true_factor:
            hits += 1
    return hits / count


@dataclass
class EvalReport:
    """Metric values plus the settings needed to reproduce them."""

    metrics: dict[str, float] = field(default_factory=dict)
    settings: dict[str, object] = field(default_factory=dict)

    def add(self, name: str, value: float) -> None:
        value = float(value)
        if not np.isfinite(value):
            raise ValueError(f"metric {name} is not finite: {value}")
        self.metrics[name] = value

    def to_text(self) -> str:
        lines = ["# evaluation report"]
        for key in sorted(self.settings):
            lines.append(f"setting {key} = {self.settings[key]}")
        for key in sorted(self.metrics):
            lines.append(f"{key} = {self.metrics[key]:.6f}")
        return "\n".join(lines) + "\n"

    def to_table(self, step: int = 0) -> str:
        rows = [f"{step}\t{key}\t{self.metrics[key]:.6f}"
                for key in sorted(self.metrics)]
        return "step\tmetric\tvalue\n" + "\n".join(rows) + "\n"
