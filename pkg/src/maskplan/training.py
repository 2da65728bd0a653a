"""Two-stage training: the continuous planner first, then the token
denoiser with the bridge pieces, against a frozen planner.

Both stages use decoupled-weight-decay adaptive-moment updates and log a
line-delimited loss trace. Runs are bit-deterministic given (config,
seed, corpus): every random stream is derived from the stage seed and
the step index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .bridge import Modality, adapt_tensor
from .data import Corpus, make_batch
from .discrete import masked_nll_batch, mask_with_prob, MASK_TOKEN
from .latent import latent_loss_batch
from .schedules import NoiseSchedule
from .seeding import derive_rng


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; a diagnostic snapshot was written if possible."""


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "discrete"  # "latent" or "discrete"
    iterations: int = 5000
    batch_size: int = 16
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 0  # 0 = final checkpoint only
    no_injection: bool = False
    fixed_mask_rate: float | None = None
    mask_loss_reduction: str = "mean"

    def __post_init__(self):
        if self.stage not in ("latent", "discrete"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.fixed_mask_rate is not None and not (0.0 < self.fixed_mask_rate < 1.0):
            raise ValueError("fixed_mask_rate must lie in (0, 1)")


class AdamW:
    """Decoupled-weight-decay adaptive-moment optimizer over a subset of
    the store's entries. ``step`` applies the bias-corrected update,
    bumps the store version, then zeroes the consumed gradients."""

    def __init__(self, store: T.ParamStore, names: list[str], config: TrainConfig):
        self.store = store
        self.names = list(names)
        self.config = config
        self.step_count = 0
        self._m = {n: np.zeros_like(store[n].data) for n in self.names}
        self._v = {n: np.zeros_like(store[n].data) for n in self.names}

    def step(self) -> None:
        cfg = self.config
        self.step_count += 1
        b1_corr = 1.0 - cfg.beta1 ** self.step_count
        b2_corr = 1.0 - cfg.beta2 ** self.step_count
        for name in self.names:
            t = self.store[name]
            if t.grad is None:
                raise RuntimeError(f"parameter {name!r} has no gradient")
            g = t.grad
            m = self._m[name]
            v = self._v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            update = (m / b1_corr) / (np.sqrt(v / b2_corr) + cfg.eps)
            t.data -= cfg.learning_rate * (update + cfg.weight_decay * t.data)
        self.store.version += 1
        for name in self.names:
            self.store[name].zero_grad()


@dataclass
class TraceRecord:
    step: int
    stage: str
    loss: float
    window_loss: float
    masked_fraction: float | None = None

    def to_json(self) -> str:
        payload = {"step": self.step, "stage": self.stage, "loss": self.loss,
                   "window_loss": self.window_loss,
                   "masked_fraction": self.masked_fraction}
        return json.dumps(payload, sort_keys=True)


class _TraceWriter:
    def __init__(self, path, stage: str, log_every: int):
        self.path = Path(path) if path else None
        self.stage = stage
        self.log_every = log_every
        self.records: list[TraceRecord] = []
        self._window: list[float] = []
        if self.path:
            self.path.write_text("")

    def observe(self, step: int, loss: float, masked_fraction: float | None) -> None:
        self._window.append(loss)
        if len(self._window) > self.log_every:
            self._window.pop(0)
        if (step + 1) % self.log_every != 0:
            return
        record = TraceRecord(step=step + 1, stage=self.stage, loss=loss,
                             window_loss=float(np.mean(self._window)),
                             masked_fraction=masked_fraction)
        self.records.append(record)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(record.to_json() + "\n")


def _checkpoint(store: T.ParamStore, directory, stem: str, step: int,
                rng_state: dict, config: TrainConfig) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    store.save(directory / f"{stem}.params")
    meta = {"step": step, "stage": config.stage, "store_version": store.version,
            "config": {k: v for k, v in vars(config).items()},
            "rng_state": _jsonable(rng_state)}
    (directory / f"{stem}.meta.json").write_text(json.dumps(meta, sort_keys=True, default=str))


def _jsonable(state):
    if isinstance(state, dict):
        return {k: _jsonable(v) for k, v in state.items()}
    if isinstance(state, (np.integer,)):
        return int(state)
    if isinstance(state, np.ndarray):
        return state.tolist()
    return state


def _abort_snapshot(store, checkpoint_dir, stem, step, rng, config, detail):
    if checkpoint_dir is not None:
        _checkpoint(store, checkpoint_dir, f"{stem}_diverged", step,
                    rng.bit_generator.state, config)
    raise TrainingDiverged(f"non-finite loss at step {step}: {detail}")


def train_stage1(config: TrainConfig, corpus: Corpus, encoders, store: T.ParamStore,
                 net, schedule: NoiseSchedule, trace_path=None,
                 checkpoint_dir=None) -> list[TraceRecord]:
    """Fit the continuous planner to the frozen encodings of all
    modalities, times drawn uniformly per sample."""
    if config.stage != "latent":
        raise ValueError("train_stage1 requires a latent-stage config")
    dim = net.config.dim
    names = store.subset(["latent"])
    optimizer = AdamW(store, names, config)
    rng = derive_rng(config.seed, "stage1")
    trace = _TraceWriter(trace_path, "latent", config.log_every)
    mix = np.array([2.0, 2.0, 1.0])
    mix /= mix.sum()

    for step in range(config.iterations):
        kind = int(rng.choice(3, p=mix))
        vectors = []
        if kind in (0, 1):
            modality = Modality.TEXT if kind == 0 else Modality.IMAGE
            pool = corpus.text if modality == Modality.TEXT else corpus.image
            idx = rng.integers(0, len(pool["train"]), size=config.batch_size)
            vectors = [corpus.representation(encoders, modality, "train", int(i))
                       for i in idx]
        else:
            # paired draws contribute both twins' representations
            idx = rng.integers(0, len(corpus.pairs["train"]),
                               size=max(1, config.batch_size // 2))
            for i in idx:
                vectors.append(corpus.representation(
                    encoders, Modality.TEXT, "train", int(i), pair=True))
                vectors.append(corpus.representation(
                    encoders, Modality.IMAGE, "train", int(i), pair=True))
        r0 = np.stack([v.values for v in vectors])
        modality_ids = np.array([int(v.modality) for v in vectors])
        times = rng.random(len(vectors))
        eps = rng.standard_normal((len(vectors), dim))
        loss = latent_loss_batch(r0, modality_ids, times, eps, store, net, schedule)
        value = loss.item()
        if not np.isfinite(value):
            _abort_snapshot(store, checkpoint_dir, "stage1", step, rng, config, value)
        T.backward(loss)
        optimizer.step()
        trace.observe(step, value, None)
        if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0 \
                and checkpoint_dir is not None:
            _checkpoint(store, checkpoint_dir, f"stage1_step{step + 1}", step + 1,
                        rng.bit_generator.state, config)
    if checkpoint_dir is not None:
        _checkpoint(store, checkpoint_dir, "stage1", config.iterations,
                    rng.bit_generator.state, config)
    return trace.records


def train_stage2(config: TrainConfig, corpus: Corpus, encoders, store: T.ParamStore,
                 net, schedule: NoiseSchedule, trace_path=None,
                 checkpoint_dir=None) -> list[TraceRecord]:
    """Fit the token denoiser (plus projection and adapters) against the
    frozen planner.

    Per item, a masking time is drawn uniformly (or pinned to
    ``fixed_mask_rate``), the sequence is corrupted, and the masked-token
    NLL is minimized. Paired batches re-derive the swapped condition
    inside the graph so adapter gradients flow.
    """
    if config.stage != "discrete":
        raise ValueError("train_stage2 requires a discrete-stage config")
    names = store.subset(["discrete", "bridge"])
    optimizer = AdamW(store, names, config)
    rng = derive_rng(config.seed, "stage2")
    trace = _TraceWriter(trace_path, "discrete", config.log_every)

    for step in range(config.iterations):
        batch = make_batch(corpus, encoders, store, config.batch_size, rng)
        length = batch.items[0].x.length
        targets = np.stack([item.x.tokens for item in batch.items])
        if config.fixed_mask_rate is None:
            times = rng.random(len(batch.items))
            probs = np.array([schedule.mask_prob(float(t)) for t in times])
        else:
            probs = np.full(len(batch.items), config.fixed_mask_rate)
            times = probs.copy()
        corrupted = np.empty_like(targets)
        for i, item in enumerate(batch.items):
            corrupted[i] = mask_with_prob(item.x, float(probs[i]), rng).tokens
        mask = corrupted == MASK_TOKEN

        if batch.kind == "paired":
            source = np.stack([item.r_source.values for item in batch.items])
            condition = adapt_tensor(T.Tensor(source), batch.direction, store)
        else:
            condition = T.Tensor(np.stack([item.r_condition.values
                                           for item in batch.items]))

        loss, masked_fraction = masked_nll_batch(
            targets, corrupted, mask, condition, times, store, net,
            batch.modality, reduction=config.mask_loss_reduction,
            block_injection=config.no_injection)
        value = loss.item()
        if not np.isfinite(value):
            _abort_snapshot(store, checkpoint_dir, "stage2", step, rng, config, value)
        if loss.requires_grad:
            T.backward(loss)
        else:
            # every sample drew an empty mask; park zero grads so the
            # optimizer step is still well-defined
            for name in names:
                t = store[name]
                t.grad = np.zeros_like(t.data)
        optimizer.step()
        trace.observe(step, value, float(masked_fraction))
        if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0 \
                and checkpoint_dir is not None:
            _checkpoint(store, checkpoint_dir, f"stage2_step{step + 1}", step + 1,
                        rng.bit_generator.state, config)
    if checkpoint_dir is not None:
        _checkpoint(store, checkpoint_dir, "stage2", config.iterations,
                    rng.bit_generator.state, config)
    return trace.records
