"""Self-contained verification suites: finite-difference gradient checks
for every primitive and for the full training losses, independent
numeric checks of the schedules, and the exact-enumeration bound check
for the reverse chain on tiny instances.

These run from a fresh checkout with no trained artifacts; the CLI
``oracle`` command executes all of them and fails loudly on any miss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .bridge import Modality, SemanticVector, init_bridge_params, unit_normalize
from .discrete import (MASK_TOKEN, CorruptionState, TokenSequence,
                       chain_log_likelihood_oracle, corrupt, discrete_loss)
from .evaluation import elbo_estimate
from .latent import latent_loss
from .nets import (LatentDenoiser, LatentDenoiserConfig, TokenDenoiser,
                   TokenDenoiserConfig)
from .schedules import NoiseSchedule, unmask_budget
from .seeding import derive_rng


@dataclass
class OracleResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def _fd_check(build, inputs: list[T.Tensor], step: float = 1e-5) -> float:
    """Max relative error of analytic vs central-difference gradients."""
    for t in inputs:
        t.zero_grad()
    T.backward(build())
    worst = 0.0
    for t in inputs:
        flat = t.data.reshape(-1)
        grad = (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            up = build().item()
            flat[i] = original - step
            down = build().item()
            flat[i] = original
            numeric = (up - down) / (2.0 * step)
            worst = max(worst, abs(grad[i] - numeric) / max(abs(grad[i]), abs(numeric), 1e-8))
    return worst


def op_gradient_suite(seed: int = 0) -> list[OracleResult]:
    """Every primitive op against central differences on >=3 shapes."""
    rng = derive_rng(seed, "oracle/ops")
    results = []

    def scalarize(out):
        w = T.Tensor(rng.standard_normal(out.shape))
        return T.tsum(T.mul(out, w))

    def check(name, make_inputs, apply_op):
        worst = 0.0
        for _ in range(3):
            inputs = make_inputs()
            weights = None

            def build():
                nonlocal weights
                out = apply_op(*inputs)
                if weights is None or weights.shape != out.shape:
                    weights = T.Tensor(rng.standard_normal(out.shape))
                return T.tsum(T.mul(out, weights))

            worst = max(worst, _fd_check(build, [t for t in inputs
                                                 if isinstance(t, T.Tensor) and t.requires_grad]))
        results.append(OracleResult(f"op-grad/{name}", worst < 1e-4,
                                    f"max rel err {worst:.2e}"))

    def rand(shape, low=-1.0, high=1.0):
        return T.Tensor(rng.uniform(low, high, size=shape), requires_grad=True)

    shapes = [((2, 3), (3,)), ((4,), (4,)), ((2, 2, 3), ())]
    check("add", lambda: [rand(shapes[0][0]), rand(shapes[0][1])], T.add)
    check("add-suffix", lambda: [rand((2, 2, 3)), rand((3,))], T.add)
    check("sub", lambda: [rand((3, 4)), rand((4,))], T.sub)
    check("mul", lambda: [rand((2, 3)), rand((3,))], T.mul)
    check("div", lambda: [rand((2, 3)), rand((3,), 0.5, 1.5)], T.div)
    check("neg", lambda: [rand((2, 3))], T.neg)
    check("matmul-2d", lambda: [rand((2, 3)), rand((3, 4))], T.matmul)
    check("matmul-batched", lambda: [rand((2, 3, 4)), rand((2, 4, 2))], T.matmul)
    check("matmul-shared", lambda: [rand((2, 3, 4)), rand((4, 5))], T.matmul)
    check("transpose", lambda: [rand((2, 3, 4))], lambda a: T.transpose(a, (2, 0, 1)))
    check("reshape", lambda: [rand((2, 6))], lambda a: T.reshape(a, (3, 4)))
    check("repeat_axis", lambda: [rand((2, 1, 3))], lambda a: T.repeat_axis(a, 1, 4))
    check("concat", lambda: [rand((2, 2)), rand((2, 3))],
          lambda a, b: T.concat([a, b], axis=1))
    check("slice_axis", lambda: [rand((3, 5))], lambda a: T.slice_axis(a, 1, 1, 4))
    check("gather_rows", lambda: [rand((5, 3))],
          lambda a: T.gather_rows(a, np.array([[0, 2], [4, 2]])))
    check("gather_last", lambda: [rand((2, 3, 4))],
          lambda a: T.gather_last(a, np.array([[0, 3, 1], [2, 2, 0]])))
    check("sum-all", lambda: [rand((2, 3))], lambda a: T.tsum(a))
    check("sum-axis", lambda: [rand((2, 3, 2))], lambda a: T.tsum(a, axis=1))
    check("mean-axis", lambda: [rand((2, 3, 2))],
          lambda a: T.tmean(a, axis=-1, keepdims=True))
    check("softmax", lambda: [rand((3, 5))], T.softmax)
    check("log_softmax", lambda: [rand((3, 5))], T.log_softmax)
    check("exp", lambda: [rand((2, 3))], T.exp)
    check("log", lambda: [rand((2, 3), 0.5, 2.0)], T.log)
    check("sqrt", lambda: [rand((2, 3), 0.5, 2.0)], T.sqrt)
    check("tanh", lambda: [rand((2, 3))], T.tanh)
    check("gelu", lambda: [rand((2, 3))], T.gelu)
    return results


def _tiny_token_setup(seed: int, vocab: int = 6, length: int = 4,
                      dim: int = 4, embed: int = 8):
    """Small token denoiser + bridge params for gradient/bound checks."""
    config = TokenDenoiserConfig(layers=2, heads=2, embed_width=embed,
                                 ff_width=embed, text_vocab=vocab,
                                 image_vocab=max(2, vocab - 1), max_length=length)
    net = TokenDenoiser(config)
    store = T.ParamStore()
    rng = derive_rng(seed, "oracle/token-init")
    net.init_params(store, rng)
    init_bridge_params(store, dim, embed, rng)
    # break the identity initialization so adapter gradients are generic
    for direction in ("text_to_image", "image_to_text"):
        w = store[f"bridge.adapter.{direction}.weight"]
        w.data += 0.1 * rng.standard_normal(w.shape)
    return net, store, rng


def loss_gradient_suite(seed: int = 0) -> list[OracleResult]:
    """Finite-difference check of both full training losses."""
    results = []
    schedule = NoiseSchedule()

    net, store, rng = _tiny_token_setup(seed)
    x0 = TokenSequence(rng.integers(0, net.config.text_vocab, size=4), Modality.TEXT)
    state = corrupt(x0, 0.6, schedule, rng)
    if not state.mask_set:  # ensure the loss actually has masked terms
        tokens = x0.tokens.copy()
        tokens[0] = MASK_TOKEN
        state = CorruptionState(TokenSequence(tokens, Modality.TEXT),
                                frozenset([0]), 0.6)
    r = SemanticVector(unit_normalize(rng.standard_normal(4)), Modality.TEXT)

    report = T.grad_check(lambda: discrete_loss(x0, state, r, store, net),
                          store, step=1e-5, tolerance=1e-4)
    results.append(OracleResult("loss-grad/masked-nll", report.passed,
                                f"max rel err {report.max_rel_error:.2e} over "
                                f"{len(report.per_param)} tensors"))

    latent_net = LatentDenoiser(LatentDenoiserConfig(
        hidden=(8, 8), dim=4, time_embed_width=4, modality_embed_width=4))
    latent_store = T.ParamStore()
    latent_net.init_params(latent_store, derive_rng(seed, "oracle/latent-init"))
    rng2 = derive_rng(seed, "oracle/latent-data")
    r0 = SemanticVector(unit_normalize(rng2.standard_normal(4)), Modality.IMAGE)
    eps = rng2.standard_normal(4)
    report = T.grad_check(
        lambda: latent_loss(r0, Modality.IMAGE, 0.37, eps, latent_store,
                            latent_net, schedule),
        latent_store, step=1e-5, tolerance=1e-4)
    results.append(OracleResult("loss-grad/noise-prediction", report.passed,
                                f"max rel err {report.max_rel_error:.2e} over "
                                f"{len(report.per_param)} tensors"))
    return results


def schedule_suite(seed: int = 0) -> list[OracleResult]:
    """Monotonicity, endpoint, quadrature, and budget checks."""
    rng = derive_rng(seed, "oracle/schedules")
    results = []

    for kind in ("linear", "cosine"):
        schedule = NoiseSchedule(kind=kind)
        pairs = rng.random((1000, 2))
        ok = all(schedule.mask_prob(min(a, b)) <= schedule.mask_prob(max(a, b))
                 for a, b in pairs)
        ok = ok and schedule.mask_prob(0.0) == 0.0 and schedule.mask_prob(1.0) == 1.0
        results.append(OracleResult(f"schedule/monotone-{kind}", ok,
                                    "1000 random pairs + exact endpoints"))

    schedule = NoiseSchedule()
    worst = 0.0
    for t in (0.1, 0.3, 0.5, 0.8, 1.0):
        # Simpson quadrature of the rate integral (exact for the linear rate)
        grid = np.linspace(0.0, t, 2001)
        beta = np.array([schedule.beta(float(s)) for s in grid])
        h = grid[1] - grid[0]
        integral = h / 3.0 * (beta[0] + beta[-1] + 4 * beta[1:-1:2].sum()
                              + 2 * beta[2:-1:2].sum())
        worst = max(worst, abs(schedule.alpha_bar(t) * np.exp(integral) - 1.0))
    results.append(OracleResult("schedule/alpha-bar-quadrature", worst < 1e-10,
                                f"max deviation {worst:.2e}"))

    ok = True
    detail = []
    for kind in ("linear", "cosine"):
        schedule = NoiseSchedule(kind=kind)
        for length, steps in ((20, 20), (256, 20), (16, 8), (7, 7), (100, 13)):
            counts = unmask_budget(schedule, length, steps)
            if sum(counts) != length or min(counts) < 1:
                ok = False
                detail.append(f"{kind} L={length} K={steps}: {counts}")
    results.append(OracleResult("schedule/unmask-budget", ok,
                                "sums exact, no zero steps" if ok else "; ".join(detail)))
    return results


def chain_bound_suite(seed: int = 0, instances: int = 20,
                      num_mc: int = 64) -> list[OracleResult]:
    """Bound and normalization checks against exact chain enumeration."""
    results = []
    schedule = NoiseSchedule()
    config = TokenDenoiserConfig(layers=1, heads=2, embed_width=8, ff_width=8,
                                 text_vocab=3, image_vocab=2, max_length=2)
    violations = []
    for i in range(instances):
        rng = derive_rng(seed, f"oracle/bound-{i}")
        net = TokenDenoiser(config)
        store = T.ParamStore()
        net.init_params(store, rng)
        init_bridge_params(store, 4, 8, rng)
        # random non-identity adapters/projection give generic logits
        for name in store.names():
            store[name].data += 0.2 * rng.standard_normal(store[name].shape)
        x = TokenSequence(rng.integers(0, 3, size=2), Modality.TEXT)
        r = SemanticVector(unit_normalize(rng.standard_normal(4)), Modality.TEXT)
        exact = chain_log_likelihood_oracle(x, r, 2, store, net, schedule)
        estimate, se = elbo_estimate(x, r, 2, num_mc, store, net, schedule,
                                     derive_rng(seed, f"oracle/bound-mc-{i}"))
        if estimate > exact + 3.0 * se:
            violations.append(f"instance {i}: {estimate:.6f} > {exact:.6f} + 3*{se:.6f}")
        if i < 2:
            total = 0.0
            for a in range(3):
                for b in range(3):
                    seq = TokenSequence(np.array([a, b]), Modality.TEXT)
                    total += np.exp(chain_log_likelihood_oracle(
                        seq, r, 2, store, net, schedule))
            if abs(total - 1.0) > 1e-10:
                violations.append(f"instance {i}: normalization {total!r}")
    results.append(OracleResult(
        "chain/bound-vs-enumeration", not violations,
        f"{instances} tiny instances" if not violations else "; ".join(violations)))
    return results


def run_all(seed: int = 0) -> list[OracleResult]:
    results = []
    results += op_gradient_suite(seed)
    results += loss_gradient_suite(seed)
    results += schedule_suite(seed)
    results += chain_bound_suite(seed)
    return results
