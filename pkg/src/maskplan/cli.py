"""Experiment driver.

Commands: ``gen-data``, ``train`` (stage selectable), ``sample``,
``eval`` (metric set selectable), ``ablate`` (blocked-injection and
fixed-rate arms end to end), and ``oracle`` (verification suites).
Every artifact lands under ``<out_dir>/run-<config hash>/`` next to an
echo of the resolved config, so two runs of the same config share a
directory and rewrite identical bytes, and no run touches another's.

Exit codes: 0 success, 1 config/validation error, 2 runtime error,
3 verification-gate failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import evaluation, oracles
from . import tensor as T
from .bridge import Modality, init_bridge_params, make_encoders
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .data import content_positions, gen_corpus, load_corpus, save_corpus
from .discrete import sample as sample_tokens
from .latent import ancestral_sample
from .nets import LatentDenoiser, TokenDenoiser
from .seeding import derive_rng
from .training import TrainingDiverged, train_stage1, train_stage2

ARM_SUFFIX = {"main": "", "no_injection": "_no_injection", "fixed_rate": "_fixed_rate"}


class MissingArtifact(RuntimeError):
    pass


def _run_dir(config: ExperimentConfig, out_dir: str | None) -> Path:
    base = Path(out_dir) if out_dir else Path(config["out_dir"])
    directory = base / f"run-{config.run_id()}"
    directory.mkdir(parents=True, exist_ok=True)
    echo = directory / "config.txt"
    text = config.resolved_text()
    if not echo.exists() or echo.read_text() != text:
        echo.write_text(text)
    return directory


def _load_corpus(run_dir: Path):
    path = run_dir / "corpus.bin"
    if not path.exists():
        raise MissingArtifact(f"no corpus at {path}; run `gen-data` first")
    return load_corpus(path)


def _init_store(config: ExperimentConfig) -> T.ParamStore:
    """All learnable parameters of both stages, deterministically
    initialized regardless of command order."""
    store = T.ParamStore()
    latent_net = LatentDenoiser(config.latent_net_config())
    latent_net.init_params(store, derive_rng(config.seed, "init/latent"))
    token_net = TokenDenoiser(config.token_net_config())
    token_net.init_params(store, derive_rng(config.seed, "init/discrete"))
    init_bridge_params(store, config.latent_net_config().dim,
                       config.token_net_config().embed_width,
                       derive_rng(config.seed, "init/bridge"))
    return store


def _load_params(run_dir: Path, stem: str) -> T.ParamStore:
    path = run_dir / f"{stem}.params"
    if not path.exists():
        raise MissingArtifact(f"no checkpoint at {path}; train the required stage first")
    return T.ParamStore.load(path)


def cmd_gen_data(config: ExperimentConfig, run_dir: Path) -> None:
    corpus = gen_corpus(config.world(), config.corpus_counts(),
                        derive_rng(config.seed, "corpus"))
    save_corpus(corpus, run_dir / "corpus.bin")
    counts = corpus.counts()
    print(f"corpus written to {run_dir / 'corpus.bin'} "
          f"({sum(counts.values())} records)")


def cmd_train(config: ExperimentConfig, run_dir: Path, stage: str, arm: str) -> None:
    corpus = _load_corpus(run_dir)
    encoders = make_encoders(config.world(), config.latent_net_config().dim,
                             config.seed)
    schedule = config.schedule()
    if stage == "latent":
        store = _init_store(config)
        net = LatentDenoiser(config.latent_net_config())
        records = train_stage1(config.stage_config("latent"), corpus, encoders,
                               store, net, schedule,
                               trace_path=run_dir / "stage1_trace.jsonl",
                               checkpoint_dir=run_dir)
        print(f"stage 1 done: {len(records)} trace records, "
              f"final loss {records[-1].loss:.4f}" if records else "stage 1 done")
        return

    store = _load_params(run_dir, "stage1")
    net = TokenDenoiser(config.token_net_config())
    if arm == "no_injection":
        train_config = config.stage_config("discrete", no_injection=True)
    elif arm == "fixed_rate":
        train_config = config.stage_config("discrete", fixed_mask_rate=0.15)
    else:
        train_config = config.stage_config("discrete")
    suffix = ARM_SUFFIX[arm]
    records = train_stage2(train_config, corpus, encoders, store, net, schedule,
                           trace_path=run_dir / f"stage2{suffix}_trace.jsonl",
                           checkpoint_dir=None)
    store.save(run_dir / f"stage2{suffix}.params")
    print(f"stage 2 ({arm}) done: final loss "
          f"{records[-1].loss:.4f}" if records else f"stage 2 ({arm}) done")


def _draw_samples(config: ExperimentConfig, store, modality: Modality, num: int,
                  policy: str, steps: int, temperature: float, seed_label: str):
    """Full-pipeline sampling: planner prior -> token generator."""
    token_net = TokenDenoiser(config.token_net_config())
    latent_net = LatentDenoiser(config.latent_net_config())
    schedule = config.schedule()
    world = config.world()
    length = world.text_len if modality == Modality.TEXT else world.image_len
    runs = []
    rng = derive_rng(config.seed, seed_label)
    for _ in range(num):
        condition = ancestral_sample(modality, store, latent_net, schedule, rng)
        runs.append(sample_tokens(condition, length, steps, policy, temperature,
                                  store, token_net, schedule, rng,
                                  modality=modality))
    return runs


def cmd_sample(config: ExperimentConfig, run_dir: Path, modality_name: str,
               num: int, policy: str | None, steps: int | None,
               temperature: float | None, trajectories: bool, arm: str) -> None:
    store = _load_params(run_dir, f"stage2{ARM_SUFFIX[arm]}")
    modality = Modality.TEXT if modality_name == "text" else Modality.IMAGE
    policy = policy or config["sampling.policy"]
    steps = steps or config["sampling.steps"]
    temperature = temperature if temperature is not None else config["sampling.temperature"]
    runs = _draw_samples(config, store, modality, num, policy, steps, temperature,
                         seed_label=f"sample/{arm}/{modality_name}")
    samples_path = run_dir / f"samples_{arm}_{modality_name}.jsonl"
    with open(samples_path, "w") as fh:
        for run in runs:
            fh.write(json.dumps({"tokens": run.sequence.tokens.tolist(),
                                 "policy": run.policy,
                                 "steps": run.steps}) + "\n")
    if trajectories:
        traj_path = run_dir / f"trajectories_{arm}_{modality_name}.jsonl"
        with open(traj_path, "w") as fh:
            for i, run in enumerate(runs):
                for record in run.trajectory:
                    payload = {"sample": i, **record.to_json_dict()}
                    fh.write(json.dumps(payload) + "\n")
    cost = evaluation.decode_cost(runs[0])
    print(f"wrote {num} samples to {samples_path} "
          f"({cost.denoiser_evals} evals for {cost.tokens_emitted} tokens each)")


def cmd_eval(config: ExperimentConfig, run_dir: Path, metrics: list[str],
             arm: str) -> None:
    store = _load_params(run_dir, f"stage2{ARM_SUFFIX[arm]}")
    corpus = _load_corpus(run_dir)
    encoders = make_encoders(config.world(), config.latent_net_config().dim,
                             config.seed)
    token_net = TokenDenoiser(config.token_net_config())
    schedule = config.schedule()
    world = config.world()
    report = evaluation.EvalReport()
    report.settings.update({
        "arm": arm, "seed": config.seed,
        "num_samples": config["eval.num_samples"],
        "sampling.steps": config["sampling.steps"],
        "sampling.policy": config["sampling.policy"],
        "sampling.temperature": config["sampling.temperature"],
    })

    need_samples = any(m in metrics for m in ("bleu", "self_bleu", "unmask_order",
                                              "decode_cost"))
    runs = []
    if need_samples:
        runs = _draw_samples(config, store, Modality.TEXT,
                             config["eval.num_samples"],
                             config["sampling.policy"], config["sampling.steps"],
                             config["sampling.temperature"],
                             seed_label=f"eval-samples/{arm}")
    references = [corpus.sequence(Modality.TEXT, "eval", i)
                  for i in range(len(corpus.text["eval"]))]
    candidates = [run.sequence for run in runs]

    if "bleu" in metrics:
        orders = [int(x) for x in str(config["eval.bleu_orders"]).split(",") if x]
        for order in orders:
            report.add(f"bleu{order}", evaluation.bleu_n(candidates, references, order))
    if "self_bleu" in metrics:
        report.add("self_bleu2", evaluation.self_bleu(candidates, 2))
    if "unmask_order" in metrics:
        stats = evaluation.unmask_order_stats(
            runs, content_positions(world.text_len))
        lo, hi = evaluation.bootstrap_ci(
            stats.per_sample_gaps, derive_rng(config.seed, f"bootstrap/{arm}"),
            config["eval.bootstrap_resamples"])
        report.add("unmask_gap", stats.gap)
        report.add("unmask_gap_ci_low", lo)
        report.add("unmask_gap_ci_high", hi)
    if "decode_cost" in metrics:
        cost = evaluation.decode_cost(runs[0])
        report.add("denoiser_evals", cost.denoiser_evals)
        report.add("tokens_per_eval", cost.tokens_per_eval)
    if "cross_modal" in metrics:
        rng = derive_rng(config.seed, f"cross-modal/{arm}")
        report.add("cross_modal_accuracy", evaluation.cross_modal_score(
            corpus, encoders, store, token_net, schedule, rng,
            config["eval.cross_modal_steps"],
            max_pairs=config["eval.cross_modal_pairs"]))
        rng = derive_rng(config.seed, f"self-conditioning/{arm}")
        report.add("self_conditioning_accuracy", evaluation.cross_modal_score(
            corpus, encoders, store, token_net, schedule, rng,
            config["eval.cross_modal_steps"], self_conditioning=True,
            max_pairs=config["eval.cross_modal_pairs"]))

    (run_dir / f"report_{arm}.txt").write_text(report.to_text())
    (run_dir / f"metrics_{arm}.tsv").write_text(report.to_table())
    print(report.to_text(), end="")


def cmd_ablate(config: ExperimentConfig, run_dir: Path) -> None:
    """Train and evaluate the blocked-injection and fixed-rate arms."""
    for arm in ("main", "no_injection", "fixed_rate"):
        if not (run_dir / f"stage2{ARM_SUFFIX[arm]}.params").exists():
            cmd_train(config, run_dir, "discrete", arm)
        cmd_eval(config, run_dir, ["bleu", "self_bleu", "unmask_order"], arm)
    lines = ["# ablation comparison"]
    for arm in ("main", "no_injection", "fixed_rate"):
        lines.append(f"[{arm}]")
        lines.append((run_dir / f"report_{arm}.txt").read_text().rstrip())
    (run_dir / "ablation_report.txt").write_text("\n".join(lines) + "\n")
    print(f"ablation report at {run_dir / 'ablation_report.txt'}")


def cmd_oracle(config: ExperimentConfig) -> int:
    results = oracles.run_all(config.seed)
    for result in results:
        print(result.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} oracle suites passed")
    return 3 if failed else 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskplan",
                                     description="two-stage masked-generation experiments")
    parser.add_argument("--config", type=str, default=None,
                        help="config file (defaults apply if omitted)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field")
    parser.add_argument("--out-dir", type=str, default=None,
                        help="override the artifact root")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data")
    p_train = sub.add_parser("train")
    p_train.add_argument("--stage", choices=("latent", "discrete"), required=True)
    p_train.add_argument("--arm", choices=tuple(ARM_SUFFIX), default="main")
    p_sample = sub.add_parser("sample")
    p_sample.add_argument("--modality", choices=("text", "image"), default="text")
    p_sample.add_argument("--num", type=int, default=16)
    p_sample.add_argument("--policy", choices=("confidence", "random", "left_to_right"),
                          default=None)
    p_sample.add_argument("--steps", type=int, default=None)
    p_sample.add_argument("--temperature", type=float, default=None)
    p_sample.add_argument("--trajectories", action="store_true")
    p_sample.add_argument("--arm", choices=tuple(ARM_SUFFIX), default="main")
    p_eval = sub.add_parser("eval")
    p_eval.add_argument("--metrics", type=str,
                        default="bleu,self_bleu,unmask_order,decode_cost,cross_modal")
    p_eval.add_argument("--arm", choices=tuple(ARM_SUFFIX), default="main")
    sub.add_parser("ablate")
    sub.add_parser("oracle")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            key, value = item.split("=", 1)
            overrides[key.strip()] = value.strip()
        if args.config:
            config = load_config(args.config, overrides)
        else:
            config = parse_config("", overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    try:
        if args.command == "oracle":
            return cmd_oracle(config)
        run_dir = _run_dir(config, args.out_dir)
        if args.command == "gen-data":
            cmd_gen_data(config, run_dir)
        elif args.command == "train":
            cmd_train(config, run_dir, args.stage, args.arm)
        elif args.command == "sample":
            cmd_sample(config, run_dir, args.modality, args.num, args.policy,
                       args.steps, args.temperature, args.trajectories, args.arm)
        elif args.command == "eval":
            metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
            cmd_eval(config, run_dir, metrics, args.arm)
        elif args.command == "ablate":
            cmd_ablate(config, run_dir)
    except (MissingArtifact, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
