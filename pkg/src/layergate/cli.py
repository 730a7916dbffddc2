"""Command-line pipeline: train -> rank -> jaccard / finetune / verify-bound.

Every command materializes its resolved options into a manifest next to its
outputs; ``layergate rerun`` replays a manifest into a fresh directory.
Report-producing commands write a matplotlib PNG next to each CSV.

Exit codes: 0 success, 2 usage, 3 contract/config, 4 numeric failure
(including a run that never stabilizes), 5 I/O.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import adapters as adp
from . import bound_check as bc
from . import data as dg
from . import figures
from . import model as tm
from . import ranking as rk
from . import training as trn
from . import workflows as wf
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DimensionError,
    LayergateError,
    NotStableError,
    NumericError,
)
from .manifest import load_manifest, start_manifest, write_manifest

EXIT_USAGE = 2
EXIT_CONTRACT = 3
EXIT_NUMERIC = 4
EXIT_IO = 5

MILESTONE_FRACTIONS = (0.01, 0.25, 0.50, 0.75, 1.00)


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--blocks", type=int, default=4)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--d-ffn", type=int, default=128)
    p.add_argument("--seq-len", type=int, default=128)
    p.add_argument("--model-seed", type=int, default=0)


def _add_dataset_flags(p: argparse.ArgumentParser, required: bool = True) -> None:
    group = p.add_mutually_exclusive_group(required=required)
    group.add_argument("--synthetic", choices=dg.FAMILIES)
    group.add_argument("--data", type=str, help="JSONL file with instruction/response objects")
    p.add_argument("--dataset-size", type=int, default=512)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--probe-batches", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)


def _model_config(args) -> tm.ModelConfig:
    return tm.ModelConfig(
        blocks=args.blocks, d_model=args.d_model, heads=args.heads,
        d_ffn=args.d_ffn, seq_len=args.seq_len, seed=args.model_seed,
    )


def _dataset_info(args) -> dict:
    if args.synthetic:
        return {"kind": "synthetic", "family": args.synthetic, "size": args.dataset_size, "seed": args.seed}
    return {"kind": "jsonl", "path": str(args.data), "seed": args.seed}


def _load_examples(info: dict) -> list[dg.InstructionExample]:
    if info["kind"] == "synthetic":
        return dg.generate_dataset(dg.SyntheticTaskSpec(info["family"], info["size"]), info["seed"])
    return dg.load_jsonl(info["path"])


def _make_batches(info: dict, seq_len: int, batch_size: int, probe_batches: int) -> dg.Batches:
    return dg.Batches(_load_examples(info), batch_size, seq_len, info["seed"], probe_batches)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_probe_trace(trace, out: Path) -> None:
    lines = ["step,probe_loss"] + [f"{s},{l!r}" for s, l in trace]
    (out / "probe_trace.csv").write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    figures.probe_trace(trace, out / "probe_trace.png")


def cmd_train(args) -> int:
    out = _out_dir(args)
    if args.base:
        state = load_checkpoint(args.base)
        params = state.params
        if state.adapters is not None:
            params = adp.merge(params, state.adapters, state.adapters.layers)
        cfg = params.config
    else:
        cfg = _model_config(args)
        params = tm.init_model(cfg)
    info = _dataset_info(args)
    batches = _make_batches(info, cfg.seq_len, args.batch_size, args.probe_batches)

    args.lr = args.lr if args.lr is not None else (5e-3 if args.mode == adp.LORA else 1e-3)
    stage_cfg = trn.StageOneConfig(
        lr=args.lr, max_steps=args.max_steps, epsilon_rel=args.epsilon_rel,
        window=args.window, probe_every=args.probe_every,
    )
    monitor = trn.StabilityMonitor(window=args.window, epsilon_rel=args.epsilon_rel)
    if args.mode == adp.LORA:
        adapters = adp.init_lora(params, rank=args.rank, beta=args.beta, seed=args.seed)
        args.beta = adapters.beta
    else:
        adapters = adp.init_fft(params)

    stable_dir = out / "stable"
    post_saves: list[str] = []

    def save_post(step: int, state: adp.AdapterSet) -> None:
        stable_dir.mkdir(exist_ok=True)
        name = f"step_{step:06d}.ilac"
        save_checkpoint(
            stable_dir / name, params, state,
            {"step": step, "dataset": info, "mode": args.mode, "phase": "post-stable"},
        )
        post_saves.append(f"stable/{name}")

    snapshot_every = max(1, args.max_steps // 200) if args.milestones else None
    result = trn.train_until_stable(
        params, adapters, batches, monitor, stage_cfg,
        snapshot_every=snapshot_every,
        post_stable_steps=args.post_stable,
        on_post_stable=save_post if args.post_stable else None,
    )

    outputs = ["model.ilac", "probe_trace.csv", "probe_trace.png"]
    save_checkpoint(
        out / "model.ilac", params, result.adapters,
        {"step": result.stop_step, "dataset": info, "mode": args.mode, "phase": "stable"},
    )
    _write_probe_trace(result.trace, out)

    if args.milestones:
        mdir = out / "milestones"
        mdir.mkdir(exist_ok=True)
        snaps = sorted(result.snapshots)
        for frac in MILESTONE_FRACTIONS:
            target_step = max(1, round(frac * result.stop_step))
            step = min(snaps, key=lambda s: abs(s - target_step))
            name = f"milestone_{int(frac * 100):03d}.ilac"
            save_checkpoint(
                mdir / name, params, result.snapshots[step],
                {"step": step, "milestone": frac, "dataset": info, "mode": args.mode, "phase": "milestone"},
            )
            outputs.append(f"milestones/{name}")

    manifest = start_manifest("train", _resolved_options(args))
    manifest.outputs = outputs + post_saves
    write_manifest(manifest, out)
    print(f"stable at step {result.stop_step}; probe loss {result.trace[-1][1]:.4f}; wrote {out}/model.ilac")
    return 0


def cmd_rank(args) -> int:
    out = _out_dir(args)
    state = load_checkpoint(args.checkpoint)
    if state.adapters is None:
        raise ContractError("checkpoint has no adapter state to rank")
    if args.synthetic or args.data:
        info = _dataset_info(args)
    else:
        info = dict(state.metadata.get("dataset") or {})
        if not info:
            raise ConfigError("checkpoint records no dataset; pass --synthetic or --data")
    batches = _make_batches(info, state.params.config.seq_len, args.batch_size, args.probe_batches)
    cfg = trn.StageTwoConfig(s0=args.s0, batches=args.batches, step_size=args.step_size, seed=args.seed)
    scores = trn.learn_importance(state.params, state.adapters, batches, cfg)
    provenance = {
        "dataset": info.get("family") or info.get("path"),
        "seed": args.seed,
        "milestone": state.metadata.get("milestone"),
        "mode": state.metadata.get("mode"),
        "s0": args.s0,
    }
    ranking = rk.build_ranking(scores, state.params.config, provenance)
    rk.save_ranking(ranking, out / "ranking.json")
    rk.export_heatmap(ranking, out / "heatmap.csv", p=args.p)
    figures.score_heatmap(ranking, out / "heatmap.png", p=args.p)
    manifest = start_manifest("rank", _resolved_options(args))
    manifest.outputs = ["ranking.json", "heatmap.csv", "heatmap.png"]
    write_manifest(manifest, out)
    top = ranking.entries[0]
    print(f"ranked {ranking.n_layers} layers; highest: {top.layer} ({top.score:.4f}); wrote {out}/ranking.json")
    return 0


def cmd_jaccard(args) -> int:
    rankings = [rk.load_ranking(p) for p in args.rankings]
    matrix = rk.compare_rankings(rankings, args.p)
    labels = [Path(p).stem if Path(p).stem != "ranking" else Path(p).parent.name for p in args.rankings]
    width = max(len(l) for l in labels) + 2
    print(" " * width + "".join(f"{l:>{width}}" for l in labels))
    for i, label in enumerate(labels):
        print(f"{label:>{width}}" + "".join(f"{matrix[i, j]:>{width}.3f}" for j in range(len(labels))))
    if args.out:
        out = _out_dir(args)
        lines = ["," + ",".join(labels)]
        for i, label in enumerate(labels):
            lines.append(label + "," + ",".join(repr(float(matrix[i, j])) for j in range(len(labels))))
        (out / "jaccard.csv").write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
        figures.overlap_matrix(labels, matrix, out / "jaccard.png")
        manifest = start_manifest("jaccard", _resolved_options(args))
        manifest.outputs = ["jaccard.csv", "jaccard.png"]
        write_manifest(manifest, out)
    return 0


def cmd_finetune(args) -> int:
    out = _out_dir(args)
    if args.base:
        params = load_checkpoint(args.base).params
    else:
        params = tm.init_model(_model_config(args))
    info = _dataset_info(args)
    batches = _make_batches(info, params.config.seq_len, args.batch_size, args.probe_batches)
    rankings = [rk.load_ranking(p) for p in args.ranking]
    args.lr = args.lr if args.lr is not None else (5e-3 if args.mode == adp.LORA else 1e-3)
    if args.mode == adp.LORA and args.beta is None:
        args.beta = 2.0 / args.rank
    cfg = wf.FinetuneConfig(
        mode=args.mode, rank=args.rank, beta=args.beta,
        lr=args.lr, steps=args.steps, seed=args.seed,
    )
    outputs = ["metrics.csv"]
    if args.suite:
        if not rankings:
            raise ConfigError("--suite needs --ranking")
        rows = wf.run_ablation_suite(params, batches, rankings[0], cfg)
        wf.write_ablation_csv(rows, out / "metrics.csv")
        figures.ablation_bars(rows, out / "suite.png")
        outputs.append("suite.png")
        for r in rows:
            print(f"{r.selector:>22}  trainable={r.trainable_layers:>2}  loss={r.eval_loss:.4f}  acc={r.token_acc:.3f}")
    else:
        if not args.selector:
            raise ConfigError("pass --selector or --suite")
        selector = wf.parse_selector(
            args.selector,
            ranking=rankings[0] if rankings else None,
            rankings=rankings if len(rankings) > 1 else None,
        )
        outcome = wf.finetune_with_selector(params, batches, selector, cfg)
        rows = [wf.AblationRow(
            selector.label(), len(outcome.trainable),
            len(tm.layer_ids(params.config)) - len(outcome.trainable),
            outcome.eval_loss, outcome.token_acc, outcome.steps, outcome.seconds,
        )]
        wf.write_ablation_csv(rows, out / "metrics.csv")
        save_checkpoint(out / "final.ilac", outcome.params, None,
                        {"step": outcome.steps, "dataset": info, "selector": selector.label()})
        outputs.append("final.ilac")
        print(f"{selector.label()}: trainable={len(outcome.trainable)} loss={outcome.eval_loss:.4f} acc={outcome.token_acc:.3f}")
    manifest = start_manifest("finetune", _resolved_options(args))
    manifest.outputs = outputs
    write_manifest(manifest, out)
    return 0


def _collect_checkpoints(paths: list[str]) -> list:
    files: list[Path] = []
    for p in paths:
        path = Path(p)
        if path.is_dir():
            files.extend(sorted(path.glob("*.ilac")))
        else:
            files.append(path)
    states = [load_checkpoint(f) for f in files]
    if len(states) < 2:
        raise ContractError(f"need at least two checkpoints, found {len(states)}")
    prints = {s.metadata["fingerprint"] for s in states}
    if len(prints) > 1:
        raise ContractError(f"checkpoints come from different models: {sorted(prints)}")
    states.sort(key=lambda s: s.metadata.get("step", 0))
    return states


def cmd_verify_bound(args) -> int:
    out = _out_dir(args)
    states = _collect_checkpoints(args.checkpoints)
    base = states[0].params
    if args.synthetic or args.data:
        info = _dataset_info(args)
    else:
        info = dict(states[0].metadata.get("dataset") or {})
        if not info:
            raise ConfigError("checkpoints record no dataset; pass --synthetic or --data")
    batches = _make_batches(info, base.config.seq_len, args.batch_size, args.probe_batches)
    target = bc.TransformerBoundTarget(base, batches.probe)

    def full_state(ck) -> bc.State:
        merged = adp.merge(base, ck.adapters, ck.adapters.layers)
        state = {str(lid): merged.weights[lid] for lid in merged.weights}
        state["embedding"] = merged.embedding
        for key, gain in merged.gains.items():
            state[f"gain/{key}"] = gain
        return state

    steps = [int(s.metadata.get("step", i)) for i, s in enumerate(states)]
    report = bc.verify_run(
        target, [full_state(s) for s in states], steps,
        gamma_hat=args.gamma, beta_g=args.beta_g,
        perturbations=args.perturbations, seed=args.seed,
    )
    lines = ["step,lhs,rhs,ratio,holds"]
    for p in report.pairs:
        c = p.check
        lines.append(f"{p.step},{c.lhs!r},{c.rhs!r},{c.ratio!r},{int(c.holds)}")
    (out / "bound_report.csv").write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    figures.bound_trace(
        [p.step for p in report.pairs],
        [p.check.lhs for p in report.pairs],
        [p.check.rhs for p in report.pairs],
        out / "bound.png",
    )
    import json

    summary = {
        "estimates": report.estimates.as_dict(),
        "holding_rate_all": report.holding_rate(),
        "holding_rate_held_out": report.holding_rate(held_out_only=True),
        "held_out_steps": [p.step for p in report.pairs if p.held_out],
        "gamma": args.gamma,
        "beta_g": args.beta_g,
    }
    (out / "constants.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    manifest = start_manifest("verify-bound", _resolved_options(args))
    manifest.outputs = ["bound_report.csv", "constants.json", "bound.png"]
    write_manifest(manifest, out)
    rate = report.holding_rate(held_out_only=True)
    print(f"bound holds on {report.holding_rate():.0%} of pairs ({rate:.0%} held-out); wrote {out}/bound_report.csv")
    return 0


def cmd_gen_data(args) -> int:
    spec = dg.SyntheticTaskSpec(args.synthetic, args.size)
    examples = dg.generate_dataset(spec, args.seed)
    dg.save_jsonl(examples, args.out)
    print(f"wrote {len(examples)} examples to {args.out}")
    return 0


def _resolved_options(args) -> dict:
    skip = {"func", "command", "out"}
    out = {}
    for key, value in sorted(vars(args).items()):
        if key in skip:
            continue
        if key == "rankings":  # true positionals
            out["positional"] = [str(v) for v in value]
            continue
        out[key] = value
    return out


def cmd_rerun(args) -> int:
    manifest = load_manifest(args.manifest)
    argv = manifest.argv() + ["--out", str(args.out)]
    return main(argv)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="layergate",
        description="Learn per-layer importance gates over fine-tuning deltas and use them to freeze or select layers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fine-tune adapters until the probe loss stabilizes")
    _add_dataset_flags(p)
    _add_model_flags(p)
    p.add_argument("--base", default=None,
                   help="checkpoint supplying base parameters (default: fresh init from the model flags)")
    p.add_argument("--mode", choices=[adp.LORA, adp.FFT], default=adp.LORA)
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--beta", type=float, default=None, help="low-rank delta scale (default 2/rank)")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--max-steps", type=int, default=1500)
    p.add_argument("--epsilon-rel", type=float, default=1e-3)
    p.add_argument("--window", type=int, default=20)
    p.add_argument("--probe-every", type=int, default=5)
    p.add_argument("--milestones", action="store_true", help="save checkpoints at 1/25/50/75/100%% of the horizon")
    p.add_argument("--post-stable", type=int, default=0, help="extra steps past stability, one checkpoint each")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rank", help="learn importance scores from a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    _add_dataset_flags(p, required=False)
    p.add_argument("--batches", type=int, default=128)
    p.add_argument("--s0", type=float, default=4.0, help="initial score for every layer")
    p.add_argument("--step-size", type=float, default=1e-2)
    p.add_argument("--p", type=float, default=0.75, help="important fraction for the heatmap column")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("jaccard", help="pairwise top-fraction overlap of rankings")
    p.add_argument("rankings", nargs="+", metavar="RANKING_JSON")
    p.add_argument("--p", type=float, default=0.75)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_jaccard)

    p = sub.add_parser("finetune", help="fine-tune with a layer selector or run the ablation suite")
    _add_dataset_flags(p)
    _add_model_flags(p)
    p.add_argument("--base", default=None, help="checkpoint supplying base parameters (default: fresh init)")
    p.add_argument("--selector", default=None, help="e.g. all, ila-top:0.3, freeze-bottom:0.25, group:ffn")
    p.add_argument("--suite", action="store_true", help="run the 9-selector ablation suite")
    p.add_argument("--ranking", action="append", default=[], help="ranking JSON (repeat for intersection)")
    p.add_argument("--mode", choices=[adp.LORA, adp.FFT], default=adp.LORA)
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser(
        "verify-bound", aliases=["verify-theorem"],
        help="check the gate-step stability bound over stable-phase checkpoints",
    )
    p.add_argument("--checkpoints", nargs="+", required=True, metavar="PATH",
                   help="checkpoint files or a directory of them")
    _add_dataset_flags(p, required=False)
    p.add_argument("--gamma", type=float, default=0.98, help="shared initial gate value")
    p.add_argument("--beta-g", type=float, default=1e-2, help="gate step size")
    p.add_argument("--perturbations", type=int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_verify_bound)

    p = sub.add_parser("gen-data", help="materialize a synthetic dataset as JSONL")
    p.add_argument("--synthetic", choices=dg.FAMILIES, required=True)
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("rerun", help="repeat a recorded run into a new directory")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rerun)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractError, DimensionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONTRACT
    except (NumericError, NotStableError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except LayergateError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    raise SystemExit(main())
