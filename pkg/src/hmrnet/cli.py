"""Command-line entry point: generate, train, eval, route-report, gradcheck, selftest."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import HMRError, UsageError

log = logging.getLogger("hmrnet")


def _split_config(args, holdout=None, unseen=None):
    from .data import DEFAULT_UNSEEN, SplitConfig

    return SplitConfig(
        train_per_domain=args.train_per_domain,
        val_per_domain=args.val_per_domain,
        test_per_domain=args.test_per_domain,
        zsd_per_domain=args.zsd_per_domain,
        seed=args.seed,
        unseen=tuple(unseen if unseen is not None else (args.unseen or DEFAULT_UNSEEN)),
        holdout_domain=holdout if holdout is not None else args.holdout_domain,
    )


def _manifest_for(args, split: str, train_config: dict | None = None) -> dict:
    from .data import load_manifest, make_splits

    if getattr(args, "manifest", None):
        return load_manifest(args.manifest)
    if getattr(args, "data", None):
        return load_manifest(Path(args.data) / f"{split}.json")
    holdout = unseen = None
    if train_config is not None:
        holdout, unseen = train_config.get("holdout_domain"), train_config.get("unseen")
    return make_splits(_split_config(args, holdout, unseen))[split]


def cmd_generate(args) -> int:
    from .data import make_splits, materialize

    manifests = make_splits(_split_config(args))
    out = materialize(manifests, args.out)
    print(json.dumps({split: len(m["entries"]) for split, m in manifests.items()} | {"out": str(out)}))
    return 0


def cmd_train(args) -> int:
    from .train import TrainConfig, staged_train

    lambdas = tuple(float(x) for x in args.lambdas.split(",")) if args.lambdas else (1.0, 1.0, 1.0, 1.0)
    if len(lambdas) != 4:
        raise UsageError("--lambdas takes four comma-separated weights")
    config = TrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size, lambdas=lambdas,
                         seed=args.seed, variant=args.variant,
                         unseen=tuple(args.unseen) if args.unseen else TrainConfig.unseen,
                         holdout_domain=args.holdout_domain)
    manifest = _manifest_for(args, "train")
    result = staged_train(config, manifest, out_dir=args.out, resume=args.resume,
                          checkpoint_every=args.checkpoint_every)
    timeline = Path(args.out) / "timeline.json"
    timeline.write_text(json.dumps({"schema": "hmrnet.timeline/1", "initial_loss": result.initial_loss,
                                    "epochs": result.timeline}, indent=1, sort_keys=True))
    print(json.dumps({"checkpoint": str(result.checkpoint), "final_loss": result.timeline[-1]["total"]}))
    return 0


def cmd_eval(args) -> int:
    from .cem import read_prompt_file
    from .checkpoint import load_checkpoint
    from .data import load_scenes
    from .evaluate import evaluate, write_detections

    model, manifest = load_checkpoint(args.ck)
    train_config = manifest.get("train_config") or {}
    split = "zsd" if args.mode == "zsd" else "test"
    data = _manifest_for(args, split, train_config)
    prompts = [p.text for p in read_prompt_file(args.prompts)] if args.prompts else None
    report, preds = evaluate(model, data, args.mode, train_config, prompts)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text)
    if args.detections:
        scenes = load_scenes(data)
        if args.mode == "leave-one-out":
            scenes = [s for s in scenes if s.domain == train_config.get("holdout_domain")]
        write_detections(args.detections, scenes, preds)
    print(text)
    return 0


def cmd_route_report(args) -> int:
    from .checkpoint import load_checkpoint
    from .evaluate import route_report

    model, manifest = load_checkpoint(args.ck)
    data = _manifest_for(args, "test", manifest.get("train_config"))
    report = route_report(model, data)
    if args.out:
        report.write_csv(args.out)
    else:
        print("dataset_id,expert_id,count,fraction")
        for row in report.rows():
            print(",".join(map(str, row)))
    print(f"purity {report.purity:.4f}", file=sys.stderr)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_gradcheck

    results = run_gradcheck(points=args.points, seed=args.seed, names=args.ops,
                            end_to_end=not args.ops)
    failed = 0
    for r in results:
        status = "ok" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status:4} {r.name:24} points={r.points:4d} worst={r.worst_error:.2e} ({r.seconds:.2f}s)")
    print(f"{len(results) - failed}/{len(results)} below {TOLERANCE:g}")
    return 1 if failed else 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    results = run_selftest(args.seed)
    for r in results:
        print(f"{'ok' if r.passed else 'FAIL':4} {r.name} {r.detail}")
    return 0 if all(r.passed for r in results) else 1


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--train-per-domain", type=int, default=96)
    p.add_argument("--val-per-domain", type=int, default=8)
    p.add_argument("--test-per-domain", type=int, default=32)
    p.add_argument("--zsd-per-domain", type=int, default=32)
    p.add_argument("--unseen", type=lambda s: [c for c in s.split(",") if c], default=None,
                   help="comma-separated unseen classes (default ring,cross)")
    p.add_argument("--holdout-domain", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="JSON file of flag values; explicit flags win")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hmrnet", description=__doc__, parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="materialize a synthetic corpus")
    _data_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[common], help="staged training")
    _data_flags(p)
    p.add_argument("--data", help="corpus directory written by generate")
    p.add_argument("--manifest", help="train manifest JSON")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lambdas", help="four comma-separated loss weights")
    p.add_argument("--variant", choices=("full", "global-only", "local-only"), default="full")
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    _data_flags(p)
    p.add_argument("--ck", required=True)
    p.add_argument("--data")
    p.add_argument("--manifest")
    p.add_argument("--mode", choices=("per-domain", "leave-one-out", "zsd"), default="per-domain")
    p.add_argument("--prompts", help="prompt file for zsd mode")
    p.add_argument("--out", help="metrics JSON path")
    p.add_argument("--detections", help="detections JSON-lines path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("route-report", parents=[common], help="expert utilization CSV and purity")
    _data_flags(p)
    p.add_argument("--ck", required=True)
    p.add_argument("--data")
    p.add_argument("--manifest")
    p.add_argument("--out", help="CSV path (stdout if omitted)")
    p.set_defaults(func=cmd_route_report)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--points", type=int, default=100)
    p.add_argument("--ops", nargs="*", help="subset of registered ops")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("selftest", parents=[common], help="invariant suite")
    p.set_defaults(func=cmd_selftest)
    return parser


def _apply_config(parser: argparse.ArgumentParser, args, argv) -> argparse.Namespace:
    if not args.config:
        return args
    values = json.loads(Path(args.config).read_text())
    if not isinstance(values, dict):
        raise UsageError("config file must hold a JSON object")
    known = vars(args)
    unknown = [k for k in values if k.replace("-", "_") not in known]
    if unknown:
        raise UsageError(f"unknown config keys {unknown}")
    explicit = {a.split("=")[0].lstrip("-").replace("-", "_") for a in argv if a.startswith("--")}
    for key, value in values.items():
        key = key.replace("-", "_")
        if key not in explicit:
            setattr(args, key, value)
    return args


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args = _apply_config(parser, args, argv)
        return args.func(args)
    except (HMRError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"hmrnet {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
