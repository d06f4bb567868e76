"""Command line entry point: gen-data, train, ablate, gradcheck, eval."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import ShapeWorld, ShapeWorldSpec, write_corpus
from .gradflow import Variant

log = logging.getLogger("xfm")

VARIANTS = [v.value for v in Variant]


def _load_run_config(path: str | None, preset: str | None):
    from .trainer import PRESETS, RunConfig

    raw = json.loads(Path(path).read_text()) if path else {}
    if preset:
        raw.setdefault("preset", preset)
    return RunConfig.from_dict(raw) if raw else PRESETS["desk"]()


def cmd_gen_data(args) -> int:
    world = ShapeWorld(ShapeWorldSpec(args.image_side, args.max_text_len, args.seed))
    write_corpus(world, Path(args.out), {"text": args.texts, "image": args.images, "pair": args.pairs})
    log.info("wrote corpus to %s", args.out)
    return 0


def cmd_train(args) -> int:
    from .trainer import train

    cfg = _load_run_config(args.config, args.preset)
    overrides = {}
    if args.variant:
        overrides["variant"] = args.variant
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["steps"] = args.steps
    cfg = replace(cfg, **overrides)
    result = train(cfg, args.out)
    last = result.metrics[-1] if result.metrics else {}
    log.info("finished %d steps (%s); last total %s", len(result.metrics), result.status, last.get("total"))
    return 0 if result.status == "ok" else 2


def cmd_ablate(args) -> int:
    from .trainer import train

    cfg = _load_run_config(args.config, args.preset)
    if args.steps is not None:
        cfg = replace(cfg, steps=args.steps)
    rows = []
    for variant in VARIANTS:
        run = replace(cfg, variant=variant, seed=args.seed)
        result = train(run, Path(args.out) / variant)
        last = result.metrics[-1]
        rows.append({"variant": variant, **{k: last[k] for k in ("mlm", "itc", "itm", "imlm", "bbp", "mim", "total")}})
    header = f"{'variant':8s} " + " ".join(f"{k:>8s}" for k in ("mlm", "itc", "itm", "imlm", "bbp", "mim", "total"))
    lines = [header]
    for r in rows:
        cells = " ".join(f"{r[k]:8.4f}" if r[k] is not None else f"{'-':>8s}" for k in
                         ("mlm", "itc", "itm", "imlm", "bbp", "mim", "total"))
        lines.append(f"{r['variant']:8s} {cells}")
    table = "\n".join(lines)
    print(table)
    out = Path(args.out)
    (out / "ablation.json").write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n")
    (out / "ablation.txt").write_text(table + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    from .data import materialize, schedule_batches
    from .encoders import XFM, EncoderConfig
    from .gradcheck import objective_gradcheck
    from .gradflow import GradFlowConfig, verify_stop_gradient

    cfg = EncoderConfig()
    fd = objective_gradcheck(cfg, seeds=range(args.seeds), coords_per_objective=args.coords)
    reports = {}
    for variant in VARIANTS:
        model = XFM(cfg, seed=0)
        world = ShapeWorld(ShapeWorldSpec(cfg.image_side, cfg.max_text_len, 0))
        batch = materialize(world, schedule_batches(0, {"text": 4, "image": 4, "pair": 4}))
        reports[variant] = verify_stop_gradient(model, batch, GradFlowConfig.parse(variant)).to_dict()
    ok = fd["passed"] and all(r["passed"] for r in reports.values())
    print(f"finite differences: max rel error {fd['max_rel_error']:.3e} over {fd['checks']} checks "
          f"-> {'PASS' if fd['passed'] else 'FAIL'}")
    for variant, r in reports.items():
        print(f"stop-gradient {variant:7s}: {'PASS' if r['passed'] else 'FAIL'} {'; '.join(r['failures'])}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.json").write_text(json.dumps(fd, indent=1, sort_keys=True) + "\n")
        (out / "stopgrad.json").write_text(json.dumps(reports, indent=1, sort_keys=True) + "\n")
    return 0 if ok else 1


def cmd_eval(args) -> int:
    from .evaluation import emit_reports

    ckpt = Path(args.checkpoint)
    run_dir = ckpt.parent if ckpt.name == "checkpoint" else ckpt
    ok, payloads = emit_reports(run_dir, pool=args.pool, k=args.k, out_dir=args.out or run_dir, checkpoint=ckpt)
    r = payloads["retrieval.json"]
    print(f"retrieval TR R@1 {r['text_r1']:.3f} R@5 {r['text_r5']:.3f} | IR R@1 {r['image_r1']:.3f} R@5 {r['image_r5']:.3f}")
    print(f"probe accuracy {payloads['probe.json']['accuracy']:.3f}")
    print(f"stop-gradient {'PASS' if payloads['stopgrad.json']['passed'] else 'FAIL'}, "
          f"gradcheck {'PASS' if payloads['gradcheck.json']['passed'] else 'FAIL'}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xfm", description="Desk-scale tri-encoder pre-training")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="materialize the shape-world corpus to disk")
    p.add_argument("--out", required=True)
    p.add_argument("--texts", type=int, default=64)
    p.add_argument("--images", type=int, default=64)
    p.add_argument("--pairs", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-side", type=int, default=32)
    p.add_argument("--max-text-len", type=int, default=16)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run pre-training")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--preset", choices=["desk", "paper", "overfit"])
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="train every variant on one seed and compare")
    p.add_argument("--config")
    p.add_argument("--preset", choices=["desk", "paper", "overfit"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference and stop-gradient suites")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--coords", type=int, default=6)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("eval", help="retrieval, probe and verification reports")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pool", type=int, default=64)
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    np.seterr(over="ignore", under="ignore")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
