"""Command-line entry point: ``mmsumm <command> [--config FILE] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time

from . import pipeline
from .config import ConfigError, load_config

COMMANDS = ("synth", "align", "pretrain", "train", "select", "decode", "eval", "report",
            "check-grads", "count-params")

log = logging.getLogger("mmsumm")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mmsumm", description=__doc__)
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="JSON run configuration (defaults fill any gaps)")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                    help="override one field, e.g. --set train.total_steps=500")
    ap.add_argument("--variant", action="append", help="restrict train/decode to these variants")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _run(cmd: str, cfg, args) -> str | None:
    if cmd not in ("check-grads", "count-params"):
        cfg.work_dir.mkdir(parents=True, exist_ok=True)
    if cmd == "synth":
        corpus = pipeline.run_synth(cfg)
        return f"wrote {len(corpus.episodes)} episodes to {cfg.path('corpus')}"
    if cmd == "align":
        feats = pipeline.run_align(cfg)
        return f"aligned {len(feats)} episodes"
    if cmd == "pretrain":
        pipeline.run_pretrain(cfg)
        return f"wrote {cfg.path('backbone.ckpt')}"
    if cmd == "train":
        models = pipeline.run_train(cfg, args.variant)
        return "trained " + ", ".join(models)
    if cmd == "select":
        rows = pipeline.run_select(cfg)
        return f"wrote {len(rows)} selections"
    if cmd == "decode":
        rows = pipeline.run_decode(cfg, args.variant)
        return f"wrote {len(rows)} generations"
    if cmd == "eval":
        out = pipeline.run_eval(cfg)
        return json.dumps({m: {k: v["f1"] for k, v in d.items() if isinstance(v, dict) and "f1" in v}
                           for m, d in out["methods"].items()}, indent=2)
    if cmd == "report":
        return pipeline.run_report(cfg)
    if cmd == "check-grads":
        cg = cfg.raw["check_grads"]
        rep = pipeline.gradient_check(int(cg["seed"]), float(cg["eps"]), float(cg["tol"]))
        lines = [f"{name:<32}{err:.3e}" for name, err in rep["per_leaf"].items()]
        lines.append(f"checked {rep['n_checked']} scalars; max relative error "
                     f"{rep['max_rel_error']:.3e} at {rep['worst_leaf']}")
        lines.append("PASS" if rep["ok"] else "FAIL")
        print("\n".join(lines))
        if not rep["ok"]:
            raise SystemExit(1)
        return None
    if cmd == "count-params":
        return pipeline.render_parameter_table(pipeline.parameter_table(cfg))
    raise AssertionError(cmd)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
    except ConfigError as e:
        print(f"invalid configuration: {e}", file=sys.stderr)
        return 2
    t0 = time.time()
    try:
        msg = _run(args.command, cfg, args)
    except pipeline.MissingArtifact as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    if msg:
        print(msg)
    log.info("%s finished in %.1fs", args.command, time.time() - t0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
