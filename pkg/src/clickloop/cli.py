"""Command-line entry points: synth-data, train, eval, probe, serve.

Exit codes: 0 success, 1 runtime failure, 2 usage error. CLICKLOOP_CKPT,
CLICKLOOP_DATA and CLICKLOOP_PORT provide fallbacks for the checkpoint,
data and port arguments.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_run_config
from .core import BUNDLED_SKELETONS, Dataset
from .dataset_io import load_coco_keypoints, load_jsonl_dataset, write_jsonl_dataset
from .evaluation import (
    EvalConfig,
    ModelEngine,
    evaluate_model,
    noc_at,
    sensitivity_probe,
    simulate_annotation,
)
from .synth import generate_synthetic_dataset
from .train import train

__all__ = ["main"]

DEFAULT_PORT = 8731


def _env(name: str) -> Optional[str]:
    value = os.environ.get(name)
    return value if value else None


def _require(parser: argparse.ArgumentParser, value, flag: str, env: str):
    if value is None:
        parser.error(f"{flag} is required (or set {env})")
    return value


def _load_dataset(path: str, skeleton_name: str, images_dir: Optional[str]) -> Dataset:
    skeleton = BUNDLED_SKELETONS[skeleton_name]
    p = Path(path)
    if p.is_dir():
        return load_jsonl_dataset(p)
    return load_coco_keypoints(p, skeleton, images_dir=images_dir)


def _add_common(sub: argparse.ArgumentParser, needs_data: bool = True) -> None:
    sub.add_argument("--config", help="TOML run config")
    if needs_data:
        sub.add_argument(
            "--data", default=_env("CLICKLOOP_DATA"),
            help="dataset directory (jsonl layout) or COCO json file",
        )
        sub.add_argument("--skeleton", default="coco17", choices=sorted(BUNDLED_SKELETONS))
        sub.add_argument("--images-dir", help="image directory for COCO json datasets")


def _cmd_synth_data(args, cfg: RunConfig) -> int:
    synth_cfg = cfg.synth
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.n_images is not None:
        overrides["n_images"] = args.n_images
    if overrides:
        synth_cfg = dataclasses.replace(synth_cfg, **overrides)
    skeleton = BUNDLED_SKELETONS[args.skeleton]
    dataset = generate_synthetic_dataset(synth_cfg, skeleton=skeleton)
    out = write_jsonl_dataset(dataset, args.out)
    print(f"wrote {len(dataset.images)} images, {dataset.n_instances} instances to {out}")
    return 0


def _cmd_train(args, cfg: RunConfig) -> int:
    dataset = _load_dataset(args.data, args.skeleton, args.images_dir)

    train_cfg = cfg.train
    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.lr is not None:
        overrides["lr"] = args.lr
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.log_csv is not None:
        overrides["log_csv"] = args.log_csv
    if args.no_error_model:
        overrides["use_error_model"] = False
    if args.no_loop:
        overrides["use_loop"] = False
    if overrides:
        train_cfg = dataclasses.replace(train_cfg, **overrides)

    model_cfg = cfg.model
    if model_cfg.n_keypoints != dataset.skeleton.n_keypoints:
        model_cfg = dataclasses.replace(model_cfg, n_keypoints=dataset.skeleton.n_keypoints)

    print(f"training on {len(dataset.images)} images ({dataset.n_instances} instances)")
    result = train(dataset, train_cfg, model_cfg=model_cfg)
    first_dims = dataset.images[0].dims
    meta = {
        "canvas": list(first_dims),
        "epochs": train_cfg.epochs,
        "final_total": result.final_total(),
        "use_error_model": train_cfg.use_error_model,
        "use_loop": train_cfg.use_loop,
    }
    save_checkpoint(args.out, result.model, dataset.skeleton, meta=meta)
    print(f"final loss {result.final_total():.4f}; checkpoint saved to {args.out}")
    return 0


def _cmd_eval(args, cfg: RunConfig) -> int:
    model, skeleton, _ = load_checkpoint(args.ckpt)
    dataset = _load_dataset(args.data, args.skeleton, args.images_dir)
    eval_cfg = cfg.eval
    overrides = {}
    if args.clicks is not None:
        overrides["clicks_per_instance"] = args.clicks
    if args.strategy is not None:
        overrides["click_strategy"] = args.strategy
    if args.mode is not None:
        overrides["click_mode"] = args.mode
    if overrides:
        eval_cfg = dataclasses.replace(eval_cfg, **overrides)

    report = evaluate_model(model, dataset, eval_cfg)
    for thr in sorted(report.per_threshold):
        print(f"AP@{thr:.2f} = {report.per_threshold[thr]:.4f}")
    print(f"AP mean = {report.mean:.4f}")

    if args.clicks:
        sim = simulate_annotation(ModelEngine(model), dataset, eval_cfg, loop_enabled=not args.no_loop)
        for n in sorted(sim.ap_at_clicks):
            print(f"AP mean after {n} clicks/instance = {sim.ap_at_clicks[n].mean:.4f}")
    if args.noc is not None:
        noc = noc_at(ModelEngine(model), dataset, args.noc, cap=eval_cfg.noc_cap)
        print(
            f"NoC@{args.noc:.2f} = {noc.mean:.3f} over {len(noc.per_person)} persons "
            f"({sum(noc.reached)} reached target, cap {eval_cfg.noc_cap})"
        )
    return 0


def _cmd_probe(args, cfg: RunConfig) -> int:
    model, skeleton, _ = load_checkpoint(args.ckpt)
    dataset = _load_dataset(args.data, args.skeleton, args.images_dir)
    omegas = [float(v) for v in args.omegas.split(",")]
    reports = sensitivity_probe(model, dataset, omegas, cfg.eval)
    base = reports.get(0.0)
    for omega in omegas:
        line = f"omega={omega:g}: AP mean = {reports[omega].mean:.4f}"
        if base is not None and omega != 0.0 and base.mean > 0:
            drop = (base.mean - reports[omega].mean) / base.mean
            line += f" (drop {drop:.3f})"
        print(line)
    return 0


def _cmd_serve(args, cfg: RunConfig) -> int:
    import uvicorn

    from .service import create_app

    model, skeleton, meta = load_checkpoint(args.ckpt)
    service_cfg = cfg.service
    if isinstance(meta, dict) and "canvas" in meta:
        service_cfg = dataclasses.replace(service_cfg, canvas=tuple(meta["canvas"]))
    port = args.port if args.port is not None else service_cfg.port
    app = create_app(model, skeleton, args.data_dir, service_cfg, static_dir=args.static)
    print(f"serving on port {port} (data dir {args.data_dir})")
    uvicorn.run(app, host="127.0.0.1", port=port)
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="clickloop", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    p_synth = subs.add_parser("synth-data", help="generate a synthetic dataset")
    p_synth.add_argument("--out", required=True, help="output directory")
    p_synth.add_argument("--config")
    p_synth.add_argument("--seed", type=int)
    p_synth.add_argument("--n-images", type=int)
    p_synth.add_argument("--skeleton", default="coco17", choices=sorted(BUNDLED_SKELETONS))
    p_synth.set_defaults(fn=_cmd_synth_data)

    p_train = subs.add_parser("train", help="train a detector checkpoint")
    _add_common(p_train)
    p_train.add_argument("--out", required=True, help="checkpoint output path")
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--lr", type=float)
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--log-csv")
    p_train.add_argument("--no-error-model", action="store_true")
    p_train.add_argument("--no-loop", action="store_true")
    p_train.set_defaults(fn=_cmd_train)

    p_eval = subs.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p_eval)
    p_eval.add_argument("--ckpt", default=_env("CLICKLOOP_CKPT"))
    p_eval.add_argument("--clicks", type=int, help="also run the click-budget sweep")
    p_eval.add_argument("--strategy", choices=["random", "low_score", "worse"])
    p_eval.add_argument("--mode", choices=["only_once", "progressive"])
    p_eval.add_argument("--no-loop", action="store_true", help="clicks without refinement loops")
    p_eval.add_argument("--noc", type=float, help="measure NoC at this OKS target")
    p_eval.set_defaults(fn=_cmd_eval)

    p_probe = subs.add_parser("probe", help="keypoint-query noise sensitivity probe")
    _add_common(p_probe)
    p_probe.add_argument("--ckpt", default=_env("CLICKLOOP_CKPT"))
    p_probe.add_argument("--omegas", default="0,0.1", help="comma-separated noise half-widths")
    p_probe.set_defaults(fn=_cmd_probe)

    p_serve = subs.add_parser("serve", help="run the annotation HTTP service")
    p_serve.add_argument("--config")
    p_serve.add_argument("--ckpt", default=_env("CLICKLOOP_CKPT"))
    p_serve.add_argument(
        "--data-dir", default=_env("CLICKLOOP_DATA"), help="session storage directory"
    )
    p_serve.add_argument(
        "--port",
        type=int,
        default=int(_env("CLICKLOOP_PORT") or 0) or None,
    )
    p_serve.add_argument("--static", help="static UI directory to mount at /")
    p_serve.set_defaults(fn=_cmd_serve)

    args = parser.parse_args(argv)

    if args.command in ("train", "eval", "probe"):
        _require(parser, args.data, "--data", "CLICKLOOP_DATA")
    if args.command in ("eval", "probe", "serve"):
        _require(parser, args.ckpt, "--ckpt", "CLICKLOOP_CKPT")
    if args.command == "serve":
        _require(parser, args.data_dir, "--data-dir", "CLICKLOOP_DATA")

    try:
        cfg = load_run_config(args.config)
        if args.config:
            print("resolved config:")
            for line in cfg.describe().splitlines():
                print(f"  {line}")
        return args.fn(args, cfg)
    except KeyboardInterrupt:
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
