"""affinity-refine command line.

Every subcommand prints exactly one JSON document on stdout; logs and error
messages go to stderr. Exit codes: 0 ok, 1 bad input, 2 file-system error,
3 numerical contract failure.
"""

import argparse
import json
import logging
import sys
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any

import numpy as np
from dotenv import load_dotenv

from affinity_refine import __version__
from affinity_refine.common.logging_config import TRACE, configure_logging
from affinity_refine.common.timing import PhaseTimer, format_rate_summary
from affinity_refine.constants import (
    DEFAULT_GAMMA,
    DEFAULT_MARGIN_M,
    DEFAULT_MARGIN_N,
    DEFAULT_PROB_FLOOR,
    config,
)
from affinity_refine.errors import AffinityRefineError, ArgumentError, ContractViolation
from affinity_refine.experiments import ExperimentConfig, experiment_config_from_dict, run_experiment
from affinity_refine.gradcheck import TARGETS, run_grad_check
from affinity_refine.losses.affinity import AffinityConfig, AffinityMode, ModelingFn, affinity_loss
from affinity_refine.losses.label_reassign import LrConfig, compute_centroids, lr_loss, reassign
from affinity_refine.metrics import miou
from affinity_refine.numba_pipelines import set_thread_count, warmup_pipelines
from affinity_refine.oracles import self_test
from affinity_refine.pair_graph import KernelSet, build_pairs
from affinity_refine.random_instances import parse_size, random_blob_labels, random_probs
from affinity_refine.synth import SceneSpec, generate, read_scene, write_scene
from affinity_refine.tensor_core import (
    DenseTensor,
    LabelMap,
    Rng,
    labelmap_read_pgm,
    labelmap_write_pgm,
    tensor_read,
    tensor_write,
    validate_labels,
)
from affinity_refine.training.checkpoint import load_checkpoint, save_checkpoint, write_metrics_csv
from affinity_refine.training.config import RunConfig
from affinity_refine.training.trainer import TrainItem, refine, train

logger = logging.getLogger(__name__)

Handler = Callable[[argparse.Namespace], dict[str, Any]]


class _Parser(argparse.ArgumentParser):
    """Raise instead of exiting so bad flags map to exit code 1."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise ArgumentError(f"{self.prog}: {message}")


def _positive_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text!r}")
    return value


def _nonneg_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text!r}")
    return value


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text!r}")
    return value


def _kernels(text: str) -> KernelSet:
    try:
        return KernelSet.parse(text)
    except ArgumentError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _size(text: str) -> tuple[int, int, int]:
    try:
        return parse_size(text)
    except ArgumentError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _emit(payload: dict[str, Any]) -> None:
    sys.stdout.write(json.dumps(payload, sort_keys=True) + "\n")
    sys.stdout.flush()


def _load_json_object(path: str, flag: str) -> dict[str, Any]:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ArgumentError(f"{flag} {path}: invalid JSON: {e.msg}") from e
    if not isinstance(data, dict):
        raise ArgumentError(f"{flag} {path}: expected a JSON object")
    return data


# ---------------------------------------------------------------------------
# Loss commands


def cmd_affinity_loss(args: argparse.Namespace) -> dict[str, Any]:
    mode = AffinityMode(args.mode)
    if mode is AffinityMode.AA and args.conf is None:
        raise ArgumentError("--conf is required with --mode aa")
    probs = tensor_read(args.probs).to_float64()
    labels = labelmap_read_pgm(args.labels)
    if probs.ndim != 3:
        raise ArgumentError(f"--probs {args.probs}: expected H x W x C, got dims {list(probs.shape)}")
    validate_labels(labels, probs.shape[2])
    cfg = AffinityConfig(
        margin_m=args.margin,
        kernels=args.kernels,
        mode=mode,
        modeling_fn=ModelingFn(args.modeling_fn),
        prob_floor=args.floor,
        detach_conf=args.grad_conf_out is None,
    )
    conf = tensor_read(args.conf).to_float64() if args.conf is not None else None
    pairs = build_pairs(labels, cfg.kernels)
    report = affinity_loss(probs, conf, pairs, cfg)
    out = report.to_dict()
    out["mode"] = mode.value
    out["kernels"] = list(cfg.kernels.dilations)
    out["grad_written_to"] = None
    if args.grad_out is not None:
        tensor_write(report.grad_probs_tensor(), args.grad_out)
        out["grad_written_to"] = str(args.grad_out)
    if args.grad_conf_out is not None and report.grad_conf is not None:
        tensor_write(DenseTensor.from_array(report.grad_conf), args.grad_conf_out)
        out["grad_conf_written_to"] = str(args.grad_conf_out)
    return out


def _lr_inputs(args: argparse.Namespace) -> tuple[np.ndarray, LabelMap, np.ndarray]:
    embed = tensor_read(args.embed).to_float64()
    labels = labelmap_read_pgm(args.labels)
    conf = tensor_read(args.conf).to_float64()
    return embed, labels, conf


def cmd_lr_loss(args: argparse.Namespace) -> dict[str, Any]:
    embed, labels, conf = _lr_inputs(args)
    cfg = LrConfig(margin_n=args.margin_n, gamma=args.gamma)
    report = lr_loss(embed, labels, conf, cfg)
    assert report.reassignment is not None and report.centroids is not None
    e_bg, e_fg = report.reassignment.counts()
    out: dict[str, Any] = {
        "total": report.total,
        "l_minus": report.l_minus,
        "l_plus": report.l_plus,
        "e_bg": e_bg,
        "e_fg": e_fg,
        "changed": report.reassignment.changed,
        "classes": list(report.centroids.classes),
        "grad_written_to": None,
    }
    if args.grad_out is not None:
        tensor_write(report.grad_tensor(), args.grad_out)
        out["grad_written_to"] = str(args.grad_out)
    return out


def cmd_reassign(args: argparse.Namespace) -> dict[str, Any]:
    embed, labels, conf = _lr_inputs(args)
    cfg = LrConfig(gamma=args.gamma)
    centroids = compute_centroids(embed, labels, conf)
    ra = reassign(embed, labels, centroids, cfg)
    labelmap_write_pgm(ra.to_label_map(), args.out)
    e_bg, e_fg = ra.counts()
    return {
        "written_to": str(args.out),
        "changed": ra.changed,
        "e_bg": e_bg,
        "e_fg": e_fg,
        "classes": list(centroids.classes),
        "mean_alpha": float(ra.alpha.mean()) if ra.alpha.size else 0.0,
    }


def cmd_grad_check(args: argparse.Namespace) -> dict[str, Any]:
    result = run_grad_check(args.target, args.size, args.seed)
    payload = result.to_dict()
    if not result.passed:
        raise ContractViolation(
            f"gradient check {result.target} failed: max rel err {result.max_rel_error:.3g} "
            f">= {result.threshold:g}",
            payload=payload,
        )
    return payload


# ---------------------------------------------------------------------------
# Synthetic data, training and evaluation


def cmd_synth_gen(args: argparse.Namespace) -> dict[str, Any]:
    spec = SceneSpec.from_dict(_load_json_object(args.spec, "--spec")) if args.spec else SceneSpec()
    if args.seed is not None:
        spec.seed = args.seed
    instance = generate(spec)
    out = write_scene(instance, args.out)
    return {"out": str(out), "seed": spec.seed, **instance.stats}


def cmd_train(args: argparse.Namespace) -> dict[str, Any]:
    run = RunConfig.from_dict(_load_json_object(args.config, "--config")) if args.config else RunConfig()
    scene = read_scene(args.data) if args.data else generate(run.scene)
    item = TrainItem.from_scene(scene)
    result = train(item, run.train)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, out, meta={"num_classes": item.num_classes, "seed": run.train.seed})
    write_metrics_csv(result.history, out / "metrics.csv")
    run.dump(out / "run.json")
    refined = refine(result.model, item.image)
    labelmap_write_pgm(refined, out / "refined.pgm")
    for snap in result.snapshots:
        labelmap_write_pgm(snap.refined, out / f"refined_epoch{snap.epoch:02d}.pgm")

    report: dict[str, Any] = {
        "out": str(out),
        "steps": len(result.history),
        "final": result.history[-1].to_row(),
        "pseudo_miou": None,
        "refined_miou": None,
        "snapshots": [{"epoch": s.epoch, "miou": s.miou_gt} for s in result.snapshots],
    }
    if item.gt is not None:
        report["pseudo_miou"] = miou(item.pseudo, item.gt, item.num_classes).mean
        report["refined_miou"] = miou(refined, item.gt, item.num_classes).mean
    logger.debug("train timing %s", result.timing)
    return report


def cmd_refine(args: argparse.Namespace) -> dict[str, Any]:
    model, _ = load_checkpoint(args.ckpt)
    src = Path(args.in_dir)
    image = tensor_read(src / "image.dten").to_float64()
    if image.ndim != 3 or image.shape[2] != model.in_channels:
        raise ArgumentError(
            f"--in {src}: image must be H x W x {model.in_channels}, got dims {list(image.shape)}"
        )
    pred = refine(model, image)
    labelmap_write_pgm(pred, args.out)
    out: dict[str, Any] = {"written_to": str(args.out), "height": pred.height, "width": pred.width}
    gt_path = src / "gt.pgm"
    if gt_path.exists():
        out["miou"] = miou(pred, labelmap_read_pgm(gt_path), model.num_classes).mean
    return out


def cmd_eval_miou(args: argparse.Namespace) -> dict[str, Any]:
    pred = labelmap_read_pgm(args.pred)
    gt = labelmap_read_pgm(args.gt)
    return miou(pred, gt, args.classes).to_dict()


def cmd_bench_affinity(args: argparse.Namespace) -> dict[str, Any]:
    h, w, c = args.size
    if config.numba_warmup:
        warmup_pipelines()
    rng = Rng(args.seed)
    labels = random_blob_labels(rng, h, w, c)
    probs = random_probs(rng, h, w, c)
    conf = rng.uniform_array((h, w))
    cfg = AffinityConfig(kernels=args.kernels, mode=AffinityMode(args.mode))
    timer = PhaseTimer(["pairs", "loss"])
    with timer.phase("pairs"):
        pairs = build_pairs(labels, cfg.kernels)
    total = 0.0
    for _ in range(args.repeat):
        with timer.phase("loss"):
            total = affinity_loss(probs, conf, pairs, cfg).total
    loss_metrics = timer.phases["loss"]
    summary = timer.summary()
    logger.info("bench affinity %dx%dx%d: %s", h, w, c, format_rate_summary(loss_metrics, pairs.total, "pairs"))
    mean_s = loss_metrics.mean_s
    return {
        "size": f"{h}x{w}x{c}",
        "kernels": list(cfg.kernels.dilations),
        "mode": cfg.mode.value,
        "repeat": args.repeat,
        "threads": config.threads,
        "pairs": pairs.total,
        "total": total,
        "pairs_ms": summary["pairs"]["mean_ms"],
        "mean_ms": summary["loss"]["mean_ms"],
        "std_ms": summary["loss"]["std_ms"],
        "p95_ms": summary["loss"]["p95_ms"],
        "pairs_per_second": pairs.total / mean_s if mean_s > 0 else 0.0,
    }


def cmd_experiment_refine(args: argparse.Namespace) -> dict[str, Any]:
    cfg = experiment_config_from_dict(_load_json_object(args.config, "--config")) if args.config else ExperimentConfig()
    if args.seeds is not None:
        cfg.seeds = tuple(range(args.seeds))
    if args.variants:
        cfg.variants = tuple(v.strip() for v in args.variants.split(",") if v.strip())
    if args.gamma_sweep:
        cfg.gamma_sweep = True
    cfg = ExperimentConfig(cfg.seeds, cfg.variants, cfg.gamma_sweep, cfg.train, cfg.scene)
    return run_experiment(cfg).to_dict()


def cmd_self_test(args: argparse.Namespace) -> dict[str, Any]:
    return self_test(args.instances, args.seed)


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="affinity-refine", description="Adaptive affinity and label reassign toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--threads", type=_positive_int, default=None, help="Worker threads for pair kernels")
    parser.add_argument(
        "--log-level",
        choices=["TRACE", "DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"],
        help="Set log level",
    )
    parser.add_argument(
        "-v", "--verbose", action="count", default=0, help="Increase verbosity; -v=INFO, -vv=DEBUG, -vvv=TRACE"
    )
    parser.add_argument("-q", "--quiet", action="store_true", help="Only log errors")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("affinity-loss", help="SA / AA loss on DTEN probabilities and PGM labels")
    p.add_argument("--probs", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--conf", default=None)
    p.add_argument("--mode", choices=[m.value for m in AffinityMode], default=AffinityMode.AA.value)
    p.add_argument("--kernels", type=_kernels, default=KernelSet.preset("4-8-12-24"))
    p.add_argument("--margin", type=_positive_float, default=DEFAULT_MARGIN_M)
    p.add_argument("--modeling-fn", choices=[f.value for f in ModelingFn], default=ModelingFn.MAX.value)
    p.add_argument("--floor", type=_positive_float, default=DEFAULT_PROB_FLOOR)
    p.add_argument("--grad-out", default=None)
    p.add_argument("--grad-conf-out", default=None, help="Also differentiate the confidence map")
    p.set_defaults(handler=cmd_affinity_loss)

    for name, handler, help_text in (
        ("lr-loss", cmd_lr_loss, "Label reassign loss"),
        ("reassign", cmd_reassign, "Write the reassigned label map"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--embed", required=True)
        p.add_argument("--labels", required=True)
        p.add_argument("--conf", required=True)
        p.add_argument("--gamma", type=_nonneg_float, default=DEFAULT_GAMMA)
        if name == "lr-loss":
            p.add_argument("--margin-n", type=_positive_float, default=DEFAULT_MARGIN_N)
            p.add_argument("--grad-out", default=None)
        else:
            p.add_argument("--out", required=True)
        p.set_defaults(handler=handler)

    p = sub.add_parser("grad-check", help="Finite-difference gradient verification")
    p.add_argument("--target", choices=list(TARGETS), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=_size, default=None)
    p.set_defaults(handler=cmd_grad_check)

    p = sub.add_parser("synth", help="Synthetic scenes")
    synth_sub = p.add_subparsers(dest="synth_command", required=True, parser_class=_Parser)
    g = synth_sub.add_parser("gen", help="Generate one scene directory")
    g.add_argument("--spec", default=None)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(handler=cmd_synth_gen)

    p = sub.add_parser("train", help="Train the toy model on one scene")
    p.add_argument("--config", default=None)
    p.add_argument("--data", default=None, help="Scene directory; generated from the config when omitted")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("refine", help="Refined labels from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_refine)

    p = sub.add_parser("eval", help="Evaluation")
    eval_sub = p.add_subparsers(dest="eval_command", required=True, parser_class=_Parser)
    e = eval_sub.add_parser("miou", help="Mean IoU of two PGM label maps")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--classes", type=_positive_int, required=True)
    e.set_defaults(handler=cmd_eval_miou)

    p = sub.add_parser("bench", help="Benchmarks")
    bench_sub = p.add_subparsers(dest="bench_command", required=True, parser_class=_Parser)
    b = bench_sub.add_parser("affinity", help="Time affinity forward + backward")
    b.add_argument("--size", type=_size, default=(321, 321, 21))
    b.add_argument("--kernels", type=_kernels, default=KernelSet.preset("4-8-12-24"))
    b.add_argument("--repeat", type=_positive_int, default=5)
    b.add_argument("--mode", choices=[m.value for m in AffinityMode], default=AffinityMode.AA.value)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(handler=cmd_bench_affinity)

    p = sub.add_parser("experiment", help="Experiments")
    exp_sub = p.add_subparsers(dest="experiment_command", required=True, parser_class=_Parser)
    x = exp_sub.add_parser("refine", help="Multi-seed refinement experiment")
    x.add_argument("--config", default=None)
    x.add_argument("--seeds", type=_positive_int, default=None, help="Use seeds 0..N-1")
    x.add_argument("--variants", default=None, help="Comma-separated variant names")
    x.add_argument("--gamma-sweep", action="store_true")
    x.set_defaults(handler=cmd_experiment_refine)

    p = sub.add_parser("self-test", help="Compare every loss and metric against brute-force references")
    p.add_argument("--instances", type=_positive_int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_self_test)

    return parser


def _apply_verbosity(args: argparse.Namespace) -> None:
    # Resolve log level priority: explicit --log-level > -v/-q > env default
    if args.log_level:
        config.set("log_level", TRACE if args.log_level == "TRACE" else getattr(logging, args.log_level))
    elif args.verbose >= 3:
        config.set("log_level", TRACE)
    elif args.verbose == 2:
        config.set("log_level", logging.DEBUG)
    elif args.verbose == 1:
        config.set("log_level", logging.INFO)
    elif args.quiet:
        config.set("log_level", logging.ERROR)
    if args.threads is not None:
        config.set("threads", args.threads)


def main(argv: Sequence[str] | None = None) -> int:
    load_dotenv()
    try:
        args = build_parser().parse_args(argv)
    except ArgumentError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code

    _apply_verbosity(args)
    configure_logging(config.log_level)
    set_thread_count(config.threads)
    handler: Handler = args.handler
    try:
        payload = handler(args)
    except ContractViolation as e:
        if e.payload is not None:
            _emit(e.payload)
        print(f"contract violation: {e}", file=sys.stderr)
        return e.exit_code
    except AffinityRefineError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 2
    _emit(payload)
    return 0


if __name__ == "__main__":
    sys.exit(main())
