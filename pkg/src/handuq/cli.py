"""Command-line interface: generate / train / eval / curves / paramcount.

Every command is deterministic given its --seed; data files carry no
timestamps, so re-runs are byte-identical.  Exit codes: 0 success,
2 usage, 3 I/O, 4 parse, 5 numerical failure (divergence, singular
covariance), 6 incompatible checkpoint.

A --config file (JSON mirroring the option tree below) supplies defaults;
explicit flags override it.
"""

import argparse
import copy
import json
import sys
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import handsim, net, uq_metrics
from .errors import (
    HanduqError,
    IncompatibleCheckpoint,
    NonInvertiblePrecision,
    NotPositiveDefinite,
    ParseError,
    TrainingDiverged,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_PARSE = 4
EXIT_NUMERIC = 5
EXIT_INCOMPATIBLE = 6

DEFAULT_CONFIG = {
    "seed": 0,
    "paths": {"dataset": None, "checkpoint": None, "report_dir": None},
    "generate": {"n": 1000, "base_var": 1e-4, "occ_gain": 4.0, "coupling": 0.8},
    "model": {"d_f": 1024, "head_kind": "structured", "n_samples": 25, "hidden_layers": [64]},
    "train": {
        "iterations": 1000,
        "batch_size": 64,
        "lr": 1e-3,
        "weight_decay": 1e-4,
        "beta1": 0.9,
        "beta2": 0.999,
        "adam_eps": 1e-8,
        "lambda_nll": 5e-4,
        "lambda_mse": 5e-4,
        "freeze_w": False,
        "freeze_sigma_against_mse": False,
        "holdout": 0,
    },
    "metrics": {"oracle": False, "per_sample_curve": False, "skip": 0, "limit": None},
}


def _merge_config(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise ParseError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _merge_config(base[key], val, path + key + ".")
        else:
            out[key] = val
    return out


def load_config(path) -> dict:
    """Read a config file and fill in defaults for missing keys."""
    try:
        with open(path, "r", encoding="ascii") as fh:
            user = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(user, dict):
        raise ParseError("config root must be an object")
    return _merge_config(DEFAULT_CONFIG, user)


def save_config(path, cfg: dict) -> None:
    with open(path, "w", encoding="ascii") as fh:
        json.dump(cfg, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _resolve(args, cfg: dict, section: str, key: str, flag: str | None = None):
    val = getattr(args, flag or key, None)
    if val is not None:
        return val
    return cfg[section][key]


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _hidden_list(text: str) -> list:
    try:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad hidden layer list {text!r}") from exc


def _load_experiment_config(args) -> dict:
    if getattr(args, "config", None):
        return load_config(args.config)
    return copy.deepcopy(DEFAULT_CONFIG)


# ---------------------------------------------------------------- generate


def cmd_generate(args) -> int:
    cfg = _load_experiment_config(args)
    seed = _resolve(args, cfg, "seed", "seed") if False else (args.seed if args.seed is not None else cfg["seed"])
    n = args.n if args.n is not None else cfg["generate"]["n"]
    out = args.out or cfg["paths"]["dataset"]
    if out is None:
        raise ParseError("generate needs an output path (--out)")
    profile = handsim.NoiseProfile(
        base_var=_resolve(args, cfg, "generate", "base_var"),
        occ_gain=_resolve(args, cfg, "generate", "occ_gain"),
        coupling=_resolve(args, cfg, "generate", "coupling"),
        fixed_occ=args.fixed_occ,
    )
    skeleton = handsim.HandSkeleton.canonical()
    samples = handsim.generate(skeleton, n, seed, profile)
    handsim.save_dataset(out, samples, skeleton.content_hash())
    print(f"generated n={n} seed={seed} skeleton={skeleton.content_hash()} -> {out}")
    return EXIT_OK


# ------------------------------------------------------------------- train


def _train_from_args(args):
    cfg = _load_experiment_config(args)
    seed = args.seed if args.seed is not None else cfg["seed"]
    dataset_path = args.dataset or cfg["paths"]["dataset"]
    if dataset_path is None:
        raise ParseError("train needs a dataset (--dataset)")
    samples, _ = handsim.load_dataset(dataset_path, with_noise_cov=False)
    holdout = _resolve(args, cfg, "train", "holdout")
    if holdout >= len(samples):
        raise ParseError(f"holdout {holdout} leaves no training data")
    train_samples = samples[: len(samples) - holdout] if holdout else samples
    x = handsim.feature_matrix(train_samples)
    y = handsim.target_matrix(train_samples)
    mcfg = net.ModelConfig(
        d_in=x.shape[1],
        d_f=_resolve(args, cfg, "model", "d_f"),
        head_kind=args.head if args.head is not None else cfg["model"]["head_kind"],
        n_samples=_resolve(args, cfg, "model", "n_samples"),
        hidden_layers=tuple(_resolve(args, cfg, "model", "hidden_layers", flag="hidden")),
    )
    tcfg = net.TrainConfig(
        iterations=_resolve(args, cfg, "train", "iterations", flag="iters"),
        batch_size=_resolve(args, cfg, "train", "batch_size"),
        lr=_resolve(args, cfg, "train", "lr"),
        weight_decay=_resolve(args, cfg, "train", "weight_decay"),
        beta1=_resolve(args, cfg, "train", "beta1"),
        beta2=_resolve(args, cfg, "train", "beta2"),
        adam_eps=_resolve(args, cfg, "train", "adam_eps"),
        seed=seed,
        lambda_nll=_resolve(args, cfg, "train", "lambda_nll"),
        lambda_mse=_resolve(args, cfg, "train", "lambda_mse"),
        freeze_w=bool(_resolve(args, cfg, "train", "freeze_w")),
        freeze_sigma_against_mse=bool(
            _resolve(args, cfg, "train", "freeze_sigma_against_mse", flag="freeze_sigma_mse")
        ),
    )
    result = net.train((x, y), mcfg, tcfg)
    return result, cfg


def cmd_train(args) -> int:
    result, cfg = _train_from_args(args)
    out = args.out or cfg["paths"]["checkpoint"]
    if out is None:
        raise ParseError("train needs a checkpoint path (--out)")
    net.save_checkpoint(out, result.params)
    trace_path = args.trace_out or str(Path(out).with_suffix(".trace.csv"))
    net.save_trace_csv(trace_path, result.trace)
    final = result.trace[-1]
    print(
        f"trained head={result.params.config.head_kind} iters={len(result.trace)} "
        f"final_total={final[1]:.6g} -> {out} (trace: {trace_path})"
    )
    return EXIT_OK


# -------------------------------------------------------------------- eval


def _predictions_from_batch(ids, mu, unc, gts) -> list:
    preds = []
    for row, sid in enumerate(ids):
        pred_j = mu[row].reshape(-1, 3)
        gt_j = gts[row].reshape(-1, 3)
        for j in range(pred_j.shape[0]):
            preds.append(
                uq_metrics.JointPrediction(
                    sample_id=int(sid),
                    joint_id=j,
                    pred=pred_j[j],
                    gt=gt_j[j],
                    uncertainty=float(unc[row, j]),
                )
            )
    return preds


def _metric_block(preds, gts_flat, mu_flat) -> dict:
    curve = uq_metrics.sparsification(preds)
    errors = [float(np.linalg.norm(p.pred - p.gt) * uq_metrics.MM_PER_M) for p in preds]
    uncertainties = [p.uncertainty for p in preds]
    pa = float(
        np.mean([uq_metrics.pa_mpjpe(mu_flat[i], gts_flat[i]) for i in range(len(gts_flat))])
    )
    return {
        "mpjpe_mm": uq_metrics.mpjpe(preds),
        "pa_mpjpe_mm": pa,
        "ausc_mm": curve.ausc,
        "ause_mm": curve.ause,
        "pearson_r": uq_metrics.pearson(uncertainties, errors),
        "n_predictions": len(preds),
    }


def cmd_eval(args) -> int:
    cfg = _load_experiment_config(args)
    ckpt_path = args.checkpoint or cfg["paths"]["checkpoint"]
    dataset_path = args.dataset or cfg["paths"]["dataset"]
    if ckpt_path is None or dataset_path is None:
        raise ParseError("eval needs --checkpoint and --dataset")
    out_dir = args.out_dir or cfg["paths"]["report_dir"]
    if out_dir is None:
        raise ParseError("eval needs an output directory (--out-dir)")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params = net.load_checkpoint(ckpt_path)
    oracle = bool(_resolve(args, cfg, "metrics", "oracle"))
    samples, _ = handsim.load_dataset(dataset_path, with_noise_cov=oracle)
    skip = _resolve(args, cfg, "metrics", "skip")
    limit = _resolve(args, cfg, "metrics", "limit")
    samples = samples[skip:]
    if limit is not None:
        samples = samples[:limit]
    if not samples:
        raise ParseError("selected dataset slice is empty")
    x = handsim.feature_matrix(samples)
    y = handsim.target_matrix(samples)
    if x.shape[1] != params.config.d_in or y.shape[1] != params.config.d_o:
        raise IncompatibleCheckpoint(
            f"checkpoint expects d_in={params.config.d_in}, d_o={params.config.d_o}; "
            f"dataset provides {x.shape[1]}, {y.shape[1]}"
        )
    mu = net.batch_forward(params, x)["mu"]
    unc = net.batch_joint_uncertainty(params, x)
    ids = [s.id for s in samples]
    preds = _predictions_from_batch(ids, mu, unc, y)
    pred_path = out_dir / "predictions.csv"
    uq_metrics.save_predictions(pred_path, preds)
    metrics = _metric_block(preds, y, mu)
    metrics["checkpoint"] = str(ckpt_path)
    metrics["dataset"] = str(dataset_path)
    metrics["head_kind"] = params.config.head_kind
    if bool(_resolve(args, cfg, "metrics", "per_sample_curve")):
        psc = uq_metrics.per_sample_sparsification(preds)
        metrics["ausc_per_sample_mm"] = psc.ausc
        metrics["ause_per_sample_mm"] = psc.ause
    if oracle:
        oracle_unc = np.stack([handsim.oracle_uncertainty(s) for s in samples])
        oracle_preds = _predictions_from_batch(ids, mu, oracle_unc, y)
        uq_metrics.save_predictions(out_dir / "oracle_predictions.csv", oracle_preds)
        oracle_sparse = uq_metrics.sparsification(oracle_preds)
        metrics["oracle_ausc_mm"] = oracle_sparse.ausc
        metrics["oracle_ause_mm"] = oracle_sparse.ause
    txt_path, json_path = uq_metrics.save_report(out_dir / "report", metrics)
    print(
        f"eval head={params.config.head_kind} n={len(samples)} "
        f"mpjpe={metrics['mpjpe_mm']:.3f}mm ausc={metrics['ausc_mm']:.3f} "
        f"ause={metrics['ause_mm']:.4f} rho={metrics['pearson_r']:.4f}"
    )
    print(f"wrote {pred_path}, {txt_path}, {json_path}")
    return EXIT_OK


# ------------------------------------------------------------------ curves

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _write_svg(path, series, title, xlabel, ylabel) -> None:
    width, height = 720, 480
    ml, mr, mt, mb = 70, 20, 40, 55
    plot_w, plot_h = width - ml - mr, height - mt - mb
    ymax = max(max(s["ys"]) for s in series) * 1.05 or 1.0
    xmax = 100.0

    def sx(x):
        return ml + plot_w * x / xmax

    def sy(y):
        return mt + plot_h * (1.0 - y / ymax)

    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" font-size="16" '
        f'font-family="sans-serif">{escape(title)}</text>',
        f'<line x1="{ml}" y1="{mt + plot_h}" x2="{ml + plot_w}" y2="{mt + plot_h}" '
        'stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + plot_h}" stroke="black"/>',
        f'<text x="{ml + plot_w / 2:.1f}" y="{height - 12}" text-anchor="middle" '
        f'font-size="13" font-family="sans-serif">{escape(xlabel)}</text>',
        f'<text x="18" y="{mt + plot_h / 2:.1f}" text-anchor="middle" font-size="13" '
        f'font-family="sans-serif" transform="rotate(-90 18 {mt + plot_h / 2:.1f})">'
        f"{escape(ylabel)}</text>",
    ]
    for i in range(6):
        xv = xmax * i / 5.0
        yv = ymax * i / 5.0
        lines.append(
            f'<line x1="{sx(xv):.2f}" y1="{mt + plot_h}" x2="{sx(xv):.2f}" '
            f'y2="{mt + plot_h + 5}" stroke="black"/>'
        )
        lines.append(
            f'<text x="{sx(xv):.2f}" y="{mt + plot_h + 20}" text-anchor="middle" '
            f'font-size="11" font-family="sans-serif">{xv:.0f}</text>'
        )
        lines.append(
            f'<line x1="{ml - 5}" y1="{sy(yv):.2f}" x2="{ml}" y2="{sy(yv):.2f}" stroke="black"/>'
        )
        lines.append(
            f'<text x="{ml - 8}" y="{sy(yv) + 4:.2f}" text-anchor="end" font-size="11" '
            f'font-family="sans-serif">{yv:.2f}</text>'
        )
    for s in series:
        points = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(s["xs"], s["ys"]))
        dash = ' stroke-dasharray="6,4"' if s.get("dash") else ""
        lines.append(
            f'<polyline fill="none" stroke="{s["color"]}" stroke-width="1.8"{dash} '
            f'points="{points}"/>'
        )
    ly = mt + 10
    for s in series:
        lines.append(
            f'<line x1="{ml + plot_w - 150}" y1="{ly}" x2="{ml + plot_w - 120}" y2="{ly}" '
            f'stroke="{s["color"]}" stroke-width="1.8"'
            + (' stroke-dasharray="6,4"' if s.get("dash") else "")
            + "/>"
        )
        lines.append(
            f'<text x="{ml + plot_w - 114}" y="{ly + 4}" font-size="11" '
            f'font-family="sans-serif">{escape(s["label"])}</text>'
        )
        ly += 16
    lines.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")


def cmd_curves(args) -> int:
    labels = args.labels.split(",") if args.labels else []
    if labels and len(labels) != len(args.predictions):
        raise ParseError("--labels must name every predictions file")
    series = []
    csv_rows = []
    for i, path in enumerate(args.predictions):
        label = labels[i] if labels else Path(path).stem
        preds = uq_metrics.load_predictions(path)
        curve = uq_metrics.sparsification(preds)
        oracle = uq_metrics.oracle_curve(preds)
        color = _PALETTE[i % len(_PALETTE)]
        series.append(
            {"label": label, "xs": curve.fractions, "ys": curve.errors, "color": color}
        )
        series.append(
            {
                "label": f"{label}-oracle",
                "xs": curve.fractions,
                "ys": oracle,
                "color": color,
                "dash": True,
            }
        )
        for x, err in zip(curve.fractions, curve.errors):
            csv_rows.append(f"{label},{x:.0f},{err!r}")
        for x, err in zip(curve.fractions, oracle):
            csv_rows.append(f"{label}-oracle,{x:.0f},{err!r}")
    out_csv = args.out_csv or "curves.csv"
    with open(out_csv, "w", encoding="ascii") as fh:
        fh.write("method,x_percent,mean_error_mm\n")
        fh.write("\n".join(csv_rows))
        fh.write("\n")
    out_svg = args.out_svg or "curves.svg"
    _write_svg(
        out_svg,
        series,
        title="Sparsification curves",
        xlabel="most-certain fraction kept (%)",
        ylabel="mean joint error (mm)",
    )
    print(f"wrote {out_csv} and {out_svg} ({len(args.predictions)} method(s))")
    return EXIT_OK


# --------------------------------------------------------------- paramcount


def cmd_paramcount(args) -> int:
    d_f = args.d_f if args.d_f is not None else 1024
    d_o = args.d_o if args.d_o is not None else 63
    print(f"head parameter counts for d_f={d_f}, d_o={d_o} (biases excluded)")
    print(f"{'head':<14}{'params':>12}{'approx':>10}")
    for kind in net.HEAD_KINDS:
        count = net.head_param_count(kind, d_f, d_o)
        print(f"{kind:<14}{count:>12}{count / 1e6:>9.3f}M")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="handuq",
        description="Synthetic benchmark for correlation-aware aleatoric uncertainty "
        "in multi-joint regression.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    common.add_argument("--config", type=str, default=None, help="JSON config file")

    p_gen = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    p_gen.add_argument("--n", type=_positive_int, default=None, help="number of samples")
    p_gen.add_argument("--out", type=str, default=None, help="output dataset path")
    p_gen.add_argument("--base-var", dest="base_var", type=float, default=None)
    p_gen.add_argument("--occ-gain", dest="occ_gain", type=float, default=None)
    p_gen.add_argument("--coupling", type=float, default=None)
    p_gen.add_argument("--fixed-occ", dest="fixed_occ", type=float, default=None)
    p_gen.set_defaults(func=cmd_generate)

    p_train = sub.add_parser("train", parents=[common], help="train a head on a dataset")
    p_train.add_argument("--dataset", type=str, default=None)
    p_train.add_argument("--out", type=str, default=None, help="checkpoint path")
    p_train.add_argument("--trace-out", dest="trace_out", type=str, default=None)
    p_train.add_argument("--head", choices=net.HEAD_KINDS, default=None)
    p_train.add_argument("--iters", type=_positive_int, default=None)
    p_train.add_argument("--batch-size", dest="batch_size", type=_positive_int, default=None)
    p_train.add_argument("--lr", type=float, default=None)
    p_train.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)
    p_train.add_argument("--beta1", type=float, default=None)
    p_train.add_argument("--beta2", type=float, default=None)
    p_train.add_argument("--adam-eps", dest="adam_eps", type=float, default=None)
    p_train.add_argument("--lambda-nll", dest="lambda_nll", type=float, default=None)
    p_train.add_argument("--lambda-mse", dest="lambda_mse", type=float, default=None)
    p_train.add_argument("--n-samples", dest="n_samples", type=_positive_int, default=None)
    p_train.add_argument("--d-f", dest="d_f", type=_positive_int, default=None)
    p_train.add_argument("--hidden", type=_hidden_list, default=None)
    p_train.add_argument("--holdout", type=_nonneg_int, default=None)
    p_train.add_argument(
        "--freeze-w", dest="freeze_w", action=argparse.BooleanOptionalAction, default=None,
        help="keep the shared mixing matrix at identity (no-linear-layer ablation)",
    )
    p_train.add_argument(
        "--freeze-sigma-mse",
        dest="freeze_sigma_mse",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="block sample-MSE gradients into the variance head",
    )
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", type=str, default=None)
    p_eval.add_argument("--dataset", type=str, default=None)
    p_eval.add_argument("--out-dir", dest="out_dir", type=str, default=None)
    p_eval.add_argument("--skip", type=_nonneg_int, default=None)
    p_eval.add_argument("--limit", type=_positive_int, default=None)
    p_eval.add_argument(
        "--oracle", action=argparse.BooleanOptionalAction, default=None,
        help="also rank by the generative-noise oracle",
    )
    p_eval.add_argument(
        "--per-sample-curve",
        dest="per_sample_curve",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="additionally average per-sample sparsification curves",
    )
    p_eval.set_defaults(func=cmd_eval)

    p_curves = sub.add_parser("curves", parents=[common], help="plot sparsification curves")
    p_curves.add_argument("predictions", nargs="+", help="predictions.csv files")
    p_curves.add_argument("--labels", type=str, default=None, help="comma-separated labels")
    p_curves.add_argument("--out-csv", dest="out_csv", type=str, default=None)
    p_curves.add_argument("--out-svg", dest="out_svg", type=str, default=None)
    p_curves.set_defaults(func=cmd_curves)

    p_pc = sub.add_parser("paramcount", parents=[common], help="head parameter-count table")
    p_pc.add_argument("--d-f", dest="d_f", type=_positive_int, default=None)
    p_pc.add_argument("--d-o", dest="d_o", type=_positive_int, default=None)
    p_pc.set_defaults(func=cmd_paramcount)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (TrainingDiverged, NotPositiveDefinite, NonInvertiblePrecision) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except IncompatibleCheckpoint as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except HanduqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
