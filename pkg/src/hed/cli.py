"""Command-line entry point: synth, train, infer, eval, gradcheck, ablate.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .config import ConfigError, NetConfig, TrainConfig, dump_config, load_config
from .data import CorpusError, annotator_key, consensus, load_corpus, save_corpus, synth_corpus
from .evaluate import DEFAULT_TOLERANCE, combine, evaluate
from .gradcheck import gradcheck
from .losses import LabelError
from .model import WeightsFormatError, load, predict, save
from .netpbm import FormatError, read_pfm, read_pnm, write_pfm, write_pgm
from .tensor import ShapeError
from .train import TrainingDiverged, evaluation_losses, make_samples, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

logger = logging.getLogger("hed")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# config resolution ------------------------------------------------------------

_NET_KEYS = set(NetConfig.__dataclass_fields__)
_TRAIN_KEYS = set(TrainConfig.__dataclass_fields__)


def _split_overrides(items: Sequence[str]) -> tuple:
    net, tr = {}, {}
    for item in items or ():
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip().replace("-", "_")
        if key in _NET_KEYS:
            net[key] = value.strip()
        elif key in _TRAIN_KEYS:
            tr[key] = value.strip()
        else:
            raise UsageError(f"unknown config key {key!r}")
    return net, tr


def resolve_configs(args) -> tuple:
    """Config file, then ``--set`` pairs in order, then named flags (last writer wins)."""
    net_over, train_over = _split_overrides(getattr(args, "set", None))
    for key in ("iterations", "seed", "learning_rate", "batch_size"):
        value = getattr(args, key, None)
        if value is not None:
            train_over[key] = value
    if getattr(args, "deep_supervision", None) is not None:
        net_over["deep_supervision"] = args.deep_supervision == "on"
    if getattr(args, "pooling", None) is not None:
        net_over["pooling_mode"] = args.pooling
    net = _load(NetConfig, getattr(args, "net_config", None), net_over)
    tr = _load(TrainConfig, getattr(args, "train_config", None), train_over)
    return net, tr


def _load(cls, path, overrides):
    if path is not None and not Path(path).is_file():
        raise DataError(f"config file not found: {path}")
    try:
        return load_config(cls, path, overrides)
    except ConfigError as exc:
        raise DataError(str(exc)) from None


def echo_config(out, **sections) -> None:
    for title, cfg in sections.items():
        if isinstance(cfg, dict):
            body = "".join(f"{k} = {v}\n" for k, v in cfg.items())
        else:
            body = dump_config(cfg)
        out.write(f"[{title}]\n{body}")
    out.flush()


def _require_corpus(path) -> list:
    if not Path(path).is_dir():
        raise DataError(f"corpus directory not found: {path}")
    corpus = load_corpus(path)
    if not corpus:
        raise DataError(f"no images under {Path(path) / 'images'}")
    return corpus


# subcommands --------------------------------------------------------------------


def cmd_synth(args, out) -> int:
    echo_config(out, synth=dict(n=args.n, size=args.size, seed=args.seed, annotators=args.annotators,
                                jitter=args.jitter, channels=args.channels, out=args.out))
    corpus = synth_corpus(args.n, size=args.size, seed=args.seed, annotators=args.annotators,
                          jitter=args.jitter, channels=args.channels)
    save_corpus(corpus, args.out)
    out.write(f"wrote {len(corpus)} images to {args.out}\n")
    return EXIT_OK


def cmd_train(args, out) -> int:
    net, tr = resolve_configs(args)
    echo_config(out, net=net, train=tr)
    corpus = _require_corpus(args.corpus)
    stats: dict = {}
    samples = make_samples(corpus, net, tr, stats)
    out.write(f"{len(corpus)} images -> {len(samples)} training samples (skipped {stats.get('skipped', 0)})\n")
    try:
        params, log = train(corpus, net, tr, samples=samples, progress_every=args.progress)
    except TrainingDiverged as exc:
        raise NumericError(str(exc)) from None
    save(params, args.out_weights)
    if args.log:
        log.write_csv(args.log)
    totals = log.totals()
    if len(totals):
        out.write(f"loss {totals[0]:.4f} -> {totals[-1]:.4f} over {len(totals)} iterations\n")
    out.write(f"weights {args.out_weights} sha256 {log.checksum} ({log.wall_clock:.1f}s)\n")
    return EXIT_OK


def _image_paths(spec) -> list:
    paths = []
    for item in spec:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(q for q in p.iterdir() if q.suffix in (".pgm", ".ppm")))
        elif p.is_file():
            paths.append(p)
        else:
            raise DataError(f"image not found: {p}")
    if not paths:
        raise DataError("no input images")
    return paths


def cmd_infer(args, out) -> int:
    net, _ = resolve_configs(args)
    echo_config(out, net=net, infer=dict(weights=args.weights, strategy=args.strategy, out=args.out))
    if not Path(args.weights).is_file():
        raise DataError(f"weights file not found: {args.weights}")
    params = load(args.weights, net)
    dest = Path(args.out)
    dest.mkdir(parents=True, exist_ok=True)
    for path in _image_paths(args.image):
        image = read_pnm(path)
        image = image if image.ndim == 3 else image[None]
        if image.shape[0] != net.input_channels:
            raise DataError(f"{path}: {image.shape[0]} channels, model expects {net.input_channels}")
        maps = predict(params, net, image[None])
        try:
            prob = combine(maps, args.strategy)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        write_pfm(dest / f"{path.stem}.pfm", prob)
        write_pgm(dest / f"{path.stem}.pgm", prob)
        out.write(f"{path.stem}: min {prob.min():.6f} max {prob.max():.6f}\n")
    return EXIT_OK


def _read_prediction(pred_dir: Path, ident: str) -> np.ndarray:
    pfm, pgm = pred_dir / f"{ident}.pfm", pred_dir / f"{ident}.pgm"
    if pfm.is_file():
        return read_pfm(pfm)
    if pgm.is_file():
        return read_pnm(pgm)
    raise DataError(f"no prediction for {ident!r} in {pred_dir}")


def load_groundtruth(gt_dir) -> dict:
    """``{id: [annotator maps]}`` from ``<gt>/groundtruth/<id>/*.pgm`` or ``<gt>/<id>/*.pgm``."""
    root = Path(gt_dir)
    if (root / "groundtruth").is_dir():
        root = root / "groundtruth"
    if not root.is_dir():
        raise DataError(f"ground-truth directory not found: {gt_dir}")
    result = {}
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(sub.glob("*.pgm"), key=annotator_key)
        if files:
            result[sub.name] = [(read_pnm(f) > 0.5).astype(np.uint8) for f in files]
    if not result:
        raise DataError(f"no annotations under {root}")
    return result


def cmd_eval(args, out) -> int:
    echo_config(out, eval=dict(pred_dir=args.pred_dir, gt_dir=args.gt_dir, tolerance=args.tolerance,
                               nms=not args.no_nms, consensus=args.consensus, strategy=args.strategy,
                               thresholds=args.thresholds, out=args.out))
    if args.tolerance <= 0:
        raise UsageError("--tolerance must be positive")
    gt = load_groundtruth(args.gt_dir)
    pred_dir = Path(args.pred_dir)
    if not pred_dir.is_dir():
        raise DataError(f"prediction directory not found: {pred_dir}")
    ids = sorted(gt)
    preds, anns = [], []
    for ident in ids:
        prob = _read_prediction(pred_dir, ident)
        if prob.shape != gt[ident][0].shape:
            raise DataError(f"{ident}: prediction {prob.shape} vs ground truth {gt[ident][0].shape}")
        if not np.all(np.isfinite(prob)):
            raise NumericError(f"{ident}: non-finite prediction values")
        preds.append(np.clip(prob, 0.0, 1.0))
        if args.consensus:
            anns.append([consensus(gt[ident], args.consensus).values])
        else:
            anns.append(gt[ident])
    thresholds = np.arange(1, args.thresholds + 1) / (args.thresholds + 1)
    summary = evaluate(preds, anns, thresholds, tolerance=args.tolerance, apply_nms=not args.no_nms,
                       strategy=args.strategy, threads=args.threads)
    dest = Path(args.out)
    dest.mkdir(parents=True, exist_ok=True)
    summary.write_pr_curve(dest / "pr_curve.csv")
    summary.write_summary(dest / "summary.csv")
    out.write(f"{len(ids)} images  ODS {summary.ods:.6f}  OIS {summary.ois:.6f}  AP {summary.ap:.6f}\n")
    return EXIT_OK


def cmd_gradcheck(args, out) -> int:
    net, _ = resolve_configs(args)
    echo_config(out, net=net, gradcheck=dict(seed=args.seed, budget=args.budget, step=args.step))
    result = gradcheck(net, seed=args.seed, budget=args.budget, step=args.step)
    for name, (count, err) in result.per_tensor.items():
        out.write(f"  {name:18s} {count:5d} checked  max rel {err:.3e}\n")
    out.write(
        f"checked {result.checked} scalars in {result.seconds:.1f}s; max relative error "
        f"{result.max_rel_error:.3e} at {result.worst_param} "
        f"(refined {result.refined}, unresolved {result.unresolved})\n"
    )
    if not result.passed(args.tol):
        raise NumericError(f"gradient mismatch: max relative error {result.max_rel_error:.3e} >= {args.tol:g}")
    return EXIT_OK


ABLATION_GRID = (("on", "max"), ("off", "max"), ("on", "average"), ("off", "average"))


def run_ablation(corpus, net: NetConfig, tr: TrainConfig, threads: int = 1, tolerance: float = DEFAULT_TOLERANCE) -> list:
    """Train the four deep-supervision x pooling variants with one seed and corpus.

    Each row holds the per-side evaluation losses on the un-augmented training
    images plus ODS/AP of the fused map and of the all-sides average.
    """
    rows = []
    ident = tr.replace(angles=1, flips=False, scales=(1.0,), resize=None)
    avg = f"average(1..{net.num_sides})"
    for ds, pool in ABLATION_GRID:
        variant = net.replace(deep_supervision=ds == "on", pooling_mode=pool)
        params, log = train(corpus, variant, tr)
        report = evaluation_losses(params, variant, make_samples(corpus, variant, ident))
        maps = [predict(params, variant, item.image[None]) for item in corpus]
        anns = [item.annotations for item in corpus]
        fuse = evaluate([m.fused for m in maps], anns, tolerance=tolerance, strategy="fuse", threads=threads)
        mean = evaluate([combine(m, avg) for m in maps], anns, tolerance=tolerance, strategy=avg, threads=threads)
        totals = log.totals()
        rows.append(dict(
            deep_supervision=ds, pooling=pool,
            **{f"side{i}_loss": v for i, v in enumerate(report.sides, 1)},
            fuse_loss=report.fuse,
            fuse_ods=fuse.ods, fuse_ap=fuse.ap, avg_ods=mean.ods, avg_ap=mean.ap,
            first_loss=float(totals[0]) if len(totals) else float("nan"),
            last_loss=float(totals[-1]) if len(totals) else float("nan"),
            checksum=log.checksum,
        ))
    return rows


def cmd_ablate(args, out) -> int:
    net, tr = resolve_configs(args)
    echo_config(out, net=net, train=tr)
    corpus = _require_corpus(args.corpus)
    try:
        rows = run_ablation(corpus, net, tr, threads=args.threads, tolerance=args.tolerance)
    except TrainingDiverged as exc:
        raise NumericError(str(exc)) from None
    cols = ["deep_supervision", "pooling"] + [k for k in rows[0] if k.endswith("_loss") or k.endswith(("_ods", "_ap"))]
    out.write(" ".join(f"{c:>16s}" for c in cols) + "\n")
    for row in rows:
        out.write(" ".join(f"{row[c]:>16s}" if isinstance(row[c], str) else f"{row[c]:16.4f}" for c in cols) + "\n")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return EXIT_OK


# parser -------------------------------------------------------------------------


def _config_flags(p, train_flags: bool = True) -> None:
    p.add_argument("--net-config", help="key = value network config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
    p.add_argument("--deep-supervision", choices=("on", "off"))
    p.add_argument("--pooling", choices=("max", "average"))
    if train_flags:
        p.add_argument("--train-config", help="key = value training config file")
        p.add_argument("--iterations", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--lr", dest="learning_rate", type=float)
        p.add_argument("--batch-size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hed", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=1, help="cap on BLAS / evaluation threads (default 1)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic annotated corpus")
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--annotators", type=int, default=5)
    p.add_argument("--jitter", type=float, default=0.1)
    p.add_argument("--channels", type=int, choices=(1, 3), default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train from a fresh initialization")
    p.add_argument("--corpus", required=True)
    _config_flags(p)
    p.add_argument("--out-weights", required=True)
    p.add_argument("--log", help="per-iteration loss CSV")
    p.add_argument("--progress", type=int, default=0, help="log every N iterations")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict edge maps for images")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", action="append", required=True, help="image file or directory, repeatable")
    p.add_argument("--out", required=True, help="output directory for <id>.pfm and <id>.pgm")
    p.add_argument("--strategy", default="fuse")
    _config_flags(p, train_flags=False)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="ODS / OIS / AP against annotations")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE, help="match radius as a fraction of the diagonal")
    p.add_argument("--out", required=True)
    p.add_argument("--strategy", default="", help="label recorded in summary.csv")
    p.add_argument("--thresholds", type=int, default=99)
    p.add_argument("--no-nms", action="store_true")
    p.add_argument("--consensus", type=int, default=0, metavar="K",
                   help="score against the single map of pixels marked by >= K annotators")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of backprop")
    _config_flags(p, train_flags=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--budget", type=int, default=5000)
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="deep supervision on/off x max/average pooling")
    p.add_argument("--corpus", required=True)
    _config_flags(p)
    p.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    p.add_argument("--out", help="CSV table path")
    p.set_defaults(func=cmd_ablate)
    return parser


def run(argv: Optional[Sequence[str]] = None, out=None) -> int:
    out = out if out is not None else sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"hed: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.command is None:
        print("hed: usage error: missing subcommand", file=sys.stderr)
        return EXIT_USAGE
    if args.threads < 1:
        print("hed: usage error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args, out)
    except UsageError as exc:
        print(f"hed: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"hed: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"hed: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CorpusError, FormatError, WeightsFormatError, LabelError, ShapeError, ConfigError, OSError, ValueError) as exc:
        print(f"hed: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
