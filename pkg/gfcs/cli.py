from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, NoReturn, Optional, Sequence

import numpy as np

from .__version__ import __version__
from .data import (
    GENERATORS,
    LabeledDataset,
    gen_blobs,
    gen_minimages,
    load_dataset,
    save_dataset,
    split_dataset,
)
from .directions import LOSSES
from .engine import (
    DEFAULT_BUDGET,
    DEFAULT_EPSILON,
    AttackConfig,
    pick_target_class,
    write_trace,
)
from .errors import GfcsError, InvalidInputError
from .harness import (
    DEFAULT_BOOTSTRAP,
    METHODS,
    AttackRunner,
    epsilon_sweep,
    load_campaign_spec,
    load_records,
    median_queries,
    prepare_fixed_basis,
    run_campaign,
    success_rate,
    write_reports,
    write_sweep,
)
from .models import TrainSpec, adapt_domain, load_model, save_model, train_classifier
from .numerics import RandomStream, bilinear_resize
from .selfcheck import run_selfcheck

logger = logging.getLogger(__name__)

USAGE_ERROR = 1
RUNTIME_ERROR = 2


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


def _epsilons(text: str) -> List[float]:
    try:
        values = [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid step length list: {text!r}")
    if not values or any(not v > 0 for v in values):
        raise argparse.ArgumentTypeError(f"step lengths must be positive: {text!r}")
    return values


def _clamp(text: str):
    try:
        low, high = (float(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LOW,HIGH: {text!r}")
    return (low, high)


def _size(text: str):
    try:
        height, width = (int(part) for part in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HEIGHTxWIDTH: {text!r}")
    return (height, width)


def parse_args(args: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = ArgumentParser(
        "gfcs",
        description="Surrogate-guided black-box attacks on score-based classifiers.",
    )
    parser.add_argument("-V", "--version", action="version", version=__version__)
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument(
        "-q", "--quiet", action="store_true", help="warnings only, no progress bars"
    )
    commands = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    gen_data = commands.add_parser("gen-data", help="generate a synthetic dataset")
    gen_data.add_argument("--generator", choices=GENERATORS, required=True)
    gen_data.add_argument("--seed", type=int, default=0, help="(default: 0)")
    gen_data.add_argument("-o", "--out", type=Path, required=True, help="dataset file")
    gen_data.add_argument("--classes", type=int, default=10, help="(default: 10)")
    gen_data.add_argument("--per-class", type=int, default=50, help="(default: 50)")
    gen_data.add_argument(
        "--dim", type=int, default=20, help="blob dimension (default: 20)"
    )
    gen_data.add_argument(
        "--spread", type=float, default=0.1, help="blob noise scale (default: 0.1)"
    )
    gen_data.add_argument("--height", type=int, default=16, help="(default: 16)")
    gen_data.add_argument("--width", type=int, default=16, help="(default: 16)")
    gen_data.add_argument("--channels", type=int, default=3, help="(default: 3)")
    gen_data.add_argument(
        "--noise", type=float, default=0.1, help="image pixel noise (default: 0.1)"
    )

    train = commands.add_parser("train", help="train a classifier on a dataset")
    train.add_argument("--data", type=Path, required=True, help="dataset file")
    train.add_argument(
        "--arch", required=True, help="preset name or layer string, e.g. conv-a"
    )
    train.add_argument("--seed", type=int, default=0, help="(default: 0)")
    train.add_argument("-o", "--out", type=Path, required=True, help="model file")
    train.add_argument("--epochs", type=int, default=TrainSpec.epochs)
    train.add_argument("--lr", type=float, default=TrainSpec.learning_rate)
    train.add_argument("--momentum", type=float, default=TrainSpec.momentum)
    train.add_argument("--batch-size", type=int, default=TrainSpec.batch_size)
    train.add_argument(
        "--test-fraction",
        type=float,
        default=0.2,
        help="held-out fraction for the reported test accuracy (default: 0.2)",
    )
    train.add_argument(
        "--resize",
        type=_size,
        metavar="HxW",
        help="train at this resolution on bilinearly resized images",
    )

    attack = commands.add_parser("attack", help="attack a single dataset example")
    attack.add_argument("--victim", type=Path, required=True, help="victim model file")
    attack.add_argument(
        "--surrogates", type=Path, nargs="*", default=[], help="surrogate model files"
    )
    attack.add_argument("--data", type=Path, required=True, help="dataset file")
    attack.add_argument("--example-index", type=int, default=0, help="(default: 0)")
    attack.add_argument("--method", choices=METHODS, default="gfcs")
    attack.add_argument(
        "--epsilon", type=float, default=DEFAULT_EPSILON, help="step length"
    )
    attack.add_argument("--nu", type=float, help="norm bound (default: sqrt(0.001*D))")
    attack.add_argument("--budget", type=int, default=DEFAULT_BUDGET)
    target = attack.add_mutually_exclusive_group()
    target.add_argument(
        "--targeted", action="store_true", help="draw a random target class"
    )
    target.add_argument("--target", type=int, help="attack towards this class")
    attack.add_argument(
        "--loss", choices=LOSSES, help="(default: targeted-log if targeted, else margin)"
    )
    attack.add_argument("--clamp", type=_clamp, metavar="LOW,HIGH", help="box clamp")
    attack.add_argument("--freq-count", type=int, help="DCT frequencies per axis")
    attack.add_argument(
        "--dct-order", choices=("random", "low-frequency-first"), default="random"
    )
    attack.add_argument("--pca-k", type=int, default=100)
    attack.add_argument("--seed", type=int, default=0, help="(default: 0)")
    attack.add_argument("--trace", type=Path, help="write per-step records to FILE")

    campaign = commands.add_parser("campaign", help="run a campaign from a spec file")
    campaign.add_argument("--spec", type=Path, required=True, help="campaign spec file")
    campaign.add_argument("--workers", type=int, help="worker process cap")
    campaign.add_argument("--output", type=Path, help="override the output directory")

    sweep = commands.add_parser("sweep", help="campaigns over several step lengths")
    sweep.add_argument("--spec", type=Path, required=True, help="campaign spec file")
    sweep.add_argument(
        "--epsilons", type=_epsilons, required=True, help="comma-separated, e.g. 0.5,1,2"
    )
    sweep.add_argument("--workers", type=int, help="worker process cap")
    sweep.add_argument("--output", type=Path, help="override the output directory")

    report = commands.add_parser("report", help="recompute aggregates from records")
    report.add_argument("--records", type=Path, required=True, help="records.jsonl")
    report.add_argument("--output", type=Path, help="(default: next to the records)")
    report.add_argument("--bootstrap", type=int, default=DEFAULT_BOOTSTRAP)
    report.add_argument("--seed", type=int, default=0, help="bootstrap seed")

    selfcheck = commands.add_parser("selfcheck", help="run the numeric invariant suite")
    selfcheck.add_argument(
        "--models", type=Path, nargs="*", default=[], help="model files to load-check"
    )
    selfcheck.add_argument("--seed", type=int, default=0, help="(default: 0)")

    return parser.parse_args(args)


def cmd_gen_data(args: argparse.Namespace) -> int:
    if args.generator == "blobs":
        data = gen_blobs(args.seed, args.dim, args.classes, args.per_class, args.spread)
    else:
        data = gen_minimages(
            args.seed,
            args.height,
            args.width,
            args.channels,
            args.classes,
            args.per_class,
            args.noise,
        )
    save_dataset(data, args.out)
    print(json.dumps(data.metadata(), sort_keys=True))
    return 0


def _resized(data: LabeledDataset, height: int, width: int) -> LabeledDataset:
    if len(data.shape) != 3:
        raise InvalidInputError(f"cannot resize items of shape {data.shape}")
    images = bilinear_resize(data.inputs.reshape(-1, *data.shape), height, width)
    return LabeledDataset(
        images.reshape(len(data), -1),
        data.labels,
        (height, width, data.shape[2]),
        data.num_classes,
        data.generator,
        data.seed,
        data.ids,
    )


def cmd_train(args: argparse.Namespace) -> int:
    data = load_dataset(args.data)
    if args.resize is not None:
        data = _resized(data, *args.resize)
    spec = TrainSpec(args.lr, args.momentum, args.epochs, args.batch_size, args.seed)
    train_data, test_data = split_dataset(data, args.test_fraction, args.seed)
    model = train_classifier(
        train_data, args.arch, spec, test_data if len(test_data) else None
    )
    model.metadata["architecture"] = args.arch
    save_model(model, args.out)
    print(f"train_accuracy: {model.metadata['train_accuracy']:.4f}")
    if "test_accuracy" in model.metadata:
        print(f"test_accuracy: {model.metadata['test_accuracy']:.4f}")
    return 0


def cmd_attack(args: argparse.Namespace) -> int:
    victim = load_model(args.victim)
    surrogates = [adapt_domain(load_model(p), victim.input_shape) for p in args.surrogates]
    data = load_dataset(args.data)
    if not 0 <= args.example_index < len(data):
        raise InvalidInputError(f"example index out of range: {args.example_index!r}")
    x_in = data.inputs[args.example_index]
    scores = victim.forward_scores(x_in)
    label = int(data.labels[args.example_index])
    if int(np.argmax(scores)) != label:
        raise InvalidInputError(
            f"example {args.example_index} is misclassified by the victim"
        )
    stream = RandomStream(args.seed)
    target = args.target
    if args.targeted:
        target = pick_target_class(stream.child(0), label, victim.num_classes)
    cfg = AttackConfig(
        epsilon=args.epsilon,
        nu=args.nu,
        budget=args.budget,
        target=target,
        loss=args.loss or ("targeted-log" if target is not None else "margin"),
        clamp=args.clamp,
        trace=args.trace is not None,
    )
    runner = AttackRunner(
        args.method,
        victim,
        surrogates,
        freq_count=args.freq_count,
        dct_order=args.dct_order,
        fixed_basis=prepare_fixed_basis(
            args.method, surrogates, data, [args.example_index], args.seed, args.pca_k
        ),
    )
    nu = cfg.radius(victim.input_size)
    print(
        f"# method={args.method} epsilon={cfg.epsilon:g} budget={cfg.budget}"
        f" nu={nu:.6g}{'' if args.nu is not None else ' (sqrt(0.001*D))'}"
        f" target={target}"
    )
    result = runner.run(x_in, scores, cfg, stream.child(1))
    print(json.dumps(result.summary(), sort_keys=True))
    if args.trace is not None and result.trace is not None:
        write_trace(args.trace, result.trace)
    return 0


def _campaign_overrides(args: argparse.Namespace):
    overrides = {}
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.output is not None:
        overrides["output"] = args.output
    return overrides


def cmd_campaign(args: argparse.Namespace) -> int:
    spec = load_campaign_spec(args.spec, **_campaign_overrides(args))
    records = run_campaign(spec, progress=not args.quiet)
    write_reports(
        records, spec.output, spec.method, spec.bootstrap, spec.seed, budget=spec.budget
    )
    estimate = median_queries(records, spec.bootstrap, spec.seed)
    print(
        f"{spec.method}: median={'undefined' if estimate.median is None else estimate.median}"
        f" se={estimate.se:.4g} success_rate={success_rate(records):.4f}"
        f" n={len(records)}"
    )
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    spec = load_campaign_spec(args.spec, **_campaign_overrides(args))
    rows = epsilon_sweep(spec, args.epsilons, progress=not args.quiet)
    write_sweep(rows, Path(spec.output) / "sweep.csv", spec.bootstrap, spec.seed)
    for row in rows:
        print(
            f"epsilon={row.epsilon:g}:"
            f" median={'undefined' if row.median is None else row.median}"
            f" se={row.se:.4g} success_rate={row.success_rate:.4f} n={row.n}"
        )
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    records = load_records(args.records)
    if not records:
        raise InvalidInputError(f"no records in {args.records}")
    methods = sorted({r.method for r in records})
    output = args.output or args.records.parent
    write_reports(records, output, ",".join(methods), args.bootstrap, args.seed)
    print(f"wrote summary.csv, cdf.csv and breakdown.csv to {output}")
    return 0


def cmd_selfcheck(args: argparse.Namespace) -> int:
    results = run_selfcheck(args.models, args.seed)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        detail = f"  {r.detail}" if r.detail else ""
        print(f"{r.name:<{width}}  {status}  {r.error:.3e} <= {r.tolerance:.1e}{detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.error("failed checks: %s", ", ".join(failed))
        return RUNTIME_ERROR
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "attack": cmd_attack,
    "campaign": cmd_campaign,
    "sweep": cmd_sweep,
    "report": cmd_report,
    "selfcheck": cmd_selfcheck,
}


def main(args: Optional[Sequence[str]] = None) -> int:
    parsed_args = parse_args(args)
    level = logging.INFO
    if parsed_args.verbose:
        level = logging.DEBUG
    elif parsed_args.quiet:
        level = logging.WARNING
    logging.basicConfig(
        level=level,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        datefmt="%H:%M:%S",
    )
    try:
        return COMMANDS[parsed_args.command](parsed_args)
    except (GfcsError, OSError) as e:
        logger.error("%s", e)
        return RUNTIME_ERROR
