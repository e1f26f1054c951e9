"""Command-line interface.

Subcommands: decompose (factorize a model file or the built-in preset and
print the compression report), probe (sensitivity table on the built-in
task), allocate (losses + budgets -> ranks file), train (run a compression
schedule on the built-in task), verify (randomized equivalence and
round-trip suites).

Reports go to stdout as tab-separated tables; diagnostics go to stderr.
Exit codes: 0 success, 1 unreadable/missing file, 2 invalid ranks or
arguments, 3 training diverged, 4 verification failure.

Defaults live in ``DEFAULTS`` and can be overridden by a JSON config file
(``--config``), which is in turn overridden by explicit flags.
"""

import argparse
import json
import sys

import numpy as np

from .allocator import SensitivityReport, allocate_ranks, measure_sensitivity
from .conv import MultiplyCounter
from .data import make_synthetic_dataset
from .network import (
    ModelFormatError,
    NetworkSpec,
    count_params,
    decompose_layer,
    decomposable_layers,
    forward,
    load,
    replace_layer,
    save,
)
from .presets import ALEXNET_DEFAULT_RANKS, alexnet, alexnet_decomposed, toy_cnn
from .train import (
    DivergedError,
    TrainConfig,
    evaluate,
    finetune,
    iterative_compress,
    oneshot_compress,
)
from .verify import corruption_suite, equivalence_suite, roundtrip_suite

DEFAULTS = {
    "seed": 0,
    "probe_rank": 5,
    "probe_epochs": 1,
    "baseline_epochs": 16,
    "baseline_lr": 0.05,
    "finetune_lr": 0.02,
    "epochs_per_stage": 4,
    "lr_step": 3,
    "batch_size": 32,
    "rank_fraction": 0.25,
    "verify_cases": 200,
    "verify_trips": 100,
}

EXIT_OK = 0
EXIT_FILE = 1
EXIT_ARGS = 2
EXIT_DIVERGED = 3
EXIT_VERIFY = 4


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _read_ranks_file(path) -> dict:
    ranks = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("layer\t"):
                continue
            name, value = line.split("\t")
            ranks[name] = int(value)
    return ranks


def _write_ranks(ranks: dict, stream) -> None:
    stream.write("layer\trank\n")
    for name, rank in ranks.items():
        stream.write(f"{name}\t{rank}\n")


def _parse_budgets(text: str) -> dict:
    budgets = {}
    for part in text.split(","):
        key, _, value = part.partition("=")
        if not value:
            raise ValueError(f"bad budget component {part!r}; want group=N")
        budgets[key.strip()] = int(value)
    return budgets


def _uniform_budget_ranks(net: NetworkSpec, budgets: dict) -> dict:
    """Spread each group budget uniformly when no sensitivity data exists."""
    from .network import Conv, Fc

    groups = {"conv": [], "fc": []}
    for layer in net.layers:
        if isinstance(layer, Conv):
            groups["conv"].append(layer.name)
        elif isinstance(layer, Fc):
            groups["fc"].append(layer.name)
    ranks = {}
    for group, names in groups.items():
        if not names:
            continue
        if group not in budgets:
            raise ValueError(f"no budget for group {group!r}")
        budget = budgets[group]
        if budget < len(names):
            raise ValueError(f"budget {budget} below {len(names)} {group} layers")
        share = budget // len(names)
        extra = budget - share * len(names)
        for i, name in enumerate(names):
            ranks[name] = share + (1 if i < extra else 0)
    return ranks


def _instrumented_mults(net: NetworkSpec, seed: int) -> int:
    rng = np.random.default_rng(seed)
    counter = MultiplyCounter()
    forward(net, rng.standard_normal(net.input_shape), counter)
    return counter.count


def _print_comparison(original: NetworkSpec, compressed: NetworkSpec, instrument_seed=None):
    report = count_params(compressed)
    base = count_params(original)
    print(report.to_table())
    ratio_w = base.total_original_params / report.total_compressed_params
    ratio_m = base.total_original_mults / report.total_compressed_mults
    print(f"original_weights\t{base.total_original_params}")
    print(f"compressed_weights\t{report.total_compressed_params}")
    print(f"weight_ratio\t{ratio_w:.4f}")
    print(f"original_mults\t{base.total_original_mults}")
    print(f"compressed_mults\t{report.total_compressed_mults}")
    print(f"mult_ratio\t{ratio_m:.4f}")
    if instrument_seed is not None:
        m_orig = _instrumented_mults(original, instrument_seed)
        m_comp = _instrumented_mults(compressed, instrument_seed)
        print(f"instrumented_mult_ratio\t{m_orig / m_comp:.4f}")


def cmd_decompose(args) -> int:
    if args.arch == "alexnet":
        ranks = dict(ALEXNET_DEFAULT_RANKS)
        if args.ranks_file:
            try:
                ranks.update(_read_ranks_file(args.ranks_file))
            except OSError as exc:
                return _fail(EXIT_FILE, f"cannot read ranks file: {exc}")
            except ValueError as exc:
                return _fail(EXIT_ARGS, f"bad ranks file: {exc}")
        original = alexnet()
        try:
            compressed = alexnet_decomposed(ranks)
        except (KeyError, ValueError) as exc:
            return _fail(EXIT_ARGS, f"invalid ranks: {exc}")
        _print_comparison(
            original, compressed,
            instrument_seed=None if args.analytic_only else args.seed,
        )
        if args.model_out:
            save(compressed, args.model_out)
        return EXIT_OK

    if not args.model_in:
        return _fail(EXIT_ARGS, "need a model file (--model-in) or --arch alexnet")
    try:
        original = load(args.model_in)
    except OSError as exc:
        return _fail(EXIT_FILE, f"cannot read {args.model_in}: {exc}")
    except ModelFormatError as exc:
        return _fail(EXIT_FILE, f"cannot parse {args.model_in}: {exc}")

    names = decomposable_layers(original)
    if args.ranks_file:
        try:
            ranks = _read_ranks_file(args.ranks_file)
        except OSError as exc:
            return _fail(EXIT_FILE, f"cannot read ranks file: {exc}")
        except ValueError as exc:
            return _fail(EXIT_ARGS, f"bad ranks file: {exc}")
    elif args.rank_budget:
        try:
            ranks = _uniform_budget_ranks(original, _parse_budgets(args.rank_budget))
        except ValueError as exc:
            return _fail(EXIT_ARGS, str(exc))
    else:
        return _fail(EXIT_ARGS, "need --ranks-file or --rank-budget")

    unknown = set(ranks) - set(names)
    if unknown:
        return _fail(EXIT_ARGS, f"ranks name unknown layers: {sorted(unknown)}")
    # Layers absent from the ranks file are left in their original form.
    targets = [n for n in names if n in ranks]
    net = original
    for index, name in enumerate(targets):
        try:
            factors = decompose_layer(net.layer(name), ranks[name], seed=args.seed + index)
        except ValueError as exc:
            return _fail(EXIT_ARGS, f"invalid rank for {name}: {exc}")
        net = replace_layer(net, name, factors)
    _print_comparison(original, net, instrument_seed=None if args.analytic_only else args.seed)
    if args.model_out:
        save(net, args.model_out)
    return EXIT_OK


def _trained_baseline(args):
    data = make_synthetic_dataset(seed=args.seed)
    cfg = TrainConfig(
        learning_rate=args.baseline_lr, batch_size=args.batch_size,
        lr_step=12, seed=args.seed,
    )
    net, _ = finetune(toy_cnn(seed=args.seed), data, cfg, epochs=args.baseline_epochs)
    return data, net


def cmd_probe(args) -> int:
    data, net = _trained_baseline(args)

    def eval_fn(candidate):
        _, acc = evaluate(candidate, data.test_x, data.test_y)
        return acc

    cfg = TrainConfig(
        learning_rate=args.finetune_lr, batch_size=args.batch_size,
        lr_step=args.lr_step, seed=args.seed,
    )
    report = measure_sensitivity(
        net, eval_fn, probe_rank=args.probe_rank, data=data, cfg=cfg,
        epochs=args.probe_epochs, seed=args.seed,
    )
    sys.stdout.write(report.to_table())
    return EXIT_OK


def cmd_allocate(args) -> int:
    try:
        with open(args.report, "r", encoding="utf-8") as fh:
            report = SensitivityReport.from_table(fh.read())
    except OSError as exc:
        return _fail(EXIT_FILE, f"cannot read report: {exc}")
    except ValueError as exc:
        return _fail(EXIT_FILE, f"cannot parse report: {exc}")
    try:
        budgets = _parse_budgets(args.budget)
        ranks = allocate_ranks(report, budgets)
    except ValueError as exc:
        return _fail(EXIT_ARGS, str(exc))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            _write_ranks(ranks, fh)
    else:
        _write_ranks(ranks, sys.stdout)
    return EXIT_OK


def _toy_mid_ranks(net: NetworkSpec, fraction: float) -> dict:
    """Ranks at roughly `fraction` of each layer's full (lossless) rank."""
    from math import ceil

    from .network import Conv, Fc

    ranks = {}
    for layer in net.layers:
        if isinstance(layer, Conv):
            t, s_g, d, _ = layer.spec.kernel_shape
            full = min(s_g * d * d, s_g * t, d * d * t)
        elif isinstance(layer, Fc):
            full = min(layer.out_features, layer.in_features)
        else:
            continue
        ranks[layer.name] = max(1, ceil(fraction * full))
    return ranks


def cmd_train(args) -> int:
    data, baseline = _trained_baseline(args)
    _, base_acc = evaluate(baseline, data.test_x, data.test_y)
    if args.ranks_file:
        try:
            ranks = _read_ranks_file(args.ranks_file)
        except OSError as exc:
            return _fail(EXIT_FILE, f"cannot read ranks file: {exc}")
    else:
        ranks = _toy_mid_ranks(baseline, args.rank_fraction)
    cfg = TrainConfig(
        learning_rate=args.finetune_lr, batch_size=args.batch_size,
        epochs_per_stage=args.epochs_per_stage, lr_step=args.lr_step,
        seed=args.seed,
    )
    schedule = iterative_compress if args.schedule == "iterative" else oneshot_compress
    try:
        net, log = schedule(baseline, data, ranks, cfg)
    except (ValueError,) as exc:
        return _fail(EXIT_ARGS, str(exc))
    sys.stdout.write(log.to_text())
    _, final_acc = evaluate(net, data.test_x, data.test_y)
    print(f"baseline_accuracy\t{base_acc!r}")
    print(f"final_accuracy\t{final_acc!r}")
    if args.model_out:
        save(net, args.model_out)
    if log.diverged:
        return _fail(EXIT_DIVERGED, "a fine-tuning stage diverged (log above)")
    return EXIT_OK


def cmd_verify(args) -> int:
    failed = False
    eq = equivalence_suite(cases=args.verify_cases, seed=args.seed)
    status = "ok" if eq.passed else "FAIL"
    print(f"equivalence\t{eq.cases} cases\tmax_rel_err {eq.max_rel_err:.3e}\t{status}")
    failed |= not eq.passed

    trips = roundtrip_suite(trips=args.verify_trips, seed=args.seed)
    print(f"roundtrip\t{args.verify_trips} trips\t{len(trips)} failures\t"
          f"{'ok' if not trips else 'FAIL'}")
    for line in trips:
        print(f"  {line}", file=sys.stderr)
    failed |= bool(trips)

    bad = corruption_suite(seed=args.seed)
    print(f"corruption\t{len(bad)} failures\t{'ok' if not bad else 'FAIL'}")
    for line in bad:
        print(f"  {line}", file=sys.stderr)
    failed |= bool(bad)
    return EXIT_VERIFY if failed else EXIT_OK


def build_parser(defaults: dict) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cpcompress",
        description="Compress small CNNs by factorizing convolutions and "
        "fully connected layers into low-rank stages.",
    )
    parser.add_argument("--config", help="JSON file overriding built-in defaults")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=defaults["seed"])

    p = sub.add_parser("decompose", help="factorize a model and report savings")
    common(p)
    p.add_argument("--model-in", help="input model file")
    p.add_argument("--model-out", help="where to write the factorized model")
    p.add_argument("--arch", choices=["alexnet"], help="use a built-in preset")
    p.add_argument("--ranks-file", help="tab-separated layer->rank file")
    p.add_argument("--rank-budget", help="per-group budgets, e.g. conv=750,fc=900")
    p.add_argument("--analytic-only", action="store_true",
                   help="skip the instrumented forward pass")

    p = sub.add_parser("probe", help="sensitivity table on the built-in task")
    common(p)
    p.add_argument("--probe-rank", type=int, default=defaults["probe_rank"])
    p.add_argument("--probe-epochs", type=int, default=defaults["probe_epochs"])
    p.add_argument("--baseline-epochs", type=int, default=defaults["baseline_epochs"])
    p.add_argument("--baseline-lr", type=float, default=defaults["baseline_lr"])
    p.add_argument("--finetune-lr", type=float, default=defaults["finetune_lr"])
    p.add_argument("--lr-step", type=int, default=defaults["lr_step"])
    p.add_argument("--batch-size", type=int, default=defaults["batch_size"])

    p = sub.add_parser("allocate", help="turn a sensitivity report into ranks")
    common(p)
    p.add_argument("--report", required=True, help="sensitivity table file")
    p.add_argument("--budget", required=True, help="e.g. conv=750,fc=900")
    p.add_argument("--out", help="ranks file to write (default stdout)")

    p = sub.add_parser("train", help="run a compression schedule on the built-in task")
    common(p)
    p.add_argument("--schedule", choices=["iterative", "oneshot"], default="iterative")
    p.add_argument("--ranks-file")
    p.add_argument("--rank-fraction", type=float, default=defaults["rank_fraction"])
    p.add_argument("--baseline-epochs", type=int, default=defaults["baseline_epochs"])
    p.add_argument("--baseline-lr", type=float, default=defaults["baseline_lr"])
    p.add_argument("--finetune-lr", type=float, default=defaults["finetune_lr"])
    p.add_argument("--epochs-per-stage", type=int, default=defaults["epochs_per_stage"])
    p.add_argument("--lr-step", type=int, default=defaults["lr_step"])
    p.add_argument("--batch-size", type=int, default=defaults["batch_size"])
    p.add_argument("--model-out")

    p = sub.add_parser("verify", help="randomized equivalence and round-trip suites")
    common(p)
    p.add_argument("--verify-cases", type=int, default=defaults["verify_cases"])
    p.add_argument("--verify-trips", type=int, default=defaults["verify_trips"])

    return parser


_COMMANDS = {
    "decompose": cmd_decompose,
    "probe": cmd_probe,
    "allocate": cmd_allocate,
    "train": cmd_train,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    defaults = dict(DEFAULTS)
    # A config file changes defaults only, so flags still win.
    if "--config" in argv:
        idx = argv.index("--config")
        if idx + 1 >= len(argv):
            print("error: --config needs a path", file=sys.stderr)
            return EXIT_ARGS
        try:
            with open(argv[idx + 1], "r", encoding="utf-8") as fh:
                overlay = json.load(fh)
        except OSError as exc:
            print(f"error: cannot read config: {exc}", file=sys.stderr)
            return EXIT_FILE
        except json.JSONDecodeError as exc:
            print(f"error: bad config: {exc}", file=sys.stderr)
            return EXIT_ARGS
        unknown = set(overlay) - set(defaults)
        if unknown:
            print(f"error: unknown config keys {sorted(unknown)}", file=sys.stderr)
            return EXIT_ARGS
        defaults.update(overlay)
    parser = build_parser(defaults)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_ARGS if exc.code else EXIT_OK
    try:
        return _COMMANDS[args.command](args)
    except DivergedError as exc:
        return _fail(EXIT_DIVERGED, f"training diverged: {exc}")


def main_entry() -> None:
    raise SystemExit(main())
