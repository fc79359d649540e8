"""Command-line pipeline: synth, train, eval, compare, wellposed, coeffratio.

Every run is reproducible from (config file, seed): all randomness derives
from the master seed via labeled child seeds, and outputs carry no
timestamps, so identical invocations produce byte-identical files.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import data as data_mod
from . import metrics as metrics_mod
from . import wellposed as wp
from .config import RunConfig
from .models import (
    GRID_N,
    ModelBundle,
    SpatialModel,
    init_network,
)
from .nn import ActivationKind, DenseLayer, NetworkParams, logit_bound
from .seeding import child_seed
from .synthetic import SyntheticGenConfig, GroundTruth, synth_generate
from .training import TrainConfig, train_model

FAMILY_CHOICES = ("naive", "logistic", "standard", "spatial")


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _run_config(args):
    return RunConfig.load(args.config) if args.config else RunConfig()


def _load_samples(path, case_mode, grid_n=GRID_N):
    samples = data_mod.read_labeled(path)
    clipped = 0
    for s in samples:
        y1 = max(-grid_n, min(grid_n, s.label.y1))
        y2 = max(-grid_n, min(grid_n, s.label.y2))
        if (y1, y2) != (s.label.y1, s.label.y2):
            clipped += 1
            s.label = data_mod.JointMove(y1, y2)
    if clipped:
        print(f"note: clipped {clipped} labels to the +-{grid_n} grid")
    if case_mode == 2:
        kept = [s for s in samples if (s.label.y1 == 0) != (s.label.y2 == 0)]
        dropped = len(samples) - len(kept)
        if dropped:
            print(f"note: dropped {dropped} samples violating the case-2 support")
        samples = kept
    return samples


def _split_datasets(samples, seed, test_fraction, val_fraction=0.05):
    parts = data_mod.split(
        samples, test_fraction=test_fraction, val_fraction=val_fraction,
        seed=child_seed(seed, "split"),
    )
    train_samples = [samples[i] for i in parts.train]
    stats = data_mod.NormalizationStats.fit([s.state for s in train_samples])
    train = data_mod.build_dataset(train_samples, stats)
    val = data_mod.build_dataset([samples[i] for i in parts.validation], stats)
    test = data_mod.build_dataset([samples[i] for i in parts.test], stats)
    return train, val, test, stats


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args):
    cfg = _run_config(args)
    g = lambda key, default, cast=float, override=None: cfg.get(
        "synth", key, default, cast, override
    )
    gen = SyntheticGenConfig(
        n_samples=g("n_samples", 10_000, int, args.n),
        case_mode=cfg.get("common", "case", 2, int, args.case),
        seed=child_seed(cfg.get("common", "seed", 0, int, args.seed), "synth"),
        size_log_mean=g("size_log_mean", 4.0),
        size_log_std=g("size_log_std", 0.8),
        hazard_intercept=g("hazard_intercept", -0.5),
        hazard_size_coeff=g("hazard_size_coeff", 1.0),
        away_hazard_intercept=g("away_hazard_intercept", -0.2),
        away_hazard_size_coeff=g("away_hazard_size_coeff", 0.0),
        direction_intercept=g("direction_intercept", 0.0),
        direction_imbalance_coeff=g("direction_imbalance_coeff", 2.5),
        move_prob=g("move_prob", 0.4),
    )
    samples, truth = synth_generate(gen)
    out = _out_dir(args)
    data_mod.write_labeled(samples, out / "synthetic.csv")
    (out / "ground_truth.json").write_text(truth.to_json(), encoding="utf-8")
    print(f"wrote {len(samples)} samples to {out / 'synthetic.csv'}")
    print(
        "planted hazard: intercept "
        f"{gen.hazard_intercept} size-coeff {gen.hazard_size_coeff}; "
        f"direction imbalance coeff {gen.direction_imbalance_coeff}"
    )
    return 0


def _train_config(cfg, args, family):
    g = lambda key, default, cast, override=None: cfg.get(
        "train", key, default, cast, override
    )
    defaults_neurons = 50 if family == "spatial" else 250
    return TrainConfig(
        epochs=g("epochs", 20, int, args.epochs),
        batch_size=g("batch_size", 256, int, None),
        initial_lr=g("initial_lr", 1e-3, float, None),
        lr_decay_factor=g("lr_decay_factor", 0.5, float, None),
        l2_lambda=g("l2_lambda", 0.0, float, None),
        dropout_rate=g("dropout_rate", 0.1, float, None),
        seed=child_seed(cfg.get("common", "seed", 0, int, args.seed), f"train:{family}"),
        neurons_per_hidden_layer=g("neurons", defaults_neurons, int, args.neurons),
        hidden_layers=g("hidden_layers", 3, int, args.hidden_layers),
        use_batchnorm=g("batchnorm", True, bool, None),
        activation=g("activation", "tanh", str, None),
        activation_clip=g("activation_clip", 0.0, float, None),
    )


def cmd_train(args):
    cfg = _run_config(args)
    case_mode = cfg.get("common", "case", 2, int, args.case)
    seed = cfg.get("common", "seed", 0, int, args.seed)
    test_fraction = cfg.get("train", "test_fraction", 0.15, float, None)
    samples = _load_samples(args.data, case_mode)
    train, val, _test, stats = _split_datasets(samples, seed, test_fraction)
    tc = _train_config(cfg, args, args.family)
    model, history, best_epoch = train_model(
        args.family, train, val, tc, case_mode=case_mode
    )
    out = _out_dir(args)
    bundle = ModelBundle(model=model, stats=stats, case_mode=case_mode)
    bundle_path = out / f"{args.family}_bundle.json"
    bundle_path.write_text(bundle.to_json(), encoding="utf-8")
    hist = pd.DataFrame(
        {
            "epoch": [h.epoch for h in history],
            "train_loss": [h.train_loss for h in history],
            "val_loss": [h.val_loss for h in history],
            "lr": [h.learning_rate for h in history],
        }
    )
    hist.to_csv(out / f"{args.family}_history.csv", index=False, lineterminator="\n")
    print(
        f"trained {args.family} on {len(train)} samples; best epoch {best_epoch}; "
        f"bundle at {bundle_path}"
    )
    return 0


def _test_dataset(args, cfg, bundles):
    case_modes = {b.case_mode for b in bundles}
    grids = {b.grid_n for b in bundles}
    if len(case_modes) > 1 or len(grids) > 1:
        raise metrics_mod.MetricsError(
            "cmd_compare: bundles disagree on case mode or grid support"
        )
    case_mode = case_modes.pop()
    seed = cfg.get("common", "seed", 0, int, args.seed)
    test_fraction = cfg.get("compare", "test_fraction", 0.15, float, args.test_fraction)
    samples = _load_samples(args.data, case_mode)
    if test_fraction > 0:
        *_unused, test, _stats = _split_datasets(samples, seed, test_fraction)
    else:
        stats = bundles[0].stats
        test = data_mod.build_dataset(samples, stats)
    return test, case_mode


def _evaluate_bundles(names, bundles, test, k_max, topk_samples, seed):
    models = {}
    for name, bundle in zip(names, bundles):
        models[name] = bundle.model
    return metrics_mod.build_eval_report(
        models, test, k_max=k_max, topk_samples=topk_samples, seed=seed
    )


def _write_report(report, out):
    (out / "report.json").write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=2), encoding="utf-8"
    )
    names = report.model_names
    pd.DataFrame(report.wins, index=names, columns=names).to_csv(
        out / "win_matrix.csv", lineterminator="\n"
    )
    pd.DataFrame(report.pct_matrix, index=names, columns=names).to_csv(
        out / "pct_decrease.csv", lineterminator="\n"
    )
    topk = pd.DataFrame(report.topk)
    topk.insert(0, "k", np.arange(1, len(topk) + 1))
    topk.to_csv(out / "topk.csv", index=False, lineterminator="\n")
    tail = pd.DataFrame(
        {
            "model": names,
            "tail_cross_entropy": [report.tail_cross_entropies[n] for n in names],
        }
    )
    tail.to_csv(out / "tail.csv", index=False, lineterminator="\n")


def cmd_eval(args):
    cfg = _run_config(args)
    bundle = ModelBundle.from_json(Path(args.bundle).read_text(encoding="utf-8"))
    test, _case = _test_dataset(args, cfg, [bundle])
    seed = cfg.get("common", "seed", 0, int, args.seed)
    report = _evaluate_bundles(
        [bundle.model.family], [bundle], test,
        cfg.get("eval", "k_max", 10, int, None),
        cfg.get("eval", "topk_samples", 2000, int, None),
        child_seed(seed, "eval"),
    )
    out = _out_dir(args)
    _write_report(report, out)
    name = bundle.model.family
    print(
        f"{name}: cross-entropy {report.cross_entropies[name]:.4f} nats, "
        f"accuracy {report.accuracies[name]:.2f}%"
    )
    return 0


def cmd_compare(args):
    cfg = _run_config(args)
    bundles = [
        ModelBundle.from_json(Path(p).read_text(encoding="utf-8")) for p in args.bundles
    ]
    if len(bundles) < 2:
        raise metrics_mod.MetricsError("cmd_compare: need at least two bundles")
    names = []
    for b in bundles:
        name = b.model.family
        while name in names:
            name += "+"
        names.append(name)
    test, _case = _test_dataset(args, cfg, bundles)
    seed = cfg.get("common", "seed", 0, int, args.seed)
    report = _evaluate_bundles(
        names, bundles, test,
        cfg.get("compare", "k_max", 10, int, None),
        cfg.get("compare", "topk_samples", 2000, int, None),
        child_seed(seed, "compare"),
    )
    out = _out_dir(args)
    _write_report(report, out)
    for name in names:
        print(f"{name}: cross-entropy {report.cross_entropies[name]:.4f} nats")
    return 0


def _relu_demo_nets():
    """Hand-built all-ReLU nets with the three tail behaviors in y."""
    relu = ActivationKind("relu")

    def net(w1, b1, w2, b2):
        return NetworkParams(
            layers=[
                DenseLayer(weights=np.array(w1, dtype=np.float64), bias=np.array(b1, dtype=np.float64)),
                DenseLayer(weights=np.array(w2, dtype=np.float64), bias=np.array(b2, dtype=np.float64)),
            ],
            hidden_activation=relu,
            output_head="scalar_logit",
        )

    # f(y) = relu(-y + 5): nonzero below 5, exactly 0 for y >= 5
    case1 = net([[-1.0]], [5.0], [[1.0]], [0.0])
    # f(y) = 0.5*relu(y) - relu(-y) + 2 = 2 + 0.5 y for y >= 0
    case2 = net([[1.0], [-1.0]], [0.0, 0.0], [[0.5, -1.0]], [2.0])
    # f(y) = relu(-y) - relu(y) = -y
    case3 = net([[-1.0], [1.0]], [0.0, 0.0], [[1.0, -1.0]], [0.0])
    return {"case1": case1, "case2": case2, "case3": case3}


def cmd_wellposed(args):
    out = _out_dir(args)
    summary = {}
    if args.bundle:
        bundle = ModelBundle.from_json(Path(args.bundle).read_text(encoding="utf-8"))
        if not isinstance(bundle.model, SpatialModel):
            raise wp.WellPosedError("cmd_wellposed: bundle is not a spatial model")
        model = bundle.model
        x = np.zeros(model.h1.input_dim)
        for component, direction in ((1, "+"), (1, "-"), (2, "+"), (2, "-")):
            name = f"f{component}{'p' if direction == '+' else 'm'}"
            step_fn = wp.spatial_step_function(
                model, x, component, direction, y_prev=0 if component == 2 else None
            )
            profile = partial = wp.partial_mass(step_fn)
            net = getattr(model, f"f{component}_{'plus' if direction == '+' else 'minus'}")
            m = logit_bound(net)
            a, b = wp.hazard_bounds_from_logit_bound(m)
            check = wp.bounds_check(profile, a, b)
            ok = profile.final_mass() >= 0.999 and check.ok
            wp.profile_to_csv(profile, out / f"wellposed_{name}.csv")
            summary[name] = {
                "F_10000": profile.final_mass(),
                "bounds_ok": bool(check.ok),
                "verdict": "PASS" if ok else "FAIL",
            }
            print(f"{name}: F_10000 = {profile.final_mass():.6f} -> {summary[name]['verdict']}")
    else:
        nets = _relu_demo_nets()
        for name, net in nets.items():
            tail = wp.classify_relu_tail(net, None)
            step_fn = lambda levels, _net=net: wp.sigmoid(
                wp.forward(_net, np.asarray(levels, dtype=np.float64)[:, None], mode="infer").logits[:, 0]
            )
            if tail.case == "relu_case3":
                limit, n_reached = wp.converged_mass(step_fn)
                d3 = wp.head_sum_exp(net, None, tail.probe_start)
                bound = wp.case3_bound(
                    tail.intercept, tail.slope_magnitude, tail.probe_start, d3
                )
                profile = wp.partial_mass(step_fn, checkpoints=(10, 100, 1000))
                profile.bound = bound
                verdict = "MASS ESCAPE" if limit < 0.999 and limit <= bound else "FAIL"
                summary[name] = {
                    "case": tail.case, "limit": limit, "bound": bound, "verdict": verdict,
                }
                print(f"{name}: {tail.case}, limit {limit:.4f} <= bound {bound:.4f} -> {verdict}")
            else:
                result = wp.divergence_check(
                    tail.case, tail.intercept, tail.slope_magnitude
                )
                profile = wp.partial_mass(step_fn, checkpoints=(10, 100, min(1000, result.n_max * 5)))
                verdict = "PASS" if result.ok else "FAIL"
                summary[name] = {
                    "case": tail.case, "F_final": result.final_mass, "verdict": verdict,
                }
                print(
                    f"{name}: {tail.case}, F_{result.n_max} = {result.final_mass:.9f} -> {verdict}"
                )
            wp.profile_to_csv(profile, out / f"wellposed_{name}.csv")
    (out / "wellposed_summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2), encoding="utf-8"
    )
    failed = [k for k, v in summary.items() if v["verdict"] == "FAIL"]
    return 1 if failed else 0


def cmd_coeffratio(args):
    cfg = _run_config(args)
    seed = cfg.get("common", "seed", 0, int, args.seed)
    runs = cfg.get("coeffratio", "runs", 1, int, args.runs)
    k = cfg.get("coeffratio", "window", 10, int, None)
    y_max = cfg.get("coeffratio", "y_max", 20, int, None)
    rows = []
    for run in range(runs):
        if args.data:
            samples = _load_samples(args.data, case_mode=0 or 1)
            if runs > 1:
                raise metrics_mod.MetricsError(
                    "cmd_coeffratio: multiple runs need generated data, not --data"
                )
        else:
            gen = SyntheticGenConfig(
                n_samples=cfg.get("coeffratio", "n_samples", 20_000, int, args.n),
                case_mode=2,
                seed=child_seed(seed, f"coeffratio:{run}"),
                hazard_size_coeff=cfg.get(
                    "coeffratio", "hazard_size_coeff", 1.0, float, None
                ),
            )
            samples, _truth = synth_generate(gen)
        stats = data_mod.NormalizationStats.fit([s.state for s in samples])
        dataset = data_mod.build_dataset(samples, stats)
        result = metrics_mod.coeff_ratio_study(
            dataset, K=k, y_max=y_max, seed=child_seed(seed, f"coeffratio-fit:{run}")
        )
        row = {
            "run": run,
            "intercept": result.intercept,
            "ratio_p0": result.ratios[0],
            "ratio_p1": result.ratios[1],
            "degenerate_p0": result.degenerate[0],
            "degenerate_p1": result.degenerate[1],
            "n_rows": result.n_rows,
        }
        for off, value in zip(range(-k, k + 1), result.theta):
            row[f"theta_{off}"] = value
        rows.append(row)
        print(
            f"run {run}: ratio p=0 {row['ratio_p0']:.3f}, p=1 {row['ratio_p1']:.3f}, "
            f"center {result.theta[k]:+.3f}"
        )
    out = _out_dir(args)
    pd.DataFrame(rows).to_csv(out / "coeff_ratios.csv", index=False, lineterminator="\n")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="lobnet",
        description="Order-book move-distribution models: synthesize data, "
        "train model families, compare them, and verify well-posedness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="INI config file")
        p.add_argument("--seed", type=int, default=None, help="master seed")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--case", type=int, choices=(1, 2), default=None)

    p = sub.add_parser("synth", help="generate a planted synthetic dataset")
    common(p)
    p.add_argument("--n", type=int, default=None, help="number of samples")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit one model family")
    common(p)
    p.add_argument("--family", required=True, choices=FAMILY_CHOICES)
    p.add_argument("--data", required=True, help="labeled dataset CSV")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--neurons", type=int, default=None)
    p.add_argument("--hidden-layers", dest="hidden_layers", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate one bundle on a dataset")
    common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--test-fraction", dest="test_fraction", type=float, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="compare several bundles on one test set")
    common(p)
    p.add_argument("--bundles", nargs="+", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--test-fraction", dest="test_fraction", type=float, default=None)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("wellposed", help="mass profiles and tail-case verdicts")
    common(p)
    p.add_argument("--bundle", default=None, help="spatial bundle to check")
    p.set_defaults(func=cmd_wellposed)

    p = sub.add_parser("coeffratio", help="local-coefficient-ratio study")
    common(p)
    p.add_argument("--data", default=None, help="labeled dataset CSV")
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--n", type=int, default=None, help="samples per generated run")
    p.set_defaults(func=cmd_coeffratio)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # structured error reporting, nonzero exit
        operation = getattr(exc, "operation", None) or f"cli.{args.command}"
        print(f"error: {operation}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
