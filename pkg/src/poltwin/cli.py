"""``poltwin`` command line: generate, prepare, train, evaluate, simulate, compare.

Every command takes explicit paths and an explicit ``--seed``; rerunning an
invocation reproduces its output files byte for byte. Exit codes are 0 on
success, 1 for usage errors, 2 for invalid inputs and 3 for runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from poltwin import __version__
from poltwin.abm import SIM_END, SIM_START, ConfigError, SimConfig, load_sim_config, run_batch
from poltwin.dataset import (
    CORRELATION_COLUMNS,
    DatasetError,
    Scaler,
    correlation_matrix,
    fit_scaler,
    next_destination_arrays,
    read_dataset,
    read_trajectories,
    read_transitions,
    rebalance,
    split,
    stay_duration_arrays,
    without_end,
    write_dataset,
    write_trajectories,
    write_transitions,
)
from poltwin.facility import LayoutError, load_layout_file
from poltwin.metrics import (
    MetricsError,
    classification_report,
    mean_position_series,
    mse_series,
    wasserstein_1d,
    work_duration_by_class,
)
from poltwin.nn import (
    COMPONENT,
    MDN_WEIBULL3,
    PAPER_WEIGHTED_SUM,
    SOFTMAX_CLASSIFIER,
    ModelFileError,
    NetworkError,
    TrainConfig,
    forward,
    grad_check,
    init_net,
    load_model,
    mdn_heads,
    mdn_nll,
    save_model,
    train,
)
from poltwin.runtime import (
    ScenarioConfig,
    ScenarioMode,
    SurrogateModels,
    run_scenario,
    write_events,
)
from poltwin.surrogate import (
    NextDestinationModel,
    StayDurationModel,
    SurrogateError,
    fit_weibull,
    predict_next_batch,
    sample_normalized_stays,
    uniform_baseline,
)
from poltwin.vocab import UserClass

log = logging.getLogger("poltwin")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3

VALIDATION_ERRORS = (
    ConfigError, DatasetError, LayoutError, MetricsError, ModelFileError, NetworkError,
    SurrogateError, FileNotFoundError, NotADirectoryError,
)

MODEL_FILES = {"mlp": "mlp.json", "mdn": "mdn.json"}
HEADS = {"mlp": SOFTMAX_CLASSIFIER, "mdn": MDN_WEIBULL3}
SPLIT_FILES = ("train.csv", "val.csv", "test.csv")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be ≥1, got {v}")
    return v


def _nonneg_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be ≥0, got {v}")
    return v


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _require_file(path: Path) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return path


def _sim_config(args) -> SimConfig:
    config = load_sim_config(_require_file(Path(args.config))) if args.config else SimConfig()
    if getattr(args, "layout", None):
        config = replace(config, layout=load_layout_file(_require_file(Path(args.layout))))
    return config


# -- generate ----------------------------------------------------------------

def cmd_generate(args) -> int:
    if args.traj_runs > args.runs:
        raise UsageError("--traj-runs cannot exceed --runs")
    config = _sim_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    transitions, trajectories = run_batch(config, args.runs, args.traj_runs, args.seed,
                                          workers=args.workers)
    write_transitions(out / "transitions.csv", transitions)
    write_trajectories(out / "trajectories.csv", trajectories)
    log.info("wrote %d transitions and %d trajectory points to %s",
             len(transitions), len(trajectories), out)
    return EXIT_OK


# -- prepare -----------------------------------------------------------------

def cmd_prepare(args) -> int:
    records = read_transitions(_require_file(Path(args.transitions)))
    if not records:
        raise DatasetError("transitions file holds no records")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    balanced = rebalance(records, args.target_n, rng=rng)
    parts = split(balanced, rng=rng)
    scaler = fit_scaler(parts.train)
    for name, recs in zip(SPLIT_FILES, (parts.train, parts.validation, parts.test)):
        write_dataset(out / name, recs, scaler)
    scaler.save(out / "scaler.json")
    corr = correlation_matrix(balanced)
    with open(out / "correlation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([""] + list(CORRELATION_COLUMNS))
        for name, row in zip(CORRELATION_COLUMNS, corr):
            w.writerow([name] + [repr(float(v)) for v in row])
    log.info("split %d rows into %d/%d/%d", len(balanced), len(parts.train),
             len(parts.validation), len(parts.test))
    return EXIT_OK


def _load_splits(data_dir: Path):
    if not data_dir.is_dir():
        raise FileNotFoundError(f"no such dataset directory: {data_dir}")
    splits = [read_dataset(_require_file(data_dir / name)) for name in SPLIT_FILES]
    scaler = Scaler.load(_require_file(data_dir / "scaler.json"))
    return splits, scaler


def _arrays(model: str, records, scaler):
    if model == "mlp":
        return next_destination_arrays(records, scaler)
    # stays are undefined for END rows, so the stay model never sees them
    stays = without_end(records)
    if not stays:
        raise DatasetError("the stay model needs rows with a non-END destination")
    return stay_duration_arrays(stays, scaler)


# -- train -------------------------------------------------------------------

def cmd_train(args) -> int:
    (train_recs, val_recs, _), scaler = _load_splits(Path(args.data))
    defaults = TrainConfig.mlp_default if args.model == "mlp" else TrainConfig.mdn_default
    config = defaults(args.seed)
    config = TrainConfig(
        max_epochs=args.epochs or config.max_epochs,
        batch_size=args.batch_size or config.batch_size,
        learning_rate=args.lr or config.learning_rate,
        patience=args.patience or config.patience,
        seed=args.seed,
    )
    x_tr, y_tr = _arrays(args.model, train_recs, scaler)
    x_va, y_va = _arrays(args.model, val_recs, scaler)
    net = init_net(HEADS[args.model], np.random.default_rng(args.seed))
    net, history = train(net, (x_tr, y_tr), (x_va, y_va), config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(net, out / MODEL_FILES[args.model], scaler)
    with open(out / f"{args.model}_history.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for i, (a, b) in enumerate(zip(history.train_loss, history.val_loss), start=1):
            w.writerow([i, repr(a), repr(b)])
    log.info("%s: stopped at epoch %d, best epoch %d (val loss %.6g)", args.model,
             history.stopped_epoch, history.best_epoch, min(history.val_loss))
    return EXIT_OK


# -- evaluate ----------------------------------------------------------------

def _load_models(model_dir: Path):
    if not model_dir.is_dir():
        raise FileNotFoundError(f"no such model directory: {model_dir}")
    paths = {k: model_dir / v for k, v in MODEL_FILES.items()}
    missing = [str(p) for p in paths.values() if not p.is_file()]
    if missing:
        raise FileNotFoundError(f"trained model(s) not found: {', '.join(missing)}; run `train` first")
    mlp = load_model(paths["mlp"], SOFTMAX_CLASSIFIER)
    mdn = load_model(paths["mdn"], MDN_WEIBULL3)
    if mlp.scaler is None or mdn.scaler is None:
        raise ModelFileError("model files must embed their scaler")
    return mlp, mdn


def evaluate_models(mlp, mdn, test_recs, train_recs, seed: int, grad_checks: bool = False) -> dict:
    """Test-split scores for both models and their baselines, as a JSON-ready dict."""
    scaler = mlp.scaler
    rng = np.random.default_rng(seed)
    x_te, y_te = next_destination_arrays(test_recs, scaler)
    pred = predict_next_batch(NextDestinationModel(mlp, scaler),
                              [r.source_tag for r in test_recs],
                              [r.user_class for r in test_recs],
                              [r.seconds_since_entry for r in test_recs])
    mlp_rep = classification_report(pred, y_te)
    base_rep = classification_report(uniform_baseline(rng, len(y_te)), y_te)

    stay_test = without_end(test_recs)
    xs, ys = stay_duration_arrays(stay_test, mdn.scaler)
    _, ys_train = stay_duration_arrays(without_end(train_recs), mdn.scaler)
    weibull = fit_weibull(ys_train)
    cols = ([r.dest_tag for r in stay_test], [r.user_class for r in stay_test],
            [r.seconds_since_entry for r in stay_test])
    mdn_w1 = {}
    for scheme in (PAPER_WEIGHTED_SUM, COMPONENT):
        draws = sample_normalized_stays(StayDurationModel(mdn, mdn.scaler, scheme), *cols, rng)
        mdn_w1[scheme] = wasserstein_1d(draws, ys)
    weibull_w1 = wasserstein_1d(weibull.sample(rng, len(ys)), ys)
    report = {
        "next_destination": {
            "n_test": int(len(y_te)),
            "mlp": mlp_rep.as_dict(),
            "uniform_baseline": base_rep.as_dict(),
            "f1_ratio": mlp_rep.f1 / base_rep.f1 if base_rep.f1 > 0 else None,
            "accuracy_ratio": mlp_rep.accuracy / base_rep.accuracy if base_rep.accuracy > 0 else None,
        },
        "stay_duration": {
            "n_test": int(len(ys)),
            "sampling_scheme": PAPER_WEIGHTED_SUM,
            "mdn_wasserstein": mdn_w1[PAPER_WEIGHTED_SUM],
            "mdn_wasserstein_component_sampling": mdn_w1[COMPONENT],
            "weibull_baseline_wasserstein": weibull_w1,
            "weibull_baseline": {"scale": weibull.scale, "concentration": weibull.concentration},
            "mdn_nll": mdn_nll(mdn_heads(forward(mdn, xs)[0]), ys),
            "weibull_baseline_nll": weibull.nll(ys),
        },
    }
    if grad_checks:
        n = min(64, len(y_te))
        report["grad_check"] = {
            "mlp_max_rel_error": grad_check(mlp, x_te[:n], y_te[:n], seed=seed),
            "mdn_max_rel_error": grad_check(mdn, xs[:n], ys[:n], seed=seed),
        }
    return report


def cmd_evaluate(args) -> int:
    mlp, mdn = _load_models(Path(args.models))
    (train_recs, _, test_recs), _ = _load_splits(Path(args.data))
    report = evaluate_models(mlp, mdn, test_recs, train_recs, args.seed, args.grad_check)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", report)
    nd, sd = report["next_destination"], report["stay_duration"]
    print(f"MLP macro-F1 {nd['mlp']['f1']:.4f} vs uniform {nd['uniform_baseline']['f1']:.4f}; "
          f"accuracy {nd['mlp']['accuracy']:.4f} vs {nd['uniform_baseline']['accuracy']:.4f}")
    print(f"MDN Wasserstein {sd['mdn_wasserstein']:.6f} vs Weibull "
          f"{sd['weibull_baseline_wasserstein']:.6f}")
    if args.grad_check:
        gc = report["grad_check"]
        print(f"grad-check max relative error: MLP {gc['mlp_max_rel_error']:.3e}, "
              f"MDN {gc['mdn_max_rel_error']:.3e}")
    return EXIT_OK


# -- simulate ----------------------------------------------------------------

def cmd_simulate(args) -> int:
    mlp, mdn = _load_models(Path(args.models))
    sim = _sim_config(args)
    models = SurrogateModels(NextDestinationModel(mlp, mlp.scaler),
                             StayDurationModel(mdn, mdn.scaler))
    mode = ScenarioMode[args.mode.upper()]
    config = ScenarioConfig(mode=mode, trigger_minute=args.trigger, roster=sim.roster,
                            seed=args.seed, break_overlay=not args.no_break_overlay,
                            schedule=sim.schedule, behavior=sim.behavior)
    trajectories, events, transitions = [], [], []
    for i in range(args.runs):
        res = run_scenario(config, models, sim.layout, seed=args.seed + i, run_id=i)
        trajectories += res.trajectories
        transitions += res.transitions
        events += res.events
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_trajectories(out / "trajectories.csv", trajectories)
    write_transitions(out / "transitions.csv", transitions)
    write_events(out / "events.csv", events)
    log.info("%s: %d run(s), %d decisions", mode.value, args.runs, len(events))
    return EXIT_OK


# -- compare -----------------------------------------------------------------

def _infer_bounds(points) -> tuple[float, float, float, float] | None:
    """Recover (x_min, x_max, y_min, y_max) from raw vs normalized coordinates."""
    def axis(raw, norm):
        raw, norm = np.asarray(raw), np.asarray(norm)
        i, j = int(np.argmin(raw)), int(np.argmax(raw))
        if raw[j] - raw[i] <= 0 or norm[j] == norm[i]:
            return None
        span = (raw[j] - raw[i]) / (norm[j] - norm[i])
        lo = raw[i] - norm[i] * span
        return lo, lo + span

    if not points:
        return None
    bx = axis([p.x for p in points], [p.x_norm for p in points])
    by = axis([p.y for p in points], [p.y_norm for p in points])
    if bx is None or by is None:
        return None
    return (*bx, *by)


def _parse_scenario(text: str) -> tuple[str, Path]:
    name, sep, path = text.partition("=")
    if not sep or not name or not path:
        raise argparse.ArgumentTypeError(f"expected NAME=DIR, got {text!r}")
    return name, Path(path)


def cmd_compare(args) -> int:
    abm_dir = Path(args.abm)
    abm_traj = read_trajectories(_require_file(abm_dir / "trajectories.csv"))
    abm_trans = read_transitions(_require_file(abm_dir / "transitions.csv"))
    if not abm_traj:
        raise DatasetError(f"{abm_dir / 'trajectories.csv'} holds no points")
    ref_bounds = _infer_bounds(abm_traj)
    scenarios = {}
    for name, d in args.scenario:
        if name in scenarios or name == "abm":
            raise UsageError(f"duplicate scenario name {name!r}")
        traj = read_trajectories(_require_file(d / "trajectories.csv"))
        trans = read_transitions(_require_file(d / "transitions.csv"))
        bounds = _infer_bounds(traj)
        if ref_bounds is not None and bounds is not None and not np.allclose(
                bounds, ref_bounds, rtol=0, atol=1e-6):
            raise DatasetError(f"scenario {name!r} uses normalization bounds {bounds}, "
                               f"ABM uses {ref_bounds}")
        scenarios[name] = (traj, trans)

    minutes = (SIM_START // 60, SIM_END // 60)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sources = {"abm": (abm_traj, abm_trans), **scenarios}
    series = {(src, cls): mean_position_series(traj, cls, minutes)
              for src, (traj, _) in sources.items() for cls in UserClass}
    durations = {src: work_duration_by_class(trans) for src, (_, trans) in sources.items()}

    with open(out / "fig5_work_durations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "user_class", "work_duration_s"])
        for src, by_class in durations.items():
            for cls in UserClass:
                for v in by_class[cls]:
                    w.writerow([src, cls.name, repr(float(v))])

    with open(out / "fig7_mean_positions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "user_class", "minute", "x_norm", "y_norm"])
        for (src, cls), s in series.items():
            for m, x, y in zip(s.minutes, s.x, s.y):
                if not np.isnan(x):
                    w.writerow([src, cls.name, int(m), repr(float(x)), repr(float(y))])

    summary = {"mse": {}, "work_duration_wasserstein_s": {}}
    with open(out / "fig8_mse.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "user_class", "minute", "sq_err_x", "sq_err_y", "sq_err"])
        for name in scenarios:
            summary["mse"][name] = {}
            summary["work_duration_wasserstein_s"][name] = {}
            for cls in UserClass:
                a, b = series[(name, cls)], series[("abm", cls)]
                ok = a.defined() & b.defined()
                for m in np.flatnonzero(ok):
                    ex, ey = (a.x[m] - b.x[m]) ** 2, (a.y[m] - b.y[m]) ** 2
                    w.writerow([name, cls.name, int(a.minutes[m]), repr(float(ex)),
                                repr(float(ey)), repr(float((ex + ey) / 2))])
                summary["mse"][name][cls.name] = mse_series(a, b) if ok.any() else None
                da, db = durations[name][cls], durations["abm"][cls]
                summary["work_duration_wasserstein_s"][name][cls.name] = (
                    wasserstein_1d(da, db) if da.size and db.size else None)
    _write_json(out / "summary.json", summary)
    for name, per_class in summary["mse"].items():
        cells = ", ".join(f"{c}={v:.5f}" if v is not None else f"{c}=n/a"
                          for c, v in per_class.items())
        print(f"{name} vs abm MSE: {cells}")
    return EXIT_OK


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="poltwin", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="run the ABM batch and write transition/trajectory logs")
    g.add_argument("--config", help="simulation config JSON (default: built-in facility and roster)")
    g.add_argument("--layout", help="facility layout JSON overriding the config's layout")
    g.add_argument("--runs", type=_positive_int, default=1000, help="number of simulated days")
    g.add_argument("--traj-runs", type=_nonneg_int, default=10,
                   help="runs (the first ones) that also log per-minute positions")
    g.add_argument("--seed", type=int, default=0, help="base seed; run i uses seed+i")
    g.add_argument("--workers", type=_positive_int, default=1, help="worker processes")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_generate)

    pr = sub.add_parser("prepare", help="rebalance, split and scale a transitions log")
    pr.add_argument("--transitions", required=True, help="transitions.csv from generate")
    pr.add_argument("--target-n", type=_positive_int, default=17000,
                    help="rows after destination rebalancing")
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out", required=True, help="output directory for splits and scaler")
    pr.set_defaults(func=cmd_prepare)

    t = sub.add_parser("train", help="train the next-destination (mlp) or stay (mdn) network")
    t.add_argument("--model", choices=sorted(MODEL_FILES), required=True)
    t.add_argument("--data", required=True, help="directory written by prepare")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=_positive_int, help="epoch cap (default 100 mlp, 50 mdn)")
    t.add_argument("--batch-size", type=_positive_int, help="default 32 mlp, 8 mdn")
    t.add_argument("--lr", type=float, help="Adam learning rate (default 1e-4 mlp, 1e-5 mdn)")
    t.add_argument("--patience", type=_positive_int, help="early-stopping patience (default 3 mlp, 1 mdn)")
    t.add_argument("--out", required=True, help="model directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score both models against their baselines")
    e.add_argument("--models", required=True, help="directory holding mlp.json and mdn.json")
    e.add_argument("--data", required=True, help="directory written by prepare")
    e.add_argument("--seed", type=int, default=0, help="seed for baseline and mixture sampling")
    e.add_argument("--grad-check", action="store_true",
                   help="also finite-difference check both networks' gradients")
    e.add_argument("--out", required=True, help="directory for report.json")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("simulate", help="run surrogate-driven NPC scenarios")
    s.add_argument("--mode", choices=["normal", "emergency"], default="normal")
    s.add_argument("--trigger", type=_nonneg_int, default=780,
                   help="emergency trigger, minute of day (780 = 13:00)")
    s.add_argument("--models", required=True, help="directory holding mlp.json and mdn.json")
    s.add_argument("--config", help="simulation config JSON for roster and behavior")
    s.add_argument("--layout", help="facility layout JSON")
    s.add_argument("--runs", type=_positive_int, default=1, help="scenario replicates; run i uses seed+i")
    s.add_argument("--no-break-overlay", action="store_true",
                   help="disable the ABM break rules for NPCs")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("compare", help="figure data comparing scenarios against the ABM")
    c.add_argument("--abm", required=True, help="directory with the ABM trajectories/transitions")
    c.add_argument("--scenario", type=_parse_scenario, action="append", default=[],
                   metavar="NAME=DIR", help="scenario output directory (repeatable)")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compare)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the runtime exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
