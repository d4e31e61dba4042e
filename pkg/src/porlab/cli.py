"""Command-line front-end: data generation, training, evaluation, the transfer
and mix drivers, the toy demo, bound verification and SVG plots."""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from porlab import __version__
from porlab.approx import CheckpointError
from porlab.data import DatasetError, SplitSpec, load_dataset, save_dataset, split, to_csv

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

ENV_IDS = ("fourroom-a", "fourroom-b", "fourroom-c")


class UsageError(Exception):
    pass


# -- config resolution ------------------------------------------------------------


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"override {item!r} is not key=value")
        out[key.strip()] = value.strip()
    return out


def resolve_config(name_or_path: str | None, overrides: dict[str, str], env_id: str | None = None):
    """Preset or ini file, then ``--set`` overrides, then an explicit ``--env``."""
    from porlab.trainer import TrainConfig, preset

    if name_or_path is None:
        base = preset("table7")
    elif Path(name_or_path).is_file():
        base = TrainConfig.from_ini(Path(name_or_path).read_text())
    else:
        try:
            base = preset(name_or_path)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    try:
        config = TrainConfig.from_strings(overrides, base=base)
        if env_id is not None:
            config = config.replace(env_id=env_id)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"bad config override: {exc}") from None
    return config


def parse_seeds(text: str | None, fallback: int) -> list[int]:
    if not text:
        return [fallback]
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds expects comma-separated integers, got {text!r}") from None
    if not seeds or len(set(seeds)) != len(seeds):
        raise UsageError("--seeds must list distinct integers")
    return seeds


def write_run_record(run: Path, command: str, fields: dict) -> None:
    """Store the command-level inputs beside the resolved training config."""
    cp = configparser.ConfigParser()
    cp["run"] = {"command": command, **{k: "" if v is None else str(v) for k, v in fields.items()}}
    run.mkdir(parents=True, exist_ok=True)
    with open(run / "run.ini", "w") as fh:
        cp.write(fh)


def _env_dataset(env_id: str, data: str | None, seed: int):
    from porlab.envs import CollectorSpec, collect

    if data:
        return load_dataset(data)
    return collect(CollectorSpec(env_id, seed=seed))


def _fan_out(fn, jobs, workers: int):
    if len(jobs) == 1 or workers <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(fn, *zip(*jobs)))


# -- commands ----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from porlab.envs import CollectorSpec, collect

    if args.n <= 0:
        raise UsageError("--n must be positive")
    dataset = collect(
        CollectorSpec(args.env, n_transitions=args.n, seed=args.seed, controller_fraction=args.controller_fraction,
                      random_fraction=1.0 - args.controller_fraction)
    )
    out = Path(args.out or f"{args.env}-{args.n}-s{args.seed}.pord")
    try:
        save_dataset(dataset, out)
        if args.csv:
            Path(args.csv).write_text(to_csv(dataset))
    except OSError as exc:
        raise DatasetError(f"cannot write {exc.filename}: {exc.strerror}") from None
    print(f"{out}  transitions={dataset.n_transitions} trajectories={dataset.n_trajectories} hash={dataset.content_hash()}")
    return EXIT_OK


def _train_one(config, data: str | None, run: str, data_seed: int):
    from porlab.trainer import train

    dataset = _env_dataset(config.env_id, data, data_seed)
    write_run_record(Path(run), "train", {"env": config.env_id, "data": data, "data_seed": data_seed})
    result = train(dataset, config, run_dir=run)
    last = result.metrics[-1] if result.metrics else {}
    return run, last.get("eval_success_rate", math.nan)


def cmd_train(args) -> int:
    config = resolve_config(args.config, parse_overrides(args.set), args.env)
    if config.env_id is None and not args.data:
        raise UsageError("train needs --env or --data")
    seeds = parse_seeds(args.seeds, config.seed)
    out = Path(args.out)
    jobs = []
    for seed in seeds:
        run = out if len(seeds) == 1 else out / f"seed-{seed}"
        jobs.append((config.replace(seed=seed), args.data, str(run), args.data_seed))
    for run, success in _fan_out(_train_one, jobs, args.workers):
        print(f"{run}  final_success={success}")
    return EXIT_OK


def _load_run(path: str):
    from porlab.trainer import load_agent

    run = Path(path)
    if not (run / "config.ini").is_file():
        raise UsageError(f"{run} is not a run directory (config.ini missing)")
    return load_agent(run)


def cmd_eval(args) -> int:
    from porlab.envs import FourRoomEnv
    from porlab.trainer import evaluate

    if args.episodes < 0:
        raise UsageError("--episodes must be non-negative")
    agent, config = _load_run(args.run)
    env_id = args.env or config.env_id
    if env_id is None:
        raise UsageError("the run has no env_id; pass --env")
    report = evaluate(FourRoomEnv(env_id), agent, args.episodes, seed=args.seed)
    text = report.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    for key, value in report.summary().items():
        print(f"# {key}: {value}")
    return EXIT_OK


def cmd_transfer(args) -> int:
    from porlab.trainer import file_digest, transfer

    old, old_config = _load_run(args.source)
    overrides = parse_overrides(args.set)
    if args.config:
        config = resolve_config(args.config, overrides, args.task)
    else:
        # the source run's resolved config is the base
        try:
            config = type(old_config).from_strings(overrides, base=old_config).replace(env_id=args.task)
        except (ValueError, KeyError) as exc:
            raise UsageError(f"bad config override: {exc}") from None
    dataset = _env_dataset(args.task, args.data, args.data_seed)
    run = Path(args.out)
    write_run_record(run, "transfer", {"source": args.source, "task": args.task, "data": args.data})
    transfer(old, dataset, config, run_dir=run)
    before = file_digest(Path(args.source) / "execute.ckpt")
    after = file_digest(run / "execute.ckpt")
    print(f"{run}  execute_hash_source={before} execute_hash_new={after} identical={before == after}")
    return EXIT_OK if before == after else EXIT_RUNTIME


def _mix_one(config, data: str | None, run: str, data_seed: int, fraction: float, scheme: str):
    from porlab.trainer import main_train, mix_train

    dataset = _env_dataset(config.env_id, data, data_seed)
    d_e, d_o = split(dataset, SplitSpec("mix", fraction, True), seed=config.seed)
    write_run_record(Path(run), scheme, {"env": config.env_id, "data": data, "fraction": fraction})
    if scheme == "mix":
        result = mix_train(d_e, d_o, config, run_dir=run)
    else:
        result = main_train(d_e, config, run_dir=run)
    last = result.metrics[-1] if result.metrics else {}
    return run, last.get("eval_success_rate", math.nan)


def cmd_mix(args) -> int:
    config = resolve_config(args.config, parse_overrides(args.set), args.env)
    if not 0.0 < args.fraction < 1.0:
        raise UsageError("--fraction must lie in (0, 1)")
    seeds = parse_seeds(args.seeds, config.seed)
    out = Path(args.out)
    jobs = []
    for seed in seeds:
        for scheme in args.schemes.split(","):
            if scheme not in ("main", "mix"):
                raise UsageError(f"unknown scheme {scheme!r}")
            jobs.append((config.replace(seed=seed), args.data, str(out / f"{scheme}-seed-{seed}"), args.data_seed,
                         args.fraction, scheme))
    for run, success in _fan_out(_mix_one, jobs, args.workers):
        print(f"{run}  final_success={success}")
    return EXIT_OK


def cmd_toy(args) -> int:
    from porlab.envs import FigureOneLayout, build_toy_dataset
    from porlab import tabular

    try:
        layout = FigureOneLayout.load(args.layout)
    except (FileNotFoundError, ValueError) as exc:
        raise DatasetError(f"cannot load layout {args.layout!r}: {exc}") from None
    world = layout.world
    dataset = build_toy_dataset(layout)
    V = tabular.dataset_value_iteration(dataset)
    table = tabular._by_source(tabular.grid_transitions(dataset))
    act, act_paths = tabular.rollout_lengths(lambda s: tabular.action_stitch_choices(V, table, s), world)
    st, st_paths = tabular.rollout_lengths(lambda s: tabular.state_stitch_choices(V, world, s), world)
    for name, lengths, paths in (("action-stitching", act, act_paths), ("state-stitching", st, st_paths)):
        for n in sorted(lengths):
            print(f"{name}: {n} steps")
            print(tabular.render_path(world, paths[n], dataset))
            print()
    print("method,path_length")
    for name, lengths in (("action", act), ("state", st)):
        for n in sorted(lengths):
            print(f"{name},{n}")
    return EXIT_OK


def cmd_verify_bound(args) -> int:
    from porlab.boundcheck import SyntheticSmoothMdp, synthetic_config, verify_bound
    from porlab.trainer import train

    if args.samples <= 0:
        raise UsageError("--samples must be positive")
    mdp = SyntheticSmoothMdp()
    dataset = mdp.collect(args.n, seed=args.seed)
    config = synthetic_config(seed=args.seed)
    if args.set:
        config = type(config).from_strings(parse_overrides(args.set), base=config)
    run = Path(args.out) if args.out else None
    result = train(dataset, config, run_dir=run, env=mdp)
    report = verify_bound(mdp, result.agent, dataset, args.samples, args.slack, seed=args.seed)
    if run is not None:
        (run / "bound.csv").write_text(report.to_csv())
        (run / "bound_summary.txt").write_text(report.summary() + "\n")
    print(report.summary())
    return EXIT_OK


def cmd_plot(args) -> int:
    series = {}
    for path in args.csv:
        p = Path(path)
        label = p.parent.name or p.stem
        if label in series:
            label = f"{label}:{p}"
        series[label] = read_metrics(p)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for column, svg in render_metric_svgs(series).items():
        (out / f"{column}.svg").write_text(svg)
        print(out / f"{column}.svg")
    return EXIT_OK


# -- SVG rendering ----------------------------------------------------------------------


class MetricsFormatError(DatasetError):
    pass


def read_metrics(path) -> dict[str, list[tuple[float, float]]]:
    """Column -> [(step, value)] from a metrics CSV; blank cells are skipped."""
    text = Path(path).read_text()
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or not rows[0] or rows[0][0] != "step":
        raise MetricsFormatError(f"{path}: line 1: header must start with 'step'")
    header = rows[0]
    out: dict[str, list[tuple[float, float]]] = {c: [] for c in header[1:]}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise MetricsFormatError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            step = float(row[0])
            for col, cell in zip(header[1:], row[1:]):
                if cell.strip():
                    out[col].append((step, float(cell)))
        except ValueError:
            raise MetricsFormatError(f"{path}: line {lineno}: non-numeric field") from None
    return out


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f")


def _num(x: float) -> str:
    return f"{x:.2f}".rstrip("0").rstrip(".")


def _tick(x: float) -> str:
    return f"{x:.4g}"


def render_svg(column: str, series: dict[str, list[tuple[float, float]]], width: int = 480, height: int = 300) -> str:
    """A line chart with one polyline per run and a legend keyed by run id."""
    left, right, top, bottom = 60, 20, 30, 40
    pts = [p for s in series.values() for p in s if math.isfinite(p[1])]
    xs = [p[0] for p in pts] or [0.0]
    ys = [p[1] for p in pts] or [0.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 1.0, x1 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 1.0, y1 + 1.0
    pw, ph = width - left - right, height - top - bottom

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + (y1 - y) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width // 2}" y="18" text-anchor="middle" font-family="sans-serif" font-size="13">{column}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for frac in (0.0, 0.5, 1.0):
        xv = x0 + frac * (x1 - x0)
        yv = y0 + frac * (y1 - y0)
        out.append(f'<text x="{_num(px(xv))}" y="{top + ph + 15}" text-anchor="middle" font-family="sans-serif" '
                   f'font-size="10">{_tick(xv)}</text>')
        out.append(f'<text x="{left - 4}" y="{_num(py(yv) + 3)}" text-anchor="end" font-family="sans-serif" '
                   f'font-size="10">{_tick(yv)}</text>')
    out.append(f'<text x="{left + pw // 2}" y="{height - 6}" text-anchor="middle" font-family="sans-serif" '
               f'font-size="11">step</text>')
    for i, (label, points) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        finite = [(x, y) for x, y in points if math.isfinite(y)]
        if len(finite) == 1:
            x, y = finite[0]
            out.append(f'<circle cx="{_num(px(x))}" cy="{_num(py(y))}" r="3" fill="{color}"/>')
        elif finite:
            coords = " ".join(f"{_num(px(x))},{_num(py(y))}" for x, y in finite)
            out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = top + 12 + 14 * i
        out.append(f'<line x1="{left + pw - 110}" y1="{ly - 4}" x2="{left + pw - 95}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw - 90}" y="{ly}" font-family="sans-serif" font-size="10">{_escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def render_metric_svgs(runs: dict[str, dict[str, list[tuple[float, float]]]]) -> dict[str, str]:
    columns = []
    for metrics in runs.values():
        for c in metrics:
            if c not in columns:
                columns.append(c)
    return {c: render_svg(c, {run: m.get(c, []) for run, m in runs.items()}) for c in columns}


# -- argument parsing ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="porlab", description=__doc__, formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"porlab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def training_flags(sp):
        sp.add_argument("--config", help="preset name (table3, table7, table4-<task>, table8-<task>) or ini file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
        sp.add_argument("--data", help="dataset file; collected on the fly when omitted")
        sp.add_argument("--data-seed", type=int, default=0, help="collector seed when --data is omitted")
        sp.add_argument("--seeds", help="comma-separated training seeds, run in parallel")
        sp.add_argument("--workers", type=int, default=1, help="parallel worker processes")

    sp = sub.add_parser("gen-data", help="collect a four-room dataset", formatter_class=fmt)
    sp.add_argument("--env", choices=ENV_IDS, default="fourroom-a")
    sp.add_argument("--n", type=int, default=100_000, help="number of transitions")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--controller-fraction", type=float, default=0.8)
    sp.add_argument("--out", help="binary dataset path")
    sp.add_argument("--csv", help="also write a CSV copy here")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train a POR agent", formatter_class=fmt)
    sp.add_argument("--env", choices=ENV_IDS)
    training_flags(sp)
    sp.add_argument("--out", default="runs/train")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a trained run", formatter_class=fmt)
    sp.add_argument("--run", required=True)
    sp.add_argument("--env", choices=ENV_IDS, help="defaults to the run's env")
    sp.add_argument("--episodes", type=int, default=50)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", help="EvalReport CSV path (stdout when omitted)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("transfer", help="retrain value and guide on a new task, reusing the execute-policy",
                        formatter_class=fmt)
    sp.add_argument("--from", dest="source", required=True, help="source run directory")
    sp.add_argument("--task", choices=ENV_IDS, required=True)
    training_flags(sp)
    sp.add_argument("--out", default="runs/transfer")
    sp.set_defaults(func=cmd_transfer)

    sp = sub.add_parser("mix", help="main vs mix schemes on a trajectory split", formatter_class=fmt)
    sp.add_argument("--env", choices=ENV_IDS, default="fourroom-a")
    training_flags(sp)
    sp.add_argument("--fraction", type=float, default=0.3, help="share of trajectories kept with actions")
    sp.add_argument("--schemes", default="main,mix")
    sp.add_argument("--out", default="runs/mix")
    sp.set_defaults(func=cmd_mix)

    sp = sub.add_parser("toy", help="state- vs action-stitching on the gridworld", formatter_class=fmt)
    sp.add_argument("--layout", default="canonical", help="layout name or file")
    sp.set_defaults(func=cmd_toy)

    sp = sub.add_parser("verify-bound", help="train on the synthetic linear MDP and check the action-gap bound",
                        formatter_class=fmt)
    sp.add_argument("--n", type=int, default=20_000, help="dataset transitions")
    sp.add_argument("--samples", type=int, default=1000)
    sp.add_argument("--slack", type=float, default=1.5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.add_argument("--out", help="run directory for checkpoints and the report")
    sp.set_defaults(func=cmd_verify_bound)

    sp = sub.add_parser("plot", help="render metrics CSVs as SVG line charts", formatter_class=fmt)
    sp.add_argument("csv", nargs="+")
    sp.add_argument("--out", default="plots")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"porlab {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, FileNotFoundError) as exc:
        print(f"porlab {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (RuntimeError, FloatingPointError, ValueError) as exc:
        print(f"porlab {args.command}: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
