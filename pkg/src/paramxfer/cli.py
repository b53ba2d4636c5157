"""Command line: ``paramxfer run|sweep|report|curves``.

``<config>`` is a YAML file (one mapping or a list of them) or the name of a
built-in preset. Outputs go under ``--out``, else ``$PARAMXFER_OUTPUT_ROOT``,
else ``./runs``.

Exit codes: 0 ok, 1 at least one run failed, 2 bad config or arguments.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import PRESETS, ExperimentConfig, parse_configs, preset
from .harness import curves, output_root, report, run_jobs, sweep
from .zoo import ConfigError

EXIT_OK, EXIT_RUN_FAILED, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("paramxfer")


def load_configs(spec: str) -> list[ExperimentConfig]:
    path = Path(spec)
    if path.is_file():
        return parse_configs(path.read_text(encoding="utf-8"))
    if spec in PRESETS:
        return preset(spec)
    raise ConfigError(f"{spec!r} is neither a config file nor a preset ({', '.join(sorted(PRESETS))})")


def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="paramxfer", description="Parameter-space knowledge transfer experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    run = sub.add_parser("run", help="run each config once at its own seed")
    run.add_argument("config")
    run.add_argument("--out")
    run.add_argument("--plot", action="store_true", help="also render figures (needs matplotlib)")

    sw = sub.add_parser("sweep", help="run configs x seeds and aggregate")
    sw.add_argument("config")
    sw.add_argument("--seeds", type=_seeds, default=[0])
    sw.add_argument("--workers", type=int, default=1)
    sw.add_argument("--out")
    sw.add_argument("--plot", action="store_true")

    rep = sub.add_parser("report", help="collect run directories into table.csv")
    rep.add_argument("dir")
    rep.add_argument("--plot", action="store_true")
    rep.add_argument("--metric", default="s_final_top1")

    cur = sub.add_parser("curves", help="write long-format curves.csv")
    cur.add_argument("dir")
    cur.add_argument("--plot", action="store_true")
    cur.add_argument("--metric", default="s.top1")
    return p


def _plot_all(root: Path) -> None:
    from . import plotting

    for name, fn in (("table.png", plotting.plot_table), ("curves.png", plotting.plot_curves)):
        src = root / ("table.csv" if name == "table.png" else "curves.csv")
        if src.exists():
            log.info("wrote %s", fn(src, root / name))


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    try:
        if args.verb in ("run", "sweep"):
            configs = load_configs(args.config)
            root = output_root(args.out)
            if args.verb == "run":
                res = run_jobs(configs, root)
            else:
                res = sweep(configs, args.seeds, root, workers=args.workers)
            for row in res.rows:
                line = f"{row.variant} seed={row.seed} {row.status}"
                if row.status == "ok":
                    line += f" s_top1={row.metrics.get('s_final_top1')} l_top1={row.metrics.get('l_final_top1')}"
                print(line if row.status == "ok" else f"{line}: {row.note}")
            print(root / "table.csv")
            if args.plot:
                curves(root)
                _plot_all(root)
            return EXIT_RUN_FAILED if res.failed else EXIT_OK

        if args.verb == "report":
            table = report(args.dir)
            print(Path(args.dir) / "table.csv")
            if args.plot:
                from .plotting import plot_table

                print(plot_table(Path(args.dir) / "table.csv", Path(args.dir) / "table.png", args.metric))
            return EXIT_RUN_FAILED if any(r.status != "ok" for r in table) else EXIT_OK

        path = curves(args.dir)
        print(path)
        if args.plot:
            from .plotting import plot_curves

            print(plot_curves(path, Path(args.dir) / "curves.png", args.metric))
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
