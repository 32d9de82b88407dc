"""Command-line entry point: ``daquant {run,compare,verify,enumerate}``."""

from __future__ import annotations

import argparse
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from daquant.config import ConfigError, RunConfig, load_config
from daquant.quant import bits_bound, set_size, table_for
from daquant.sim import RunResult, Scheme, run_experiment

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def thread_cap() -> int:
    """Worker processes allowed by ``DAQUANT_THREADS`` (default 1)."""
    raw = os.environ.get("DAQUANT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DAQUANT_THREADS: expected an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"DAQUANT_THREADS: must be >= 1, got {n}")
    return n


def _run_one(args: tuple[RunConfig, Scheme]) -> RunResult:
    cfg, scheme = args
    return run_experiment(cfg.experiment(scheme))


def run_schemes(cfg: RunConfig) -> dict[Scheme, RunResult]:
    """Every configured scheme on the same task and seed, in config order."""
    schemes = list(dict.fromkeys(cfg.schemes))
    workers = min(thread_cap(), len(schemes))
    jobs = [(cfg, s) for s in schemes]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    return dict(zip(schemes, results))


def _write_outputs(out: Path, cfg: RunConfig, results: dict[Scheme, RunResult],
                   extra: dict[str, str] | None = None) -> list[Path]:
    # Everything is computed before this point, so a failed run leaves no files.
    out.mkdir(parents=True, exist_ok=True)
    files = {"resolved.cfg": cfg.dumps()}
    for scheme, res in results.items():
        files[f"{scheme.value}.csv"] = res.to_csv()
    files.update(extra or {})
    written = []
    for name, text in files.items():
        path = out / name
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        written.append(path)
    return written


def bits_to_target(res: RunResult, target: float) -> int | None:
    """Cumulative bits at the first record with ``train_loss <= target``."""
    for rec in res.records:
        if rec.train_loss <= target:
            return rec.cumulative_bits
    return None


SUMMARY_COLUMNS = ["scheme", "iterations", "total_bits", "bits_per_iteration", "final_loss",
                   "bits_to_target", "ratio_to_first"]


def summarize(results: dict[Scheme, RunResult], target: float | None) -> list[dict]:
    """One row per scheme; ratios are relative to the first scheme.

    With a target loss the ratio compares bits-to-target and is undefined
    when either side never reached it; without one it compares bits per
    iteration.
    """
    rows = []
    for scheme, res in results.items():
        last = res.records[-1] if res.records else None
        iters = last.iteration if last else 0
        total = last.cumulative_bits if last else 0
        rows.append({
            "scheme": scheme.value,
            "iterations": iters,
            "total_bits": total,
            "bits_per_iteration": total / iters if iters else 0.0,
            "final_loss": last.train_loss if last else math.nan,
            "bits_to_target": None if target is None else bits_to_target(res, target),
        })
    key = "bits_per_iteration" if target is None else "bits_to_target"
    ref = rows[0][key] if rows else None
    for row in rows:
        val = row[key]
        row["ratio_to_first"] = val / ref if val is not None and ref else None
    return rows


def _cell(v, human: bool = False) -> str:
    if v is None:
        return "not reached" if human else ""
    if isinstance(v, float):
        return f"{v:.6g}" if human else format(v, ".17g")
    return str(v)


def summary_csv(rows: list[dict]) -> str:
    lines = [",".join(SUMMARY_COLUMNS)]
    lines += [",".join(_cell(r[c]) for c in SUMMARY_COLUMNS) for r in rows]
    return "\n".join(lines) + "\n"


def summary_table(rows: list[dict], target: float | None) -> str:
    cells = [SUMMARY_COLUMNS] + [[_cell(r[c], human=True) for c in SUMMARY_COLUMNS] for r in rows]
    for r, row in zip(rows, cells[1:]):
        if target is None:
            row[5] = "-"
        if r["ratio_to_first"] is None:
            row[6] = "undefined"
    widths = [max(len(row[i]) for row in cells) for i in range(len(SUMMARY_COLUMNS))]
    text = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells]
    head = f"target loss: {target}" if target is not None else "target loss: none (ratios use bits/iteration)"
    return head + "\n" + "\n".join(text) + "\n"


# -- commands -----------------------------------------------------------------

def cmd_run(args) -> int:
    cfg = load_config(args.config, args.set or [], args.seed)
    results = run_schemes(cfg)
    for path in _write_outputs(Path(args.out), cfg, results):
        print(path)
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = load_config(args.config, args.set or [], args.seed)
    results = run_schemes(cfg)
    target = cfg["compare.target_loss"]
    rows = summarize(results, target)
    _write_outputs(Path(args.out), cfg, results, {"summary.csv": summary_csv(rows)})
    sys.stdout.write(summary_table(rows, target))
    return EXIT_OK


def cmd_verify(args) -> int:
    from daquant.verify import run_checks

    try:
        results = run_checks(args.module, args.fixtures)
    except ValueError as exc:
        raise ConfigError(f"--module: {exc}") from None
    for r in results:
        print(r.line())
    failed = sum(not r.ok for r in results)
    print(f"{len(results) - failed} passed, {failed} failed")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_enumerate(args) -> int:
    if args.d < 1 or args.m < 2:
        raise ConfigError("enumerate: need d >= 1 and m >= 2")
    size = set_size(args.d, args.m)
    # |S| can have far more decimal digits than Python prints by default
    limit = getattr(sys, "get_int_max_str_digits", lambda: None)()
    if limit is not None:
        sys.set_int_max_str_digits(0)
    try:
        print(f"set_size={size}")
    finally:
        if limit is not None:
            sys.set_int_max_str_digits(limit)
    print(f"bits={table_for(args.d, args.m).bit_length}")
    print(f"bound={bits_bound(args.d, args.m)!r}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="daquant", description="Dataset-quantized SGD simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment_flags(p):
        p.add_argument("--config", help="flat key = value config file (defaults if omitted)")
        p.add_argument("--seed", type=int, help="root seed; overrides the config")
        p.add_argument("--out", default=".", help="output directory (default: .)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key; repeatable, applied after the file")

    p = sub.add_parser("run", help="run each configured scheme and write CSV traces")
    experiment_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="run schemes on one task and summarize bits")
    experiment_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("verify", help="run the invariant suite")
    p.add_argument("--module", action="append", help="restrict to a module; repeatable")
    p.add_argument("--fixtures", help="golden wire fixture file to check instead of the bundled one")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("enumerate", help="alphabet size, bits and bits bound for (d, m)")
    p.add_argument("d", type=int)
    p.add_argument("m", type=int)
    p.set_defaults(func=cmd_enumerate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
