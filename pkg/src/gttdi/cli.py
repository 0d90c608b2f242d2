"""Command-line entry points.

    gttdi generate --config c.toml --out run/
    gttdi corrupt --pattern rm --rate 0.5 --out run/
    gttdi build-graph | embed | train | impute | evaluate --out run/
    gttdi ablate --axis kl_loss --out run/
    gttdi check-grads

Every command writes ``manifest-<command>.json`` next to its outputs.  Errors
print one JSON line on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from .corruption import CorruptionSpec, Pattern, corrupt
from .data import MinMaxScaler, RoadNetwork, TrafficSeriesTensor, load_cache, read_csv, save_cache, split_by_days, write_csv
from .evaluation import EVAL_RATES, MetricsReport, score_baselines
from .graph import load_edges, save_edges
from .model import attention_edges, load_checkpoint, save_checkpoint
from .pipeline import ABLATION_AXES, Prepared, ablate, build_edges, build_embeddings, fit, seed_for
from .scenario import generate
from .semantic import EmbeddingTable, assemble_semantic_tensor, describe_all
from .training import Imputer, impute_tensor

COMMANDS = ("generate", "corrupt", "build-graph", "embed", "train", "impute", "evaluate", "ablate", "check-grads")


class CliError(Exception):
    def __init__(self, kind: str, message: str, path: str | None = None):
        super().__init__(message)
        self.kind, self.path = kind, path


class Run:
    """Resolved configuration plus bookkeeping for one command invocation."""

    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.args = args
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        cfg = cfgmod.load(args.config) if args.config else cfgmod.RunConfig()
        self.cfg = cfgmod.with_seed(cfg, args.seed)
        self.inputs: dict[str, Path] = {}
        self.outputs: dict[str, Path] = {}
        self.t0 = time.perf_counter()

    @property
    def exp(self):
        return self.cfg.experiment

    def path(self, name: str) -> Path:
        p = Path(getattr(self.cfg.paths, name))
        return p if p.is_absolute() else self.out / p

    def need(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise CliError("missing-input", f"required {name} artifact not found: {p}", str(p))
        self.inputs[name] = p
        return p

    def made(self, name: str, path: Path) -> Path:
        self.outputs[name] = path
        return path

    def say(self, msg: str) -> None:
        if not self.args.quiet:
            print(msg)

    def write_manifest(self) -> None:
        def digest(p: Path):
            if p.is_dir():
                return None
            return hashlib.sha256(p.read_bytes()).hexdigest()

        manifest = {
            "command": self.command,
            "config": cfgmod.to_dict(self.cfg),
            "config_hash": cfgmod.config_hash(self.cfg),
            "seed": self.exp.seed,
            "args": {k: v for k, v in vars(self.args).items() if k != "func"},
            "versions": {"gttdi": __version__, "python": platform.python_version(), "numpy": np.__version__},
            "wall_seconds": round(time.perf_counter() - self.t0, 3),
            "inputs": {k: {"path": str(v), "sha256": digest(v)} for k, v in self.inputs.items()},
            "outputs": {k: {"path": str(v), "sha256": digest(v)} for k, v in self.outputs.items()},
        }
        (self.out / f"manifest-{self.command}.json").write_text(json.dumps(manifest, indent=1, default=str) + "\n")

    # ------------------------------------------------------------ artifact loading

    def network(self) -> RoadNetwork:
        return RoadNetwork.load(self.need("network"))

    def truth(self, network: RoadNetwork) -> TrafficSeriesTensor:
        sc = self.exp.scenario
        return read_csv(self.need("data"), network, sc.interval_minutes, sc.slices, sc.units)

    def corrupted(self) -> tuple[TrafficSeriesTensor, dict]:
        path = self.need("corrupted")
        meta_path = path.with_suffix(".json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        t = load_cache(path, self.exp.scenario.units)
        return t, meta

    def prepared(self, with_edges: bool = True) -> Prepared:
        network = self.network()
        truth = self.truth(network)
        train_t, val_t, test_t, split = split_by_days(truth)
        edges = load_edges(self.need("edges")) if with_edges else None
        table = EmbeddingTable.load(self.need("embeddings"))
        sem = assemble_semantic_tensor(describe_all(truth, network), table, self.exp.eval.labels)
        return Prepared(network, truth, train_t, val_t, test_t, split, edges, table, sem)


# ---------------------------------------------------------------- commands

def cmd_generate(run: Run) -> None:
    network, tensor = generate(run.exp.scenario)
    write_csv(run.made("data", run.path("data")), tensor, network)
    network.save(run.made("network", run.path("network")))
    run.say(f"generated {tensor.n_days} days x {tensor.n_sensors} sensors -> {run.path('data')}")


def cmd_corrupt(run: Run) -> None:
    pattern = Pattern(run.args.pattern or run.exp.train.pattern)
    rate = run.args.rate if run.args.rate is not None else 0.5
    truth = run.truth(run.network())
    spec = CorruptionSpec(pattern, rate, seed_for(run.exp.seed, f"corrupt-{pattern.value}"))
    inc = corrupt(truth, spec)
    out = run.made("corrupted", run.path("corrupted"))
    save_cache(out, inc)
    meta = out.with_suffix(".json")
    meta.write_text(json.dumps({"pattern": pattern.value, "rate": rate}, sort_keys=True) + "\n")
    run.made("corrupted_meta", meta)
    run.say(f"{pattern.value.upper()} at {rate:.0%}: {1 - inc.mask.mean():.3f} of cells missing -> {out}")


def cmd_build_graph(run: Run) -> None:
    network = run.network()
    train_t, *_ = split_by_days(run.truth(network))
    edges = build_edges(network, train_t, run.exp.graph, run.exp.seed)
    save_edges(run.made("edges", run.path("edges")), edges)
    run.say(f"{edges.n_edges // 2} undirected edges -> {run.path('edges')}")


def cmd_embed(run: Run) -> None:
    network = run.network()
    _, table = build_embeddings(network, run.truth(network), run.exp.embed, run.exp.seed)
    table.save(run.made("embeddings", run.path("embeddings")))
    run.say(f"{len(table.vocabulary)} tokens x {table.dim} -> {run.path('embeddings')}")


def cmd_train(run: Run) -> None:
    prep = run.prepared()
    pattern = Pattern(run.args.pattern or run.exp.train.pattern)
    result = fit(prep, run.exp, pattern, verbose=not run.args.quiet)
    imp = result.imputer
    save_checkpoint(run.made("checkpoint", run.path("checkpoint")), imp.params,
                    {"scaler": [imp.scaler.lo, imp.scaler.hi], "pattern": pattern.value,
                     "best_epoch": result.best_epoch})
    with open(run.made("train_log", run.path("train_log")), "w") as fh:
        for rec in result.log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    run.say(f"best epoch {result.best_epoch} of {len(result.log)} -> {run.path('checkpoint')}")


def _imputer(run: Run, prep: Prepared) -> Imputer:
    params, extra = load_checkpoint(run.need("checkpoint"))
    lo, hi = extra["scaler"]
    return Imputer(params, MinMaxScaler(lo, hi), attention_edges(prep.edges, prep.truth.n_sensors))


def cmd_impute(run: Run) -> None:
    if not run.path("checkpoint").exists():
        run.need("checkpoint")
    prep = run.prepared()
    inc, _ = run.corrupted()
    imp = _imputer(run, prep)
    filled = impute_tensor(imp, inc, prep.semantic)
    # a complete tensor; flows cannot be negative, so stray model outputs below 0 are clipped
    out = TrafficSeriesTensor(np.maximum(filled, 0.0), np.ones(filled.shape, dtype=bool), inc.slices_per_day,
                              inc.interval_minutes, inc.days, units=inc.units, role="imputed")
    save_cache(run.made("imputed", run.path("imputed")), out)
    run.say(f"imputed {int((~inc.mask).sum())} cells -> {run.path('imputed')}")


def _write_report(run: Run, report: MetricsReport, stem: str, figure) -> None:
    rdir = run.path("reports")
    rdir.mkdir(parents=True, exist_ok=True)
    jsonl, txt, png = rdir / f"{stem}.jsonl", rdir / f"{stem}.txt", rdir / f"{stem}.png"
    jsonl.write_text(report.to_jsonl())
    txt.write_text(report.to_text())
    figure(png)
    timing = {f"{r.method}|{r.pattern}|{r.rate}": r.wall_seconds for r in report.rows}
    (rdir / f"{stem}.timing.json").write_text(json.dumps(timing, indent=1, sort_keys=True) + "\n")
    for name, p in (("report_jsonl", jsonl), ("report_txt", txt), ("report_png", png)):
        run.made(name, p)
    run.say(report.to_text())


def cmd_evaluate(run: Run) -> None:
    from .plotting import metrics_figure

    run.need("checkpoint")
    prep = run.prepared()
    inc, meta = run.corrupted()
    imp = _imputer(run, prep)
    pattern, rate = meta.get("pattern", "rm"), float(meta.get("rate", 1.0 - inc.mask.mean()))
    test_rows = prep.rows(prep.test)
    sel = (prep.truth.mask & ~inc.mask)[test_rows]
    if not sel.any():
        raise CliError("empty-selection", "no originally missing cells on test days", str(run.path("corrupted")))
    report = MetricsReport()
    t0 = time.perf_counter()
    part = inc.select_days([prep.truth.days.index(d) for d in prep.test.days], role="test")
    filled = impute_tensor(imp, part, prep.semantic[test_rows])
    report.add("GT-TDI", pattern, rate, prep.truth.values[test_rows], filled, sel,
               time.perf_counter() - t0, run.exp.seed)
    score_baselines(prep.truth, inc, test_rows, pattern, rate, report, run.exp.seed, run.exp.eval.knn_k)
    _write_report(run, report, "metrics", lambda p: metrics_figure(report, p))


def cmd_ablate(run: Run) -> None:
    from .plotting import ablation_figure

    axis = run.args.axis
    if axis not in ABLATION_AXES:
        raise CliError("bad-argument", f"unknown ablation axis '{axis}'")
    exp = run.exp
    if run.args.pattern:
        exp = replace(exp, train=replace(exp.train, pattern=Pattern(run.args.pattern)))
    values = run.args.values
    if values:
        kind = type(ABLATION_AXES[axis][0])
        values = [kind(v) for v in values]
    rates = [run.args.rate] if run.args.rate is not None else EVAL_RATES
    report = ablate(exp, axis, values, rates, workers=run.cfg.workers)
    _write_report(run, report, f"ablation-{axis}", lambda p: ablation_figure(report, axis, p))


def cmd_check_grads(run: Run) -> None:
    from .gradcheck import check_model_gradients

    results = check_model_gradients(seed=run.exp.seed)
    worst = max(results.values())
    lines = [f"{name:<24}{err:.3e}" for name, err in sorted(results.items())]
    path = run.out / "check_grads.txt"
    path.write_text("\n".join(lines) + f"\nmax relative error {worst:.3e}\n")
    run.made("check_grads", path)
    run.say(path.read_text().rstrip())
    if worst >= 1e-4:
        raise CliError("gradient-mismatch", f"max relative error {worst:.3e} >= 1e-4")


HANDLERS = {
    "generate": cmd_generate, "corrupt": cmd_corrupt, "build-graph": cmd_build_graph,
    "embed": cmd_embed, "train": cmd_train, "impute": cmd_impute, "evaluate": cmd_evaluate,
    "ablate": cmd_ablate, "check-grads": cmd_check_grads,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gttdi", description="Graph-transformer traffic data imputation")
    parser.add_argument("--print-defaults", action="store_true", help="print the default TOML config and exit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML experiment config")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--out", default=".", help="artifact directory")
    common.add_argument("--pattern", choices=["rm", "nm"])
    common.add_argument("--rate", type=float)
    common.add_argument("--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command")
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "ablate":
            p.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES))
            p.add_argument("--values", nargs="+", help="subset of axis values")
    return parser


def _fail(kind: str, message: str, path: str | None = None) -> int:
    rec = {"error": kind, "message": message}
    if path:
        rec["path"] = path
    print(json.dumps(rec), file=sys.stderr)
    return 2


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) if exc.code in (0, None) else _fail("usage", "invalid command line")
    if args.print_defaults:
        print(cfgmod.dumps(cfgmod.RunConfig()), end="")
        return 0
    if not args.command:
        return _fail("usage", f"a command is required: one of {', '.join(COMMANDS)}")
    if args.rate is not None and not 0.0 <= args.rate <= 1.0:
        return _fail("bad-argument", f"--rate must lie in [0, 1], got {args.rate}")
    try:
        run = Run(args.command, args)
        HANDLERS[args.command](run)
        run.write_manifest()
    except CliError as exc:
        return _fail(exc.kind, str(exc), exc.path)
    except cfgmod.ConfigError as exc:
        return _fail("malformed-config", str(exc), exc.path)
    except FileNotFoundError as exc:
        return _fail("missing-input", str(exc), str(exc).rsplit(": ", 1)[-1])
    except ValueError as exc:
        return _fail("invalid-input", str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
