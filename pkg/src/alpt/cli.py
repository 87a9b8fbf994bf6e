"""Command-line harness: one experiment per output directory, digest-linked artifacts.

Every command appends one JSON line to ``<out>/manifest.jsonl`` naming its
inputs and outputs with sha256 digests. Inputs are checked against the
manifest that produced them before anything runs, so a file edited after the
fact is refused instead of silently reused.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import replace
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np
import torch

from .data import apply_action_budget, load_dataset, save_dataset
from .evaluation import MAZE_EVAL, emit_curve, evaluate, steps_to_threshold
from .maze import MazeGenerationError, MazeSpec, collect_trajectories, generate_maze, render_svg
from .models import load_checkpoint, save_checkpoint
from .training import ExperimentData, Regime, RegimeError, RunConfig, train

log = logging.getLogger("alpt")

MANIFEST = "manifest.jsonl"
LOCK = ".lock"
OUT_ENV = "ALPT_OUT_ROOT"

EXIT_CODES = {
    "usage": 2,
    "io": 3,
    "stale": 4,
    "locked": 5,
    "regime": 6,
    "generation": 7,
    "config": 8,
    "internal": 1,
}


class HarnessError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def tool_version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


def sha256(path) -> str:
    """File digest; a directory digests the sorted (name, digest) pairs of its files."""
    path = Path(path)
    h = hashlib.sha256()
    if path.is_dir():
        for child in sorted(p for p in path.rglob("*") if p.is_file()):
            h.update(f"{child.relative_to(path).as_posix()}\0{sha256(child)}\n".encode())
        return h.hexdigest()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# -- manifests -----------------------------------------------------------------


def _find_manifest(path: Path) -> Path | None:
    for parent in path.resolve().parents:
        candidate = parent / MANIFEST
        if candidate.exists():
            return candidate
    return None


def read_manifest(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def recorded_digest(artifact: Path) -> str | None:
    """Digest of ``artifact`` in the latest manifest entry that wrote it."""
    manifest = _find_manifest(artifact)
    if manifest is None:
        return None
    key = os.path.relpath(artifact.resolve(), manifest.parent.resolve())
    digest = None
    for entry in read_manifest(manifest):
        digest = entry.get("outputs", {}).get(key, digest)
    return digest


def check_input(path) -> Path:
    """Refuse missing, untracked, or modified artifacts."""
    path = Path(path)
    if not path.exists():
        raise HarnessError("io", f"{path}: no such file")
    expected = recorded_digest(path)
    if expected is None:
        raise HarnessError("stale", f"{path}: not recorded in any manifest")
    actual = sha256(path)
    if actual != expected:
        raise HarnessError("stale", f"{path}: digest {actual[:12]} does not match manifest {expected[:12]}")
    return path


class Experiment:
    """An output directory with an append-only manifest and a lock file."""

    def __init__(self, root):
        self.root = Path(root)

    @contextmanager
    def locked(self):
        self.root.mkdir(parents=True, exist_ok=True)
        lock = self.root / LOCK
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise HarnessError("locked", f"{self.root} is in use by another command ({lock} exists)") from None
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield self
        finally:
            lock.unlink(missing_ok=True)

    def rel(self, path) -> str:
        return os.path.relpath(Path(path).resolve(), self.root.resolve())

    def record(self, command: str, args: dict, inputs, outputs, **fields) -> dict:
        entry = {
            "experiment": self.root.name,
            "command": command,
            "args": args,
            "inputs": {str(p): sha256(p) for p in inputs},
            "outputs": {self.rel(p): sha256(p) for p in outputs},
            "tool_version": tool_version(),
            **fields,
        }
        with (self.root / MANIFEST).open("a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
        return entry


# -- helpers -------------------------------------------------------------------


def load_maze(path) -> MazeSpec:
    return MazeSpec.from_dict(json.loads(Path(check_input(path)).read_text()))


def _load_config(args) -> dict:
    if not args.config:
        return {}
    try:
        return json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise HarnessError("config", f"{args.config}: {exc}") from exc


def _args_dict(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def _write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _read_log(path) -> list[tuple[int, float]]:
    with open(path) as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    return [(int(r["step"]), float(r["success_rate"])) for r in rows]


# -- commands ------------------------------------------------------------------


def cmd_generate(args, exp: Experiment):
    try:
        maze = generate_maze(args.seed, args.style, args.size, args.size, args.density)
    except MazeGenerationError as exc:
        raise HarnessError("generation", str(exc)) from exc
    path = _write_json(exp.root / f"maze-{maze.name}.json", maze.to_dict())
    svg = exp.root / f"maze-{maze.name}.svg"
    svg.write_text(render_svg(maze))
    exp.record("generate", _args_dict(args), [], [path, svg], seed_list=[args.seed])
    return path


def cmd_collect(args, exp: Experiment):
    maze = load_maze(args.maze)
    ds = collect_trajectories(maze, args.epsilon, args.count, args.max_len, args.seed)
    path = save_dataset(ds, exp.root / f"data-{maze.name}.alpt")
    exp.record("collect", _args_dict(args), [args.maze], [path], seed_list=[args.seed], n_transitions=ds.n_transitions)
    return path


def cmd_mask(args, exp: Experiment):
    ds = load_dataset(check_input(args.dataset))
    try:
        lab, unl = apply_action_budget(ds, args.budget, args.segment_len, args.seed)
    except ValueError as exc:
        raise HarnessError("config", str(exc)) from exc
    stem = Path(args.dataset).stem
    p_lab = save_dataset(lab, exp.root / f"{stem}-b{args.budget}-s{args.seed}-labelled.alpt")
    p_unl = save_dataset(unl, exp.root / f"{stem}-b{args.budget}-s{args.seed}-unlabelled.alpt")
    exp.record(
        "mask", _args_dict(args), [args.dataset], [p_lab, p_unl], seed_list=[args.seed],
        counts={"labelled": lab.label_budget_used, "unlabelled": unl.n_transitions, "total": ds.n_transitions},
    )
    return p_lab, p_unl


def cmd_train(args, exp: Experiment):
    try:
        regime = Regime(args.regime)
    except ValueError as exc:
        raise HarnessError("regime", str(exc)) from exc
    lab = load_dataset(check_input(args.labelled))
    if lab.metadata.get("part") != "labelled":
        raise HarnessError("regime", f"{regime.value} needs a labelled subset produced by mask")
    unl_path = args.unlabelled
    if unl_path is None:
        raise HarnessError("regime", f"{regime.value} needs the unlabelled remainder produced by mask")
    unl = load_dataset(check_input(unl_path))
    sources = [load_dataset(check_input(p)) for p in args.sources]
    if regime.uses_sources and not sources:
        raise HarnessError("regime", f"{regime.value} needs at least one --sources dataset")
    overrides = _load_config(args)
    try:
        run = RunConfig.from_dict(
            {"finetune_steps": args.steps, "eval_every": args.eval_every, **overrides,
             "regime": regime.value, "single_stage": True, "seed": args.seed}
        )
    except (TypeError, ValueError) as exc:
        raise HarnessError("config", str(exc)) from exc
    maze = load_maze(args.maze) if args.maze else None
    eval_cfg = replace(MAZE_EVAL, episodes=args.episodes, max_steps=args.max_steps, seed=args.seed)
    run_dir = exp.root / (args.name or f"{regime.value}-s{args.seed}")
    run_dir.mkdir(parents=True, exist_ok=True)
    rows = []

    def callback(step, trainer):
        if maze is not None:
            r = evaluate(trainer.dt, maze, eval_cfg, trainer.vocab, step)
            rows.append((step, r.success_rate, r.mean_return))

    data = ExperimentData(lab, unl, sources)
    try:
        trainer = train(run, data, callback)
    except RegimeError as exc:
        raise HarnessError("regime", str(exc)) from exc
    outputs = [save_checkpoint(trainer.dt, run_dir / "dt.ckpt", run.finetune_steps, {"vocab": list(trainer.vocab)})]
    if trainer.idm is not None:
        outputs.append(save_checkpoint(trainer.idm, run_dir / "idm.ckpt", run.finetune_steps))
    outputs.append(_write_json(run_dir / "run.json", {**run.to_dict(), "vocab": list(trainer.vocab)}))
    hist = run_dir / "history.tsv"
    with hist.open("w") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["step", "stage", "lr", "idm_loss", "dt_loss"])
        w.writerows((h.step, h.stage, h.lr, h.idm_loss, h.dt_loss) for h in trainer.history)
    outputs.append(hist)
    if maze is not None:
        curve = run_dir / "log.tsv"
        with curve.open("w") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["step", "success_rate", "mean_return"])
            w.writerows(rows)
        outputs.append(curve)
    inputs = [args.labelled, unl_path, *args.sources] + ([args.maze] if args.maze else [])
    exp.record(
        "train", _args_dict(args), inputs, outputs, regime=regime.value, seed_list=[args.seed],
        config=run.to_dict(), target=maze.name if maze else None,
    )
    return run_dir


def _run_entry(run_dir: Path) -> dict:
    """Latest train manifest entry that wrote ``run_dir/run.json``."""
    path = check_input(run_dir / "run.json")
    manifest = _find_manifest(path)
    key = os.path.relpath(path.resolve(), manifest.parent.resolve())
    entries = [e for e in read_manifest(manifest) if key in e.get("outputs", {})]
    return entries[-1]


def cmd_eval(args, exp: Experiment):
    maze = load_maze(args.maze)
    outputs, logs = [], []
    for run_dir in map(Path, args.runs):
        dt, header = load_checkpoint(check_input(run_dir / "dt.ckpt"))
        cfg = replace(MAZE_EVAL, episodes=args.episodes, max_steps=args.max_steps, seed=args.seed)
        report = evaluate(dt, maze, cfg, header["extra"]["vocab"], header["step"])
        outputs.append(_write_json(exp.root / f"report-{run_dir.name}.json", report.to_dict()))
        log_path = run_dir / "log.tsv"
        if log_path.exists():
            logs.append(_read_log(check_input(log_path)))
    if logs:
        try:
            outputs += emit_curve({"runs": logs}, exp.root / f"curve-{maze.name}")
        except ValueError as exc:
            raise HarnessError("config", str(exc)) from exc
    exp.record("eval", _args_dict(args), [args.maze, *args.runs], outputs, seed_list=[args.seed])
    return outputs


def _group_runs(runs) -> dict[str, list]:
    groups: dict[str, list] = {}
    for run_dir in map(Path, runs):
        entry = _run_entry(run_dir)
        groups.setdefault(entry["regime"], []).append((run_dir, entry))
    return groups


def cmd_plot(args, exp: Experiment):
    groups = _group_runs(args.runs)
    logs = {
        regime: [_read_log(check_input(d / "log.tsv")) for d, _ in members] for regime, members in groups.items()
    }
    try:
        outputs = list(emit_curve(logs, exp.root / args.name))
    except ValueError as exc:
        raise HarnessError("config", str(exc)) from exc
    exp.record("plot", _args_dict(args), args.runs, outputs)
    return outputs


def compare_logs(logs: dict[str, list[list[tuple[int, float]]]], threshold: float, budgets: dict[str, int]) -> dict:
    """Steps-to-threshold table and pairwise ratios (row regime over column regime)."""
    table = {}
    for regime, runs in logs.items():
        steps = [steps_to_threshold([s for s, _ in r], [v for _, v in r], threshold) for r in runs]
        filled = [s if s is not None else budgets[regime] for s in steps]
        table[regime] = {"per_seed": steps, "mean_steps": float(np.mean(filled)), "censored": sum(s is None for s in steps)}
    ratios = {}
    for a, ra in table.items():
        for b, rb in table.items():
            if a == b:
                continue
            ok = rb["censored"] == 0 and rb["mean_steps"] > 0
            ratios[f"{a}/{b}"] = ra["mean_steps"] / rb["mean_steps"] if ok else None
    return {"threshold": threshold, "regimes": table, "ratios": ratios}


def cmd_compare(args, exp: Experiment):
    if len(args.runs) < 2:
        raise HarnessError("config", "compare needs at least two runs")
    groups = _group_runs(args.runs)
    targets = {e.get("target") for members in groups.values() for _, e in members}
    if len(targets) != 1 or None in targets:
        raise HarnessError("config", f"runs were evaluated on different targets: {sorted(map(str, targets))}")
    logs = {r: [_read_log(check_input(d / "log.tsv")) for d, _ in m] for r, m in groups.items()}
    budgets = {r: max(e["config"]["finetune_steps"] for _, e in m) for r, m in groups.items()}
    result = compare_logs(logs, args.threshold, budgets)
    path = _write_json(exp.root / f"{args.name}.json", result)
    exp.record("compare", _args_dict(args), args.runs, [path])
    for regime, row in result["regimes"].items():
        print(f"{regime}\tmean_steps={row['mean_steps']:.0f}\tcensored={row['censored']}")
    for pair, ratio in result["ratios"].items():
        print(f"{pair}\t{'censored' if ratio is None else f'{ratio:.2f}'}")
    return path


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="JSON file of run config overrides")
    common.add_argument("--out", help=f"experiment directory (default ${OUT_ENV} or ./runs)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="alpt", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="generate a maze layout")
    g.add_argument("--style", default="blocked", choices=["blocked", "tunneled", "corridor"])
    g.add_argument("--size", type=int, default=20)
    g.add_argument("--density", type=float, default=0.15)
    g.set_defaults(func=cmd_generate)

    c = sub.add_parser("collect", parents=[common], help="roll out the noisy expert in a maze")
    c.add_argument("--maze", required=True)
    c.add_argument("--count", type=int, default=500)
    c.add_argument("--epsilon", type=float, default=0.5)
    c.add_argument("--max-len", type=int, default=500)
    c.set_defaults(func=cmd_collect)

    m = sub.add_parser("mask", parents=[common], help="keep a budget of action labels")
    m.add_argument("--dataset", required=True)
    m.add_argument("--budget", type=int, default=250)
    m.add_argument("--segment-len", type=int, default=25)
    m.set_defaults(func=cmd_mask)

    t = sub.add_parser("train", parents=[common], help="train one regime")
    t.add_argument("--regime", required=True, choices=[r.value for r in Regime])
    t.add_argument("--labelled", required=True)
    t.add_argument("--unlabelled")
    t.add_argument("--sources", nargs="*", default=[])
    t.add_argument("--maze", help="target maze; enables periodic evaluation")
    t.add_argument("--steps", type=int, default=4000)
    t.add_argument("--eval-every", type=int, default=250)
    t.add_argument("--episodes", type=int, default=100)
    t.add_argument("--max-steps", type=int, default=500)
    t.add_argument("--name")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate trained runs")
    e.add_argument("--maze", required=True)
    e.add_argument("--runs", nargs="+", required=True)
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--max-steps", type=int, default=500)
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plot", parents=[common], help="learning curves per regime")
    pl.add_argument("--runs", nargs="+", required=True)
    pl.add_argument("--name", default="curves")
    pl.set_defaults(func=cmd_plot)

    cp = sub.add_parser("compare", parents=[common], help="steps-to-threshold table and ratios")
    cp.add_argument("--runs", nargs="+", required=True)
    cp.add_argument("--threshold", type=float, default=0.8)
    cp.add_argument("--name", default="compare")
    cp.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    out = args.out or os.environ.get(OUT_ENV) or "runs"
    exp = Experiment(out)
    try:
        with exp.locked():
            result = args.func(args, exp)
    except HarnessError as exc:
        print(json.dumps({"error": exc.category, "message": str(exc)}), file=sys.stderr)
        return EXIT_CODES[exc.category]
    except OSError as exc:
        print(json.dumps({"error": "io", "message": f"{exc.filename}: {exc.strerror}"}), file=sys.stderr)
        return EXIT_CODES["io"]
    if result is not None and not isinstance(result, (list, tuple)):
        print(result)
    elif isinstance(result, (list, tuple)):
        print("\n".join(map(str, result)))
    return 0


if __name__ == "__main__":
    sys.exit(main())
