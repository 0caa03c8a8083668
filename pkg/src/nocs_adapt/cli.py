"""``nocs-adapt`` command-line tool.

Subcommands: synth, solve, filter, pretrain, adapt, eval, report.

Exit codes: 0 ok, 2 configuration error, 3 input/output error, 4 numerical
failure. Errors are printed to stderr as one JSON object. Commands that
write a directory first drop a ``.partial`` marker there and remove it once
every file is in place; each such directory also receives ``config.json``
holding the effective configuration.

``NOCS_ADAPT_THREADS`` caps the number of worker threads used for
per-instance work (default 1).

Prediction file (``detections.json``)::

    {"schema_version": 1, "detections": [DetectionRecord...],
     "failed": [instance ids], "config": {...}}

Pseudo-label file (input of ``filter --pseudo``)::

    {"schema_version": 1, "nocs": n x [3],
     "logits": {"A": n x 3 x B, "B": ..., "fused": ...}}   # logits optional
"""
from __future__ import annotations

import argparse
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
import json
import logging
import os
from pathlib import Path
import sys

import numpy as np

from . import dataio
from .adapt import pretrain_teacher, run_adaptation, make_pseudo_labels
from .config import SPLITS, ExperimentConfig
from .errors import InvalidSpec, NoConsensus, NonFiniteLoss
from .filtering import FILTER_MODES, bidirectional_filter, ensemble_filter, entropy_filter, topk_conf
from .metrics import DetectionRecord, evaluate
from .model import BRANCHES, ToyPredictor
from .nocs import decode
from .pipeline import ground_truth_records, solve_instance
from .synth import generate_split

log = logging.getLogger("nocs_adapt")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL = 0, 2, 3, 4
PARTIAL = ".partial"


class CliError(Exception):
    def __init__(self, code: int, message: str, kind: str = "error"):
        super().__init__(message)
        self.code = code
        self.kind = kind


def _config_error(message: str) -> CliError:
    return CliError(EXIT_CONFIG, message, "config_error")


def _io_error(message: str) -> CliError:
    return CliError(EXIT_IO, message, "io_error")


# -- plumbing ------------------------------------------------------------

def threads() -> int:
    raw = os.environ.get("NOCS_ADAPT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise _config_error(f"NOCS_ADAPT_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise _config_error("NOCS_ADAPT_THREADS must be >= 1")
    return n


def _map(fn, items):
    """Order-preserving map, threaded when NOCS_ADAPT_THREADS > 1."""
    n = threads()
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def load_config(args) -> ExperimentConfig:
    """Config file (if any) plus command-line overrides."""
    data = {}
    if getattr(args, "config", None):
        try:
            data = dataio.read_json(args.config)
        except FileNotFoundError:
            raise _io_error(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise _config_error(f"config file is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise _config_error("config file must hold a JSON object")
        # accept the config.json echoed by a previous run
        data = data.get("experiment", data)
    try:
        cfg = ExperimentConfig.from_dict(data)
        if getattr(args, "seed", None) is not None:
            cfg = cfg.with_seed(args.seed)
    except InvalidSpec as exc:
        raise _config_error(str(exc)) from None
    return cfg


def _read(what: str, fn, path):
    try:
        return fn(path)
    except FileNotFoundError:
        raise _io_error(f"{what} not found: {path}") from None
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise _io_error(f"cannot read {what} {path}: {exc}") from None


def _load_instances(path) -> list:
    p = Path(path)
    if p.is_dir() or p.name == "manifest.json":
        instances = _read("split", dataio.load_split, p)
    else:
        instances = [_read("instance", dataio.read_instance, p)]
    return sorted(instances, key=lambda i: i.instance_id)


def _load_model(path) -> ToyPredictor:
    return _read("checkpoint", lambda p: ToyPredictor.from_dict(dataio.read_json(p)), path)


class OutputDir:
    """Context manager guarding a run directory with a ``.partial`` marker."""

    def __init__(self, path, cfg: ExperimentConfig, command: dict):
        self.path = Path(path)
        self.cfg = cfg
        self.command = command

    def __enter__(self) -> Path:
        try:
            self.path.mkdir(parents=True, exist_ok=True)
            (self.path / PARTIAL).write_text("incomplete\n", encoding="utf-8")
            dataio.write_json(self.path / "config.json", {"experiment": self.cfg.to_dict(), "command": self.command})
        except OSError as exc:
            raise _io_error(f"cannot write to {self.path}: {exc}") from None
        return self.path

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            (self.path / PARTIAL).unlink()
        return False


def _emit(obj, out) -> None:
    text = dataio.dumps(obj) + "\n"
    if out is None:
        sys.stdout.write(text)
        return
    try:
        dataio.write_text_atomic(out, text)
    except OSError as exc:
        raise _io_error(f"cannot write {out}: {exc}") from None


def _command(args) -> dict:
    skip = {"func", "config", "out", "verbose"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _csv_list(text: str | None):
    return [s.strip() for s in text.split(",") if s.strip()] if text else None


# -- commands ------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = load_config(args)
    over = {}
    if args.classes:
        over["classes"] = tuple(_csv_list(args.classes))
    if args.n_points is not None:
        over["n_points"] = args.n_points
    if args.instances is not None:
        over.update(source_instances=args.instances, target_instances=args.instances, test_instances=args.instances)
    try:
        cfg = replace(cfg, **over)
    except InvalidSpec as exc:
        raise _config_error(str(exc)) from None
    splits = _csv_list(args.splits) or list(SPLITS)
    bad = [s for s in splits if s not in SPLITS]
    if bad:
        raise _config_error(f"unknown splits {bad}; choose from {list(SPLITS)}")
    with OutputDir(args.out, cfg, _command(args)) as out:
        for split in splits:
            count, noise = cfg.split_plan(split)
            try:
                generate_split(cfg.classes, count, noise, cfg.split_seed(split), out / split, split, cfg.n_points)
            except OSError as exc:
                raise _io_error(f"cannot write split {split}: {exc}") from None
            log.info("wrote %d %s instances", count, split)
    return EXIT_OK


def _pseudo_nocs(model, inst):
    return decode(model.forward(inst.feature, ("fused",))["fused"]) if model is not None else inst.label_nocs


def cmd_solve(args) -> int:
    cfg = load_config(args)
    instances = _load_instances(args.input)
    model = _load_model(args.checkpoint) if args.checkpoint else None
    ransac = cfg.ransac

    def solve(inst):
        return solve_instance(inst, _pseudo_nocs(model, inst), ransac)

    records = _map(solve, instances)
    failed = [inst.instance_id for inst, r in zip(instances, records) if r is None]
    if instances and len(failed) == len(instances):
        raise CliError(EXIT_NUMERICAL, "pose solving failed on every instance", "numerical_error")
    _emit({
        "schema_version": dataio.SCHEMA_VERSION,
        "detections": [r.to_dict() for r in records if r is not None],
        "failed": failed,
        "config": {"experiment": cfg.to_dict(), "command": _command(args)},
    }, args.out)
    return EXIT_OK


def _load_pseudo(path, n: int):
    data = _read("pseudo-label file", dataio.read_json, path)
    try:
        nocs = np.asarray(data["nocs"], dtype=float).reshape(-1, 3)
        logits = {k: np.asarray(v, dtype=float) for k, v in data.get("logits", {}).items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise _io_error(f"malformed pseudo-label file {path}: {exc}") from None
    if len(nocs) != n:
        raise _config_error(f"pseudo labels have {len(nocs)} points, instance has {n}")
    return nocs, logits


def cmd_filter(args) -> int:
    cfg = load_config(args)
    mode = args.mode
    instances = _load_instances(args.instance)
    if len(instances) != 1:
        raise _config_error("filter takes a single instance file")
    inst = instances[0]
    if args.pseudo and args.checkpoint:
        raise _config_error("give either --pseudo or --checkpoint, not both")
    if args.pseudo:
        pseudo, logits = _load_pseudo(args.pseudo, inst.n_points)
    elif args.checkpoint:
        pseudo, logits = make_pseudo_labels(_load_model(args.checkpoint), inst)
    else:
        pseudo, logits = inst.label_nocs, {}
    rho = cfg.adapt.rho if args.rho is None else args.rho
    k = cfg.adapt.k_percent if args.k is None else args.k
    if mode == "bidirectional" and rho < 0:
        raise _config_error("rho must be non-negative")
    if mode != "bidirectional" and not 0 < k <= 100:
        raise _config_error("k must lie in (0, 100]")
    needed = set(BRANCHES) if mode in ("softmax_max", "softmax_avg", "argmax_match") else {"fused"}
    if mode not in ("bidirectional", "none") and not needed <= set(logits):
        raise _config_error(f"mode {mode} needs teacher logits for {sorted(needed)}; use --checkpoint or a pseudo file with logits")

    out = {"instance_id": inst.instance_id, "mode": mode, "n_points": inst.n_points}
    if mode == "bidirectional":
        try:
            res = bidirectional_filter(pseudo, inst.depth, rho, cfg.ransac)
        except NoConsensus as exc:
            raise CliError(EXIT_NUMERICAL, str(exc), "numerical_error") from None
        mask = res.kept_mask
        out.update(res.to_dict())
    elif mode == "none":
        mask = np.ones(inst.n_points, dtype=bool)
    elif mode in ("topk", "topk_classwise"):
        mask = topk_conf(logits["fused"], k)
    elif mode == "entropy":
        mask = entropy_filter(logits["fused"], k)
    else:
        pseudo, mask = ensemble_filter(logits["A"], logits["B"], logits["fused"], mode)
    out.update({
        "kept_mask": mask.astype(int).tolist(),
        "kept_count": int(mask.sum()),
        "kept_fraction": float(mask.mean()),
        "pseudo_nocs": np.asarray(pseudo).tolist(),
        "config": {"experiment": cfg.to_dict(), "command": _command(args)},
    })
    _emit(out, args.out)
    return EXIT_OK


def _split_path(explicit, cfg: ExperimentConfig, split: str):
    if explicit:
        return explicit
    if cfg.data_dir:
        return str(Path(cfg.data_dir) / split)
    raise _config_error(f"no {split} split given (pass a path or set data_dir in the config)")


def _write_jsonl(path, rows) -> None:
    dataio.write_text_atomic(path, "".join(dataio.dumps(r) + "\n" for r in rows))


def cmd_pretrain(args) -> int:
    cfg = load_config(args)
    if args.epochs is not None:
        cfg = replace(cfg, adapt=replace(cfg.adapt, pretrain_epochs=args.epochs))
    source = _load_instances(_split_path(args.source, cfg, "source"))
    init = _load_model(args.init) if args.init else None
    try:
        model, curve = pretrain_teacher(source, cfg.adapt, init)
    except NonFiniteLoss as exc:
        raise CliError(EXIT_NUMERICAL, str(exc), "numerical_error") from None
    with OutputDir(args.out, cfg, _command(args)) as out:
        dataio.write_json(out / "teacher.json", model.to_dict())
        _write_jsonl(out / "pretrain.jsonl", [{"epoch": i, "loss": v} for i, v in enumerate(curve)])
    return EXIT_OK


def _modes(text: str | None, default: str) -> list[str]:
    if not text:
        return [default]
    if text == "all":
        return list(FILTER_MODES)
    modes = _csv_list(text)
    bad = [m for m in modes if m not in FILTER_MODES]
    if bad:
        raise _config_error(f"unknown filter modes {bad}; choose from {list(FILTER_MODES)}")
    return modes


def cmd_adapt(args) -> int:
    cfg = load_config(args)
    if args.epochs is not None:
        cfg = replace(cfg, adapt=replace(cfg.adapt, epochs=args.epochs))
    modes = _modes(args.filter_modes, cfg.adapt.filter_mode)
    teacher = _load_model(args.checkpoint)
    target = _load_instances(_split_path(args.target, cfg, "target"))
    results = {}
    for mode in modes:
        try:
            results[mode] = run_adaptation(teacher, target, replace(cfg.adapt, filter_mode=mode))
        except NonFiniteLoss as exc:
            raise CliError(EXIT_NUMERICAL, f"{mode}: {exc}", "numerical_error") from None
    with OutputDir(args.out, cfg, _command(args)) as out:
        for mode, (student, new_teacher, reports) in results.items():
            d = out / mode
            dataio.write_json(d / "student.json", student.to_dict())
            dataio.write_json(d / "teacher.json", new_teacher.to_dict())
            _write_jsonl(d / "report.jsonl", [r.to_dict() for r in reports])
    return EXIT_OK


def _load_detections(path) -> list[DetectionRecord]:
    p = Path(path)
    if p.is_dir():
        p = p / "detections.json"
    data = _read("prediction file", dataio.read_json, p)
    try:
        return [DetectionRecord.from_dict(d) for d in data["detections"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise _io_error(f"malformed prediction file {p}: {exc}") from None


def cmd_eval(args) -> int:
    cfg = load_config(args)
    preds = _load_detections(args.pred)
    gts = ground_truth_records(_load_instances(args.gt))
    report = evaluate(preds, gts, cfg.eval)
    with OutputDir(args.out, cfg, _command(args)) as out:
        dataio.write_json(out / "eval.json", report.to_dict())
        dataio.write_text_atomic(out / "eval.csv", report.to_csv())
    sys.stdout.write(report.to_csv())
    return EXIT_OK


def cmd_report(args) -> int:
    """Side-by-side mean AP of several evaluation runs."""
    rows = []
    columns = None
    for path in args.runs:
        p = Path(path)
        if p.is_dir():
            p = p / "eval.json"
        data = _read("evaluation report", dataio.read_json, p)
        try:
            cols, mean = data["columns"], data["mean"]
        except (KeyError, TypeError) as exc:
            raise _io_error(f"malformed evaluation report {p}: {exc}") from None
        if columns is None:
            columns = cols
        elif cols != columns:
            raise _config_error(f"{p} has columns {cols}, expected {columns}")
        rows.append((str(path), [mean[c] for c in cols]))
    lines = ["run," + ",".join(columns or [])]
    lines += [name + "," + ",".join(f"{v:.4f}" for v in vals) for name, vals in rows]
    _emit_text("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def _emit_text(text: str, out) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        try:
            dataio.write_text_atomic(out, text)
        except OSError as exc:
            raise _io_error(f"cannot write {out}: {exc}") from None


# -- entry point -----------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _config_error(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="nocs-adapt", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic splits")
    p.add_argument("--out", required=True, help="output directory (one subdirectory per split)")
    p.add_argument("--splits", help=f"comma list from {','.join(SPLITS)} (default: all)")
    p.add_argument("--instances", type=int, help="instances per split")
    p.add_argument("--classes", help="comma list of classes")
    p.add_argument("--n-points", type=int, dest="n_points")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("solve", parents=[common], help="solve pose and size per instance")
    p.add_argument("input", help="instance file, split directory or manifest")
    p.add_argument("--checkpoint", help="use this model's NOCS prediction instead of the stored labels")
    p.add_argument("--out", help="output file (default: stdout)")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("filter", parents=[common], help="filter one instance's pseudo labels")
    p.add_argument("instance", help="instance file")
    p.add_argument("--pseudo", help="pseudo-label file")
    p.add_argument("--checkpoint", help="derive pseudo labels from this model")
    p.add_argument("--mode", choices=FILTER_MODES, default="bidirectional")
    p.add_argument("--rho", type=float)
    p.add_argument("--k", type=float)
    p.add_argument("--out", help="output file (default: stdout)")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("pretrain", parents=[common], help="train the teacher on the source split")
    p.add_argument("--source", help="source split directory")
    p.add_argument("--init", help="start from this checkpoint")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", parents=[common], help="self-train on the target split")
    p.add_argument("--checkpoint", required=True, help="pretrained teacher")
    p.add_argument("--target", help="target split directory")
    p.add_argument("--filter-modes", dest="filter_modes", help="comma list or 'all'")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", parents=[common], help="average precision of predictions")
    p.add_argument("--pred", required=True, help="detections file or directory holding detections.json")
    p.add_argument("--gt", required=True, help="ground-truth split directory or manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="tabulate mean AP of evaluation runs")
    p.add_argument("runs", nargs="+", help="eval.json files or directories holding one")
    p.add_argument("--out", help="CSV output file (default: stdout)")
    p.set_defaults(func=cmd_report)
    return parser


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        threads()
        return args.func(args)
    except CliError as exc:
        return _fail(exc.code, exc.kind, str(exc))
    except (InvalidSpec, ValueError) as exc:
        return _fail(EXIT_CONFIG, "config_error", str(exc))
    except OSError as exc:
        return _fail(EXIT_IO, "io_error", str(exc))
    except (NoConsensus, FloatingPointError) as exc:
        return _fail(EXIT_NUMERICAL, "numerical_error", str(exc))


if __name__ == "__main__":
    sys.exit(main())
