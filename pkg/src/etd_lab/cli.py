"""Command-line entry point: ``etd-lab <command> ...``.

Every command writes a run manifest before starting work, writes its
outputs atomically, refuses to overwrite existing outputs unless ``--force``
is given, and on failure exits nonzero with a JSON error object on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import AngularProfile, SelectionError, profile_model, select_config
from .checkpoint import Checkpoint, CheckpointError, atomic_write_bytes, load_checkpoint, save_checkpoint
from .etd import EtdConfig, EtdConfigError
from .model import ModelConfig
from .tasks import ExampleBatch, TaskSpec, bundled_corpus_path, load_corpus
from .train import (
    AdaptiveSetting,
    EvalReport,
    TrainConfig,
    compare_baseline_shapes,
    evaluate,
    evaluate_predictions,
    pretrain,
    summarize,
    sweep_encoder_position,
    sweep_k,
    train,
    write_summary_csv,
)

DEFAULTS = {
    "model": ModelConfig().to_dict(),
    "task": TaskSpec().to_dict(),
    "train": TrainConfig().to_dict(),
    "etd": None,
    "adaptive": {"epsilon": 0.01, "n_max": 10, "ponder": 0.0, "router_bias": 0.0},
    "analysis": {"gap": 1, "sensitivity": 1.0, "smooth": True, "seq_len": 32, "max_sequences": 256},
}


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = 1):
        super().__init__(message)
        self.kind = kind
        self.code = code


def resolve_config(user: dict | None) -> dict:
    """Fill every missing field from the defaults; unknown keys are errors."""
    user = user or {}
    out = json.loads(json.dumps(DEFAULTS))
    for section, value in user.items():
        if section not in out:
            raise CliError("config_error", f"unknown config section {section!r}", 2)
        if isinstance(out[section], dict):
            if not isinstance(value, dict):
                raise CliError("config_error", f"config section {section!r} must be an object", 2)
            unknown = set(value) - set(out[section])
            if unknown:
                raise CliError("config_error", f"unknown keys in {section!r}: {sorted(unknown)}", 2)
            out[section].update(value)
        else:
            out[section] = value
    try:
        ModelConfig.from_dict(out["model"])
        TaskSpec.from_dict(out["task"])
        TrainConfig.from_dict(out["train"])
        if out["etd"] is not None:
            EtdConfig.parse(out["etd"], iterations=1)
    except (TypeError, ValueError) as exc:
        raise CliError("config_error", str(exc), 2) from None
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return resolve_config({})
    p = Path(path)
    if not p.is_file():
        raise CliError("file_not_found", f"config file not found: {path}")
    try:
        return resolve_config(json.loads(p.read_text(encoding="utf-8")))
    except json.JSONDecodeError as exc:
        raise CliError("config_error", f"{path}: invalid JSON: {exc}", 2) from None


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict
    outputs: dict
    seed: int | None
    version: str = __version__
    argv: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n"


def write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _check_outputs(paths: list[str | None], force: bool) -> None:
    for p in paths:
        if p is not None and Path(p).exists() and not force:
            raise CliError("output_exists", f"{p} exists; pass --force to overwrite")


def _manifest(args, config: dict, inputs: dict, outputs: dict, seed) -> None:
    """Written before any work; lives next to the primary output."""
    primary = next(v for v in outputs.values() if v is not None)
    primary = Path(primary)
    path = primary / "manifest.json" if outputs.get("dir") else primary.with_name(primary.name + ".manifest.json")
    m = RunManifest(args.command, config, inputs, outputs, seed, argv=list(getattr(args, "argv", sys.argv[1:])))
    write_text(path, m.to_json())


def _load_ckpt(path: str) -> Checkpoint:
    if not Path(path).is_file():
        raise CliError("file_not_found", f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _parse_ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise CliError("config_error", f"expected comma-separated integers, got {text!r}", 2) from None


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(args) -> None:
    cfg = load_config(args.config)
    _check_outputs([args.out, args.log], args.force)
    _manifest(args, cfg, {"config": args.config}, {"checkpoint": args.out, "log": args.log}, cfg["train"]["seed"])
    task = TaskSpec.from_dict(cfg["task"])
    train_data, _ = task.splits()
    if args.log and Path(args.log).exists():
        Path(args.log).unlink()
    ckpt = pretrain(ModelConfig.from_dict(cfg["model"]), train_data, TrainConfig.from_dict(cfg["train"]), args.log,
                    meta={"task": task.to_dict()})
    save_checkpoint(args.out, ckpt)
    print(f"wrote {args.out} (step {ckpt.step})")


def cmd_profile(args) -> None:
    cfg = load_config(args.config)
    corpus_path = args.corpus or str(bundled_corpus_path())
    seq_len = args.seq_len or cfg["analysis"]["seq_len"]
    _check_outputs([args.out, args.csv], args.force)
    _manifest(args, cfg, {"checkpoint": args.ckpt, "corpus": corpus_path}, {"profile": args.out, "csv": args.csv}, None)
    ckpt = _load_ckpt(args.ckpt)
    corpus = load_corpus(corpus_path, seq_len)[: args.max_sequences or cfg["analysis"]["max_sequences"]]
    prof = profile_model(ckpt.params, corpus, gap=args.gap, corpus_id=Path(corpus_path).name)
    write_text(args.out, json.dumps(prof.to_dict(), indent=2) + "\n")
    if args.csv:
        tmp = Path(args.csv).with_name(Path(args.csv).name + ".tmp")
        prof.write_csv(tmp)
        os.replace(tmp, args.csv)
    print(" ".join(f"{d:.4f}" for d in prof.distances))


def cmd_select(args) -> None:
    p = Path(args.profile)
    if not p.is_file():
        raise CliError("file_not_found", f"profile not found: {args.profile}")
    _check_outputs([args.out], args.force)
    if args.out:
        _manifest(args, {"sensitivity": args.sensitivity, "smooth": not args.no_smooth}, {"profile": args.profile},
                  {"report": args.out}, None)
    prof = AngularProfile.from_dict(json.loads(p.read_text(encoding="utf-8")))
    try:
        sel = select_config(prof, S=args.sensitivity, smooth=not args.no_smooth)
    except SelectionError as exc:
        raise CliError("selection_error", str(exc)) from None
    report = sel.report(prof)
    if args.out:
        write_text(args.out, json.dumps(report, indent=2) + "\n")
    print(sel.label)


def _mode_from_args(args, cfg: dict, n_layers: int):
    if args.adaptive:
        part = args.partition or cfg["etd"]
        if part is None:
            raise CliError("config_error", "--adaptive needs --partition N_E-N_T*k-N_D", 2)
        a = dict(cfg["adaptive"])
        if args.epsilon is not None:
            a["epsilon"] = args.epsilon
        if args.nmax is not None:
            a["n_max"] = args.nmax
        if args.ponder is not None:
            a["ponder"] = args.ponder
        partition = EtdConfig.parse(part, iterations=1).validate_for(n_layers)
        return AdaptiveSetting(partition, a["epsilon"], a["n_max"], a["ponder"], a["router_bias"])
    label = args.etd or cfg["etd"]
    if label is None:
        raise CliError("config_error", "give --etd N_E-N_T*k-N_D or --adaptive", 2)
    return EtdConfig.parse(label, iterations=getattr(args, "k", None)).validate_for(n_layers)


def cmd_train_etd(args) -> None:
    cfg = load_config(args.config)
    _check_outputs([args.out, args.log], args.force)
    base = _load_ckpt(args.ckpt)
    mode = _mode_from_args(args, cfg, base.params.config.n_layers)
    _manifest(args, cfg, {"checkpoint": args.ckpt, "config": args.config}, {"checkpoint": args.out, "log": args.log},
              cfg["train"]["seed"])
    task = TaskSpec.from_dict(cfg["task"])
    train_data, _ = task.splits()
    if args.log and Path(args.log).exists():
        Path(args.log).unlink()
    ckpt = train(base.params, mode, train_data, TrainConfig.from_dict(cfg["train"]), args.log,
                 start_step=base.step, meta={"task": task.to_dict()})
    save_checkpoint(args.out, ckpt)
    print(f"wrote {args.out} (step {ckpt.step})")


def _predictions_file(path: str) -> tuple[np.ndarray, ExampleBatch]:
    p = Path(path)
    if not p.is_file():
        raise CliError("file_not_found", f"predictions file not found: {path}")
    rows = [json.loads(line) for line in p.read_text(encoding="utf-8").splitlines() if line.strip()]
    if not rows or any("prediction" not in r for r in rows):
        raise CliError("config_error", f"{path}: every line needs input/target/mask/prediction", 2)
    data = ExampleBatch.from_jsonl(p)
    preds = np.zeros_like(data.targets)
    for i, r in enumerate(rows):
        preds[i, : len(r["prediction"])] = r["prediction"]
    return preds, data


def _task_override(text: str) -> dict:
    """``--task`` takes a JSON file or an inline JSON object of task fields."""
    raw = Path(text).read_text(encoding="utf-8") if Path(text).is_file() else text
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        raise CliError("config_error", f"--task must be a JSON object or a JSON file, got {text!r}", 2) from None
    if not isinstance(value, dict):
        raise CliError("config_error", "--task must be a JSON object", 2)
    return value


def cmd_eval(args) -> None:
    _check_outputs([args.out], args.force)
    if args.predictions:
        _manifest(args, {}, {"predictions": args.predictions}, {"report": args.out}, None)
        preds, data = _predictions_file(args.predictions)
        acc = evaluate_predictions(preds, data)
        report = {"accuracy": acc, "n_examples": len(data), "source": "predictions"}
        write_text(args.out, json.dumps(report, indent=2, sort_keys=True) + "\n")
        print(f"accuracy {acc:.4f}")
        return
    if not args.ckpt:
        raise CliError("config_error", "eval needs --ckpt or --predictions", 2)
    ckpt = _load_ckpt(args.ckpt)
    cfg = load_config(args.config)
    if args.config is None and "task" in ckpt.meta:
        cfg["task"] = ckpt.meta["task"]
    if args.task:
        cfg["task"] = resolve_config({"task": {**cfg["task"], **_task_override(args.task)}})["task"]
    n_layers = ckpt.params.config.n_layers
    if args.adaptive or args.etd or cfg["etd"]:
        mode = _mode_from_args(args, cfg, n_layers)
    elif "adaptive" in ckpt.meta:
        a = ckpt.meta["adaptive"]
        mode = AdaptiveSetting(EtdConfig.parse(a["partition"], iterations=1), a["epsilon"], a["n_max"], a["ponder"])
    else:
        mode = ckpt.etd or EtdConfig.plain(n_layers)
    if isinstance(mode, EtdConfig) and args.k is not None:
        mode = mode.with_iterations(args.k)
    train_k = ckpt.etd.iterations if ckpt.etd is not None else None
    _manifest(args, cfg, {"checkpoint": args.ckpt}, {"report": args.out}, None)
    task = TaskSpec.from_dict(cfg["task"])
    _, test = task.splits()
    report = evaluate(ckpt.params, mode, test, task.name, batch_size=args.batch_size, train_k=train_k)
    if args.baseline:
        base = EvalReport.from_dict(json.loads(Path(args.baseline).read_text(encoding="utf-8")))
        report.attach_baseline(base)
    write_text(args.out, report.to_json() + "\n")
    print(f"{report.etd} accuracy {report.accuracy:.4f} flops-layers {report.effective_flops_layers:g}")


def _workers() -> int:
    raw = os.environ.get("ETD_LAB_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise CliError("config_error", f"ETD_LAB_THREADS must be an integer, got {raw!r}", 2) from None


def cmd_sweep(args) -> None:
    cfg = load_config(args.config)
    out = Path(args.out_dir)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CliError("output_exists", f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    base = _load_ckpt(args.ckpt)
    n_layers = base.params.config.n_layers
    seeds = _parse_ints(args.seeds)
    task = TaskSpec.from_dict(cfg["task"])
    tcfg = TrainConfig.from_dict(cfg["train"])
    workers = _workers()
    _manifest(args, cfg, {"checkpoint": args.ckpt}, {"dir": str(out)}, seeds[0] if seeds else None)
    logs = out / "logs"
    if args.mode == "k":
        part = EtdConfig.parse(args.partition or cfg["etd"] or f"0-{n_layers}*k-0", iterations=1)
        reports = sweep_k(base.params, part, _parse_ints(args.ks), task, tcfg, seeds, logs, workers)
    elif args.mode == "encoder":
        reports = sweep_encoder_position(base.params, args.n_think, args.k, _parse_ints(args.n_encoders), task, tcfg,
                                         seeds, logs, workers)
    elif args.mode == "baselines":
        if not args.partition:
            raise CliError("config_error", "--mode baselines needs --partition (the analysis-selected shape)", 2)
        sel = EtdConfig.parse(args.partition, iterations=1)
        groups = compare_baseline_shapes(base.params, task, args.budget, sel, tcfg, seeds, logs, workers)
        reports = [r for rs in groups.values() for r in rs]
    else:
        raise CliError("config_error", f"unknown sweep mode {args.mode!r}", 2)
    for i, r in enumerate(reports):
        write_text(out / f"report_{i:03d}_{r.etd.replace('*', 'x')}_seed{r.seed}.json", r.to_json() + "\n")
    rows = summarize(reports)
    tmp = out / ".summary.csv.tmp"
    write_summary_csv(rows, tmp)
    os.replace(tmp, out / "summary.csv")
    for row in rows:
        print(f"{row['config']:>14}  flops {row['flops_layers']!s:>6}  acc {row['acc_mean']:.4f} ± {row['acc_std']:.4f}")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="etd-lab", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"etd-lab {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="JSON config (missing fields take defaults)")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p = sub.add_parser("pretrain", help="phase 1: train the plain stack")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="per-step JSONL metric log")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("profile", help="angular-distance profile of a checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", help="plain-text file (default: bundled corpus)")
    p.add_argument("--gap", type=int, default=1)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--max-sequences", type=int)
    p.add_argument("--out", required=True, help="profile JSON")
    p.add_argument("--csv", help="also write layer,distance CSV")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("select", help="pick N_E-N_T*k-N_D from a profile")
    common(p, config=False)
    p.add_argument("--profile", required=True)
    p.add_argument("--sensitivity", type=float, default=1.0)
    p.add_argument("--no-smooth", action="store_true", help="skip the quadratic smoothing step")
    p.add_argument("--out", help="selection report JSON")
    p.set_defaults(func=cmd_select)

    def mode_flags(p):
        p.add_argument("--etd", help='fixed-k shape, e.g. "7-4*3-5"')
        p.add_argument("--k", type=int, help="iteration count (fills a literal k, or overrides at eval)")
        p.add_argument("--adaptive", action="store_true")
        p.add_argument("--partition", help='partition for adaptive mode, e.g. "2-4*k-2"')
        p.add_argument("--epsilon", type=float)
        p.add_argument("--nmax", type=int)
        p.add_argument("--ponder", type=float)

    p = sub.add_parser("train-etd", help="phase 2: continue training with recursion")
    common(p)
    p.add_argument("--ckpt", required=True)
    mode_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.set_defaults(func=cmd_train_etd)

    p = sub.add_parser("eval", help="exact-match evaluation")
    common(p)
    p.add_argument("--ckpt")
    mode_flags(p)
    p.add_argument("--task", help='task fields as JSON (inline or file), e.g. \'{"depth": 6}\'')
    p.add_argument("--predictions", help="JSONL rows with input/target/mask/prediction")
    p.add_argument("--baseline", help="EvalReport JSON to compute relative improvement against")
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="k / encoder-position / baseline-shape sweeps")
    common(p)
    p.add_argument("--mode", choices=["k", "encoder", "baselines"], required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--partition", help='shape with k left open, e.g. "2-4*k-2"')
    p.add_argument("--ks", default="1,2,3")
    p.add_argument("--seeds", default="0")
    p.add_argument("--n-think", type=int, default=4)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--n-encoders", default="1,2,3")
    p.add_argument("--budget", type=int)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_sweep)
    return ap


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    threads = os.environ.get("ETD_LAB_THREADS")
    if threads:
        os.environ.setdefault("OMP_NUM_THREADS", threads)
    try:
        args.func(args)
    except CliError as exc:
        return _fail(exc.kind, str(exc), exc.code)
    except (EtdConfigError, SelectionError) as exc:
        return _fail("config_error", str(exc), 2)
    except CheckpointError as exc:
        return _fail("checkpoint_error", str(exc), 1)
    except FileNotFoundError as exc:
        return _fail("file_not_found", str(exc), 1)
    except (ValueError, OSError, RuntimeError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
