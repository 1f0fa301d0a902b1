"""Training loops, evaluation and the experiment sweeps.

Training follows a two-phase protocol: a plain stack is trained first, then
training continues from those weights with the thinking block iterated
(fixed ``k``) or adaptively halted. Evaluation is greedy exact match at the
supervised answer positions.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from . import tensor as tc
from .act import RouterParams, act_forward, act_stats, merge_stats, ponder_cost
from .checkpoint import Checkpoint
from .etd import EtdConfig, EtdConfigError, flops_layer_count, forward_etd, param_layer_count
from .model import ModelConfig, ModelParams, init_params
from .optim import AdamW, clip_grad_norm
from .tasks import ExampleBatch, TaskSpec


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.01
    warmup: int = 100
    clip: float = 1.0
    seed: int = 0
    eval_interval: int = 0
    min_lr_ratio: float = 0.1

    def __post_init__(self):
        if self.steps < 0 or self.warmup < 0 or self.eval_interval < 0:
            raise ValueError("steps, warmup and eval_interval must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0 or self.clip <= 0:
            raise ValueError("lr and clip must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.weight_decay < 0 or not 0 <= self.min_lr_ratio <= 1:
            raise ValueError("weight_decay must be >= 0 and min_lr_ratio in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass(frozen=True)
class AdaptiveSetting:
    """Adaptive-depth mode: ``partition`` fixes N_E / N_T / N_D; its k is unused."""

    partition: EtdConfig
    epsilon: float = 0.01
    n_max: int = 10
    ponder: float = 0.0
    router_bias: float = 0.0

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")

    @property
    def label(self) -> str:
        return f"{self.partition.n_encoder}-{self.partition.n_think}*act-{self.partition.n_decoder}"

    def to_dict(self) -> dict:
        return {"partition": self.partition.partition_label, "epsilon": self.epsilon, "n_max": self.n_max,
                "ponder": self.ponder, "router_bias": self.router_bias}


Mode = Union[EtdConfig, AdaptiveSetting]


def mode_label(mode: Mode) -> str:
    return mode.label if isinstance(mode, AdaptiveSetting) else mode.canonical().label


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup, then cosine decay to ``min_lr_ratio * lr``."""
    warm = min(1.0, (step + 1) / cfg.warmup) if cfg.warmup else 1.0
    frac = step / max(1, cfg.steps)
    cos = cfg.min_lr_ratio + (1 - cfg.min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * frac))
    return cfg.lr * warm * cos


def model_forward(tokens, params: ModelParams, mode: Mode):
    """Logits plus halting state (None for fixed-k runs)."""
    if isinstance(mode, AdaptiveSetting):
        return act_forward(tokens, params, mode.partition, None, mode.epsilon, mode.n_max)
    return forward_etd(tokens, params, mode), None


def _prepare(params: ModelParams, mode: Mode, seed: int) -> ModelParams:
    p = params.copy()
    if isinstance(mode, AdaptiveSetting):
        mode.partition.validate_for(p.config.n_layers)
        if "router.weight" not in p.extra:
            RouterParams.init(p.config.d_model, seed=seed, bias=mode.router_bias).attach(p)
    else:
        mode.validate_for(p.config.n_layers)
    return p.requires_grad_()


def train(
    params: ModelParams,
    mode: Mode,
    data: ExampleBatch,
    cfg: TrainConfig,
    log_path: str | Path | None = None,
    eval_data: ExampleBatch | None = None,
    start_step: int = 0,
    meta: dict | None = None,
) -> Checkpoint:
    """Train a copy of ``params``; the input is left untouched.

    Each call uses a fresh optimizer and draws batches from
    ``default_rng(cfg.seed)``. Every step appends one JSON line to
    ``log_path``. A non-finite loss aborts with :class:`TrainingDivergedError`.
    """
    if len(data) == 0:
        raise ValueError("training data is empty")
    p = _prepare(params, mode, cfg.seed)
    tensors = p.tensors()
    opt = AdamW(tensors, cfg.beta1, cfg.beta2, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    log = open(log_path, "a", encoding="utf-8") if log_path else None
    last_loss = None
    try:
        for s in range(cfg.steps):
            batch = data[rng.integers(0, len(data), cfg.batch_size)]
            lr = lr_at(s, cfg)
            try:
                with tc.Tape() as tape:
                    logits, state = model_forward(batch.inputs, p, mode)
                    loss = tc.cross_entropy(logits, batch.targets, batch.mask)
                    if state is not None and mode.ponder > 0:
                        loss = tc.add(loss, tc.scale(ponder_cost(state), mode.ponder))
                    value = loss.item()
                    if not math.isfinite(value):
                        raise tc.NonFiniteError("loss")
                    tape.backward(loss)
            except tc.NonFiniteError as exc:
                raise TrainingDivergedError(
                    f"non-finite values at step {start_step + s} ({exc}); lr={lr:.3g}, last finite loss={last_loss}"
                ) from None
            norm = clip_grad_norm(tensors, cfg.clip)
            opt.step(lr)
            opt.zero_grad()
            last_loss = value
            if log:
                rec = {"step": start_step + s + 1, "loss": value, "lr": lr, "grad_norm": norm}
                if state is not None:
                    rec["mean_steps"] = act_stats(state)["mean_steps"]
                if eval_data is not None and cfg.eval_interval and (s + 1) % cfg.eval_interval == 0:
                    rec["eval_accuracy"] = evaluate(p, mode, eval_data).accuracy
                log.write(json.dumps(rec) + "\n")
    finally:
        if log:
            log.close()
    p.requires_grad_(False)
    for t in tensors:
        t.grad = None
    run_meta = {"mode": mode_label(mode), "train": cfg.to_dict()}
    if isinstance(mode, AdaptiveSetting):
        run_meta["adaptive"] = mode.to_dict()
    if meta:
        run_meta.update(meta)
    etd = mode.partition.with_iterations(1) if isinstance(mode, AdaptiveSetting) else mode
    return Checkpoint(p, etd, start_step + cfg.steps, run_meta, rng.bit_generator.state)


def pretrain(model_config: ModelConfig, data: ExampleBatch, cfg: TrainConfig, log_path=None, meta=None) -> Checkpoint:
    """Phase 1: plain stack from fresh initialisation."""
    return train(init_params(model_config), EtdConfig.plain(model_config.n_layers), data, cfg, log_path, meta=meta)


# ---------------------------------------------------------------------------
# evaluation


def relative_improvement(acc: float, baseline: float) -> float:
    """Percent change 100 * (acc - baseline) / baseline."""
    if baseline == 0:
        raise ZeroDivisionError("baseline accuracy is zero; relative improvement undefined")
    return 100.0 * (acc - baseline) / baseline


@dataclass
class EvalReport:
    accuracy: float
    task_accuracy: dict[str, float]
    loss: float
    etd: str
    params_layers: int
    flops_layers: int | None
    effective_flops_layers: float
    seed: int | None = None
    n_examples: int = 0
    averaging: str = "macro"
    adaptive: dict | None = None
    train_k: int | None = None
    eval_k: int | None = None
    baseline: str | None = None
    baseline_accuracy: float | None = None
    delta_pct: float | None = None

    def attach_baseline(self, other: "EvalReport", name: str | None = None) -> "EvalReport":
        self.baseline = name or other.etd
        self.baseline_accuracy = other.accuracy
        self.delta_pct = relative_improvement(self.accuracy, other.accuracy) if other.accuracy else None
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)


def exact_match(pred: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-example correctness: every supervised position predicted exactly."""
    return ((pred == targets) | ~mask).all(axis=1)


def _eval_one(params: ModelParams, mode: Mode, data: ExampleBatch, batch_size: int):
    correct = 0
    loss_sum = 0.0
    stats = []
    for start in range(0, len(data), batch_size):
        b = data[start : start + batch_size]
        logits, state = model_forward(b.inputs, params, mode)
        correct += int(exact_match(logits.data.argmax(-1), b.targets, b.mask).sum())
        loss_sum += _per_example_loss(logits.data, b.targets, b.mask).sum()
        if state is not None:
            stats.append(act_stats(state))
    n = len(data)
    return correct / n, loss_sum / n, (merge_stats(stats) if stats else None)


def _per_example_loss(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = logits - logits.max(-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    nll = -np.take_along_axis(logp, targets[..., None], -1)[..., 0]
    counts = np.maximum(mask.sum(1), 1)
    return (nll * mask).sum(1) / counts


def evaluate(
    params: ModelParams,
    mode: Mode,
    data: ExampleBatch | dict[str, ExampleBatch],
    task_name: str | None = None,
    batch_size: int = 256,
    seed: int | None = None,
    train_k: int | None = None,
) -> EvalReport:
    """Greedy exact-match accuracy; several tasks are macro-averaged."""
    tasks = data if isinstance(data, dict) else {task_name or data.meta.get("task", "task"): data}
    if not tasks or any(len(b) == 0 for b in tasks.values()):
        raise ValueError("evaluation data is empty")
    partition = mode.partition if isinstance(mode, AdaptiveSetting) else mode
    partition.validate_for(params.config.n_layers)
    accs, losses, stats = {}, [], []
    for name, batch in tasks.items():
        acc, loss, st = _eval_one(params, mode, batch, batch_size)
        accs[name] = acc
        losses.append(loss)
        if st:
            stats.append(st)
    adaptive = merge_stats(stats) if stats else None
    if adaptive is not None:
        adaptive.update(epsilon=mode.epsilon, n_max=mode.n_max)
        flops = None
        eff = partition.n_encoder + partition.n_decoder + partition.n_think * adaptive["mean_steps"]
    else:
        flops = flops_layer_count(mode)
        eff = float(flops)
    return EvalReport(
        accuracy=float(np.mean(list(accs.values()))),
        task_accuracy=accs,
        loss=float(np.mean(losses)),
        etd=mode_label(mode),
        params_layers=param_layer_count(partition),
        flops_layers=flops,
        effective_flops_layers=eff,
        seed=seed,
        n_examples=sum(len(b) for b in tasks.values()),
        adaptive=adaptive,
        train_k=train_k,
        eval_k=None if isinstance(mode, AdaptiveSetting) else mode.iterations,
    )


def evaluate_predictions(predictions: np.ndarray, data: ExampleBatch) -> float:
    """Accuracy of externally supplied predictions (same grid shape as ``data.targets``)."""
    predictions = np.asarray(predictions)
    if predictions.shape != data.targets.shape:
        raise ValueError(f"predictions {predictions.shape} do not match targets {data.targets.shape}")
    return float(exact_match(predictions, data.targets, data.mask).mean())


# ---------------------------------------------------------------------------
# sweeps


def _run_cell(base: ModelParams, mode: Mode, train_data, test_data, cfg: TrainConfig, seed: int, log_dir=None) -> EvalReport:
    cfg = replace(cfg, seed=seed)
    log = None
    if log_dir is not None:
        Path(log_dir).mkdir(parents=True, exist_ok=True)
        log = Path(log_dir) / f"{mode_label(mode).replace('*', 'x')}_seed{seed}.jsonl"
    ckpt = train(base, mode, train_data, cfg, log)
    k = None if isinstance(mode, AdaptiveSetting) else mode.iterations
    return evaluate(ckpt.params, mode, test_data, seed=seed, train_k=k)


def _cell_job(args):
    return _run_cell(*args)


def run_cells(base: ModelParams, cells: Sequence[tuple[Mode, int]], task: TaskSpec, cfg: TrainConfig,
              log_dir=None, workers: int = 1) -> list[EvalReport]:
    """Train and evaluate every (mode, seed) cell; results come back in cell order.

    Cells are independent, so ``workers > 1`` runs them in separate processes
    without changing any result.
    """
    train_data, test_data = task.splits()
    jobs = [(base, m, train_data, test_data, cfg, s, log_dir) for m, s in cells]
    if workers <= 1 or len(jobs) <= 1:
        return [_run_cell(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_cell_job, jobs))


def sweep_k(base: ModelParams, partition: EtdConfig, ks: Sequence[int], task: TaskSpec, cfg: TrainConfig,
            seeds: Sequence[int] = (0,), log_dir=None, workers: int = 1) -> list[EvalReport]:
    """One continuation run + evaluation per (k, seed), all from the same base weights."""
    if not ks:
        raise ValueError("ks must be nonempty")
    modes = [partition.with_iterations(k).validate_for(base.config.n_layers) for k in ks]
    reports = run_cells(base, [(m, s) for m in modes for s in seeds], task, cfg, log_dir, workers)
    _attach_baselines(reports, lambda r: r.eval_k == min(ks))
    return reports


def encoder_position_configs(n_layers: int, n_think: int, k: int, n_encoders: Iterable[int]) -> list[EtdConfig]:
    out = []
    for ne in n_encoders:
        nd = n_layers - ne - n_think
        if ne < 0 or nd < 0:
            raise EtdConfigError(f"N_E={ne} with N_T={n_think} does not fit {n_layers} layers")
        out.append(EtdConfig(ne, n_think, k, nd))
    return out


def sweep_encoder_position(base: ModelParams, n_think: int, k: int, n_encoders: Sequence[int], task: TaskSpec,
                           cfg: TrainConfig, seeds: Sequence[int] = (0,), log_dir=None, workers: int = 1) -> list[EvalReport]:
    modes = encoder_position_configs(base.config.n_layers, n_think, k, n_encoders)
    return run_cells(base, [(m, s) for m in modes for s in seeds], task, cfg, log_dir, workers)


def matched_shapes(n_layers: int, selected: EtdConfig, budget: int) -> dict[str, EtdConfig]:
    """Shapes whose executed-layer count equals ``budget`` exactly.

    Candidates: loop over every layer, loop over all but two fixed layers at
    each end, and the analysis-selected partition. The selected partition must
    fit; baselines that cannot hit the budget with an integer k are dropped.
    """
    selected.validate_for(n_layers)
    if budget < n_layers:
        raise EtdConfigError(f"budget {budget} is below the stack depth {n_layers}")
    shapes = {
        "all_layers": (0, n_layers, 0),
        "fixed_ends": (2, n_layers - 4, 2),
        "selected": (selected.n_encoder, selected.n_think, selected.n_decoder),
    }
    out = {}
    for name, (ne, nt, nd) in shapes.items():
        if nt < 1:
            continue
        rest = budget - ne - nd
        if rest % nt == 0 and rest // nt >= 1:
            out[name] = EtdConfig(ne, nt, rest // nt, nd)
    if "selected" not in out:
        raise EtdConfigError(f"selected partition {selected.partition_label} cannot execute exactly {budget} layers")
    if len(out) < 2:
        raise EtdConfigError(f"no baseline shape executes exactly {budget} layers")
    return out


def compare_baseline_shapes(base: ModelParams, task: TaskSpec, flop_budget: int, selected: EtdConfig,
                            cfg: TrainConfig, seeds: Sequence[int] = (0,), log_dir=None,
                            workers: int = 1) -> dict[str, list[EvalReport]]:
    shapes = matched_shapes(base.config.n_layers, selected, flop_budget)
    names = list(shapes)
    flat = run_cells(base, [(shapes[n], s) for n in names for s in seeds], task, cfg, log_dir, workers)
    return {n: flat[i * len(seeds) : (i + 1) * len(seeds)] for i, n in enumerate(names)}


def _attach_baselines(reports: list[EvalReport], is_baseline) -> None:
    base_by_seed = {r.seed: r for r in reports if is_baseline(r)}
    for r in reports:
        b = base_by_seed.get(r.seed)
        if b is not None:
            r.attach_baseline(b)  # delta_pct stays None for a zero baseline


def summarize(reports: Sequence[EvalReport]) -> list[dict]:
    """Mean and sample standard deviation of accuracy per configuration label, in first-seen order."""
    groups: dict[str, list[EvalReport]] = {}
    for r in reports:
        groups.setdefault(r.etd, []).append(r)
    rows = []
    for label, rs in groups.items():
        accs = np.array([r.accuracy for r in rs])
        row = {
            "config": label,
            "params_layers": rs[0].params_layers,
            "flops_layers": rs[0].flops_layers if rs[0].flops_layers is not None else round(float(np.mean([r.effective_flops_layers for r in rs])), 4),
            "n_seeds": len(rs),
            "acc_mean": float(accs.mean()),
            "acc_std": float(accs.std(ddof=1)) if len(rs) > 1 else 0.0,
        }
        deltas = [r.delta_pct for r in rs if r.delta_pct is not None]
        row["delta_pct_mean"] = float(np.mean(deltas)) if deltas else None
        if rs[0].adaptive is not None:
            row["mean_steps"] = float(np.mean([r.adaptive["mean_steps"] for r in rs]))
        rows.append(row)
    return rows


def write_summary_csv(rows: Sequence[dict], path: str | Path) -> None:
    keys: list[str] = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in keys})
