"""Per-token adaptive iteration of the thinking block.

After every pass through the thinking block a linear-sigmoid router scores
each token; the scores accumulate into a halting mass ``H``. A token whose
mass reaches ``1 - eps`` is frozen: later passes leave its residual row
unchanged, though it stays visible to attention at its frozen value.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .etd import EtdConfig, decode, encode, think
from .model import ModelParams, embed, head
from .tasks import PAD
from .tensor import Tensor

ROUTER_WEIGHT = "router.weight"
ROUTER_BIAS = "router.bias"


class ActConfigError(ValueError):
    pass


@dataclass
class RouterParams:
    weight: Tensor  # (d_model,)
    bias: Tensor  # (1,)

    @classmethod
    def init(cls, d_model: int, seed: int = 0, bias: float = 0.0) -> "RouterParams":
        rng = np.random.default_rng(seed)
        w = rng.normal(0.0, 1.0 / np.sqrt(d_model), size=d_model)
        return cls(Tensor(w), Tensor(np.array([float(bias)])))

    @classmethod
    def constant(cls, d_model: int, w: float) -> "RouterParams":
        """Router that emits ``w`` for every token (zero weight, bias = logit(w))."""
        if not 0.0 < w < 1.0:
            raise ValueError("constant halting value must lie in (0, 1)")
        return cls(Tensor(np.zeros(d_model)), Tensor(np.array([np.log(w / (1.0 - w))])))

    def tensors(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def attach(self, params: ModelParams) -> ModelParams:
        params.extra[ROUTER_WEIGHT] = self.weight
        params.extra[ROUTER_BIAS] = self.bias
        return params

    @classmethod
    def from_params(cls, params: ModelParams) -> "RouterParams":
        try:
            return cls(params.extra[ROUTER_WEIGHT], params.extra[ROUTER_BIAS])
        except KeyError:
            raise ActConfigError("checkpoint has no router parameters; train with --adaptive first") from None


def router_eval(h: Tensor, router: RouterParams) -> Tensor:
    """sigmoid(h . weight + bias) per token: (batch, seq, d) -> (batch, seq)."""
    d = h.shape[-1]
    if router.weight.shape != (d,):
        raise tc.DimensionError(f"router weight {router.weight.shape} does not match hidden size {d}")
    w = tc.reshape(router.weight, (d, 1))
    z = tc.add(tc.matmul(h, w), router.bias)
    return tc.reshape(tc.sigmoid(z), h.shape[:-1])


@dataclass
class HaltingState:
    H: np.ndarray  # accumulated mass, (batch, seq)
    steps: np.ndarray  # iterations used, int
    halted: np.ndarray  # bool
    by_cap: np.ndarray  # bool: stopped by the N_max cap rather than the threshold
    mask: np.ndarray  # bool: non-padding tokens
    epsilon: float
    n_max: int
    halt_log: list[np.ndarray] = field(default_factory=list)  # per iteration: tokens that halted then
    mass: Tensor | None = field(default=None, repr=False)  # differentiable H

    @property
    def iterations_run(self) -> int:
        return len(self.halt_log)


def _unit_gate(H: Tensor) -> Tensor:
    """``1 + H - stopgrad(H)``: exactly 1.0 in value, derivative 1. Lets the loss see the router.

    The derivative is bounded, so a router that drives H towards zero stays stable.
    """
    ones = np.ones_like(H.data)

    def bw(g):
        return (g,)

    return tc._out(ones, (H,), bw, "unit_gate")


def _validate(epsilon: float, n_max: int) -> None:
    if not 0.0 < epsilon < 1.0:
        raise ActConfigError(f"epsilon must lie in (0, 1), got {epsilon}")
    if n_max < 1:
        raise ActConfigError(f"n_max must be >= 1, got {n_max}")


def act_hidden(x: Tensor, params: ModelParams, etd: EtdConfig, router: RouterParams, epsilon: float, n_max: int,
               mask: np.ndarray, router_grad: bool = True) -> tuple[Tensor, HaltingState, Tensor]:
    _validate(epsilon, n_max)
    batch_shape = x.shape[:-1]
    H = np.zeros(batch_shape)
    steps = np.zeros(batch_shape, dtype=np.int64)
    halted = np.zeros(batch_shape, dtype=bool)
    by_cap = np.zeros(batch_shape, dtype=bool)
    log: list[np.ndarray] = []
    mass: Tensor | None = None  # differentiable copy of H

    x = encode(x, params, etd)
    for it in range(1, n_max + 1):
        active = ~halted
        new = think(x, params, etd)
        x = new if it == 1 else tc.where_rows(active, new, x)
        w = router_eval(x, router)
        contrib = tc.mul(w, Tensor(active.astype(np.float64), _trusted=True))
        mass = contrib if mass is None else tc.add(mass, contrib)
        H = H + np.where(active, w.data, 0.0)
        steps[active] = it
        now = active & ((H >= 1.0 - epsilon) | ~mask)
        if it == n_max:
            by_cap |= active & ~now
            now = active
        halted |= now
        log.append(now.copy())
        if halted.all():
            break
    if router_grad:
        gate = _unit_gate(mass)
        x = tc.scale_rows(x, gate)
    state = HaltingState(H, steps, halted, by_cap, mask.copy(), epsilon, n_max, log, mass)
    return decode(x, params, etd), state, mass


def act_forward(tokens, params: ModelParams, etd: EtdConfig, router: RouterParams | None = None,
                epsilon: float = 0.01, n_max: int = 10, router_grad: bool = True) -> tuple[Tensor, HaltingState]:
    """Adaptive-depth forward pass; ``etd.iterations`` is ignored.

    Padding tokens leave after their first iteration and are excluded from
    statistics. With ``router_grad`` the decoder input is multiplied by
    ``1 + H - stopgrad(H)``, which is exactly 1 but gives the router weights
    a gradient path; halting decisions themselves stay hard.
    """
    etd.validate_for(params.config.n_layers)
    router = router or RouterParams.from_params(params)
    ids = np.asarray(tokens)
    x = embed(ids, params)
    h, state, _ = act_hidden(x, params, etd, router, epsilon, n_max, ids != PAD, router_grad)
    return head(h, params), state


def ponder_cost(state: HaltingState) -> Tensor:
    """Optional regularizer: minus the mean halting mass of real tokens (off by default).

    Raising the mass makes tokens halt sooner, so minimising this term
    shortens the computation.
    """
    m = Tensor(-state.mask.astype(np.float64) / max(1, int(state.mask.sum())), _trusted=True)
    return tc.sum_all(tc.mul(state.mass, m))


def act_stats(state: HaltingState) -> dict:
    sel = state.mask
    steps = state.steps[sel]
    n = int(steps.size)
    hist = {str(i): int((steps == i).sum()) for i in range(1, state.n_max + 1)}
    if n == 0:
        return {"mean_steps": 0.0, "histogram": hist, "halt_by_threshold": 0.0, "halt_by_cap": 0.0,
                "tokens": 0, "step_sum": 0, "cap_count": 0}
    cap = int(state.by_cap[sel].sum())
    return {
        "mean_steps": float(steps.sum() / n),
        "histogram": hist,
        "halt_by_threshold": (n - cap) / n,
        "halt_by_cap": cap / n,
        "tokens": n,
        "step_sum": int(steps.sum()),
        "cap_count": cap,
    }


def replay_steps(state: HaltingState) -> np.ndarray:
    """Recount steps from the per-iteration halt log alone."""
    steps = np.zeros(state.H.shape, dtype=np.int64)
    for it, halted_now in enumerate(state.halt_log, start=1):
        steps[halted_now] = it
    return steps


def merge_stats(stats: list[dict]) -> dict:
    """Token-weighted combination of per-batch :func:`act_stats` results."""
    total = sum(s["tokens"] for s in stats)
    if total == 0:
        return stats[0] if stats else {}
    hist: dict[str, int] = {}
    for s in stats:
        for k, v in s["histogram"].items():
            hist[k] = hist.get(k, 0) + v
    step_sum = sum(s["step_sum"] for s in stats)
    cap = sum(s["cap_count"] for s in stats)
    return {
        "mean_steps": step_sum / total,
        "histogram": hist,
        "halt_by_threshold": (total - cap) / total,
        "halt_by_cap": cap / total,
        "tokens": total,
        "step_sum": step_sum,
        "cap_count": cap,
    }


def dump_steps_csv(state: HaltingState, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sequence", "position", "steps"])
        for b in range(state.steps.shape[0]):
            for t in range(state.steps.shape[1]):
                if state.mask[b, t]:
                    w.writerow([b, t, int(state.steps[b, t])])
