"""Encode-think-decode partitioning of a layer stack.

A configuration ``N_E-N_T*k-N_D`` runs layers ``[0, N_E)`` once, the block
``[N_E, N_E+N_T)`` ``k`` times with the same weights, then ``[N_E+N_T, L)``
once. No parameters are added for the extra iterations.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .model import ModelParams, embed, head, run_layers
from .tensor import Tensor


class EtdConfigError(ValueError):
    pass


_LABEL = re.compile(r"^\s*(\d+)\s*-\s*(\d+)\s*\*\s*(\d+|k)\s*-\s*(\d+)\s*$")


@dataclass(frozen=True)
class EtdConfig:
    n_encoder: int
    n_think: int
    iterations: int
    n_decoder: int

    def __post_init__(self):
        if self.n_encoder < 0 or self.n_decoder < 0:
            raise EtdConfigError("encoder and decoder sizes must be >= 0")
        if self.n_think < 1:
            raise EtdConfigError("thinking block needs at least one layer")
        if self.iterations < 1:
            raise EtdConfigError("iterations must be >= 1")

    @property
    def n_layers(self) -> int:
        return self.n_encoder + self.n_think + self.n_decoder

    @property
    def think_range(self) -> range:
        return range(self.n_encoder, self.n_encoder + self.n_think)

    @property
    def label(self) -> str:
        return f"{self.n_encoder}-{self.n_think}*{self.iterations}-{self.n_decoder}"

    @property
    def partition_label(self) -> str:
        return f"{self.n_encoder}-{self.n_think}*k-{self.n_decoder}"

    def __str__(self) -> str:
        return self.label

    @classmethod
    def parse(cls, text: str, iterations: int | None = None) -> "EtdConfig":
        """Parse ``"7-4*2-5"``; a literal ``k`` takes its value from ``iterations``."""
        m = _LABEL.match(text)
        if not m:
            raise EtdConfigError(f"cannot parse ETD label {text!r}; expected N_E-N_T*k-N_D")
        ne, nt, k, nd = m.groups()
        if k == "k":
            if iterations is None:
                raise EtdConfigError(f"label {text!r} leaves k open; pass iterations")
            k_val = iterations
        else:
            k_val = int(k)
        return cls(int(ne), int(nt), k_val, int(nd))

    @classmethod
    def plain(cls, n_layers: int) -> "EtdConfig":
        return cls(0, n_layers, 1, 0)

    def with_iterations(self, k: int) -> "EtdConfig":
        return EtdConfig(self.n_encoder, self.n_think, k, self.n_decoder)

    def canonical(self) -> "EtdConfig":
        """k=1 runs every layer once, so all partitions collapse to the plain stack."""
        return EtdConfig.plain(self.n_layers) if self.iterations == 1 else self

    def validate_for(self, n_layers: int) -> "EtdConfig":
        if self.n_layers != n_layers:
            raise EtdConfigError(f"partition {self.label} covers {self.n_layers} layers, model has {n_layers}")
        return self


def param_layer_count(etd: EtdConfig) -> int:
    return etd.n_encoder + etd.n_think + etd.n_decoder


def flops_layer_count(etd: EtdConfig) -> int:
    return etd.n_encoder + etd.n_think * etd.iterations + etd.n_decoder


def layer_trace(etd: EtdConfig) -> list[int]:
    """Layer indices in execution order."""
    ne, nt = etd.n_encoder, etd.n_think
    return list(range(ne)) + list(range(ne, ne + nt)) * etd.iterations + list(range(ne + nt, etd.n_layers))


def runtime_layer_trace(tokens, params: ModelParams, etd: EtdConfig) -> list[int]:
    """Execute :func:`forward_etd` and record which layer ran at each step."""
    seen: list[int] = []
    forward_etd(tokens, params, etd, trace=seen)
    return seen


def forward_etd(tokens, params: ModelParams, etd: EtdConfig, trace: list[int] | None = None) -> Tensor:
    etd.validate_for(params.config.n_layers)
    x = embed(tokens, params)
    return head(etd_hidden(x, params, etd, trace), params)


def etd_hidden(x: Tensor, params: ModelParams, etd: EtdConfig, trace: list[int] | None = None) -> Tensor:
    x = encode(x, params, etd, trace)
    for _ in range(etd.iterations):
        x = think(x, params, etd, trace)
    return decode(x, params, etd, trace)


def encode(x: Tensor, params: ModelParams, etd: EtdConfig, trace: list[int] | None = None) -> Tensor:
    order = range(etd.n_encoder)
    if trace is not None:
        trace.extend(order)
    return run_layers(x, params, order)


def think(x: Tensor, params: ModelParams, etd: EtdConfig, trace: list[int] | None = None) -> Tensor:
    order = etd.think_range
    if trace is not None:
        trace.extend(order)
    return run_layers(x, params, order)


def decode(x: Tensor, params: ModelParams, etd: EtdConfig, trace: list[int] | None = None) -> Tensor:
    order = range(etd.n_encoder + etd.n_think, etd.n_layers)
    if trace is not None:
        trace.extend(order)
    return run_layers(x, params, order)
