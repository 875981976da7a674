"""Perceptron helpers shared by the encoder and the heads."""
from __future__ import annotations

from typing import Sequence

from . import autodiff as ad
from .autodiff import ParamStore, Tape, Tensor

_ACT = {"tanh": ad.tanh, "relu": ad.relu, "sigmoid": ad.sigmoid, None: None, "linear": None}


def init_mlp(store: ParamStore, prefix: str, sizes: Sequence[int], scale: float = 1.0) -> None:
    """Weights ``{prefix}.W{k}`` of shape (in, out) and biases ``{prefix}.b{k}``."""
    for k in range(len(sizes) - 1):
        store.add(f"{prefix}.W{k}", (sizes[k], sizes[k + 1]), "glorot", scale)
        store.add(f"{prefix}.b{k}", (sizes[k + 1],), "zeros")


def mlp_depth(store: ParamStore, prefix: str) -> int:
    k = 0
    while f"{prefix}.W{k}" in store:
        k += 1
    return k


def mlp(tape: Tape, store: ParamStore, prefix: str, x: Tensor, hidden_act: str = "tanh",
        out_act: str | None = None) -> Tensor:
    """Row-batched perceptron: ``x`` is (batch, in)."""
    depth = mlp_depth(store, prefix)
    if depth == 0:
        raise KeyError(f"no perceptron parameters under {prefix!r}")
    for k in range(depth):
        w = tape.param(store, f"{prefix}.W{k}")
        if x.shape[-1] != w.shape[0]:
            raise ad.ShapeError(f"{prefix}: input width {x.shape[-1]} does not match weight {w.shape}")
        x = ad.add_bias(x @ w, tape.param(store, f"{prefix}.b{k}"))
        act = _ACT[hidden_act if k < depth - 1 else out_act]
        if act is not None:
            x = act(x)
    return x
