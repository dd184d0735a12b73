"""Neural building blocks: linear map, GRU cell, MLP, initialization.

All blocks are pure functions of (parameters, inputs) operating on graph
nodes.  Vector inputs of shape (n,) and batched inputs of shape (B, n) are
both accepted; the batch form is what the training loop uses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node


@dataclass
class LinearParams:
    weight: Node  # (out, in)
    bias: Node | None = None  # (out,)


@dataclass
class GRUCellParams:
    """Gate blocks are stacked in the order: update z, reset r, candidate n."""

    w_x: Node  # (3s, in)
    w_h: Node  # (3s, s)
    b: Node    # (3s,)

    @property
    def hidden_size(self) -> int:
        return self.w_h.value.shape[1]

    @property
    def input_size(self) -> int:
        return self.w_x.value.shape[1]


@dataclass
class MLPParams:
    layers: list[LinearParams] = field(default_factory=list)


def _as_batch(x: Node) -> tuple[Node, bool]:
    if x.value.ndim == 1:
        return ad.reshape(x, (1, x.value.shape[0])), True
    return x, False


def _un_batch(y: Node, squeeze: bool) -> Node:
    if squeeze:
        return ad.reshape(y, (y.value.shape[1],))
    return y


def linear(params: LinearParams, x: Node) -> Node:
    """weight @ x (+ bias), batched over leading rows of x."""
    out_dim, in_dim = params.weight.value.shape
    xb, squeeze = _as_batch(x)
    if xb.value.shape[1] != in_dim:
        raise ValueError(f"linear: input width {xb.value.shape[1]} does not match "
                         f"weight shape {params.weight.value.shape}")
    y = ad.matmul(xb, ad.transpose(params.weight))
    if params.bias is not None:
        y = ad.add(y, params.bias)
    return _un_batch(y, squeeze)


def gru_cell(params: GRUCellParams, x: Node, h_prev: Node) -> Node:
    """One GRU step.

    z = sigmoid(W_z x + U_z h + b_z); r = sigmoid(W_r x + U_r h + b_r);
    n = tanh(W_n x + r * (U_n h) + b_n); h' = (1 - z) * n + z * h_prev.
    """
    s = params.hidden_size
    xb, squeeze = _as_batch(x)
    hb, _ = _as_batch(h_prev)
    if xb.value.shape[1] != params.input_size or hb.value.shape[1] != s:
        raise ValueError(f"gru_cell: got x {xb.value.shape}, h {hb.value.shape} for "
                         f"input size {params.input_size}, hidden size {s}")
    if xb.value.shape[0] != hb.value.shape[0]:
        raise ValueError(f"gru_cell: batch mismatch between x {xb.value.shape} "
                         f"and h {hb.value.shape}")
    xg = ad.add(ad.matmul(xb, ad.transpose(params.w_x)), params.b)  # (B, 3s)
    hg = ad.matmul(hb, ad.transpose(params.w_h))                    # (B, 3s)
    z = ad.sigmoid(ad.add(ad.narrow(xg, 1, 0, s), ad.narrow(hg, 1, 0, s)))
    r = ad.sigmoid(ad.add(ad.narrow(xg, 1, s, 2 * s), ad.narrow(hg, 1, s, 2 * s)))
    n = ad.tanh(ad.add(ad.narrow(xg, 1, 2 * s, 3 * s),
                       ad.mul(r, ad.narrow(hg, 1, 2 * s, 3 * s))))
    one_minus_z = ad.add_const(ad.scalar_mul(z, -1.0), 1.0)
    h_new = ad.add(ad.mul(one_minus_z, n), ad.mul(z, hb))
    return _un_batch(h_new, squeeze)


def mlp(params: MLPParams, x: Node) -> Node:
    """Stacked affine layers with rectifier activations; final layer affine only."""
    y = x
    for i, layer in enumerate(params.layers):
        y = linear(layer, y)
        if i < len(params.layers) - 1:
            y = ad.relu(y)
    return y


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, out_dim: int, in_dim: int,
                   dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-limit, limit, size=(out_dim, in_dim)).astype(dtype)


def init_linear(rng: np.random.Generator, out_dim: int, in_dim: int, *,
                bias: bool, name: str, dtype=np.float32) -> LinearParams:
    w = ad.leaf(glorot_uniform(rng, out_dim, in_dim, dtype), requires_grad=True,
                name=f"{name}.w")
    b = None
    if bias:
        b = ad.leaf(np.zeros(out_dim, dtype=dtype), requires_grad=True, name=f"{name}.b")
    return LinearParams(w, b)


def init_gru(rng: np.random.Generator, in_dim: int, hidden: int, *,
             name: str, dtype=np.float32) -> GRUCellParams:
    w_x = ad.leaf(glorot_uniform(rng, 3 * hidden, in_dim, dtype), requires_grad=True,
                  name=f"{name}.w_x")
    w_h = ad.leaf(glorot_uniform(rng, 3 * hidden, hidden, dtype), requires_grad=True,
                  name=f"{name}.w_h")
    b = ad.leaf(np.zeros(3 * hidden, dtype=dtype), requires_grad=True, name=f"{name}.b")
    return GRUCellParams(w_x, w_h, b)


def init_mlp(rng: np.random.Generator, dims: list[int], *, name: str,
             dtype=np.float32) -> MLPParams:
    layers = [init_linear(rng, dims[i + 1], dims[i], bias=True, name=f"{name}.{i}",
                          dtype=dtype)
              for i in range(len(dims) - 1)]
    return MLPParams(layers)


def linear_params_dict(prefix: str, params: LinearParams) -> dict[str, Node]:
    out = {f"{prefix}.w": params.weight}
    if params.bias is not None:
        out[f"{prefix}.b"] = params.bias
    return out


def gru_params_dict(prefix: str, params: GRUCellParams) -> dict[str, Node]:
    return {f"{prefix}.w_x": params.w_x, f"{prefix}.w_h": params.w_h, f"{prefix}.b": params.b}


def mlp_params_dict(prefix: str, params: MLPParams) -> dict[str, Node]:
    out: dict[str, Node] = {}
    for i, layer in enumerate(params.layers):
        out.update(linear_params_dict(f"{prefix}.{i}", layer))
    return out
