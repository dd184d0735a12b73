"""Next-visit prediction pre-training of the temporal-feature GRU.

The trained GRU is frozen and then serves per-visit hidden states for real
sequences during adversarial training; no gradients ever flow back into it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn, rng as rng_mod
from .autodiff import Node
from .data import EHRDataset
from .optim import Adam


@dataclass
class PretrainState:
    gru: nn.GRUCellParams      # input d, hidden s
    decode: nn.LinearParams    # (d, s), no bias
    frozen: bool = False

    @property
    def hidden_size(self) -> int:
        return self.gru.hidden_size

    @property
    def num_diseases(self) -> int:
        return self.gru.input_size

    def named_params(self) -> dict[str, Node]:
        return {**nn.gru_params_dict("pre.gru", self.gru), "pre.decode.w": self.decode.weight}

    def freeze(self) -> None:
        for p in self.named_params().values():
            p.value.setflags(write=False)
            p.requires_grad = False
        self.frozen = True


def init_pretrain(rng: np.random.Generator, d: int, s: int,
                  dtype=np.float32) -> PretrainState:
    return PretrainState(
        gru=nn.init_gru(rng, d, s, name="pre.gru", dtype=dtype),
        decode=nn.init_linear(rng, d, s, bias=False, name="pre.decode", dtype=dtype),
    )


def next_visit_forward(state: PretrainState,
                       visits: list[Node]) -> tuple[list[Node], list[Node]]:
    """Hidden states for every visit and next-visit predictions for all but
    the last.  Labels align as y_t = x_{t+1}."""
    if not visits:
        raise ValueError("next_visit_forward: sequence length must be at least 1")
    batch = visits[0].value.shape[0] if visits[0].value.ndim == 2 else 1
    h = ad.constant(np.zeros((batch, state.hidden_size), dtype=visits[0].value.dtype))
    hidden, preds = [], []
    for t, x in enumerate(visits):
        xb = x if x.value.ndim == 2 else ad.reshape(x, (1, x.value.shape[0]))
        h = nn.gru_cell(state.gru, xb, h)
        hidden.append(h)
        if t + 1 < len(visits):
            preds.append(ad.sigmoid(nn.linear(state.decode, h)))
    return hidden, preds


def pretrain_loss(predictions: list[Node], labels: list[Node]) -> Node:
    """Binary cross-entropy summed over visits and diseases (and over the
    batch, when batched); log arguments are clamped at 1e-12."""
    if len(predictions) != len(labels):
        raise ValueError(f"pretrain_loss: {len(predictions)} predictions vs "
                         f"{len(labels)} labels")
    total = None
    for yhat, y in zip(predictions, labels):
        if yhat.value.shape != y.value.shape:
            raise ValueError(f"pretrain_loss: prediction shape {yhat.value.shape} "
                             f"does not match label shape {y.value.shape}")
        pos = ad.mul(y, ad.log(yhat))
        neg = ad.mul(ad.add_const(ad.scalar_mul(y, -1.0), 1.0),
                     ad.log(ad.add_const(ad.scalar_mul(yhat, -1.0), 1.0)))
        term = ad.sum(ad.add(pos, neg))
        total = term if total is None else ad.add(total, term)
    return ad.scalar_mul(total, -1.0)


def multi_hot(records, num_visits: int, d: int, dtype=np.float32) -> np.ndarray:
    """(B, T, d) multi-hot array from the first num_visits visits of each record."""
    out = np.zeros((len(records), num_visits, d), dtype=dtype)
    for b, rec in enumerate(records):
        for t in range(num_visits):
            for i in rec.visits[t]:
                out[b, t, i] = 1.0
    return out


@dataclass
class PretrainResult:
    state: PretrainState
    epoch_losses: list[float] = field(default_factory=list)


def pretrain(ds: EHRDataset, epochs: int = 200, lr: float = 1e-3, *,
             hidden: int = 256, batch_size: int = 256, seed: int = 0,
             beta1: float = 0.9, beta2: float = 0.999) -> PretrainResult:
    """Train on next-visit prediction, then freeze.

    Patients with a single visit carry no label and are skipped here (they
    still receive temporal features later).  Returns the frozen state and the
    mean per-sequence loss of each epoch.
    """
    if epochs < 1:
        raise ValueError("pretrain: must run at least 1 epoch to freeze the result")
    eligible = [r for r in ds.records if len(r.visits) >= 2]
    if not eligible:
        raise ValueError("pretrain: dataset has no patient with at least 2 visits")

    d = ds.num_diseases
    init_rng = rng_mod.stream(seed, "init")
    shuffle_rng = rng_mod.stream(seed, "shuffle")
    state = init_pretrain(init_rng, d, hidden)
    opt = Adam(state.named_params(), lr, beta1, beta2)

    by_length: dict[int, list] = {}
    for rec in eligible:
        by_length.setdefault(len(rec.visits), []).append(rec)

    losses = []
    for _ in range(epochs):
        epoch_total = 0.0
        for length in sorted(by_length):
            bucket = by_length[length]
            order = shuffle_rng.permutation(len(bucket))
            for start in range(0, len(bucket), batch_size):
                batch = [bucket[k] for k in order[start:start + batch_size]]
                x = multi_hot(batch, length, d)
                visits = [ad.constant(x[:, t, :]) for t in range(length)]
                _, preds = next_visit_forward(state, visits)
                labels = visits[1:]
                loss = pretrain_loss(preds, labels)
                epoch_total += float(loss.value)
                grads = ad.backward(ad.scalar_mul(loss, 1.0 / len(batch)))
                opt.step(grads)
        losses.append(epoch_total / len(eligible))

    state.freeze()
    return PretrainResult(state=state, epoch_losses=losses)


def temporal_features(state: PretrainState, visits: np.ndarray) -> list[np.ndarray]:
    """Hidden states for a real (B, T, d) multi-hot batch, as plain arrays.

    Requires a frozen state; the computation records no graph, so no gradient
    can reach the pre-trained parameters.
    """
    if not state.frozen:
        raise ValueError("temporal_features: state must be frozen first")
    with ad.recording(False):
        nodes = [ad.constant(visits[:, t, :]) for t in range(visits.shape[1])]
        hidden, _ = next_visit_forward(state, nodes)
    return [h.value for h in hidden]
