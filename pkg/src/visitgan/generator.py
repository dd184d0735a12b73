"""Sequence generator: decode one noise vector into first-visit disease
probabilities, roll a GRU forward to produce the rest, and calibrate the
probabilities toward a target disease with a smooth conditional matrix.

All functions are batched: noise is (B, s), per-visit tensors are lists of
(B, d) / (B, s) nodes indexed by visit.  A single sequence is a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Node


@dataclass
class GeneratorState:
    decode: nn.LinearParams     # (d, s), no bias
    gru: nn.GRUCellParams       # input d, hidden s
    attention: nn.LinearParams  # (1, d), no bias

    @property
    def num_diseases(self) -> int:
        return self.decode.weight.value.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.decode.weight.value.shape[1]

    def named_params(self) -> dict[str, Node]:
        return {
            "gen.decode.w": self.decode.weight,
            **nn.gru_params_dict("gen.gru", self.gru),
            "gen.attn.w": self.attention.weight,
        }


def init_generator(rng: np.random.Generator, d: int, s: int,
                   dtype=np.float32) -> GeneratorState:
    return GeneratorState(
        decode=nn.init_linear(rng, d, s, bias=False, name="gen.decode", dtype=dtype),
        gru=nn.init_gru(rng, d, s, name="gen.gru", dtype=dtype),
        attention=nn.init_linear(rng, 1, d, bias=False, name="gen.attn", dtype=dtype),
    )


@dataclass
class GenerationOutput:
    """One generated batch: calibrated and raw per-visit probabilities, GRU
    hidden states, and the per-visit attention scores (rows sum to 1)."""

    probs: list[Node]    # T nodes of shape (B, d), calibrated
    hidden: list[Node]   # T nodes of shape (B, s)
    raw: list[Node]      # T nodes of shape (B, d), before calibration
    scores: Node         # (B, T)

    @property
    def num_visits(self) -> int:
        return len(self.probs)

    def prob_values(self) -> np.ndarray:
        """Calibrated probabilities as a (B, T, d) array."""
        return np.stack([p.value for p in self.probs], axis=1)

    def hidden_values(self) -> np.ndarray:
        return np.stack([h.value for h in self.hidden], axis=1)


def draw_noise(rng: np.random.Generator, n: int, hidden: int) -> np.ndarray:
    """Noise batch (n, hidden), uniform on [0, 1).

    Uniform rather than symmetric noise: the first-visit decode sigmoid(W z)
    carries no bias, and under any sign-symmetric z its expected output is
    pinned at 0.5 per disease regardless of W, which would fix the expected
    first-visit disease count at d/2.  Nonnegative noise leaves the count
    learnable.
    """
    return rng.random((n, hidden)).astype(np.float32)


def decode_noise(state: GeneratorState, z: Node) -> Node:
    """sigmoid(W z): disease probabilities for the first visit."""
    return ad.sigmoid(nn.linear(state.decode, z))


def unroll(state: GeneratorState, z: Node, num_visits: int) -> tuple[list[Node], list[Node]]:
    """Recursively generate num_visits visit-probability vectors from one
    noise draw; the GRU state starts at zero and consumes each visit's
    probabilities."""
    if num_visits < 1:
        raise ValueError("unroll: sequence length must be at least 1")
    zb = z if z.value.ndim == 2 else ad.reshape(z, (1, z.value.shape[0]))
    batch = zb.value.shape[0]
    probs = [ad.sigmoid(nn.linear(state.decode, zb))]
    h = ad.constant(np.zeros((batch, state.hidden_size), dtype=zb.value.dtype))
    hidden = []
    for t in range(num_visits):
        h = nn.gru_cell(state.gru, probs[t], h)
        hidden.append(h)
        if t + 1 < num_visits:
            probs.append(ad.sigmoid(nn.linear(state.decode, h)))
    return probs, hidden


def attention_scores(state: GeneratorState, probs: list[Node]) -> Node:
    """Location-based attention over visits: softmax_t of W_v P_t, shape (B, T)."""
    vs = [nn.linear(state.attention, p) for p in probs]  # each (B, 1)
    return ad.softmax(ad.concat(vs, axis=1), axis=1)


def conditional_matrix(scores: Node, target: int, d: int) -> list[Node]:
    """Zero matrix except the target-disease row, which carries the attention
    scores; total mass is exactly 1.  Returned as T nodes of shape (B, d)."""
    if not (0 <= target < d):
        raise ValueError(f"conditional_matrix: target {target} out of range 0..{d - 1}")
    num_visits = scores.value.shape[1]
    onehot = np.zeros((1, d), dtype=scores.value.dtype)
    onehot[0, target] = 1.0
    row = ad.constant(onehot)
    return [ad.matmul(ad.narrow(scores, 1, t, t + 1), row) for t in range(num_visits)]


def calibrate(probs: list[Node], cond: list[Node]) -> list[Node]:
    """Elementwise min(1, P + c): never decreases a probability, never exceeds 1."""
    if len(probs) != len(cond):
        raise ValueError(f"calibrate: got {len(probs)} probability visits but "
                         f"{len(cond)} conditional visits")
    return [ad.min_const(ad.add(p, c), 1.0) for p, c in zip(probs, cond)]


def generate(state: GeneratorState, z: Node, target: int, num_visits: int,
             condition: bool = True) -> GenerationOutput:
    """Full generation pipeline; with the condition toggle off the calibrated
    probabilities equal the raw ones (scores are still reported)."""
    raw, hidden = unroll(state, z, num_visits)
    scores = attention_scores(state, raw)
    if condition:
        cond = conditional_matrix(scores, target, state.num_diseases)
        probs = calibrate(raw, cond)
    else:
        probs = raw
    return GenerationOutput(probs=probs, hidden=hidden, raw=raw, scores=scores)


def generate_values(state: GeneratorState, z: np.ndarray, targets: np.ndarray,
                    num_visits: int, condition: bool = True,
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Sampling-only generation for a batch with per-sample targets.

    Returns calibrated probabilities (B, T, d) and hidden states (B, T, s) as
    plain arrays; entry for entry this matches running ``generate`` per
    target.  Used where no gradients are needed (probes, corpus synthesis).
    """
    with ad.recording(False):
        raw, hidden = unroll(state, ad.constant(z), num_visits)
        scores = attention_scores(state, raw).value  # (B, T)
    probs = np.stack([p.value for p in raw], axis=1)  # (B, T, d)
    if condition:
        probs = probs.copy()
        rows = np.arange(probs.shape[0])
        probs[rows[:, None], np.arange(num_visits)[None, :], np.asarray(targets)[:, None]] += scores
        np.minimum(probs, 1.0, out=probs)
    return probs, np.stack([h.value for h in hidden], axis=1)


def sample_discrete(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Independent per-entry Bernoulli draws from a probability array."""
    if np.any(probs < 0) or np.any(probs > 1):
        raise ValueError("sample_discrete: probabilities must lie in [0, 1]")
    return (rng.random(probs.shape) < probs).astype(probs.dtype)
