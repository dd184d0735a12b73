"""Sequential critic: concatenate each visit vector with its temporal feature,
score every visit with an MLP, and average over visits.

The score is unbounded (Wasserstein critic); inputs may be discrete samples,
real visits, or raw probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Node


@dataclass
class CriticState:
    mlp: nn.MLPParams  # input width d (+ s when scoring temporal features)
    visit_width: int   # d
    feature_width: int  # s, or 0 when the hidden critique is disabled

    @property
    def uses_features(self) -> bool:
        return self.feature_width > 0

    def named_params(self) -> dict[str, Node]:
        return nn.mlp_params_dict("critic.mlp", self.mlp)


def init_critic(rng: np.random.Generator, d: int, s: int, hidden_units: int = 64,
                use_features: bool = True, dtype=np.float32) -> CriticState:
    width = d + s if use_features else d
    return CriticState(
        mlp=nn.init_mlp(rng, [width, hidden_units, 1], name="critic.mlp", dtype=dtype),
        visit_width=d,
        feature_width=s if use_features else 0,
    )


def score(state: CriticState, visits: list[Node], features: list[Node] | None) -> Node:
    """Per-sample critic scores, shape (B,): mean over visits of MLP(x_t || h_t).

    With the hidden critique disabled, features must be None and each visit is
    scored alone.
    """
    num_visits = len(visits)
    batch = visits[0].value.shape[0]
    # stack visits along the batch axis so one MLP application scores them all
    x_all = visits[0] if num_visits == 1 else ad.concat(visits, axis=0)
    if state.uses_features:
        if features is None or len(features) != num_visits:
            got = 0 if features is None else len(features)
            raise ValueError(f"critic score: {num_visits} visits but {got} feature columns")
        h_all = features[0] if num_visits == 1 else ad.concat(features, axis=0)
        m = ad.concat([x_all, h_all], axis=1)
    else:
        if features is not None:
            raise ValueError("critic score: hidden critique is disabled, features must be None")
        m = x_all
    r = nn.mlp(state.mlp, m)  # (T*B, 1)
    return ad.mean(ad.reshape(r, (num_visits, batch)), axis=0)
