"""Adversarial training loop: alternating critic/generator updates with
Wasserstein losses and a gradient penalty over interpolated inputs.

Each iteration samples a target disease, trains the critic n_critic times on
discrete samples drawn from the generated probabilities, then trains the
generator on the probabilities themselves.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import critic as critic_mod
from . import data as data_mod
from . import generator as gen_mod
from . import rng as rng_mod
from .checkpoint import save_checkpoint
from .optim import Adam
from .pretrain import PretrainState, multi_hot, temporal_features


@dataclass
class TrainConfig:
    iterations: int = 300_000
    batch_size: int = 256
    g_lr: float = 1e-4
    d_lr: float = 1e-5
    decay: float = 0.1
    decay_every: int = 100_000
    n_critic: int = 1
    gp_lambda: float = 10.0
    beta1: float = 0.5
    beta2: float = 0.9
    hidden: int = 256
    seed: int = 0
    hidden_critique: bool = True   # score (x_t || h_t); off: score x_t alone
    condition: bool = True         # smooth conditional matrix on/off
    target_dist: str = "uniform"   # "uniform" or "empirical" target sampling
    log_every: int = 100
    checkpoint_every: int = 10_000
    probe_size: int = 256

    def __post_init__(self):
        if self.target_dist not in ("uniform", "empirical"):
            raise ValueError(f"target_dist must be 'uniform' or 'empirical', got {self.target_dist!r}")
        if min(self.iterations, self.gp_lambda) < 0 or min(
                self.batch_size, self.decay_every, self.n_critic, self.hidden,
                self.log_every, self.checkpoint_every) < 1:
            raise ValueError("train config: counts must be positive and lambda nonnegative")
        if min(self.g_lr, self.d_lr, self.decay) <= 0:
            raise ValueError("train config: rates must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("train config: momentum coefficients must lie in [0, 1)")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


HISTORY_COLUMNS = ("iteration", "critic_loss", "gen_loss", "wasserstein",
                   "gen_disease_types", "avg_diseases_per_visit")


@dataclass
class TrainHistory:
    rows: list[dict] = field(default_factory=list)

    def append(self, **kwargs) -> None:
        if self.rows and kwargs["iteration"] <= self.rows[-1]["iteration"]:
            raise ValueError("history iterations must be strictly increasing")
        self.rows.append({k: kwargs[k] for k in HISTORY_COLUMNS})

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
            writer.writeheader()
            writer.writerows(self.rows)

    def series(self, column: str) -> np.ndarray:
        return np.array([row[column] for row in self.rows])


# ---------------------------------------------------------------------------
# loss pieces
# ---------------------------------------------------------------------------

def interpolate(x: np.ndarray, x_fake: np.ndarray, h: np.ndarray,
                h_fake: np.ndarray, eps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Convex combinations eps*real + (1-eps)*fake with one eps per sample,
    shared between the visit tensor and its temporal features."""
    if x.shape != x_fake.shape or h.shape != h_fake.shape:
        raise ValueError(f"interpolate: shape mismatch {x.shape}/{x_fake.shape}, "
                         f"{h.shape}/{h_fake.shape}")
    ex = eps.reshape((-1,) + (1,) * (x.ndim - 1))
    eh = eps.reshape((-1,) + (1,) * (h.ndim - 1))
    return ex * x + (1.0 - ex) * x_fake, eh * h + (1.0 - eh) * h_fake


def gradient_penalty(critic: critic_mod.CriticState, x_hat: list[ad.Node],
                     h_hat: list[ad.Node] | None, gp_lambda: float) -> ad.Node:
    """lambda * mean over the batch of (||grad of D at the interpolate||_2 - 1)^2.

    The gradient is taken jointly over every entry of (x_hat, h_hat) per
    sample, and is itself a graph node, so the penalty stays differentiable
    with respect to the critic parameters.
    """
    scores = critic_mod.score(critic, x_hat, h_hat)
    total = ad.sum(scores)  # rows are independent: per-sample grads in one pass
    wrt = list(x_hat) + (list(h_hat) if h_hat is not None else [])
    grads = ad.grad(total, wrt)
    joint = ad.concat(grads, axis=1) if len(grads) > 1 else grads[0]
    norms = ad.norm_rows(joint)
    return ad.scalar_mul(ad.mean(ad.square(ad.add_const(norms, -1.0))), gp_lambda)


# ---------------------------------------------------------------------------
# sampling plumbing
# ---------------------------------------------------------------------------

class _TargetSampler:
    def __init__(self, ds: data_mod.EHRDataset, mode: str):
        self.supported = ds.supported_diseases()
        if self.supported.size == 0:
            raise ValueError("train: dataset has no diseases with support")
        if mode == "uniform":
            self.probs = np.full(self.supported.size, 1.0 / self.supported.size)
        else:  # visit-level empirical frequency, restricted to supported diseases
            total_visits = sum(len(r.visits) for r in ds.records)
            counts = np.zeros(ds.num_diseases)
            for rec in ds.records:
                for visit in rec.visits:
                    for i in visit:
                        counts[i] += 1
            weights = counts[self.supported] / total_visits
            self.probs = weights / weights.sum()

    def draw(self, rng: np.random.Generator) -> int:
        return int(rng.choice(self.supported, p=self.probs))


class _RealBatcher:
    """Exact-length conditional batches: per disease, records sorted by length
    descending, so the pool of records with length >= T is a prefix."""

    def __init__(self, ds: data_mod.EHRDataset):
        self.ds = ds
        self.by_disease: dict[int, tuple[list, np.ndarray]] = {}
        for i in range(ds.num_diseases):
            recs = [ds.records[k] for k in ds.index[i]]
            recs.sort(key=lambda r: -len(r.visits))
            self.by_disease[i] = (recs, np.array([len(r.visits) for r in recs]))

    def max_length(self, target: int) -> int:
        recs, lens = self.by_disease[target]
        if not recs:
            raise ValueError(f"train: no patient contains disease {target}")
        return int(lens[0])

    def draw(self, target: int, num_visits: int, n: int,
             rng: np.random.Generator) -> list:
        recs, lens = self.by_disease[target]
        pool = int(np.searchsorted(-lens, -num_visits, side="right"))
        if pool == 0:
            raise ValueError(f"train: no patient with disease {target} has "
                             f"{num_visits} or more visits")
        picks = rng.integers(0, pool, size=n)
        return [recs[k] for k in picks]


def _leaf_visits(arr: np.ndarray, requires_grad=False) -> list[ad.Node]:
    return [ad.leaf(arr[:, t, :], requires_grad=requires_grad) for t in range(arr.shape[1])]


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------

@dataclass
class StepStats:
    critic_loss: float = 0.0
    wasserstein: float = 0.0
    gen_loss: float = 0.0


def critic_step(gen: gen_mod.GeneratorState, critic: critic_mod.CriticState,
                pre: PretrainState, batcher: _RealBatcher, target: int,
                num_visits: int, cfg: TrainConfig, streams, opt: Adam) -> StepStats:
    """One critic update: Wasserstein loss on (discrete fake, real) plus the
    gradient penalty at interpolated points; generator parameters untouched."""
    d = gen.num_diseases
    records = batcher.draw(target, num_visits, cfg.batch_size, streams["shuffle"])
    x_real = multi_hot(records, num_visits, d)

    z = gen_mod.draw_noise(streams["noise"], cfg.batch_size, gen.hidden_size)
    p_fake, h_fake_all = gen_mod.generate_values(
        gen, z, np.full(cfg.batch_size, target), num_visits, condition=cfg.condition)
    x_fake = gen_mod.sample_discrete(p_fake, streams["bernoulli"])

    use_h = cfg.hidden_critique
    if use_h:
        h_real = np.stack(temporal_features(pre, x_real), axis=1)
        h_fake = h_fake_all
    else:
        h_real = h_fake = np.zeros((cfg.batch_size, num_visits, 0), dtype=np.float32)

    eps = streams["epsilon"].random(cfg.batch_size).astype(np.float32)
    x_hat, h_hat = interpolate(x_real, x_fake, h_real, h_fake, eps)

    fake_score = critic_mod.score(critic, _leaf_visits(x_fake),
                                  _leaf_visits(h_fake) if use_h else None)
    real_score = critic_mod.score(critic, _leaf_visits(x_real),
                                  _leaf_visits(h_real) if use_h else None)
    wasserstein = ad.sub(ad.mean(fake_score), ad.mean(real_score))

    x_hat_nodes = _leaf_visits(x_hat, requires_grad=True)
    h_hat_nodes = _leaf_visits(h_hat, requires_grad=True) if use_h else None
    penalty = gradient_penalty(critic, x_hat_nodes, h_hat_nodes, cfg.gp_lambda)

    loss = ad.add(wasserstein, penalty)
    opt.step(ad.backward(loss))
    return StepStats(critic_loss=float(loss.value),
                     wasserstein=float(-wasserstein.value))


def generator_step(gen: gen_mod.GeneratorState, critic: critic_mod.CriticState,
                   target: int, num_visits: int, cfg: TrainConfig, streams,
                   opt: Adam) -> float:
    """One generator update: -mean D(P_fake, H_fake) with the probabilities
    (not samples) fed to the critic; critic parameters untouched."""
    z = ad.constant(gen_mod.draw_noise(streams["noise"], cfg.batch_size, gen.hidden_size))
    out = gen_mod.generate(gen, z, target, num_visits, condition=cfg.condition)
    scores = critic_mod.score(critic, out.probs,
                              out.hidden if cfg.hidden_critique else None)
    loss = ad.scalar_mul(ad.mean(scores), -1.0)
    opt.step(ad.backward(loss))
    return float(loss.value)


# ---------------------------------------------------------------------------
# probe + checkpoint assembly
# ---------------------------------------------------------------------------

def generation_probe(gen: gen_mod.GeneratorState, supported: np.ndarray,
                     hist: data_mod.LengthHistogram, n: int,
                     rng: np.random.Generator,
                     condition: bool = True) -> tuple[int, float]:
    """Sample n sequences and report (distinct disease count, mean diseases
    per visit)."""
    lengths = hist.sample(rng, n)
    targets = rng.choice(supported, size=n)
    seen: set[int] = set()
    ones = 0
    visits = 0
    for length in np.unique(lengths):
        mask = lengths == length
        z = gen_mod.draw_noise(rng, int(mask.sum()), gen.hidden_size)
        probs, _ = gen_mod.generate_values(gen, z, targets[mask], int(length),
                                           condition=condition)
        x = gen_mod.sample_discrete(probs, rng)
        seen.update(np.flatnonzero(x.any(axis=(0, 1))).tolist())
        ones += int(x.sum())
        visits += x.shape[0] * x.shape[1]
    return len(seen), ones / max(visits, 1)


def checkpoint_tensors(gen: gen_mod.GeneratorState, critic: critic_mod.CriticState,
                       pre: PretrainState, opt_g: Adam | None = None,
                       opt_d: Adam | None = None) -> dict[str, np.ndarray]:
    tensors = {name: node.value for name, node in
               {**gen.named_params(), **critic.named_params(), **pre.named_params()}.items()}
    if opt_g is not None:
        tensors.update(opt_g.state_tensors("opt.gen"))
    if opt_d is not None:
        tensors.update(opt_d.state_tensors("opt.critic"))
    return tensors


def generator_from_checkpoint(tensors: dict[str, np.ndarray]) -> gen_mod.GeneratorState:
    from . import nn
    decode = tensors["gen.decode.w"]
    return gen_mod.GeneratorState(
        decode=nn.LinearParams(ad.leaf(decode.astype(np.float32), requires_grad=True,
                                       name="gen.decode.w")),
        gru=nn.GRUCellParams(
            ad.leaf(tensors["gen.gru.w_x"].astype(np.float32), requires_grad=True, name="gen.gru.w_x"),
            ad.leaf(tensors["gen.gru.w_h"].astype(np.float32), requires_grad=True, name="gen.gru.w_h"),
            ad.leaf(tensors["gen.gru.b"].astype(np.float32), requires_grad=True, name="gen.gru.b"),
        ),
        attention=nn.LinearParams(ad.leaf(tensors["gen.attn.w"].astype(np.float32),
                                          requires_grad=True, name="gen.attn.w")),
    )


def pretrain_from_checkpoint(tensors: dict[str, np.ndarray]) -> PretrainState:
    from . import nn
    state = PretrainState(
        gru=nn.GRUCellParams(
            ad.leaf(tensors["pre.gru.w_x"].astype(np.float32), requires_grad=True, name="pre.gru.w_x"),
            ad.leaf(tensors["pre.gru.w_h"].astype(np.float32), requires_grad=True, name="pre.gru.w_h"),
            ad.leaf(tensors["pre.gru.b"].astype(np.float32), requires_grad=True, name="pre.gru.b"),
        ),
        decode=nn.LinearParams(ad.leaf(tensors["pre.decode.w"].astype(np.float32),
                                       requires_grad=True, name="pre.decode.w")),
    )
    state.freeze()
    return state


def critic_from_checkpoint(tensors: dict[str, np.ndarray], d: int) -> critic_mod.CriticState:
    from . import nn
    layers = []
    i = 0
    while f"critic.mlp.{i}.w" in tensors:
        w = ad.leaf(tensors[f"critic.mlp.{i}.w"].astype(np.float32), requires_grad=True,
                    name=f"critic.mlp.{i}.w")
        b = ad.leaf(tensors[f"critic.mlp.{i}.b"].astype(np.float32), requires_grad=True,
                    name=f"critic.mlp.{i}.b")
        layers.append(nn.LinearParams(w, b))
        i += 1
    width = layers[0].weight.value.shape[1]
    return critic_mod.CriticState(mlp=nn.MLPParams(layers), visit_width=d,
                                  feature_width=width - d)


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

def train(ds: data_mod.EHRDataset, cfg: TrainConfig, pretrained: PretrainState,
          checkpoint_dir: str | Path | None = None,
          ) -> tuple[gen_mod.GeneratorState, critic_mod.CriticState, TrainHistory]:
    if not pretrained.frozen:
        raise ValueError("train: the temporal-feature state must be frozen")
    if not ds.records:
        raise ValueError("train: empty dataset")
    if pretrained.hidden_size != cfg.hidden or pretrained.num_diseases != ds.num_diseases:
        raise ValueError(
            f"train: pre-trained dims (d={pretrained.num_diseases}, s={pretrained.hidden_size}) "
            f"do not match run dims (d={ds.num_diseases}, s={cfg.hidden})")

    d = ds.num_diseases
    streams = rng_mod.streams(
        cfg.seed, ["init", "noise", "target", "bernoulli", "epsilon", "shuffle", "probe"])

    gen = gen_mod.init_generator(streams["init"], d, cfg.hidden)
    critic = critic_mod.init_critic(streams["init"], d, cfg.hidden,
                                    use_features=cfg.hidden_critique)
    opt_g = Adam(gen.named_params(), cfg.g_lr, cfg.beta1, cfg.beta2)
    opt_d = Adam(critic.named_params(), cfg.d_lr, cfg.beta1, cfg.beta2)

    targets = _TargetSampler(ds, cfg.target_dist)
    batcher = _RealBatcher(ds)
    hist = data_mod.length_histogram(ds)
    probe_rng = streams["probe"]
    history = TrainHistory()
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    stats = StepStats()
    gen_loss = 0.0
    for it in range(1, cfg.iterations + 1):
        decay_steps = (it - 1) // cfg.decay_every
        opt_g.lr = cfg.g_lr * cfg.decay ** decay_steps
        opt_d.lr = cfg.d_lr * cfg.decay ** decay_steps

        target = targets.draw(streams["target"])
        # real batches need patients containing the target with >= T visits;
        # clamp the drawn length so critic and generator train at the same T
        num_visits = min(hist.sample(streams["shuffle"]), batcher.max_length(target))
        for _ in range(cfg.n_critic):
            stats = critic_step(gen, critic, pretrained, batcher, target,
                                num_visits, cfg, streams, opt_d)
        gen_loss = generator_step(gen, critic, target, num_visits, cfg,
                                  streams, opt_g)

        if it % cfg.log_every == 0:
            types, avg = generation_probe(gen, targets.supported, hist,
                                          cfg.probe_size, probe_rng,
                                          condition=cfg.condition)
            history.append(iteration=it, critic_loss=stats.critic_loss,
                           gen_loss=gen_loss, wasserstein=stats.wasserstein,
                           gen_disease_types=types, avg_diseases_per_visit=avg)
        if ckpt_dir is not None and it % cfg.checkpoint_every == 0:
            save_checkpoint(ckpt_dir / f"checkpoint_{it:08d}.mtgn",
                            checkpoint_tensors(gen, critic, pretrained, opt_g, opt_d))

    return gen, critic, history
