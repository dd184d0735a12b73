"""EHR dataset model, interchange-format I/O, conditional sampling, and a
synthetic long-tail toy corpus with an exactly computable frequency oracle.

Interchange format: a directory holding
  vocab.json     -- one object mapping code string -> integer index, dense 0..d-1
  patients.jsonl -- one object per line:
                    {"patient_id": <str>, "visits": [[<int>, ...], ...]}
                    with strictly ascending indices inside each visit;
                    optionally gzipped (patients.jsonl.gz)
"""

from __future__ import annotations

import gzip
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DatasetFormatError(ValueError):
    """Raised for malformed interchange files (message names the line)."""


@dataclass
class PatientRecord:
    patient_id: str
    visits: list[tuple[int, ...]]  # each visit: strictly ascending disease indices

    def diseases(self) -> set[int]:
        out: set[int] = set()
        for v in self.visits:
            out.update(v)
        return out


@dataclass
class EHRDataset:
    vocabulary: list[str]
    records: list[PatientRecord]
    # index[i]: array of record positions whose patient has disease i in any visit
    index: list[np.ndarray] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.index:
            self.index = _build_index(len(self.vocabulary), self.records)

    @property
    def num_diseases(self) -> int:
        return len(self.vocabulary)

    def __len__(self) -> int:
        return len(self.records)

    def supported_diseases(self) -> np.ndarray:
        """Indices of diseases that occur in at least one patient."""
        return np.array([i for i, arr in enumerate(self.index) if arr.size > 0], dtype=np.int64)


def _build_index(d: int, records: list[PatientRecord]) -> list[np.ndarray]:
    buckets: list[list[int]] = [[] for _ in range(d)]
    for pos, rec in enumerate(records):
        for i in rec.diseases():
            buckets[i].append(pos)
    return [np.array(b, dtype=np.int64) for b in buckets]


# ---------------------------------------------------------------------------
# interchange I/O
# ---------------------------------------------------------------------------

def _patients_path(root: Path) -> Path:
    plain = root / "patients.jsonl"
    gz = root / "patients.jsonl.gz"
    if plain.exists():
        return plain
    if gz.exists():
        return gz
    raise DatasetFormatError(f"{root}: neither patients.jsonl nor patients.jsonl.gz found")


def load_dataset(path: str | Path) -> EHRDataset:
    root = Path(path)
    vocab_file = root / "vocab.json"
    if not vocab_file.exists():
        raise DatasetFormatError(f"{root}: missing vocab.json")
    mapping = json.loads(vocab_file.read_text(encoding="utf-8"))
    d = len(mapping)
    vocab: list[str | None] = [None] * d
    for code, idx in mapping.items():
        if not isinstance(idx, int) or not (0 <= idx < d) or vocab[idx] is not None:
            raise DatasetFormatError(f"{vocab_file}: indices must be dense and unique in 0..{d - 1}")
        vocab[idx] = code

    patients_file = _patients_path(root)
    opener = gzip.open if patients_file.suffix == ".gz" else open
    records: list[PatientRecord] = []
    with opener(patients_file, "rt", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{patients_file}:{lineno}: invalid JSON ({exc.msg})") from None
            visits_raw = obj.get("visits")
            pid = obj.get("patient_id")
            if not isinstance(pid, str) or not isinstance(visits_raw, list):
                raise DatasetFormatError(f"{patients_file}:{lineno}: expected patient_id and visits")
            if not visits_raw:
                raise DatasetFormatError(f"{patients_file}:{lineno}: empty visit list")
            visits = []
            for visit in visits_raw:
                prev = -1
                for idx in visit:
                    if not isinstance(idx, int) or not (0 <= idx < d):
                        raise DatasetFormatError(
                            f"{patients_file}:{lineno}: disease index {idx} out of range 0..{d - 1}")
                    if idx <= prev:
                        raise DatasetFormatError(
                            f"{patients_file}:{lineno}: visit indices must be strictly ascending")
                    prev = idx
                visits.append(tuple(visit))
            records.append(PatientRecord(pid, visits))
    return EHRDataset(vocabulary=list(vocab), records=records)


def save_dataset(ds: EHRDataset, path: str | Path, *, compress: bool = False) -> None:
    """Write the dataset in canonical form: byte-identical across round trips."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    mapping = {code: i for i, code in enumerate(ds.vocabulary)}
    (root / "vocab.json").write_text(
        json.dumps(mapping, separators=(",", ":"), ensure_ascii=False), encoding="utf-8")
    target = root / ("patients.jsonl.gz" if compress else "patients.jsonl")
    opener = gzip.open if compress else open
    with opener(target, "wt", encoding="utf-8") as fh:
        for rec in ds.records:
            obj = {"patient_id": rec.patient_id, "visits": [list(v) for v in rec.visits]}
            fh.write(json.dumps(obj, separators=(",", ":"), ensure_ascii=False))
            fh.write("\n")


# ---------------------------------------------------------------------------
# sampling helpers
# ---------------------------------------------------------------------------

def conditional_batch(ds: EHRDataset, target: int, n: int,
                      rng: np.random.Generator) -> list[PatientRecord]:
    """n records drawn uniformly with replacement from patients containing target."""
    if not (0 <= target < ds.num_diseases):
        raise ValueError(f"conditional_batch: target {target} out of range 0..{ds.num_diseases - 1}")
    support = ds.index[target]
    if support.size == 0:
        raise ValueError(f"conditional_batch: no patient contains disease {target}")
    picks = rng.integers(0, support.size, size=n)
    return [ds.records[support[k]] for k in picks]


@dataclass
class LengthHistogram:
    lengths: np.ndarray  # sorted unique sequence lengths
    probs: np.ndarray    # empirical probabilities, sums to 1

    def as_dict(self) -> dict[int, float]:
        return {int(l): float(p) for l, p in zip(self.lengths, self.probs)}

    def sample(self, rng: np.random.Generator, size: int | None = None):
        out = rng.choice(self.lengths, size=size, p=self.probs)
        return int(out) if size is None else out.astype(np.int64)

    def mean(self) -> float:
        return float(np.dot(self.lengths, self.probs))


def length_histogram(ds: EHRDataset) -> LengthHistogram:
    if not ds.records:
        raise ValueError("length_histogram: empty dataset")
    lengths = np.array([len(r.visits) for r in ds.records], dtype=np.int64)
    uniq, counts = np.unique(lengths, return_counts=True)
    return LengthHistogram(uniq, counts / counts.sum())


# ---------------------------------------------------------------------------
# toy corpus with exact oracle
# ---------------------------------------------------------------------------

@dataclass
class ToyProcessSpec:
    """Latent-state Markov process emitting multi-hot visits.

    Each patient draws a sequence length, walks the state chain from a uniform
    initial state, and per visit emits each disease independently with the
    state's emission probability.  An all-empty visit is redrawn once; if
    empty again, the state's most probable disease is forced (visits are
    nonempty by construction).
    """

    transition: np.ndarray   # (K, K) row-stochastic
    emission: np.ndarray     # (K, d) in [0, 1]
    length_probs: np.ndarray  # probabilities for lengths 1..T_max
    seed: int = 0

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.emission = np.asarray(self.emission, dtype=np.float64)
        self.length_probs = np.asarray(self.length_probs, dtype=np.float64)
        self.validate()

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_diseases(self) -> int:
        return self.emission.shape[1]

    @property
    def t_max(self) -> int:
        return len(self.length_probs)

    def validate(self) -> None:
        k = self.transition.shape[0]
        if self.transition.shape != (k, k):
            raise ValueError(f"transition matrix must be square, got {self.transition.shape}")
        if np.any(np.abs(self.transition.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("transition rows must sum to 1 within 1e-12")
        if self.emission.shape[0] != k:
            raise ValueError("emission rows must match the state count")
        if np.any(self.emission < 0) or np.any(self.emission > 1):
            raise ValueError("emission probabilities must lie in [0, 1]")
        if np.any(self.length_probs < 0) or abs(self.length_probs.sum() - 1.0) > 1e-9:
            raise ValueError("length probabilities must be nonnegative and sum to 1")

    def to_json(self) -> str:
        obj = {
            "transition": self.transition.tolist(),
            "emission": self.emission.tolist(),
            "length_probs": self.length_probs.tolist(),
            "seed": self.seed,
        }
        return json.dumps(obj, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ToyProcessSpec":
        obj = json.loads(text)
        return cls(transition=np.array(obj["transition"]),
                   emission=np.array(obj["emission"]),
                   length_probs=np.array(obj["length_probs"]),
                   seed=int(obj.get("seed", 0)))


def canonical_toy_spec(seed: int = 1234) -> ToyProcessSpec:
    """The desk-scale reference corpus: d=30, K=4, T_max=5, visit-level
    frequencies spanning roughly [0.005, 0.5]."""
    d, k = 30, 4
    base = np.geomspace(0.5, 0.005, d)
    emission = np.empty((k, d))
    for state in range(k):
        boost = np.where(np.arange(d) % k == state, 1.6, 0.8)
        emission[state] = np.clip(base * boost, 0.0, 1.0)
    transition = np.full((k, k), 0.15)
    np.fill_diagonal(transition, 0.55)
    length_probs = np.array([0.10, 0.20, 0.30, 0.25, 0.15])
    return ToyProcessSpec(transition=transition, emission=emission,
                          length_probs=length_probs, seed=seed)


def generate_toy_corpus(spec: ToyProcessSpec, n_patients: int,
                        seed: int | None = None) -> EHRDataset:
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    d, k = spec.n_diseases, spec.n_states
    lengths = np.arange(1, spec.t_max + 1)
    forced = np.argmax(spec.emission, axis=1)  # per-state fallback disease
    records = []
    for p in range(n_patients):
        t = int(rng.choice(lengths, p=spec.length_probs))
        state = int(rng.integers(0, k))
        visits = []
        for _ in range(t):
            emitted = np.flatnonzero(rng.random(d) < spec.emission[state])
            if emitted.size == 0:
                emitted = np.flatnonzero(rng.random(d) < spec.emission[state])
            if emitted.size == 0:
                emitted = np.array([forced[state]])
            visits.append(tuple(int(i) for i in emitted))
            state = int(rng.choice(k, p=spec.transition[state]))
        records.append(PatientRecord(patient_id=f"toy{p:06d}", visits=visits))
    vocab = [f"D{i:03d}" for i in range(d)]
    return EHRDataset(vocabulary=vocab, records=records)


def _contains_probability(spec: ToyProcessSpec) -> np.ndarray:
    """Per-state probability that a visit contains each disease, including the
    redraw-then-force rule for empty visits.

    With q = P(empty draw | state) the rule gives, exactly,
      P(contains i) = e_i + q * e_i + q^2 * [i == argmax emission].
    """
    e = spec.emission
    q = np.prod(1.0 - e, axis=1, keepdims=True)  # (K, 1)
    contains = e * (1.0 + q)
    forced = np.argmax(e, axis=1)
    contains[np.arange(spec.n_states), forced] += (q[:, 0] ** 2)
    return contains


def oracle_frequencies(spec: ToyProcessSpec,
                       max_power_iters: int = 100_000,
                       tol: float = 1e-13) -> tuple[np.ndarray, np.ndarray]:
    """Exact visit-level disease frequencies of the emitting process.

    Returns (frequencies over d diseases, length-weighted state-occupancy
    weights over K states).  The chain must be irreducible and aperiodic,
    verified by power-iteration convergence.
    """
    k = spec.n_states
    a = spec.transition

    # generic (non-uniform) start so periodic chains oscillate instead of
    # sitting on a symmetric fixed point
    u = np.arange(1.0, k + 1.0)
    u /= u.sum()
    converged = False
    for _ in range(max_power_iters):
        nxt = u @ a
        if np.abs(nxt - u).sum() < tol:
            converged = True
            u = nxt
            break
        u = nxt
    if not converged:
        raise ValueError("oracle_frequencies: power iteration did not converge; "
                         "transition matrix may not be irreducible and aperiodic")

    # State distribution at visit t is uniform @ A^(t-1); a uniformly chosen
    # visit of the corpus weights time t by P(length >= t) / E[length].
    tail = np.cumsum(spec.length_probs[::-1])[::-1]  # tail[t-1] = P(L >= t)
    dist = np.full(k, 1.0 / k)
    occupancy = np.zeros(k)
    for t in range(spec.t_max):
        occupancy += tail[t] * dist
        dist = dist @ a
    occupancy /= tail.sum()  # sum_t P(L >= t) == E[L]

    freqs = occupancy @ _contains_probability(spec)
    return freqs, occupancy
