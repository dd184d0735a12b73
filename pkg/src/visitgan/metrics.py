"""Statistical evaluation of a synthetic dataset against a real one.

Six statistics: generated disease types; visit- and patient-level
Jensen-Shannon divergence of disease relative frequencies; visit- and
patient-level normalized distance (rare-disease sensitive); and the number of
generated samples required to cover every real disease type.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from . import generator as gen_mod
from .data import EHRDataset, LengthHistogram, PatientRecord

RN_CAP_DEFAULT = 10_000_000
RN_BATCH_DEFAULT = 32


@dataclass
class FrequencyVector:
    level: str            # "visit" or "patient"
    values: np.ndarray    # (d,) relative frequencies in [0, 1]
    denominator: int      # total visits or total patients


@dataclass
class EvalReport:
    gt: int
    jsd_v: float
    jsd_p: float
    nd_v: float
    nd_p: float
    rn: int | str  # sample count, or "cap" when coverage was never reached

    def to_json(self) -> str:
        return json.dumps({"gt": self.gt, "jsd_v": self.jsd_v, "jsd_p": self.jsd_p,
                           "nd_v": self.nd_v, "nd_p": self.nd_p, "rn": self.rn})

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        obj = json.loads(text)
        return cls(**obj)


def frequency(ds: EHRDataset, level: str) -> FrequencyVector:
    """Relative frequency of visits (or patients) containing each disease.

    Patient level counts a disease once per patient no matter how many of
    that patient's visits contain it.
    """
    if not ds.records:
        raise ValueError("frequency: empty dataset")
    if level not in ("visit", "patient"):
        raise ValueError(f"frequency: level must be 'visit' or 'patient', got {level!r}")
    d = ds.num_diseases
    counts = np.zeros(d, dtype=np.int64)
    if level == "visit":
        denom = 0
        for rec in ds.records:
            for visit in rec.visits:
                denom += 1
                for i in visit:
                    counts[i] += 1
    else:
        denom = len(ds.records)
        for rec in ds.records:
            for i in rec.diseases():
                counts[i] += 1
    return FrequencyVector(level=level, values=counts / denom, denominator=denom)


def generated_types(ds: EHRDataset) -> int:
    """Number of distinct disease indices appearing anywhere in the dataset."""
    seen: set[int] = set()
    for rec in ds.records:
        seen.update(rec.diseases())
    return len(seen)


def _check_pair(p: FrequencyVector, q: FrequencyVector, op: str) -> None:
    if p.level != q.level:
        raise ValueError(f"{op}: levels differ ({p.level} vs {q.level})")
    if p.values.shape != q.values.shape:
        raise ValueError(f"{op}: dimensions differ ({p.values.shape} vs {q.values.shape})")


def jsd(p: FrequencyVector, q: FrequencyVector) -> float:
    """Jensen-Shannon divergence (base-2 logarithms, so the result lies in
    [0, 1]) between the two frequency vectors normalized to probability
    distributions; 0 log 0 := 0."""
    _check_pair(p, q, "jsd")
    ps, qs = float(p.values.sum()), float(q.values.sum())
    if ps == 0.0 or qs == 0.0:
        raise ValueError("jsd: frequency vector with no nonzero entry")
    pn, qn = p.values / ps, q.values / qs
    m = 0.5 * (pn + qn)
    total = 0.0
    for a, b in ((pn, m), (qn, m)):
        mask = a > 0
        total += 0.5 * float(np.sum(a[mask] * np.log2(a[mask] / b[mask])))
    return total


def normalized_distance(p: FrequencyVector, q: FrequencyVector) -> float:
    """(1/d) * sum_i 2|p_i - q_i| / (p_i + q_i) over the raw relative
    frequencies; coordinates where both are zero contribute nothing.  Lies in
    [0, 2] and weights rare diseases heavily."""
    _check_pair(p, q, "normalized_distance")
    d = p.values.shape[0]
    denom = p.values + q.values
    mask = denom > 0
    terms = 2.0 * np.abs(p.values[mask] - q.values[mask]) / denom[mask]
    return float(terms.sum() / d)


# ---------------------------------------------------------------------------
# generation-backed metrics
# ---------------------------------------------------------------------------

def synthesize(gen: gen_mod.GeneratorState, n: int, supported: np.ndarray,
               hist: LengthHistogram, rng: np.random.Generator,
               condition: bool = True, id_offset: int = 0) -> list[PatientRecord]:
    """Sample n synthetic patients: uniform targets over supported diseases,
    lengths from the real length histogram, Bernoulli-thresholded visits."""
    if n == 0:
        return []
    lengths = hist.sample(rng, n)
    targets = rng.choice(supported, size=n)
    records: list[PatientRecord] = [None] * n  # type: ignore[list-item]
    for length in np.unique(lengths):
        rows = np.flatnonzero(lengths == length)
        z = gen_mod.draw_noise(rng, rows.size, gen.hidden_size)
        probs, _ = gen_mod.generate_values(gen, z, targets[rows], int(length),
                                           condition=condition)
        x = gen_mod.sample_discrete(probs, rng)
        for b, row_idx in enumerate(rows):
            visits = [tuple(int(i) for i in np.flatnonzero(x[b, t]))
                      for t in range(int(length))]
            records[row_idx] = PatientRecord(
                patient_id=f"syn{id_offset + row_idx:06d}", visits=visits)
    return records


def required_number(gen: gen_mod.GeneratorState, real: EHRDataset,
                    rng: np.random.Generator, batch: int = RN_BATCH_DEFAULT,
                    cap: int = RN_CAP_DEFAULT, condition: bool = True) -> int | str:
    """Samples generated (in batch-size increments) until the synthetic data
    cover every disease type present in the real data; "cap" once the cap is
    reached without full coverage."""
    if cap < batch:
        raise ValueError("required_number: cap must be at least one batch")
    goal = generated_types(real)
    supported = real.supported_diseases()
    hist = data_mod.length_histogram(real)
    seen: set[int] = set()
    total = 0
    while total < cap:
        records = synthesize(gen, batch, supported, hist, rng, condition=condition)
        total += batch
        for rec in records:
            seen.update(rec.diseases())
        if len(seen) >= goal:
            return total
    return "cap"


def evaluate_datasets(real: EHRDataset, synthetic: EHRDataset,
                      rn: int | str) -> EvalReport:
    """The six statistics for an already materialized synthetic dataset."""
    return EvalReport(
        gt=generated_types(synthetic),
        jsd_v=jsd(frequency(real, "visit"), frequency(synthetic, "visit")),
        jsd_p=jsd(frequency(real, "patient"), frequency(synthetic, "patient")),
        nd_v=normalized_distance(frequency(real, "visit"), frequency(synthetic, "visit")),
        nd_p=normalized_distance(frequency(real, "patient"), frequency(synthetic, "patient")),
        rn=rn,
    )


def evaluate(gen: gen_mod.GeneratorState, real: EHRDataset,
             rng: np.random.Generator, n_samples: int | None = None,
             rn_batch: int = RN_BATCH_DEFAULT, rn_cap: int = RN_CAP_DEFAULT,
             condition: bool = True) -> EvalReport:
    """Generate as many synthetic patients as the real dataset holds (or
    n_samples) and compute all six statistics."""
    n = len(real) if n_samples is None else n_samples
    supported = real.supported_diseases()
    hist = data_mod.length_histogram(real)
    records = synthesize(gen, n, supported, hist, rng, condition=condition)
    synthetic = EHRDataset(vocabulary=list(real.vocabulary), records=records)
    rn = required_number(gen, real, rng, batch=rn_batch, cap=rn_cap, condition=condition)
    return evaluate_datasets(real, synthetic, rn)


def prefix_coverage_count(real: EHRDataset, synthetic: EHRDataset,
                          batch: int = RN_BATCH_DEFAULT) -> int | str:
    """Coverage count for a dataset given without its generator: the smallest
    prefix of the synthetic records (rounded up to a batch multiple) covering
    every real disease type, or "cap" when the whole dataset never does."""
    goal = generated_types(real)
    seen: set[int] = set()
    for k, rec in enumerate(synthetic.records, start=1):
        seen.update(rec.diseases())
        if len(seen) >= goal:
            return int(math.ceil(k / batch) * batch)
    return "cap"
