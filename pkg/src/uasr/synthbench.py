"""Deterministic synthetic speech-like corpus with known ground truth.

Hidden unit sequences come from a seeded bigram chain with Zipf-skewed unit
frequencies and no immediate repeats; each unit emits a few frames of its
mean vector plus Gaussian noise at 50 Hz. The unpaired text side is drawn
from the same chain but kept disjoint from the audio transcripts, so the
corpus mirrors the unpaired-text training condition while staying fully
checkable: frame labels, reference transcripts, and emission means are all
available.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .textproc import SIL, UnitInventory

FRAME_RATE = 50.0


@dataclass
class SynthSpec:
    num_units: int = 12          # inventory size, silence included
    feature_dim: int = 16
    min_duration: int = 2        # frames per unit
    max_duration: int = 5
    noise_scale: float = 0.15    # emission sigma as a fraction of delta_min
    zipf_exponent: float = 0.7
    min_sentence_units: int = 3
    max_sentence_units: int = 10
    p_sil: float = 0.5           # interior silence probability
    n_train_utts: int = 2000
    n_dev_utts: int = 200
    n_text_sents: int = 5000
    seed: int = 0


@dataclass
class SynthCorpus:
    spec: SynthSpec
    inventory: UnitInventory
    means: np.ndarray                       # (V, D) emission means
    sigma: float
    train_features: list[np.ndarray] = field(default_factory=list)
    train_labels: list[np.ndarray] = field(default_factory=list)    # frame-level unit ids
    train_refs: list[np.ndarray] = field(default_factory=list)      # unit sequences
    dev_features: list[np.ndarray] = field(default_factory=list)
    dev_labels: list[np.ndarray] = field(default_factory=list)
    dev_refs: list[np.ndarray] = field(default_factory=list)
    text: list[np.ndarray] = field(default_factory=list)
    transition: np.ndarray | None = None    # (V-1, V-1) non-silence bigram chain

    @property
    def frame_rate(self) -> float:
        return FRAME_RATE


def _unit_means(spec: SynthSpec, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Orthogonal-ish mean vectors with a guaranteed minimum separation."""
    raw = rng.standard_normal((spec.feature_dim, spec.feature_dim))
    q, _ = np.linalg.qr(raw)
    means = q[: spec.num_units] * np.sqrt(spec.feature_dim / 4.0)
    diffs = means[:, None, :] - means[None, :, :]
    d = np.sqrt((diffs**2).sum(axis=2))
    delta_min = d[~np.eye(spec.num_units, dtype=bool)].min()
    return means, delta_min


def _bigram_chain(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Row-stochastic transition matrix over non-silence units; Zipf-skewed
    target frequencies, zero self-transition probability."""
    n = spec.num_units - 1
    zipf = 1.0 / np.arange(1, n + 1) ** spec.zipf_exponent
    trans = np.empty((n, n))
    for i in range(n):
        row = zipf * np.exp(rng.standard_normal(n) * 0.5)
        row[i] = 0.0
        trans[i] = row / row.sum()
    return trans


def _sample_sentence(spec: SynthSpec, trans: np.ndarray, start_probs: np.ndarray,
                     rng: np.random.Generator) -> list[int]:
    """Non-silence unit ids (0-based over non-sil units) for one sentence."""
    length = int(rng.integers(spec.min_sentence_units, spec.max_sentence_units + 1))
    n = trans.shape[0]
    seq = [int(rng.choice(n, p=start_probs))]
    for _ in range(length - 1):
        seq.append(int(rng.choice(n, p=trans[seq[-1]])))
    return seq


def _with_silence(units: list[int], sil_id: int, p_sil: float,
                  rng: np.random.Generator) -> list[int]:
    out = [sil_id]
    for i, u in enumerate(units):
        out.append(u)
        if i < len(units) - 1 and rng.uniform() < p_sil:
            out.append(sil_id)
    out.append(sil_id)
    return out


def stationary_distribution(trans: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eig(trans.T)
    v = np.real(vecs[:, np.argmax(np.real(vals))])
    v = np.abs(v)
    return v / v.sum()


def generate(spec: SynthSpec) -> SynthCorpus:
    """Build train/dev audio-side features with labels plus disjoint text."""
    if spec.num_units < 2:
        raise ContractError("need at least 2 units (silence plus one)")
    if spec.feature_dim < spec.num_units:
        raise ContractError("feature_dim must be >= num_units for separable means")
    rng = np.random.default_rng(spec.seed)
    means, delta_min = _unit_means(spec, rng)
    sigma = spec.noise_scale * delta_min
    trans = _bigram_chain(spec, rng)
    start = stationary_distribution(trans)

    # unit 0 is silence; non-sil chain ids map to inventory ids 1..V-1
    inventory = UnitInventory([SIL] + [f"u{i}" for i in range(1, spec.num_units)])

    def sample_ref(r):
        chain = _sample_sentence(spec, trans, start, r)
        return _with_silence([c + 1 for c in chain], inventory.sil_id, spec.p_sil, r)

    def emit(ref, r):
        labels, frames = [], []
        for u in ref:
            dur = int(r.integers(spec.min_duration, spec.max_duration + 1))
            labels.extend([u] * dur)
            frames.append(means[u] + sigma * r.standard_normal((dur, spec.feature_dim)))
        return np.array(labels, dtype=np.int64), np.concatenate(frames, axis=0).astype(np.float32)

    corpus = SynthCorpus(spec=spec, inventory=inventory, means=means, sigma=sigma,
                         transition=trans)

    audio_set = set()
    for dest_feat, dest_lab, dest_ref, count, tag in (
        (corpus.train_features, corpus.train_labels, corpus.train_refs,
         spec.n_train_utts, 1),
        (corpus.dev_features, corpus.dev_labels, corpus.dev_refs,
         spec.n_dev_utts, 2),
    ):
        for i in range(count):
            r = np.random.default_rng((spec.seed, tag, i))
            ref = sample_ref(r)
            labels, frames = emit(ref, r)
            dest_ref.append(np.array(ref, dtype=np.int64))
            dest_lab.append(labels)
            dest_feat.append(frames)
            audio_set.add(tuple(ref))

    i = 0
    attempts = 0
    while len(corpus.text) < spec.n_text_sents:
        r = np.random.default_rng((spec.seed, 0x7E57, i))
        i += 1
        ref = sample_ref(r)
        attempts += 1
        if tuple(ref) in audio_set and attempts < spec.n_text_sents * 20:
            continue  # keep text disjoint from audio transcripts
        corpus.text.append(np.array(ref, dtype=np.int64))
    return corpus
