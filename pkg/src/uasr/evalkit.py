"""Decoding generator outputs and scoring them against references."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .textproc import NgramLm, UnitInventory


def greedy_decode(frame_scores: np.ndarray, inventory: UnitInventory,
                  strip_silence: bool = True) -> np.ndarray:
    """Per-frame argmax, collapse adjacent duplicates, optionally drop silence."""
    frame_scores = np.asarray(frame_scores)
    if frame_scores.ndim != 2 or frame_scores.shape[1] != len(inventory):
        raise ContractError(
            f"expected (T, {len(inventory)}) scores, got {frame_scores.shape}"
        )
    if frame_scores.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    arg = np.argmax(frame_scores, axis=1)
    keep = np.concatenate([[True], np.diff(arg) != 0])
    units = arg[keep]
    if strip_silence:
        units = units[units != inventory.sil_id]
    return units.astype(np.int64)


@dataclass(frozen=True)
class EditCounts:
    substitutions: int
    deletions: int
    insertions: int

    @property
    def total(self) -> int:
        return self.substitutions + self.deletions + self.insertions


def edit_distance(ref, hyp) -> EditCounts:
    """Levenshtein alignment with unit costs.

    Among minimal-cost alignments the one with the most substitutions is
    chosen (equivalently: ties resolved preferring substitution over
    deletion over insertion), which fixes the counts deterministically:
    given the total and S, D and I follow from the length difference.
    """
    ref = [int(x) for x in ref]
    hyp = [int(x) for x in hyp]
    n, m = len(ref), len(hyp)
    # dist[i][j]: cost for ref[:i] vs hyp[:j]; subs[i][j]: max S among optima
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    subs = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub_cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            diag = dist[i - 1, j - 1] + sub_cost
            up = dist[i - 1, j] + 1      # deletion
            left = dist[i, j - 1] + 1    # insertion
            best = min(diag, up, left)
            dist[i, j] = best
            s = -1
            if diag == best:
                s = subs[i - 1, j - 1] + sub_cost
            if up == best:
                s = max(s, subs[i - 1, j])
            if left == best:
                s = max(s, subs[i, j - 1])
            subs[i, j] = s
    total = int(dist[n, m])
    s = int(subs[n, m])
    # D - I = len(ref) - len(hyp) - (matches cancel); with S fixed both follow
    d = (total - s + (n - m)) // 2
    i_ = total - s - d
    return EditCounts(substitutions=s, deletions=d, insertions=i_)


def per(refs, hyps) -> dict:
    """Corpus phone error rate: (S + D + I) / total reference tokens."""
    if len(refs) != len(hyps):
        raise ContractError(f"got {len(refs)} refs but {len(hyps)} hyps")
    s = d = i = tokens = 0
    for ref, hyp in zip(refs, hyps):
        c = edit_distance(ref, hyp)
        s += c.substitutions
        d += c.deletions
        i += c.insertions
        tokens += len(ref)
    if tokens == 0:
        raise ContractError("total reference token count is zero")
    return {
        "per": (s + d + i) / tokens,
        "sub": s,
        "del": d,
        "ins": i,
        "ref_tokens": tokens,
    }


def beam_decode(frame_scores: np.ndarray, inventory: UnitInventory, lm: NgramLm,
                beam_width: int = 8, lm_weight: float = 1.0,
                strip_silence: bool = True) -> np.ndarray:
    """Frame-synchronous beam search with shallow n-gram fusion.

    Each hypothesis is the collapsed unit sequence; per frame a hypothesis
    either repeats its last unit (no emission) or emits a different unit,
    paying the acoustic log-score plus weighted LM log-probability.
    """
    frame_scores = np.asarray(frame_scores, dtype=np.float64)
    if frame_scores.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    shifted = frame_scores - frame_scores.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    beams: dict[tuple, float] = {(): 0.0}
    for t in range(frame_scores.shape[0]):
        nxt: dict[tuple, float] = {}
        for seq, score in beams.items():
            for u in range(len(inventory)):
                if seq and seq[-1] == u:
                    cand, s = seq, score + logp[t, u]
                else:
                    ctx = ([NgramLm.BOS_ID] * (lm.order - 1) + list(seq))[-(lm.order - 1):] if lm.order > 1 else []
                    lm_lp = np.log(lm.prob(u, tuple(ctx))) if u < lm.vocab_size else -1e9
                    cand, s = seq + (u,), score + logp[t, u] + lm_weight * lm_lp
                if cand not in nxt or s > nxt[cand]:
                    nxt[cand] = s
        beams = dict(sorted(nxt.items(), key=lambda kv: -kv[1])[:beam_width])
    best = max(beams.items(), key=lambda kv: kv[1])[0]
    units = np.array(best, dtype=np.int64)
    if strip_silence:
        units = units[units != inventory.sil_id]
    return units
