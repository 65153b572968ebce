"""Adversarial and regularization losses for the recognizer.

Term assignment: the discriminator minimizes the non-saturating GAN loss
plus the gradient penalty; the generator minimizes its GAN term plus the
smoothness penalty, the diversity loss, and the auxiliary pseudo-label
cross-entropy, weighted by (lambda_gp, gamma_sp, eta_pd, delta_ss).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .model import Discriminator, DistributionSequence, Generator, merge_consecutive

log = logging.getLogger(__name__)

PROB_EPS = 1e-7
LOG_FLOOR = 1e-12

# Two weight presets; the published pairing of the listed values is
# ambiguous, so both splits ship.
PRESET_A = dict(lambda_gp=1.0, gamma_sp=1.5, eta_pd=0.0, delta_ss=0.3)
PRESET_B = dict(lambda_gp=1.5, gamma_sp=2.5, eta_pd=3.0, delta_ss=0.5)


@dataclass
class LossWeights:
    lambda_gp: float = PRESET_B["lambda_gp"]
    gamma_sp: float = PRESET_B["gamma_sp"]
    eta_pd: float = PRESET_B["eta_pd"]
    delta_ss: float = PRESET_B["delta_ss"]

    def __post_init__(self):
        for name in ("lambda_gp", "gamma_sp", "eta_pd", "delta_ss"):
            if getattr(self, name) < 0:
                raise ContractError(f"loss weight {name} must be nonnegative")

    @classmethod
    def preset(cls, name: str) -> "LossWeights":
        presets = {"A": PRESET_A, "B": PRESET_B}
        if name not in presets:
            raise ContractError(f"unknown preset {name!r}; choose from {sorted(presets)}")
        return cls(**presets[name])


@dataclass
class Batch:
    """One training batch: audio features, aligned pseudo-labels, unit text."""

    audio: list[np.ndarray]          # each (T, D)
    pseudo: list[np.ndarray]         # each (T,) ints, aligned to audio
    text: list[np.ndarray]           # each (L,) unit ids

    def __post_init__(self):
        if len(self.audio) != len(self.pseudo):
            raise ContractError("audio and pseudo-label lists must align")
        if not self.text:
            raise ContractError("text batch must be nonempty")


def gan_losses(disc_real: ad.Value, disc_fake: ad.Value):
    """Non-saturating GAN losses; probabilities clamped away from {0, 1}."""
    r = ad.clip(disc_real, PROB_EPS, 1.0 - PROB_EPS)
    f = ad.clip(disc_fake, PROB_EPS, 1.0 - PROB_EPS)
    disc_loss = -ad.log(r) - ad.log(1.0 - f)
    gen_loss = -ad.log(f)
    return disc_loss, gen_loss


def gradient_penalty(disc: Discriminator, real: np.ndarray, fake: ad.Value,
                     alpha: float) -> ad.Value:
    """(||grad_x C(alpha*fake + (1-alpha)*real)|| - 1)^2 at a mixed input.

    The mixed point is a fresh leaf, so the penalty reaches only the
    discriminator's parameters. Sequences are truncated to the shorter
    length before mixing.
    """
    t = min(real.shape[0], fake.shape[0])
    if t == 0:
        log.warning("gradient penalty skipped: zero-length sequence after truncation")
        return ad.constant(np.zeros((), dtype=fake.dtype))
    real_v = ad.constant(real[:t], dtype=fake.dtype)
    mixed = fake[:t] * alpha + real_v * (1.0 - alpha)
    if not mixed.requires_grad:
        # make the mixing point differentiable even for fully detached inputs
        mixed = ad.Value(mixed.data, requires_grad=True, op="gp_input")
    score = disc.forward(mixed)
    gx = ad.input_gradient_graph(score, mixed)
    norm = ad.sqrt(ad.squared_norm(gx) + LOG_FLOOR)
    return ad.power(norm - 1.0, 2.0)


def smoothness_penalty(logits: ad.Value) -> ad.Value:
    """Sum over consecutive frame pairs of the squared logit difference."""
    t = logits.shape[0]
    if t <= 1:
        return ad.constant(np.zeros((), dtype=logits.dtype))
    diff = logits[1:t] - logits[0 : t - 1]
    return ad.squared_norm(diff)


def diversity_loss(batch_dists: list[DistributionSequence]) -> ad.Value:
    """Mean over utterances of minus the entropy of the frame-averaged
    output distribution (most negative at uniform usage)."""
    if not batch_dists:
        raise ContractError("diversity loss needs a nonempty batch")
    terms = []
    for d in batch_dists:
        pbar = ad.mean(d.probs, axis=0)
        ent = -ad.vsum(pbar * ad.log(ad.clip(pbar, LOG_FLOOR, 1.0)))
        terms.append(-ent)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def auxiliary_loss(aux_logits: ad.Value, labels: np.ndarray) -> ad.Value:
    """Cross-entropy, summed over frames, against pooled pseudo-labels."""
    t, k = aux_logits.shape
    labels = np.asarray(labels)
    if labels.shape[0] != t:
        raise ContractError(f"label length {labels.shape[0]} != aux frames {t}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"pseudo-label out of range for {k} classes")
    logp = ad.log_softmax(aux_logits)
    picked = logp[np.arange(t), labels]
    return -ad.vsum(picked)


def pool_labels(labels: np.ndarray, spans: list[tuple[int, int]]) -> np.ndarray:
    """Majority-vote labels over each output frame's receptive span
    (ties go to the earliest-seen label)."""
    out = np.empty(len(spans), dtype=np.int64)
    for i, (s, e) in enumerate(spans):
        s = max(0, min(s, len(labels) - 1))
        e = max(s + 1, min(e, len(labels)))
        window = labels[s:e]
        uniq, first, counts = np.unique(window, return_index=True, return_counts=True)
        best = np.lexsort((first, -counts))[0]
        out[i] = uniq[best]
    return out


def total_losses(batch: Batch, gen: Generator, disc: Discriminator,
                 w: LossWeights, rng: np.random.Generator):
    """Full objective over one batch: returns (L_D, L_G, parts dict).

    Per-utterance terms are averaged over the batch; real/fake pairs are
    drawn by index (text recycled if shorter than the audio list).
    """
    v = gen.cfg.vocab
    dtype = gen.params["w1"].data.dtype
    fakes, sps, auxes = [], [], []
    for frames, pseudo in zip(batch.audio, batch.pseudo):
        logits, aux_logits = gen.forward(frames)
        sps.append(smoothness_penalty(logits))
        pooled = pool_labels(pseudo, gen.receptive_spans(frames.shape[0]))
        auxes.append(auxiliary_loss(aux_logits, pooled))
        fakes.append(merge_consecutive(logits, rng))

    d_terms, g_terms, gp_terms = [], [], []
    for i, fake in enumerate(fakes):
        real = ad.one_hot(batch.text[i % len(batch.text)], v, dtype=dtype)
        fake_probs = fake.probs
        d_fake = disc.forward(fake_probs)
        d_real = disc.forward(real)
        dl, gl = gan_losses(d_real, d_fake)
        d_terms.append(dl)
        g_terms.append(gl)
        gp_terms.append(gradient_penalty(disc, real.data, fake_probs, float(rng.uniform())))

    def avg(terms):
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return total * (1.0 / len(terms))

    gan_d, gan_g = avg(d_terms), avg(g_terms)
    gp, sp, ss = avg(gp_terms), avg(sps), avg(auxes)
    pd = diversity_loss(fakes)
    l_d = gan_d + w.lambda_gp * gp
    l_g = gan_g + w.gamma_sp * sp + w.eta_pd * pd + w.delta_ss * ss
    parts = {
        "gan_d": gan_d.item(), "gan_g": gan_g.item(), "gp": gp.item(),
        "sp": sp.item(), "pd": pd.item(), "ss": ss.item(),
    }
    return l_d, l_g, parts
