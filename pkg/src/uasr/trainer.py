"""Alternating adversarial optimization with checkpointing and selection.

Odd steps update the discriminator, even steps the generator, so a run of
``total_steps`` gives each network total_steps/2 updates. Everything is
deterministic given the seed: batch order, merge sampling, and the mixing
weights all come from one seeded generator whose state is checkpointed.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from . import objectives as obj
from .errors import ContractError
from .evalkit import greedy_decode, per
from .model import (
    Discriminator,
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    load_checkpoint,
    merge_consecutive,
    save_checkpoint,
)
from .objectives import LossWeights
from .quantizer import Codebook, assign
from .textproc import NgramLm, UnitInventory, lm_nll

LOG_KEYS = ("L_D", "L_G", "gan_g", "gan_d", "gp", "sp", "pd", "ss")


@dataclass
class TrainConfig:
    total_steps: int = 100_000
    lr_generator: float = 5e-5
    lr_discriminator: float = 3e-4
    batch_audio: int = 160
    batch_text: int = 160
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_every: int = 1000
    eval_every: int = 500
    decode_stride: int | None = None   # None: use the training stride
    # stddev of Gaussian noise added to every discriminator input (real and
    # fake alike) during training; blunts the trivial "real rows are exactly
    # one-hot" shortcut so the discriminator must read sequence structure
    disc_input_noise: float = 0.1
    # optional pre-phase: train only the auxiliary pathway (batchnorm, first
    # conv, aux head) on the pseudo-labels, then initialize the output layer
    # by routing each pseudo-class to a unit chosen by frequency matching
    # against the text corpus. Starts the adversarial game from an
    # acoustically grounded output instead of noise; skipped when the
    # auxiliary weight is zero (no auxiliary objective, no warm-up).
    aux_warmup_steps: int = 0
    aux_warmup_lr: float = 1e-3

    def __post_init__(self):
        if self.lr_generator <= 0 or self.lr_discriminator <= 0:
            raise ContractError("learning rates must be positive")
        if self.batch_audio < 1 or self.batch_text < 1:
            raise ContractError("batch sizes must be >= 1")
        if self.aux_warmup_steps < 0:
            raise ContractError("aux_warmup_steps must be >= 0")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """CPU-sized preset: same ratios, much smaller budget. Decoding uses
        stride 2 (finer output rate than the training stride); discriminator
        input noise is disabled and the auxiliary warm-up enabled, the
        configuration that measured best at this scale."""
        base = dict(total_steps=5000, batch_audio=32, batch_text=32,
                    decode_stride=2, disc_input_noise=0.0,
                    aux_warmup_steps=1000)
        base.update(overrides)
        return cls(**base)


class Adam:
    """Adam with low first-moment decay, the usual choice for GAN training."""

    def __init__(self, params: dict[str, ad.Value], lr: float,
                 beta1: float = 0.5, beta2: float = 0.98, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = grads[k].astype(p.data.dtype)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            update = (self.m[k] / bias1) / (np.sqrt(self.v[k] / bias2) + self.eps)
            p.data = p.data - (self.lr * update).astype(p.data.dtype)

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.array([self.t], dtype=np.float32)}
        for k in self.params:
            out[f"{prefix}.m.{k}"] = self.m[k]
            out[f"{prefix}.v.{k}"] = self.v[k]
        return out

    def load_state(self, prefix: str, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays[f"{prefix}.t"][0])
        for k in self.params:
            self.m[k] = arrays[f"{prefix}.m.{k}"].astype(self.m[k].dtype)
            self.v[k] = arrays[f"{prefix}.v.{k}"].astype(self.v[k].dtype)


class _NoGrad:
    """Temporarily freeze a parameter dict so forward passes skip autograd."""

    def __init__(self, params: dict[str, ad.Value]):
        self.params = params

    def __enter__(self):
        for v in self.params.values():
            v.requires_grad = False

    def __exit__(self, *exc):
        for v in self.params.values():
            v.requires_grad = True


def _avg(terms: list[ad.Value]) -> ad.Value:
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


class Trainer:
    def __init__(self, cfg: TrainConfig, gen: Generator, disc: Discriminator,
                 audio: list[np.ndarray], pseudo: list[np.ndarray],
                 text: list[np.ndarray], out_dir=None):
        if not audio or not text:
            raise ContractError("audio and text datasets must be nonempty")
        if len(audio) != len(pseudo):
            raise ContractError("pseudo labels must align with audio")
        self.cfg = cfg
        self.gen = gen
        self.disc = disc
        self.audio = audio
        self.pseudo = pseudo
        self.text = text
        self.out_dir = out_dir
        self.rng = np.random.default_rng(cfg.seed)
        self.opt_g = Adam(gen.params, cfg.lr_generator)
        self.opt_d = Adam(disc.params, cfg.lr_discriminator)
        self.step = 0
        self.epoch = 0
        self.cursor = 0
        self._perm = self._epoch_perm()
        self._last = {k: None for k in LOG_KEYS}
        self._log_f = None
        self._pooled_cache: dict[int, np.ndarray] = {}
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            self._log_f = open(os.path.join(out_dir, "train_log.jsonl"), "a")
        if cfg.aux_warmup_steps > 0 and cfg.weights.delta_ss > 0:
            self._aux_warmup()

    # --- auxiliary warm-up --------------------------------------------------

    def _aux_warmup(self) -> None:
        """Train the auxiliary pathway alone, then seed the output layer.

        Deterministic given the config seed and independent of the main
        sampler, so restoring a checkpoint (which overwrites all parameters
        and optimizer state) remains bit-exact."""
        gen = self.gen
        names = ["bn_scale", "bn_bias", "w1", "b1", "aux_w", "aux_b"]
        opt = Adam({k: gen.params[k] for k in names}, self.cfg.aux_warmup_lr)
        wrng = np.random.default_rng((self.cfg.seed, 0xA117))
        for _ in range(self.cfg.aux_warmup_steps):
            idx = wrng.integers(0, len(self.audio), size=self.cfg.batch_audio)
            terms = []
            for i in idx:
                _, aux_logits = gen.forward(self.audio[i])
                terms.append(obj.auxiliary_loss(aux_logits, self._pooled(i)))
            loss = _avg(terms)
            grads = ad.grad(loss, [gen.params[k] for k in names])
            opt.step(dict(zip(names, grads)))
        self._seed_output_from_aux(wrng)

    def _seed_output_from_aux(self, wrng: np.random.Generator) -> None:
        """Initialize the output conv's center tap as (aux readout) x (routing).

        Each pseudo-class is routed to the unit with the largest remaining
        frequency budget, assigning high-frequency classes first, so initial
        unit usage roughly matches the text corpus. The rest of the relabeling
        is left to the adversarial phase."""
        k = self.gen.cfg.aux_classes
        v = self.gen.cfg.vocab
        cl_freq = np.bincount(np.concatenate(self.pseudo), minlength=k).astype(float)
        cl_freq /= max(cl_freq.sum(), 1.0)
        u_freq = np.bincount(np.concatenate(self.text), minlength=v).astype(float)
        u_freq /= max(u_freq.sum(), 1.0)
        budget = u_freq.copy()
        routing = np.zeros((k, v), dtype=np.float64)
        for c in np.argsort(-cl_freq):
            u = int(np.argmax(budget))
            routing[c, u] = 1.0
            budget[u] -= cl_freq[c]
        name = "w2_v" if self.gen.cfg.out_weight_norm else "w2"
        w2 = self.gen.params[name]
        seeded = np.zeros_like(w2.data)
        center = self.gen.cfg.kernel // 2
        seeded[center] = (self.gen.params["aux_w"].data @ routing).astype(w2.data.dtype)
        seeded += 1e-3 * wrng.standard_normal(seeded.shape).astype(w2.data.dtype)
        w2.data = seeded

    # --- batching ---------------------------------------------------------

    def _epoch_perm(self) -> np.ndarray:
        return np.random.default_rng((self.cfg.seed, 0xA0D10, self.epoch)).permutation(
            len(self.audio)
        )

    def _next_audio_batch(self) -> list[int]:
        idx = []
        n = self.cfg.batch_audio
        while len(idx) < n:
            if self.cursor >= len(self._perm):
                self.epoch += 1
                self.cursor = 0
                self._perm = self._epoch_perm()
            take = min(n - len(idx), len(self._perm) - self.cursor)
            idx.extend(self._perm[self.cursor : self.cursor + take].tolist())
            self.cursor += take
        return idx

    def _next_text_batch(self) -> list[int]:
        return self.rng.integers(0, len(self.text), size=self.cfg.batch_text).tolist()

    def _pooled(self, i: int) -> np.ndarray:
        if i not in self._pooled_cache:
            spans = self.gen.receptive_spans(self.audio[i].shape[0])
            self._pooled_cache[i] = obj.pool_labels(self.pseudo[i], spans)
        return self._pooled_cache[i]

    # --- steps ------------------------------------------------------------

    def _check_finite(self, parts: dict, step: int) -> None:
        for name, val in parts.items():
            if not math.isfinite(val):
                raise RuntimeError(f"non-finite loss term {name!r} at step {step}")

    def _noisy(self, x: ad.Value) -> ad.Value:
        s = self.cfg.disc_input_noise
        if s <= 0:
            return x
        noise = self.rng.normal(scale=s, size=x.shape).astype(x.data.dtype)
        return x + ad.constant(noise)

    def _disc_step(self) -> dict:
        cfg = self.cfg
        audio_idx = self._next_audio_batch()
        text_idx = self._next_text_batch()
        v = self.gen.cfg.vocab
        dtype = self.disc.params["w1"].data.dtype
        d_terms, gp_terms = [], []
        with _NoGrad(self.gen.params):
            fakes = []
            for i in audio_idx:
                logits, _ = self.gen.forward(self.audio[i], with_aux=False)
                fakes.append(merge_consecutive(logits, self.rng).probs)
        for j, fake in enumerate(fakes):
            real = ad.one_hot(self.text[text_idx[j % len(text_idx)]], v, dtype=dtype)
            dl, _ = obj.gan_losses(self.disc.forward(self._noisy(real)),
                                   self.disc.forward(self._noisy(fake)))
            d_terms.append(dl)
            gp_terms.append(
                obj.gradient_penalty(self.disc, real.data, fake, float(self.rng.uniform()))
            )
        gan_d = _avg(d_terms)
        gp = _avg(gp_terms)
        l_d = gan_d + cfg.weights.lambda_gp * gp
        names = list(self.disc.params)
        grads = dict(zip(names, ad.grad(l_d, [self.disc.params[k] for k in names])))
        self.opt_d.step(grads)
        return {"L_D": l_d.item(), "gan_d": gan_d.item(), "gp": gp.item()}

    def _gen_step(self) -> dict:
        cfg = self.cfg
        audio_idx = self._next_audio_batch()
        g_terms, sp_terms, ss_terms, fakes = [], [], [], []
        with _NoGrad(self.disc.params):
            for i in audio_idx:
                logits, aux_logits = self.gen.forward(self.audio[i])
                sp_terms.append(obj.smoothness_penalty(logits))
                ss_terms.append(obj.auxiliary_loss(aux_logits, self._pooled(i)))
                merged = merge_consecutive(logits, self.rng)
                fakes.append(merged)
                d_fake = self.disc.forward(self._noisy(merged.probs))
                f = ad.clip(d_fake, obj.PROB_EPS, 1.0 - obj.PROB_EPS)
                g_terms.append(-ad.log(f))
            gan_g = _avg(g_terms)
            sp = _avg(sp_terms)
            ss = _avg(ss_terms)
            pd = obj.diversity_loss(fakes)
            l_g = (gan_g + cfg.weights.gamma_sp * sp + cfg.weights.eta_pd * pd
                   + cfg.weights.delta_ss * ss)
        names = list(self.gen.params)
        grads = dict(zip(names, ad.grad(l_g, [self.gen.params[k] for k in names])))
        self.opt_g.step(grads)
        return {"L_G": l_g.item(), "gan_g": gan_g.item(), "sp": sp.item(),
                "pd": pd.item(), "ss": ss.item()}

    def run_steps(self, n: int) -> None:
        for _ in range(n):
            self.step += 1
            parts = self._disc_step() if self.step % 2 == 1 else self._gen_step()
            self._check_finite(parts, self.step)
            self._last.update(parts)
            if self._log_f is not None:
                self._log_f.write(json.dumps({"step": self.step, **self._last}) + "\n")
            if self.out_dir is not None and self.cfg.checkpoint_every > 0 \
                    and self.step % self.cfg.checkpoint_every == 0:
                self.save(os.path.join(self.out_dir, f"step{self.step:07d}.ckpt"))
        if self._log_f is not None:
            self._log_f.flush()

    def train(self) -> None:
        self.run_steps(self.cfg.total_steps - self.step)
        if self.out_dir is not None:
            self.save(os.path.join(self.out_dir, "final.ckpt"))

    # --- persistence ------------------------------------------------------

    def save(self, path) -> None:
        arrays = {}
        arrays.update(self.opt_g.state_arrays("optg"))
        arrays.update(self.opt_d.state_arrays("optd"))
        extra = {
            "rng_state": json.loads(json.dumps(self.rng.bit_generator.state)),
            "epoch": self.epoch,
            "cursor": self.cursor,
            "config": {**asdict(self.cfg), "weights": asdict(self.cfg.weights)},
        }
        save_checkpoint(path, self.gen, self.disc, step=self.step, extra=extra,
                        arrays=arrays)

    def restore(self, path) -> None:
        gen, disc, header, arrays = load_checkpoint(path)
        for k in self.gen.params:
            self.gen.params[k].data = gen.params[k].data
        for k in self.disc.params:
            self.disc.params[k].data = disc.params[k].data
        self.step = header["step"]
        extra = header["extra"]
        self.epoch = extra["epoch"]
        self.cursor = extra["cursor"]
        self._perm = self._epoch_perm()
        self.rng.bit_generator.state = extra["rng_state"]
        self.opt_g.load_state("optg", arrays)
        self.opt_d.load_state("optd", arrays)


# --- decoding and evaluation ---------------------------------------------


def decode_corpus(gen: Generator, features: list[np.ndarray],
                  inventory: UnitInventory, stride: int | None = None,
                  strip_silence: bool = True) -> list[np.ndarray]:
    out = []
    with _NoGrad(gen.params):
        for frames in features:
            logits, _ = gen.forward(frames, stride_override=stride, with_aux=False)
            out.append(greedy_decode(logits.data, inventory, strip_silence=strip_silence))
    return out


def eval_per(gen: Generator, features: list[np.ndarray], refs: list[np.ndarray],
             inventory: UnitInventory, stride: int | None = None) -> dict:
    hyps = decode_corpus(gen, features, inventory, stride=stride)
    stripped_refs = [r[r != inventory.sil_id] for r in refs]
    return per(stripped_refs, hyps)


def selection_metric(gen: Generator, dev_features: list[np.ndarray],
                     phone_lm: NgramLm, inventory: UnitInventory,
                     mu: float = 1.0, stride: int | None = None) -> float:
    """Unsupervised proxy score, lower is better: mean per-token LM NLL of
    the greedy decodes minus ``mu`` times the decoded unit-usage entropy.

    Decodes are silence-stripped (matching evaluation), so a model that
    emits only silence produces empty decodes and scores +inf instead of
    gaming the LM term with trivially predictable silence tokens."""
    hyps = decode_corpus(gen, dev_features, inventory, stride=stride,
                         strip_silence=True)
    nonempty = [h for h in hyps if len(h) > 0]
    if not nonempty:
        return float("inf")
    nll = float(np.mean([lm_nll(phone_lm, h) for h in nonempty]))
    counts = np.bincount(np.concatenate(nonempty), minlength=len(inventory))
    p = counts / counts.sum()
    entropy = float(-(p[p > 0] * np.log(p[p > 0])).sum())
    return nll - mu * entropy


def supervised_probe(gen: Generator, audio: list[np.ndarray],
                     frame_labels: list[np.ndarray], steps: int = 2000,
                     batch_size: int = 32, lr: float = 1e-3,
                     seed: int = 0) -> float:
    """Capacity sanity check: train with the auxiliary pathway only and
    report pooled-frame argmax accuracy over the training data."""
    pooled = []
    for frames, labels in zip(audio, frame_labels):
        spans = gen.receptive_spans(frames.shape[0])
        pooled.append(obj.pool_labels(labels, spans))
    opt = Adam(gen.params, lr)
    rng = np.random.default_rng(seed)
    names = list(gen.params)
    for _ in range(steps):
        idx = rng.integers(0, len(audio), size=batch_size)
        terms = []
        for i in idx:
            _, aux_logits = gen.forward(audio[i])
            terms.append(obj.auxiliary_loss(aux_logits, pooled[i]))
        loss = _avg(terms)
        opt.step(dict(zip(names, ad.grad(loss, [gen.params[k] for k in names]))))
    correct = total = 0
    with _NoGrad(gen.params):
        for i, frames in enumerate(audio):
            _, aux_logits = gen.forward(frames)
            pred = np.argmax(aux_logits.data, axis=1)
            correct += int((pred == pooled[i]).sum())
            total += len(pred)
    return correct / total


# --- sklearn-style facade -------------------------------------------------


class UnsupervisedPhoneRecognizer(BaseEstimator):
    """Estimator facade over the adversarial trainer.

    ``fit(X, text=..., pseudo=...)`` takes a list of (T, D) feature arrays,
    a list of unit-id text sequences, and aligned pseudo-label sequences;
    ``predict(X)`` returns greedy-decoded unit sequences.
    """

    def __init__(self, num_units: int = 12, hidden: int = 64, disc_hidden: int = 48,
                 kernel: int = 4, stride: int = 3, bn_scale: float = 30.0,
                 aux_classes: int = 64, total_steps: int = 5000,
                 batch_audio: int = 32, batch_text: int = 32,
                 lr_generator: float = 5e-5, lr_discriminator: float = 3e-4,
                 weight_preset: str = "B", decode_stride: int | None = None,
                 aux_warmup_steps: int = 0, seed: int = 0):
        self.num_units = num_units
        self.hidden = hidden
        self.disc_hidden = disc_hidden
        self.kernel = kernel
        self.stride = stride
        self.bn_scale = bn_scale
        self.aux_classes = aux_classes
        self.total_steps = total_steps
        self.batch_audio = batch_audio
        self.batch_text = batch_text
        self.lr_generator = lr_generator
        self.lr_discriminator = lr_discriminator
        self.weight_preset = weight_preset
        self.decode_stride = decode_stride
        self.aux_warmup_steps = aux_warmup_steps
        self.seed = seed

    def fit(self, X, y=None, *, text, pseudo, out_dir=None):
        feature_dim = X[0].shape[1]
        rng = np.random.default_rng(self.seed)
        gen_cfg = GeneratorConfig(in_dim=feature_dim, hidden=self.hidden,
                                  vocab=self.num_units, aux_classes=self.aux_classes,
                                  kernel=self.kernel, stride=self.stride,
                                  bn_scale_init=self.bn_scale)
        disc_cfg = DiscriminatorConfig(vocab=self.num_units, hidden=self.disc_hidden)
        self.generator_ = Generator(gen_cfg, rng)
        self.discriminator_ = Discriminator(disc_cfg, rng)
        cfg = TrainConfig(total_steps=self.total_steps, batch_audio=self.batch_audio,
                          batch_text=self.batch_text, lr_generator=self.lr_generator,
                          lr_discriminator=self.lr_discriminator,
                          weights=LossWeights.preset(self.weight_preset),
                          seed=self.seed, decode_stride=self.decode_stride,
                          aux_warmup_steps=self.aux_warmup_steps)
        self.trainer_ = Trainer(cfg, self.generator_, self.discriminator_,
                                list(X), list(pseudo), list(text), out_dir=out_dir)
        self.trainer_.train()
        return self

    def predict(self, X, inventory: UnitInventory | None = None):
        inv = inventory or UnitInventory(
            ["sil"] + [f"u{i}" for i in range(1, self.num_units)]
        )
        return decode_corpus(self.generator_, list(X), inv, stride=self.decode_stride)


def pseudo_labels_for(codebook: Codebook, features: list[np.ndarray]) -> list[np.ndarray]:
    return [assign(codebook, f) for f in features]
