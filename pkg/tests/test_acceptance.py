"""End-to-end acceptance suite.

Each criterion prints exactly one ``[acceptance] criterion N ...: PASS/FAIL``
line so the run log doubles as a scoreboard. Criteria 3-5 share one
four-seed training campaign; criterion 4 adds a second campaign with the
auxiliary-loss weight zeroed. On boxes with fewer than four CPU cores the
wall-clock budget for criterion 3 is scaled by (4 / cores).
"""

import os
import time

import numpy as np
import pytest

from test_dsp import straight_line_mfcc
from test_evalkit import dp_distance_oracle
from test_quantizer import lloyd_oracle

from uasr import autodiff as ad
from uasr import objectives as obj
from uasr.dsp import AudioSignal, MfccConfig, mfcc
from uasr.evalkit import edit_distance
from uasr.model import (
    Discriminator,
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    load_checkpoint,
    merge_consecutive,
    save_checkpoint,
)
from uasr.objectives import Batch, LossWeights
from uasr.quantizer import _kmeanspp_init, assign, fit_kmeans
from uasr.synthbench import SynthSpec, generate
from uasr.textproc import SIL, UnitInventory, letter_lexicon, phonemize, train_ngram
from uasr.trainer import (
    TrainConfig,
    Trainer,
    eval_per,
    selection_metric,
    supervised_probe,
)


def _report(num: int, name: str, ok: bool, detail: str) -> None:
    print(f"\n[acceptance] criterion {num} {name}: "
          f"{'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {num} {name}: {detail}"


# --- shared campaign fixtures ---------------------------------------------

SEEDS = (0, 1, 2, 3)
STEPS = 5000


@pytest.fixture(scope="module")
def corpus_bundle():
    spec = SynthSpec()
    corpus = generate(spec)
    frames = np.concatenate(corpus.train_features)
    codebook = fit_kmeans(frames, k=64, seed=0)
    pseudo = [assign(codebook, f) for f in corpus.train_features]
    lm = train_ngram([t[t != corpus.inventory.sil_id] for t in corpus.text],
                     order=2, alpha=0.01, vocab_size=spec.num_units)
    return spec, corpus, pseudo, lm


def _train_one(seed: int, weights: LossWeights, bundle) -> dict:
    """One seeded desk-preset run; reports final PER and the proxy score."""
    spec, corpus, pseudo, lm = bundle
    rng = np.random.default_rng(seed)
    gen = Generator(GeneratorConfig(in_dim=spec.feature_dim,
                                    vocab=spec.num_units), rng)
    disc = Discriminator(DiscriminatorConfig(vocab=spec.num_units), rng)
    cfg = TrainConfig.desk(seed=seed, weights=weights, total_steps=STEPS)
    t0 = time.monotonic()
    tr = Trainer(cfg, gen, disc, corpus.train_features, pseudo, corpus.text)
    tr.run_steps(STEPS)
    elapsed = time.monotonic() - t0
    result = eval_per(gen, corpus.dev_features, corpus.dev_refs, corpus.inventory,
                      stride=cfg.decode_stride)
    score = selection_metric(gen, corpus.dev_features, lm, corpus.inventory,
                             stride=cfg.decode_stride)
    return {"seed": seed, "per": result["per"], "score": score,
            "seconds": elapsed}


@pytest.fixture(scope="module")
def campaign(corpus_bundle):
    return [_train_one(s, LossWeights.preset("B"), corpus_bundle) for s in SEEDS]


@pytest.fixture(scope="module")
def campaign_no_aux(corpus_bundle):
    w = LossWeights.preset("B")
    w = LossWeights(lambda_gp=w.lambda_gp, gamma_sp=w.gamma_sp,
                    eta_pd=w.eta_pd, delta_ss=0.0)
    return [_train_one(s, w, corpus_bundle) for s in SEEDS]


# --- criterion 1: gradient suite ------------------------------------------


class TestCriterion1:
    def test_gradient_suite(self):
        t0 = time.monotonic()
        seed_rng = np.random.default_rng(0)
        gen = Generator(GeneratorConfig(in_dim=5, hidden=6, vocab=4,
                                        aux_classes=5), seed_rng, dtype=np.float64)
        disc = Discriminator(DiscriminatorConfig(vocab=4, hidden=5), seed_rng,
                             dtype=np.float64)
        frames = [seed_rng.normal(size=(15, 5)), seed_rng.normal(size=(11, 5))]
        pseudo = [seed_rng.integers(0, 5, size=len(f)) for f in frames]
        text = [seed_rng.integers(0, 4, size=6), seed_rng.integers(0, 4, size=9)]
        batch = Batch(audio=frames, pseudo=pseudo, text=text)
        weights = LossWeights.preset("B")

        def composite_d():
            l_d, _, _ = obj.total_losses(batch, gen, disc, weights,
                                         np.random.default_rng(1))
            return l_d

        def composite_g():
            _, l_g, _ = obj.total_losses(batch, gen, disc, weights,
                                         np.random.default_rng(1))
            return l_g

        def term(name):
            # rebuild the forward pass so finite differences see fresh values
            fakes, sps, auxes = [], [], []
            mrng = np.random.default_rng(1)
            for f, p in zip(frames, pseudo):
                logits, aux_logits = gen.forward(f)
                sps.append(obj.smoothness_penalty(logits))
                pooled = obj.pool_labels(p, gen.receptive_spans(f.shape[0]))
                auxes.append(obj.auxiliary_loss(aux_logits, pooled))
                fakes.append(merge_consecutive(logits, mrng))
            if name == "sp":
                return sps[0] + sps[1]
            if name == "ss":
                return auxes[0] + auxes[1]
            if name == "pd":
                return obj.diversity_loss(fakes)
            real = ad.one_hot(text[0], 4, dtype=np.float64)
            d_real = disc.forward(real)
            d_fake = disc.forward(fakes[0].probs)
            if name == "gan":
                dl, gl = obj.gan_losses(d_real, d_fake)
                return dl + gl
            if name == "gp":  # double-differentiation path
                return obj.gradient_penalty(disc, real.data, fakes[0].probs, 0.37)
            raise AssertionError(name)

        builders = [lambda: term("gan"), lambda: term("gp"), lambda: term("sp"),
                    lambda: term("pd"), lambda: term("ss"),
                    composite_d, composite_g]
        worst, checks = 0.0, 0
        all_params = list(gen.params.items()) + list(disc.params.items())
        for build in builders:
            loss = build()
            grads = ad.grad(loss, [p for _, p in all_params])
            for (pname, p), g in zip(all_params, grads):
                flat = p.data.reshape(-1)
                gflat = np.asarray(g).reshape(-1)
                for i in seed_rng.choice(flat.size, size=min(3, flat.size),
                                         replace=False):
                    h = 1e-6 * max(1.0, abs(flat[i]))
                    orig = flat[i]
                    flat[i] = orig + h
                    up = build().item()
                    flat[i] = orig - h
                    dn = build().item()
                    flat[i] = orig
                    fd = (up - dn) / (2 * h)
                    rel = abs(gflat[i] - fd) / max(1.0, abs(gflat[i]), abs(fd))
                    worst = max(worst, rel)
                    checks += 1
        elapsed = time.monotonic() - t0
        ok = worst <= 1e-4 and elapsed <= 60.0
        _report(1, "gradient-suite", ok,
                f"{checks} checks, worst rel err {worst:.2e}, {elapsed:.1f}s")


# --- criterion 2: output frequency ----------------------------------------


class TestCriterion2:
    def test_output_rates_exact(self):
        gen = Generator(GeneratorConfig(), np.random.default_rng(0))
        n3 = gen.out_len(50)                       # 50 Hz input, stride 3
        n2 = gen.out_len(50, stride_override=2)    # stride 2
        logits3, _ = gen.forward(np.zeros((50, 16)))
        logits2, _ = gen.forward(np.zeros((50, 16)), stride_override=2)
        ok = (16 <= n3 <= 17 and n2 == 25
              and logits3.shape[0] == n3 and logits2.shape[0] == n2)
        _report(2, "output-frequency", ok,
                f"stride 3 -> {n3} tokens/s, stride 2 -> {n2} tokens/s")


# --- criteria 3-5: four-seed campaign -------------------------------------


class TestCriterion3:
    def test_synthetic_decipherment(self, campaign):
        pers = [r["per"] for r in campaign]
        hits = sum(p <= 0.20 for p in pers)
        total_s = sum(r["seconds"] for r in campaign)
        cores = os.cpu_count() or 1
        budget = 15 * 60 * max(1.0, 4.0 / cores)
        ok = hits >= 2 and total_s <= budget
        _report(3, "synthetic-decipherment", ok,
                f"PER per seed {[round(p, 3) for p in pers]}, {hits}/4 <= 0.20, "
                f"{total_s:.0f}s of {budget:.0f}s budget on {cores} cores")


class TestCriterion4:
    def test_auxiliary_ablation_direction(self, campaign, campaign_no_aux):
        with_aux = float(np.mean([r["per"] for r in campaign]))
        without = float(np.mean([r["per"] for r in campaign_no_aux]))
        ok = without >= with_aux
        _report(4, "ablation-direction", ok,
                f"mean PER without aux {without:.3f} >= with aux {with_aux:.3f}")


class TestCriterion5:
    def test_model_selection(self, campaign):
        by_score = min(campaign, key=lambda r: r["score"])
        best_per = min(r["per"] for r in campaign)
        gap = by_score["per"] - best_per
        ok = gap <= 0.05
        _report(5, "model-selection", ok,
                f"argmin-score seed {by_score['seed']} PER {by_score['per']:.3f}, "
                f"best PER {best_per:.3f}, gap {gap:.3f}")


# --- criterion 6: capacity probe ------------------------------------------


class TestCriterion6:
    def test_supervised_probe(self, corpus_bundle):
        spec, corpus, _, _ = corpus_bundle
        gen = Generator(GeneratorConfig(in_dim=spec.feature_dim,
                                        vocab=spec.num_units,
                                        aux_classes=spec.num_units),
                        np.random.default_rng(0))
        acc = supervised_probe(gen, corpus.train_features[:256],
                               corpus.train_labels[:256], steps=2000)
        ok = acc >= 0.95
        _report(6, "capacity-probe", ok, f"frame accuracy {acc:.4f} in 2000 steps")


# --- criterion 7: oracle equivalences -------------------------------------


class TestCriterion7:
    def test_oracles(self):
        rng = np.random.default_rng(11)
        # k-means vs straight-line Lloyd, bit-identical
        pts = rng.normal(size=(100, 3)) + rng.integers(0, 4, size=(100, 1)) * 4.0
        ours = fit_kmeans(pts, k=4, seed=3).centers
        ref = lloyd_oracle(pts, _kmeanspp_init(pts, 4, np.random.default_rng(3)))
        km_ok = np.array_equal(ours, ref)

        # edit distance vs brute-force DP on 1000 random pairs
        ed_ok = True
        for _ in range(1000):
            r = rng.integers(0, 5, size=rng.integers(0, 12))
            h = rng.integers(0, 5, size=rng.integers(0, 12))
            if edit_distance(r, h).total != dp_distance_oracle(r, h):
                ed_ok = False
                break

        # MFCC vs straight-line oracle
        t = np.arange(4000) / 16000
        sig = AudioSignal(samples=0.7 * np.sin(2 * np.pi * 440 * t),
                          sample_rate=16000)
        cfg = MfccConfig()
        mf_err = float(np.abs(mfcc(sig, cfg).frames
                              - straight_line_mfcc(sig, cfg)).max())
        mf_ok = mf_err <= 1e-4

        # diversity loss vs direct entropy computation
        dists = []
        for n in (5, 9):
            logits = ad.constant(rng.normal(size=(n, 6)))
            dists.append(merge_consecutive(logits, np.random.default_rng(0)))
        ours_pd = obj.diversity_loss(dists).item()
        direct = 0.0
        for d in dists:
            p = d.probs.data.mean(axis=0)
            direct += float((p * np.log(p)).sum())  # negative entropy
        direct /= len(dists)
        pd_ok = abs(ours_pd - direct) <= 1e-10

        ok = km_ok and ed_ok and mf_ok and pd_ok
        _report(7, "oracle-equivalence", ok,
                f"kmeans bit-identical={km_ok}, edit-distance 1000 pairs={ed_ok}, "
                f"mfcc max err {mf_err:.1e}, diversity delta "
                f"{abs(ours_pd - direct):.1e}")


# --- criterion 8: invariant suites ----------------------------------------


class TestCriterion8:
    def test_invariants(self, tmp_path):
        rng = np.random.default_rng(21)
        # merge idempotence and segment partition
        merge_ok = True
        for trial in range(25):
            seq = rng.integers(0, 3, size=rng.integers(1, 30))
            raw = np.zeros((len(seq), 3))
            raw[np.arange(len(seq)), seq] = 5.0
            m = merge_consecutive(ad.constant(raw), np.random.default_rng(trial))
            flat = [x for s, e in m.segment_map for x in range(s, e)]
            m2 = merge_consecutive(m.logits, np.random.default_rng(trial + 1))
            if flat != list(range(len(seq))) or not np.array_equal(
                    m2.logits.data, m.logits.data):
                merge_ok = False

        # softmax rows normalize
        sm = ad.softmax(ad.constant(rng.normal(size=(40, 9)) * 20)).data
        sm_ok = bool(np.abs(sm.sum(axis=1) - 1.0).max() <= 1e-6)

        # phonemize frames every sentence with silence
        lex = letter_lexicon(["ab", "ba"])
        inv = UnitInventory.from_lexicon(lex)
        ids = phonemize(["ab", "ba"], lex, inv, p_sil=0.5,
                        rng=np.random.default_rng(0))
        sil = inv.id(SIL)
        ph_ok = ids[0] == sil and ids[-1] == sil

        # n-gram conditionals normalize over the vocabulary + EOS
        lm = train_ngram([rng.integers(0, 5, size=8) for _ in range(30)],
                         order=2, alpha=0.1, vocab_size=5)
        lm_ok = True
        outcomes = list(range(5)) + [lm.EOS_ID]  # 5 units + end marker
        for ctx in [(lm.BOS_ID,), (0,), (3,), (4,)]:
            total = sum(lm.prob(u, ctx) for u in outcomes)
            if abs(total - 1.0) > 1e-9:
                lm_ok = False

        # checkpoint round trip is bit-exact
        gen = Generator(GeneratorConfig(in_dim=4, hidden=5, vocab=3,
                                        aux_classes=4), rng)
        disc = Discriminator(DiscriminatorConfig(vocab=3, hidden=4), rng)
        path = tmp_path / "rt.ckpt"
        save_checkpoint(path, gen, disc, step=7)
        gen2, disc2, header, _ = load_checkpoint(path)
        ck_ok = header["step"] == 7 and all(
            np.array_equal(gen.params[k].data, gen2.params[k].data)
            for k in gen.params) and all(
            np.array_equal(disc.params[k].data, disc2.params[k].data)
            for k in disc.params)

        ok = merge_ok and sm_ok and ph_ok and lm_ok and ck_ok
        _report(8, "invariant-suites", ok,
                f"merge={merge_ok}, softmax={sm_ok}, silence-framing={ph_ok}, "
                f"lm-normalization={lm_ok}, checkpoint={ck_ok}")
