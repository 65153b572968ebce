import numpy as np
import pytest

from uasr.errors import ContractError
from uasr.quantizer import assign, fit_kmeans
from uasr.synthbench import SynthSpec, generate, stationary_distribution


def small_spec(**kw):
    base = dict(n_train_utts=30, n_dev_utts=10, n_text_sents=50, seed=3)
    base.update(kw)
    return SynthSpec(**base)


class TestGenerate:
    def test_deterministic(self):
        a = generate(small_spec())
        b = generate(small_spec())
        for x, y in zip(a.train_features, b.train_features):
            assert np.array_equal(x, y)
        for x, y in zip(a.text, b.text):
            assert np.array_equal(x, y)

    def test_too_few_units_rejected(self):
        with pytest.raises(ContractError):
            generate(small_spec(num_units=1))

    def test_labels_align_with_features(self):
        c = generate(small_spec())
        for feats, labels in zip(c.train_features, c.train_labels):
            assert feats.shape == (len(labels), c.spec.feature_dim)

    def test_collapsed_labels_equal_reference(self):
        c = generate(small_spec())
        for labels, ref in zip(c.train_labels, c.train_refs):
            keep = np.concatenate([[True], np.diff(labels) != 0])
            np.testing.assert_array_equal(labels[keep], ref)

    def test_durations_in_range(self):
        c = generate(small_spec())
        for labels in c.train_labels:
            runs = np.diff(np.concatenate([[0], np.flatnonzero(np.diff(labels)) + 1,
                                           [len(labels)]]))
            assert runs.min() >= c.spec.min_duration
            assert runs.max() <= c.spec.max_duration

    def test_text_disjoint_from_audio(self):
        c = generate(small_spec(n_text_sents=200))
        audio = {tuple(r) for r in c.train_refs} | {tuple(r) for r in c.dev_refs}
        assert all(tuple(t) not in audio for t in c.text)

    def test_noiseless_kmeans_perfect_purity(self):
        c = generate(small_spec(noise_scale=0.0, num_units=6))
        frames = np.concatenate(c.train_features)
        labels = np.concatenate(c.train_labels)
        cb = fit_kmeans(frames, k=6, seed=0)
        assigned = assign(cb, frames)
        # every cluster maps to exactly one true unit
        for j in range(6):
            mask = assigned == j
            if mask.any():
                assert len(set(labels[mask].tolist())) == 1

    def test_nearest_mean_oracle_accuracy(self):
        c = generate(small_spec(n_train_utts=100))
        frames = np.concatenate(c.train_features)
        labels = np.concatenate(c.train_labels)
        d2 = ((frames[:, None, :] - c.means[None, :, :]) ** 2).sum(axis=2)
        acc = np.mean(np.argmin(d2, axis=1) == labels)
        assert acc >= 0.99


class TestTextStatistics:
    def test_unit_frequencies_near_stationary(self):
        c = generate(small_spec(n_text_sents=5000))
        pi = stationary_distribution(c.transition)
        counts = np.zeros(c.spec.num_units - 1)
        for t in c.text:
            for u in t:
                if u != c.inventory.sil_id:
                    counts[u - 1] += 1
        emp = counts / counts.sum()
        # chi-square-style sanity bound on the empirical distribution
        n = counts.sum()
        chi2 = float((n * (emp - pi) ** 2 / pi).sum())
        # interior positions are bigram-correlated, not iid, so allow slack:
        # the statistic should still be nowhere near a gross mismatch
        assert chi2 / n <= 0.01
        np.testing.assert_allclose(emp, pi, atol=0.02)
