"""Synthetic task families: determinism, relatedness oracles, sampling and batching."""

import math

import numpy as np
import pytest

from pandalab.taskgen import (TaskSpec, batches, export_split, family_directions, gen_task,
                              linear_probe, probe_accuracy, read_split, representative_sample,
                              rule_direction)


def _cross_probe(theta_a, theta_b, seed, n=400):
    a = gen_task(TaskSpec("a", theta=theta_a, n_train=n, n_dev=n, seed=seed))
    b = gen_task(TaskSpec("b", theta=theta_b, n_train=n, n_dev=n, seed=seed + 1000))
    w = linear_probe(a.train, 12, a.spec.n_bins)
    return probe_accuracy(w, b.dev, 12, b.spec.n_bins)


class TestGeneration:
    def test_deterministic(self):
        spec = TaskSpec("t", seed=5)
        a, b = gen_task(spec), gen_task(spec)
        assert np.array_equal(a.train.tokens, b.train.tokens) and np.array_equal(a.dev.labels, b.dev.labels)

    def test_layout(self):
        ds = gen_task(TaskSpec("t", n_train=50, n_dev=30))
        assert ds.train.tokens.shape == (50, 13) and ds.dev.tokens.shape == (30, 13)
        assert np.all(ds.train.tokens[:, 0] == 0)
        assert ds.train.tokens[:, 1:].min() >= 1 and ds.train.tokens.max() < 63

    def test_train_dev_disjoint(self):
        ds = gen_task(TaskSpec("t", n_train=300, n_dev=300))
        rows = {r.tobytes() for r in ds.train.tokens}
        assert not any(r.tobytes() in rows for r in ds.dev.tokens)

    def test_twins_share_rule(self):
        a, b = TaskSpec("a", seed=1), TaskSpec("b", seed=2)
        assert np.array_equal(rule_direction(a), rule_direction(b))

    def test_directions_orthonormal(self):
        a, b = family_directions(0, 12, 2)
        assert abs(a @ b) < 1e-12 and abs(np.linalg.norm(a) - 1) < 1e-12
        assert np.count_nonzero(a) == 2 and not np.any((a != 0) & (b != 0))

    def test_labels_in_range_multiclass(self):
        ds = gen_task(TaskSpec("t", num_classes=3, n_train=300))
        assert set(np.unique(ds.train.labels)) == {0, 1, 2}

    def test_noise_flips(self):
        clean = gen_task(TaskSpec("t", n_train=2000, n_dev=1, seed=3))
        noisy = gen_task(TaskSpec("t", n_train=2000, n_dev=1, seed=3, noise_rate=0.2))
        assert abs(np.mean(clean.train.labels != noisy.train.labels) - 0.2) < 0.03

    @pytest.mark.parametrize("kw", [{"noise_rate": 0.5}, {"theta": 2.0}, {"num_classes": 1},
                                    {"vocab_size": 20}, {"support": 7}])
    def test_invalid_spec(self, kw):
        with pytest.raises(ValueError):
            gen_task(TaskSpec("t", **kw))

    def test_degenerate_vocab_message(self):
        with pytest.raises(ValueError, match="degenerate vocabulary"):
            gen_task(TaskSpec("t", vocab_size=16))


class TestRelatednessOracle:
    def test_twins_transfer(self):
        assert _cross_probe(0.0, 0.0, seed=0) > 0.9

    def test_orthogonal_is_chance(self):
        assert abs(_cross_probe(0.0, math.pi / 2, seed=0) - 0.5) < 0.1

    def test_monotone_in_theta(self):
        thetas = [0, math.pi / 8, math.pi / 4, 3 * math.pi / 8, math.pi / 2]
        acc = [np.mean([_cross_probe(0.0, t, seed=s) for s in range(5)]) for t in thetas]
        assert all(x >= y for x, y in zip(acc, acc[1:])), acc


class TestSampling:
    def test_full_dev(self):
        ds = gen_task(TaskSpec("t", n_dev=40))
        d = representative_sample(ds, 40, seed=3)
        assert np.array_equal(d.tokens, ds.dev.tokens)

    def test_seeded(self):
        ds = gen_task(TaskSpec("t"))
        a, b = representative_sample(ds, 100, 1), representative_sample(ds, 100, 1)
        assert np.array_equal(a.tokens, b.tokens)
        assert len(a) == 100

    def test_too_large(self):
        with pytest.raises(ValueError):
            representative_sample(gen_task(TaskSpec("t", n_dev=10)), 11)


class TestBatches:
    def test_partition(self):
        ds = gen_task(TaskSpec("t", n_train=37))
        got = list(batches(ds.train, 8, epoch_seed=1))
        assert sum(b.batch_size for b in got) == 37 and got[-1].batch_size == 5
        assert sorted(np.concatenate([b.index for b in got])) == list(range(37))

    def test_seed_changes_order_not_content(self):
        ds = gen_task(TaskSpec("t", n_train=30))
        a = np.concatenate([b.index for b in batches(ds.train, 4, 1)])
        b = np.concatenate([b.index for b in batches(ds.train, 4, 2)])
        assert not np.array_equal(a, b) and sorted(a) == sorted(b)

    def test_single_batch(self):
        ds = gen_task(TaskSpec("t", n_train=10))
        assert len(list(batches(ds.train, 64, 0))) == 1

    def test_bad_batch_size(self):
        with pytest.raises(ValueError):
            list(batches(gen_task(TaskSpec("t")).train, 0, 0))


def test_export_round_trip(tmp_path):
    ds = gen_task(TaskSpec("t", n_train=20))
    export_split(ds.train, tmp_path / "t.txt")
    back = read_split(tmp_path / "t.txt")
    assert np.array_equal(back.tokens, ds.train.tokens) and np.array_equal(back.labels, ds.train.labels)
    first = (tmp_path / "t.txt").read_text().splitlines()[0]
    assert "\t" in first and first.split("\t")[0].split()[0] == "0"
