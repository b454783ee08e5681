"""Transferability metrics, rank correlation and matrix aggregation."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pandalab.backbone import BackboneConfig, build_backbone
from pandalab.metric import (DegenerateError, SimilarityMatrix, TaskEmbedding, activated_neurons,
                             cosine, jaccard, metric_eavg, metric_on, metric_ours, rankdata,
                             same_vs_differ, similarity_matrix, spearman, task_embedding)
from pandalab.prompt import INPUT_CONCAT, PREFIX, InitMode, PromptLayout, SoftPrompt, init_prompt
from pandalab.taskgen import TaskSpec, gen_task, representative_sample

CFG = BackboneConfig(seed=1)


@pytest.fixture(scope="module")
def bb():
    return build_backbone(CFG)


@pytest.fixture(scope="module")
def probes():
    return representative_sample(gen_task(TaskSpec("t", seed=2)), 20, seed=0)


def _prompt(seed, mode=PREFIX, std=0.5):
    return init_prompt(InitMode.normal(std), PromptLayout.for_backbone(CFG, mode), seed, prompt_len=4)


def brute_average_ranks(xs):
    # rank = 1 + (#smaller) + (#equal others) / 2
    xs = list(xs)
    return np.array([1 + sum(y < x for y in xs) + (sum(y == x for y in xs) - 1) / 2 for x in xs])


def brute_spearman(xs, ys):
    rx, ry = brute_average_ranks(xs), brute_average_ranks(ys)
    rx, ry = rx - rx.mean(), ry - ry.mean()
    return float(rx @ ry / np.sqrt((rx @ rx) * (ry @ ry)))


class TestTaskEmbedding:
    def test_identity_prompt_gives_zero(self, bb, probes, monkeypatch):
        # a prompt that changes nothing: encode ignores it
        import pandalab.metric as M
        real = M.encode
        monkeypatch.setattr(M, "encode", lambda b, t, p=None, **k: real(b, t, None, **k))
        e = task_embedding(bb, _prompt(0), probes)
        assert not e.vector.any()

    def test_deterministic(self, bb, probes):
        a = task_embedding(bb, _prompt(0), probes).vector
        assert np.array_equal(a, task_embedding(bb, _prompt(0), probes).vector)

    def test_empty(self, bb):
        with pytest.raises(ValueError):
            task_embedding(bb, _prompt(0), np.zeros((0, 13), dtype=np.int64))

    def test_is_mean_of_differences(self, bb, probes):
        from pandalab.backbone import encode
        p = _prompt(3, INPUT_CONCAT)
        diffs = [encode(bb, t, p).h_cls - encode(bb, t).h_cls for t in probes.tokens]
        np.testing.assert_allclose(task_embedding(bb, p, probes).vector, np.mean(diffs, axis=0), atol=1e-12)
        assert task_embedding(bb, p, probes).sample_count == 20


class TestOurs:
    def test_self(self):
        e = TaskEmbedding(np.array([1.0, -2.0, 0.5]))
        assert metric_ours(e, e) == pytest.approx(1.0, abs=1e-15)

    def test_orthogonal(self):
        assert metric_ours(TaskEmbedding(np.array([1.0, 0])), TaskEmbedding(np.array([0, 3.0]))) == 0.0

    def test_zero_vector(self):
        with pytest.raises(DegenerateError):
            metric_ours(TaskEmbedding(np.zeros(3)), TaskEmbedding(np.ones(3)))

    @settings(max_examples=50)
    @given(st.lists(st.floats(-5, 5), min_size=4, max_size=4), st.lists(st.floats(-5, 5), min_size=4, max_size=4),
           st.floats(0.01, 100))
    def test_symmetric_and_scale_invariant(self, a, b, c):
        a, b = np.array(a), np.array(b)
        if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
            return
        ea, eb = TaskEmbedding(a), TaskEmbedding(b)
        assert abs(metric_ours(ea, eb) - metric_ours(eb, ea)) <= 1e-12
        assert abs(metric_ours(TaskEmbedding(c * a), eb) - metric_ours(ea, eb)) <= 1e-12
        assert -1.0 <= metric_ours(ea, eb) <= 1.0


class TestEavg:
    def test_identical(self):
        assert metric_eavg(_prompt(1), _prompt(1)) == pytest.approx(1.0, abs=1e-15)

    def test_negation(self):
        p = _prompt(1, INPUT_CONCAT)
        neg = SoftPrompt(p.layout, -p.params)
        assert metric_eavg(p, neg) == pytest.approx(-1.0, abs=1e-15)

    def test_seeded_regression(self):
        layout = PromptLayout(INPUT_CONCAT, 64)
        v = metric_eavg(init_prompt(InitMode(), layout, 1), init_prompt(InitMode(), layout, 2))
        assert abs(v) < 0.5
        assert v == pytest.approx(0.05505848242740041, abs=1e-12)

    def test_all_zero_is_degenerate(self):
        z = init_prompt(InitMode.constant(0.0), PromptLayout.for_backbone(CFG, INPUT_CONCAT), 0)
        with pytest.raises(DegenerateError):
            metric_eavg(z, z)

    def test_layout_mismatch(self):
        with pytest.raises(ValueError):
            metric_eavg(_prompt(1, PREFIX), _prompt(1, INPUT_CONCAT))

    def test_positive_scale(self):
        p, q = _prompt(1), _prompt(2)
        scaled = SoftPrompt(p.layout, 3.0 * p.params)
        assert metric_eavg(scaled, q) == pytest.approx(metric_eavg(p, q), abs=1e-12)


class TestOn:
    def test_jaccard_oracle(self):
        a = np.zeros(6, bool); a[[1, 2, 3]] = True
        b = np.zeros(6, bool); b[[2, 3, 4]] = True
        assert jaccard(a, b) == 0.5

    def test_disjoint(self):
        assert jaccard(np.array([1, 0], bool), np.array([0, 1], bool)) == 0.0

    def test_empty_union(self):
        with pytest.raises(DegenerateError):
            jaccard(np.zeros(3, bool), np.zeros(3, bool))

    def test_identical_prompts(self, bb, probes):
        assert metric_on(bb, _prompt(4), _prompt(4), probes) == 1.0

    def test_symmetric_and_bounded(self, bb, probes):
        p, q = _prompt(4, std=3.0), _prompt(5, std=3.0)
        v = metric_on(bb, p, q, probes)
        assert v == metric_on(bb, q, p, probes) and 0.0 <= v <= 1.0

    def test_mask_covers_all_layers(self, bb, probes):
        assert activated_neurons(bb, _prompt(4), probes).shape == (CFG.n_layers * CFG.d_ff,)

    def test_empty_probes(self, bb):
        with pytest.raises(ValueError):
            metric_on(bb, _prompt(1), _prompt(2), np.zeros((0, 13), dtype=np.int64))


class TestSpearman:
    def test_identity_and_reverse(self):
        xs = [0.3, 0.1, 0.9, 0.5]
        assert spearman(xs, xs) == 1.0
        assert spearman(xs, [-x for x in xs]) == -1.0

    def test_hand_example(self):
        assert spearman([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-15)

    def test_closed_form_on_permutations(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(2, 21))
            x, y = rng.permutation(n), rng.permutation(n)
            d2 = float(np.sum((x - y) ** 2))
            assert spearman(x, y) == 1 - 6 * d2 / (n * (n * n - 1))

    def test_ties_match_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            n = int(rng.integers(3, 12))
            x, y = rng.integers(0, 4, n), rng.integers(0, 4, n)
            if len(set(x)) < 2 or len(set(y)) < 2:
                continue
            assert abs(spearman(x, y) - brute_spearman(x, y)) < 1e-12

    def test_average_ranks(self):
        np.testing.assert_array_equal(rankdata([10, 20, 20, 5]), [2, 3.5, 3.5, 1])

    def test_constant_is_degenerate(self):
        with pytest.raises(DegenerateError):
            spearman([1, 1, 1], [1, 2, 3])

    @pytest.mark.parametrize("xs,ys", [([1], [1]), ([1, 2], [1, 2, 3])])
    def test_bad_lengths(self, xs, ys):
        with pytest.raises(ValueError):
            spearman(xs, ys)

    @settings(max_examples=50)
    @given(st.lists(st.integers(-50, 50), min_size=3, max_size=10, unique=True))
    def test_monotone_invariance(self, xs):
        ys = list(reversed(xs))
        base = spearman(xs, ys)
        assert spearman([x ** 3 + 7 for x in xs], ys) == pytest.approx(base, abs=1e-12)
        assert spearman(xs, [np.exp(y / 10) for y in ys]) == pytest.approx(base, abs=1e-12)


class TestMatrix:
    def test_single_task(self):
        m = similarity_matrix(metric_ours, ["a"], {"a": TaskEmbedding(np.ones(3))})
        assert m.values.shape == (1, 1) and m.values[0, 0] == pytest.approx(1.0)

    def test_missing_artifact_named(self):
        with pytest.raises(KeyError, match="b"):
            similarity_matrix(metric_ours, ["a", "b"], {"a": TaskEmbedding(np.ones(3))})

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(0)
        arts = {t: TaskEmbedding(rng.normal(size=5)) for t in "abcd"}
        m1 = similarity_matrix(metric_ours, list("abcd"), arts)
        m2 = similarity_matrix(metric_ours, list("cadb"), arts)
        for x, y in itertools.product("abcd", repeat=2):
            assert m1[x, y] == m2[x, y]
        assert m1.is_symmetric()

    def test_csv_round_trip(self, tmp_path):
        m = SimilarityMatrix(["a", "b"], np.array([[1.0, 0.25], [0.25, 1.0]]))
        m.write(tmp_path / "m.csv")
        back = SimilarityMatrix.read(tmp_path / "m.csv")
        assert back.task_ids == ["a", "b"] and np.array_equal(back.values, m.values)
        assert m.to_long_csv().splitlines()[0] == "row,col,value"
        assert "\r" not in (tmp_path / "m.csv").read_bytes().decode()


class TestSameVsDiffer:
    def test_identical_within_groups(self):
        m = SimilarityMatrix(list("abcd"), np.array([[1, 1, .2, .2], [1, 1, .2, .2],
                                                      [.2, .2, 1, 1], [.2, .2, 1, 1.]]))
        same, differ = same_vs_differ(m, {"a": "x", "b": "x", "c": "y", "d": "y"})
        assert same == 1.0 and differ == pytest.approx(0.2)

    def test_constant(self):
        m = SimilarityMatrix(list("abc"), np.full((3, 3), 0.4))
        assert same_vs_differ(m, {"a": 0, "b": 0, "c": 1}) == pytest.approx((0.4, 0.4))

    def test_enumeration_oracle(self):
        v = np.array([[1.0, 0.7, 0.1], [0.7, 1.0, 0.3], [0.1, 0.3, 1.0]])
        same, differ = same_vs_differ(SimilarityMatrix(["1", "2", "3"], v), {"1": "A", "2": "A", "3": "B"})
        assert same == pytest.approx(0.7)
        assert differ == pytest.approx((0.1 + 0.3 + 0.1 + 0.3) / 4)

    def test_no_same_pairs(self):
        m = SimilarityMatrix(list("ab"), np.eye(2))
        with pytest.raises(ValueError):
            same_vs_differ(m, {"a": 0, "b": 1})

    def test_single_group(self):
        with pytest.raises(ValueError):
            same_vs_differ(SimilarityMatrix(list("ab"), np.eye(2)), {"a": 0, "b": 0})


def test_cosine_shape_mismatch():
    with pytest.raises(ValueError):
        cosine(np.ones(2), np.ones(3))
