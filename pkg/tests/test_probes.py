import numpy as np
import pandas as pd
import pytest
from scipy import stats

from modules.checkpoint import load_checkpoint, save_checkpoint
from modules.mtl import FrameworkError
from modules.probes import (NUM_LENGTH_BINS, REPORT_COLUMNS, FeatureMatrix, ProbeConfig, aux_length,
                            aux_word_content, aux_word_order, bag_of_embeddings_features, cosine, cosine_eval,
                            extract_features, length_bin, order_label, random_features, rank_correlation,
                            read_feature_file, sentence_features, task_identity_accuracy, train_probe,
                            word_content_items, word_order_items, write_feature_file, write_probe_report)
from modules.textdata import synth_sentences


# --- length bins ---
@pytest.mark.parametrize("length, expected", [(1, 0), (5, 0), (6, 1), (8, 1), (9, 2), (12, 2), (13, 3),
                                              (20, 4), (21, 5), (25, 5), (26, 6), (30, 6), (31, 7), (200, 7)])
def test_length_bin(length, expected):
    assert length_bin(length) == expected


def test_length_bins_partition_and_are_monotone():
    bins = [length_bin(n) for n in range(1, 80)]
    assert bins == sorted(bins)
    assert set(bins) == set(range(NUM_LENGTH_BINS))
    with pytest.raises(ValueError):
        length_bin(0)


# --- word probes ---
def test_word_content_items_are_balanced_and_correct(vocab):
    sentences = synth_sentences(60, 4, vocab).sentences
    items = word_content_items(sentences, seed=2)
    labels = [label for *_, label in items]
    assert abs(sum(labels) * 2 - len(labels)) <= 1
    for index, word, label in items:
        assert (word in sentences[index]) == bool(label)


def test_word_content_skips_sentences_covering_the_vocabulary():
    sentences = [(2, 3), (2,)]
    assert word_content_items(sentences, seed=0) == [(1, 3, 0)]


def test_order_label_uses_first_occurrences():
    tokens = [5, 6, 7, 5]
    assert order_label(tokens, 5, 7) == 1
    assert order_label(tokens, 7, 5) == 0
    assert order_label(tokens, 6, 5) == 0


def test_word_order_items_are_balanced(vocab):
    sentences = synth_sentences(40, 8, vocab).sentences + [(4, 4, 4)]
    items = word_order_items(sentences, seed=1)
    assert len(items) <= 40
    labels = [label for *_, label in items]
    assert abs(sum(labels) * 2 - len(labels)) <= 1
    for index, a, b, label in items:
        assert a != b
        assert order_label(sentences[index], a, b) == label


# --- probe classifier ---
def separable(rng, n=200, dim=5):
    X = rng.standard_normal((n, dim))
    y = (X[:, 0] > 0).astype(np.int64)
    X[:, 0] += np.where(y == 1, 2.0, -2.0)
    return X, y


def test_logistic_probe_on_separable_data(rng):
    X, y = separable(rng)
    probe, accuracy = train_probe(X, y, ProbeConfig(seed=3))
    assert accuracy >= 0.99
    assert probe.params["W"].shape == (5, 2)


def test_mlp_probe_on_separable_data(rng):
    X, y = separable(rng)
    _, accuracy = train_probe(X, y, ProbeConfig(kind="mlp-512", hidden_dim=16, epochs=60, lr=0.5, seed=3))
    assert accuracy >= 0.95


def test_probe_on_shuffled_labels_stays_near_chance(rng):
    X = rng.standard_normal((400, 5))
    y = rng.integers(0, 2, size=400)
    _, accuracy = train_probe(X, y, ProbeConfig(seed=0))
    assert 0.3 <= accuracy <= 0.7


def test_probe_is_deterministic(rng):
    X, y = separable(rng, n=60)
    first, acc_first = train_probe(X, y, ProbeConfig(seed=7, epochs=5))
    second, acc_second = train_probe(X, y, ProbeConfig(seed=7, epochs=5))
    assert acc_first == acc_second
    np.testing.assert_array_equal(first.params["W"].data, second.params["W"].data)


def test_probe_input_checks():
    with pytest.raises(ValueError, match="single class"):
        train_probe(np.ones((10, 2)), np.zeros(10))
    with pytest.raises(ValueError):
        ProbeConfig(kind="svm")


def test_aux_length_with_informative_vectors(vocab, rng):
    sentences = synth_sentences(160, 2, vocab).sentences
    bins = np.array([length_bin(len(s)) for s in sentences])
    vectors = np.eye(NUM_LENGTH_BINS)[bins] + 0.01 * rng.standard_normal((160, NUM_LENGTH_BINS))
    accuracy = aux_length(sentences, None, vectors=vectors, cfg=ProbeConfig(epochs=50, lr=0.5, seed=1))
    assert accuracy >= 0.9


def test_word_probes_run_on_a_model(make_model, vocab):
    model = make_model("SP")
    sentences = synth_sentences(40, 6, vocab)
    cfg = ProbeConfig(epochs=2)
    assert 0.0 <= aux_word_content(sentences, model, "concat:marker1", seed=1, cfg=cfg) <= 1.0
    assert 0.0 <= aux_word_order(sentences, model, "private:overlap0", seed=1, cfg=cfg) <= 1.0


# --- features ---
def test_pair_features_and_determinism(make_model, two_tasks):
    model = make_model("SP")
    dataset = two_tasks["overlap0"]
    first = extract_features(dataset, model, "concat")
    second = extract_features(dataset, model, "concat")
    assert first.dim == 4 * (2 * 4 + 2 * 4)
    np.testing.assert_array_equal(first.values, second.values)
    np.testing.assert_array_equal(first.ids, np.arange(16))


def test_concat_starts_with_the_shared_vector(make_model, vocab):
    model = make_model("ASP")
    sentences = synth_sentences(10, 1, vocab).sentences
    shared = sentence_features(sentences, model, "shared")
    concat = sentence_features(sentences, model, "concat:marker1")
    np.testing.assert_array_equal(concat[:, :shared.shape[1]], shared)
    private = sentence_features(sentences, model, "private:marker1")
    np.testing.assert_array_equal(concat[:, shared.shape[1]:], private)


@pytest.mark.parametrize("framework, tag", [("FS", "private:overlap0"), ("FS", "concat"), ("SP", "nonsense"),
                                            ("SP", "private:unknown"), ("SP", "private")])
def test_invalid_encoder_tags(make_model, vocab, framework, tag):
    sentences = synth_sentences(4, 0, vocab).sentences
    with pytest.raises(FrameworkError):
        sentence_features(sentences, make_model(framework), tag)


def test_feature_file_keeps_full_precision(tmp_path, rng):
    features = FeatureMatrix(np.arange(3), rng.standard_normal((3, 4)), "concat:marker1")
    path = tmp_path / "features.csv"
    write_feature_file(features, str(path))
    assert path.read_text().splitlines()[0].startswith("id,concat:marker1|4|0,")
    loaded = read_feature_file(str(path))
    assert loaded.tag == "concat:marker1"
    np.testing.assert_array_equal(loaded.values, features.values)


def test_probing_leaves_the_checkpoint_unchanged(tmp_path, make_model, vocab, two_tasks):
    path = tmp_path / "model.ckpt"
    save_checkpoint(make_model("ASP"), str(path))
    before = path.read_bytes()
    model = load_checkpoint(str(path))
    sentences = synth_sentences(24, 3, vocab)
    extract_features(two_tasks["marker1"], model, "concat")
    aux_length(sentences, model, "shared", ProbeConfig(epochs=1))
    task_identity_accuracy(model, two_tasks, "shared", ProbeConfig(epochs=1))
    save_checkpoint(model, str(tmp_path / "again.ckpt"))
    assert (tmp_path / "again.ckpt").read_bytes() == before


def test_task_identity_needs_two_tasks(make_model, two_tasks):
    with pytest.raises(ValueError):
        task_identity_accuracy(make_model("FS"), {"overlap0": two_tasks["overlap0"]})


# --- baselines ---
def test_bag_of_embeddings_ignores_order(table):
    features = bag_of_embeddings_features([(3, 4, 5), (5, 3, 4)], table)
    np.testing.assert_allclose(features[0], features[1], atol=1e-15)
    assert features.shape == (2, table.dim)


def test_random_features_are_seeded():
    np.testing.assert_array_equal(random_features(5, 3, seed=1), random_features(5, 3, seed=1))


# --- similarity ---
def test_cosine_cases():
    assert cosine([1, 2], [2, 4]) == pytest.approx(1.0)
    assert cosine([1, 0], [-3, 0]) == pytest.approx(-1.0)
    assert cosine([1, 0], [0, 5]) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        cosine([0, 0], [1, 1])


def test_rank_correlation_example():
    assert rank_correlation([1, 2, 3, 4, 5], [1, 2, 3, 5, 4]) == pytest.approx(0.9)
    with pytest.raises(ValueError):
        rank_correlation([1, 2, 3], [4, 4, 4])


def test_cosine_eval(make_model, vocab):
    model = make_model("FS")
    sentences = synth_sentences(12, 9, vocab).sentences
    pairs = list(zip(sentences[:6], sentences[6:]))
    gold = np.array([0.5, 4.0, 2.0, 3.5, 1.0, 5.0])
    result = cosine_eval(pairs, gold, model)
    assert result.cosines.shape == (6,)
    assert np.all(np.abs(result.cosines) <= 1.0)
    assert result.spearman == pytest.approx(stats.spearmanr(gold, result.cosines)[0])
    with pytest.raises(ValueError, match="at least 3"):
        cosine_eval(pairs[:2], gold[:2], model)


def test_probe_report_appends(tmp_path):
    path = str(tmp_path / "report.csv")
    write_probe_report([{"probe": "length", "encoder_tag": "shared", "metric": "accuracy", "value": 0.5, "seed": 0}], path)
    write_probe_report([{"probe": "length", "encoder_tag": "concat", "metric": "accuracy", "value": 0.7, "seed": 0}], path)
    report = pd.read_csv(path)
    assert list(report.columns) == REPORT_COLUMNS
    assert list(report["encoder_tag"]) == ["shared", "concat"]
