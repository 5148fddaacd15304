import itertools

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from modules import ndgrad as nd
from modules import trainer
from modules.config import ConfigError, TrainConfig
from modules.mtl import build_model, cycle_loss, discriminator_logits
from modules.ndgrad import NumericalError, ShapeError, Tensor
from modules.textdata import DataFormatError, batch_iter, synthetic_embeddings
from modules.trainer import (METRICS_FILE, TrainState, build_tasks, check_gradients, discriminator_step, grad_check,
                             lr_update, relative_error, sgd_step, train_multitask, train_step)


def small_config(**overrides):
    values = dict(framework="FS", hidden_dim=4, embed_dim=6, mlp_dim=8, batch_size=8, max_epochs=2,
                  synthetic_tasks=["SHARED-OVERLAP", "PRIVATE-MARKER(1)"], synthetic_train_size=16,
                  synthetic_dev_size=8, seed=3)
    values.update(overrides)
    return TrainConfig(**values)


# --- SGD ---
def test_sgd_step_moves_against_the_gradient():
    p = Tensor([1.0, 2.0], requires_grad=True)
    sgd_step({"p": p}, {"p": np.array([0.5, -1.0])}, 0.1)
    np.testing.assert_allclose(p.data, [0.95, 2.1])
    sgd_step({"p": p}, {"p": np.array([3.0, 3.0])}, 0.0)
    np.testing.assert_allclose(p.data, [0.95, 2.1])


def test_sgd_step_refuses_nan_before_touching_anything():
    a = Tensor([1.0], requires_grad=True)
    b = Tensor([2.0], requires_grad=True)
    with pytest.raises(NumericalError, match="'b'"):
        sgd_step({"a": a, "b": b}, {"a": np.array([1.0]), "b": np.array([np.nan])}, 0.1)
    assert a.data[0] == 1.0


def test_sgd_step_argument_checks():
    p = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        sgd_step({"p": p}, {"p": np.zeros(2)}, -0.1)
    with pytest.raises(ShapeError):
        sgd_step({"p": p}, {"p": np.zeros(3)}, 0.1)


# --- schedule ---
def test_lr_schedule_examples():
    state = TrainState()
    assert state.lr == 0.1
    lr_update(state, 0.5)
    assert state.lr == pytest.approx(0.099)
    lr_update(state, 0.6)
    assert state.lr == pytest.approx(0.1 * 0.99 ** 2)
    lr_update(state, 0.55)
    assert state.drops == 1
    assert state.lr == pytest.approx(0.1 * 0.99 ** 3 / 5)
    lr_update(state, 0.55)
    assert state.drops == 1


@settings(max_examples=30)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=40))
def test_lr_without_drops_is_pure_decay(devs):
    state = TrainState()
    for dev in sorted(devs):
        lr_update(state, dev)
    assert state.lr == pytest.approx(0.1 * 0.99 ** len(devs), rel=1e-12)


def test_stop_flag_below_threshold():
    state = TrainState(initial_lr=2e-5, lr_decay=0.4)
    lr_update(state, 0.5)
    assert state.stopped


# --- gradient check ---
@pytest.fixture
def asp_cycle(table, vocab, two_tasks):
    model = build_model("ASP", {"overlap0": 2, "marker1": 2}, table, 8, 16, seed=1, beta=0.01, gamma=0.05, vocab=vocab)
    batches = [batch_iter(dataset, batch_size=4)[0] for dataset in two_tasks.values()]
    return model, batches


def test_grad_check_passes_on_small_asp_model(asp_cycle):
    model, batches = asp_cycle
    report = grad_check(model, batches, max_checks=6)
    assert report.passed(1e-4), report.errors
    assert set(report.errors) == set(model.parameters())
    assert model.reversal_strength == 1.0


def test_grad_check_catches_a_wrong_gradient(asp_cycle):
    model, batches = asp_cycle

    def perturb(grads):
        grads["head.overlap0.W2"] *= 1.01

    report = grad_check(model, batches, perturb=perturb, max_checks=3)
    assert report.errors["head.overlap0.W2"] > 1e-3
    assert not report.passed()


def test_check_gradients_on_linear_softmax():
    x = Tensor([[1.0, -0.5, 2.0], [0.3, 0.8, -1.2]])
    W = Tensor([[0.2, -0.1], [0.4, 0.3], [-0.3, 0.1]], requires_grad=True)
    report = check_gradients({"W": W}, lambda: nd.cross_entropy(x @ W, [0, 1]))
    assert report.max_error < 1e-7
    assert report.checked["W"] == 6


def test_check_gradients_measures_small_entries_too():
    # the third input row is tiny, so its gradient row sits near 5e-6
    x = Tensor([[1.0, -0.5, 2e-5], [0.3, 0.8, -1e-5]])
    W = Tensor([[0.2, -0.1], [0.4, 0.3], [-0.3, 0.1]], requires_grad=True)

    def perturb(grads):
        grads["W"][2, 0] *= 1.5

    report = check_gradients({"W": W}, lambda: nd.cross_entropy(x @ W, [0, 1]), perturb=perturb, max_checks=6)
    assert report.errors["W"] > 0.1


def test_check_gradients_samples_a_fixed_number_of_entries():
    x = Tensor(np.linspace(-1.0, 1.0, 30).reshape(3, 10))
    W = Tensor(np.full((10, 4), 0.1), requires_grad=True)
    b = Tensor(np.zeros(4), requires_grad=True)
    report = check_gradients({"W": W, "b": b}, lambda: nd.cross_entropy(x @ W + b, [0, 1, 3]), max_checks=7)
    assert report.checked == {"W": 7, "b": 4}
    assert report.passed(1e-5)


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1.0, 0.5) == pytest.approx(0.5)
    assert relative_error(1e-12, 0.0) == pytest.approx(1e-6)


# --- task assembly ---
def test_tasks_must_be_declared_exactly_once(tmp_path):
    with pytest.raises(ConfigError):
        build_tasks(small_config(synthetic_tasks=[]))
    with pytest.raises(ConfigError):
        build_tasks(small_config(task_manifests=[str(tmp_path / "x.task")]))


def test_manifests_disagreeing_on_classes(tmp_path):
    for name, labels in (("a.task", "e, n, c"), ("b.task", "yes, no")):
        (tmp_path / name).write_text(f"name = nli\nlabels = {labels}\ntrain = t.tsv\ndev = d.tsv\n")
    config = small_config(synthetic_tasks=[], task_manifests=[str(tmp_path / "a.task"), str(tmp_path / "b.task")])
    with pytest.raises(DataFormatError, match="disagree"):
        build_tasks(config)


def test_manifest_tasks_are_merged_by_name(tmp_path):
    lines = "entailment\ta dog runs\ta dog moves\ncontradiction\ta cat\tno cat\n"
    for split in ("train", "dev"):
        (tmp_path / f"snli_{split}.tsv").write_text(lines)
        (tmp_path / f"mnli_{split}.tsv").write_text(lines)
    for corpus in ("snli", "mnli"):
        (tmp_path / f"{corpus}.task").write_text(f"name = allnli\nlabels = entailment, neutral, contradiction\n"
                                                 f"train = {corpus}_train.tsv\ndev = {corpus}_dev.tsv\n")
    config = small_config(synthetic_tasks=[], task_manifests=[str(tmp_path / "snli.task"), str(tmp_path / "mnli.task")])
    data = build_tasks(config)
    assert data.task_classes == {"allnli": 3}
    assert len(data.train["allnli"]) == 4
    assert data.embeddings.dim == 6 and not data.test


# --- training ---
def test_training_is_deterministic(tmp_path):
    first = train_multitask(small_config(), str(tmp_path / "a"))
    second = train_multitask(small_config(), str(tmp_path / "b"))
    pd.testing.assert_frame_equal(first.metrics, second.metrics)
    for name, tensor in first.model.parameters().items():
        np.testing.assert_array_equal(tensor.data, second.model.parameters()[name].data)
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()


def test_metrics_file_layout(tmp_path):
    result = train_multitask(small_config(), str(tmp_path))
    metrics = pd.read_csv(tmp_path / METRICS_FILE)
    assert list(metrics.columns) == trainer.METRICS_COLUMNS
    assert list(metrics["epoch"]) == [1, 1, 2, 2]
    assert set(metrics["task"]) == {"overlap0", "marker1"}
    assert result.state.best_epoch in (1, 2)


def test_asp_with_zero_weights_trains_like_sp(tmp_path):
    sp = train_multitask(small_config(framework="SP"))
    asp = train_multitask(small_config(framework="ASP", beta=0.0, gamma=0.0))
    columns = ["epoch", "lr", "task", "train_loss", "dev_acc"]
    pd.testing.assert_frame_equal(sp.metrics[columns], asp.metrics[columns], check_exact=True)
    for name, tensor in sp.model.parameters().items():
        np.testing.assert_array_equal(tensor.data, asp.model.parameters()[name].data, err_msg=name)


def test_scripted_dev_accuracy_drives_the_learning_rate(tmp_path, monkeypatch):
    means = [0.5, 0.6, 0.55, 0.7]
    scripted = itertools.chain.from_iterable((m, m) for m in means)
    monkeypatch.setattr(trainer, "evaluate_accuracy", lambda *args, **kwargs: next(scripted))
    train_multitask(small_config(max_epochs=4), str(tmp_path))
    lrs = pd.read_csv(tmp_path / METRICS_FILE).groupby("epoch")["lr"].first().tolist()
    expected = [0.1, 0.1 * 0.99, 0.1 * 0.99 ** 2, 0.1 * 0.99 ** 3 / 5]
    assert lrs == pytest.approx(expected, rel=1e-12)


def test_alternating_mode_only_changes_the_discriminator_update(table, vocab, two_tasks):
    batches = [batch_iter(dataset, batch_size=4)[0] for dataset in two_tasks.values()]
    models = {mode: build_model("ASP", {"overlap0": 2, "marker1": 2}, table, 4, 8, seed=2, beta=0.5, gamma=0.1,
                                vocab=vocab) for mode in ("reversal", "alternating")}
    for mode, model in models.items():
        train_step(model, batches, 0.1, adversarial_mode=mode)
    reversal, alternating = (models[m].parameters() for m in ("reversal", "alternating"))
    for name in reversal:
        if name.startswith("disc."):
            assert not np.array_equal(reversal[name].data, alternating[name].data)
        else:
            np.testing.assert_array_equal(reversal[name].data, alternating[name].data, err_msg=name)


def test_discriminator_step_fits_unweighted_cross_entropy(table, vocab, two_tasks):
    batches = [batch_iter(dataset, batch_size=4)[0] for dataset in two_tasks.values()]
    model = build_model("ASP", {"overlap0": 2, "marker1": 2}, table, 4, 8, seed=2, beta=0.05, vocab=vocab)
    _, results = cycle_loss(batches, model)
    vectors = np.concatenate([side.data for result in results.values() for side in result.shared_vectors])
    ids = np.concatenate([np.full(side.shape[0], model.task_index(task))
                          for task, result in results.items() for side in result.shared_vectors])
    expected = nd.cross_entropy(discriminator_logits(Tensor(vectors), model.discriminator), ids).item()
    assert discriminator_step(model, results, 0.0) == pytest.approx(expected, rel=1e-12)


def test_synthetic_runs_use_the_synthetic_table():
    data = build_tasks(small_config())
    expected = synthetic_embeddings(data.vocab, 6, seed=3)
    np.testing.assert_array_equal(data.embeddings.matrix, expected.matrix)
