import math

import numpy as np
import pytest

from modules import ndgrad as nd
from modules.encoder import HiddenStates
from modules.mtl import (FrameworkError, adv_loss, build_model, cycle_loss, diff_loss, discriminator_forward,
                         discriminator_logits, forward_batch, fs_forward, sp_forward, total_loss)
from modules.ndgrad import Graph, ShapeError, Tensor
from modules.textdata import batch_iter, make_batch


def first_batches(two_tasks, size=4):
    return [batch_iter(dataset, batch_size=size)[0] for dataset in two_tasks.values()]


def grads_after(model, build):
    model.zero_grad()
    with Graph() as graph:
        graph.backward(build())
    return {name: p.grad.copy() for name, p in model.parameters().items()}


# --- forward passes ---
def test_fs_with_zero_output_layer_gives_log_c(make_model, two_tasks):
    model = make_model("FS")
    for head in model.heads.values():
        head.W2.data[:] = 0.0
    batch = first_batches(two_tasks)[0]
    logits, loss = fs_forward(batch, model)
    assert logits.shape == (4, 2)
    assert loss.item() == pytest.approx(math.log(2), abs=1e-12)


def test_sp_sentence_vector_and_head_widths(make_model, two_tasks):
    model = make_model("SP", hidden_dim=4, private_dim=3)
    assert model.heads["overlap0"].input_dim == 4 * (2 * 4 + 2 * 3)
    result = sp_forward(first_batches(two_tasks)[0], model)
    assert result.logits.shape == (4, 2)
    assert result.shared_vectors[0].shape == (4, 8)
    (H1, P1), _ = result.hidden_pairs
    assert H1.H.shape[-1] == 8 and P1.H.shape[-1] == 6


def test_private_copy_of_shared_encoder_gives_identical_halves(make_model, two_tasks):
    model = make_model("SP")
    for private in model.private.values():
        for name, tensor in private.parameters().items():
            tensor.data[:] = model.shared.parameters()[name].data
    (H1, P1), (H2, P2) = sp_forward(first_batches(two_tasks)[0], model).hidden_pairs
    np.testing.assert_array_equal(H1.H.data, P1.H.data)
    np.testing.assert_array_equal(H2.H.data, P2.H.data)


def test_biattentive_model_forward(make_model, two_tasks):
    model = make_model("SP", pooling="biatt")
    assert model.pooling == "biatt"
    assert model.heads["marker1"].input_dim == 2 * 12 * 16
    result = forward_batch(first_batches(two_tasks)[1], model)
    assert result.logits.shape == (4, 2)


def test_forward_does_not_depend_on_example_order(make_model, two_tasks):
    model = make_model("ASP", beta=0.1, gamma=0.05)
    batches = first_batches(two_tasks)
    flipped = [make_batch(list(reversed([two_tasks[b.task].examples[i] for i in b.ids]))) for b in batches]
    original, _ = cycle_loss(batches, model)
    reordered, _ = cycle_loss(flipped, model)
    assert reordered.total.item() == pytest.approx(original.total.item(), rel=1e-10)


def test_framework_mismatches(make_model, two_tasks):
    batch = first_batches(two_tasks)[0]
    with pytest.raises(FrameworkError):
        fs_forward(batch, make_model("SP"))
    with pytest.raises(FrameworkError):
        sp_forward(batch, make_model("FS"))
    with pytest.raises(FrameworkError):
        make_model("FS", pooling="biatt")
    with pytest.raises(FrameworkError):
        make_model("SP", beta=0.1)


def test_asp_needs_two_tasks(table):
    with pytest.raises(FrameworkError):
        build_model("ASP", {"only": 3}, table, 4, 8, seed=0)


def test_unknown_task_in_batch(make_model, two_tasks):
    model = build_model("FS", {"other": 2}, make_model().embeddings, 4, 8, seed=0)
    with pytest.raises(ValueError, match="unknown task"):
        forward_batch(first_batches(two_tasks)[0], model)


# --- discriminator and adversarial loss ---
def test_zero_discriminator_is_uniform(make_model, rng):
    model = make_model("ASP")
    model.discriminator.W.data[:] = 0.0
    probs = discriminator_forward(Tensor(rng.standard_normal((3, 8))), model.discriminator)
    np.testing.assert_allclose(probs.data, 0.5)
    s = Tensor(rng.standard_normal(8))
    adv = adv_loss(model, s.reshape(1, -1), [1])
    assert adv.item() == pytest.approx(math.log(2), abs=1e-12)


def test_discriminator_probabilities_sum_to_one(make_model, rng):
    model = make_model("ASP")
    probs = discriminator_forward(Tensor(rng.standard_normal((5, 8))), model.discriminator)
    np.testing.assert_allclose(probs.data.sum(axis=1), np.ones(5))
    with pytest.raises(ShapeError):
        discriminator_logits(Tensor(np.ones(3)), model.discriminator)


@pytest.mark.parametrize("strength", [1.0, 0.5])
def test_reversal_flips_the_encoder_side_gradient(make_model, rng, strength):
    model = make_model("ASP", reversal_strength=strength)
    values = rng.standard_normal((3, 8))
    ids = [0, 1, 1]

    s = Tensor(values, requires_grad=True)
    model.zero_grad()
    with Graph() as graph:
        graph.backward(adv_loss(model, s, ids))
    reversed_grad, disc_grad = s.grad.copy(), model.discriminator.W.grad.copy()

    plain = Tensor(values, requires_grad=True)
    model.zero_grad()
    with Graph() as graph:
        graph.backward(nd.cross_entropy(discriminator_logits(plain, model.discriminator), ids))
    np.testing.assert_allclose(reversed_grad, -strength * plain.grad, atol=1e-14)
    np.testing.assert_allclose(disc_grad, model.discriminator.W.grad, atol=1e-14)


def test_adv_loss_requires_asp(make_model):
    with pytest.raises(FrameworkError):
        adv_loss(make_model("SP"), Tensor(np.ones((1, 8))), [0])


# --- diff loss ---
def states(values, mask=None):
    values = np.asarray(values, dtype=float)
    if mask is None:
        mask = np.ones(values.shape[:-1], dtype=bool)
    return HiddenStates(Tensor(values), np.asarray(mask, dtype=bool))


def test_diff_loss_of_orthogonal_subspaces_is_zero():
    shared = states([[1.0, 0.0], [0.0, 0.0]])
    private = states([[0.0, 0.0], [0.0, 1.0]])
    assert diff_loss(shared, private).item() == pytest.approx(0.0, abs=1e-20)


def test_diff_loss_of_identity_pair():
    assert diff_loss(states(np.eye(2)), states(np.eye(2)), normalize=False).item() == pytest.approx(2.0)


def test_diff_loss_matches_brute_force(rng):
    H_s, H_p = rng.standard_normal((2, 5, 3)), rng.standard_normal((2, 5, 4))
    mask = np.array([[True] * 5, [True, True, False, False, False]])
    expected = []
    for b in range(2):
        total = 0.0
        for i in range(3):
            for j in range(4):
                total += sum(H_s[b, t, i] * H_p[b, t, j] for t in range(5) if mask[b, t]) ** 2
        expected.append(total)
    got = diff_loss(states(H_s, mask), states(H_p, mask), normalize=False).item()
    assert got == pytest.approx(np.mean(expected), rel=1e-12)


def test_diff_loss_mask_mismatch():
    with pytest.raises(ShapeError):
        diff_loss(states(np.ones((1, 2, 2)), [[True, True]]), states(np.ones((1, 2, 2)), [[True, False]]))


# --- total loss ---
def test_total_loss_with_zero_weights_is_task_sum():
    tasks = {"a": Tensor(0.7), "b": Tensor(0.2)}
    breakdown = total_loss(tasks, Tensor(5.0), Tensor(3.0), 0.0, 0.0)
    assert breakdown.total.item() == pytest.approx(0.9)
    assert breakdown.as_floats() == {"task": {"a": 0.7, "b": 0.2}, "adv": 5.0, "diff": 3.0, "total": pytest.approx(0.9)}


def test_total_loss_is_linear_in_the_weights():
    tasks = {"a": Tensor(0.5)}
    assert total_loss(tasks, Tensor(2.0), Tensor(4.0), 0.25, 0.5).total.item() == pytest.approx(0.5 + 0.5 + 2.0)


def test_total_loss_rejects_negative_weights():
    with pytest.raises(ValueError):
        total_loss({"a": Tensor(1.0)}, None, None, -0.1, 0.0)
    with pytest.raises(ValueError):
        total_loss({}, None, None, 0.0, 0.0)


def test_fused_gradient_equals_sum_of_parts(make_model, two_tasks):
    beta, gamma = 0.3, 0.2
    model = make_model("ASP", beta=beta, gamma=gamma)
    batches = first_batches(two_tasks)

    def part(pick):
        def build():
            breakdown, _ = cycle_loss(batches, model)
            return pick(breakdown)
        return grads_after(model, build)

    fused = part(lambda b: b.total)
    tasks = part(lambda b: b.task["overlap0"] + b.task["marker1"])
    adv = part(lambda b: b.adv)
    diff = part(lambda b: b.diff)
    for name, grad in fused.items():
        np.testing.assert_allclose(grad, tasks[name] + beta * adv[name] + gamma * diff[name], atol=1e-10, err_msg=name)


def test_cycle_rejects_repeated_task(make_model, two_tasks):
    batch = first_batches(two_tasks)[0]
    with pytest.raises(ValueError, match="twice"):
        cycle_loss([batch, batch], make_model("FS"))


def test_parameter_names_are_stable(make_model):
    names = list(make_model("ASP", pooling="biatt").parameters())
    assert names[:4] == ["shared.fw.W", "shared.fw.b", "shared.bw.W", "shared.bw.b"]
    assert names[-2:] == ["disc.W", "disc.b"]
    assert "biatt.marker1.w2" in names and "private.overlap0.fw.W" in names
