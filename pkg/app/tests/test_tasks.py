import numpy as np
import pytest

from mango.core.tensor import Tape, Tensor
from mango.errors import ConfigError, DimensionError, InputError
from mango.flows.model import ModelConfig, build_model
from mango.processing.preprocess import SyntheticDataset, generate
from mango.processing.tasks import (
    TaskHead,
    accuracy,
    cross_entropy,
    joint_loss,
    pooled,
    task_loss,
)


def test_confident_correct_logits_have_almost_no_loss():
    assert cross_entropy(np.array([[10.0, -10.0]]), np.array([0])).item() < 1e-4


def test_uniform_logits_cost_log_classes():
    assert cross_entropy(np.zeros((5, 3)), np.arange(5) % 3).item() == pytest.approx(np.log(3.0), rel=1e-12)


def test_labels_out_of_range():
    with pytest.raises(InputError):
        cross_entropy(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(DimensionError):
        cross_entropy(np.zeros((2, 3)), np.array([0]))


def test_pooling_skips_pad_positions():
    z = np.arange(12.0).reshape(1, 4, 3)
    mask = np.array([[False, True, False, True]])
    np.testing.assert_allclose(pooled(z, mask).data, [(z[0, 0] + z[0, 2]) / 2])
    with pytest.raises(InputError):
        pooled(z, np.ones((1, 4), dtype=bool))


def test_translation_head_reads_the_a_rows(rng):
    head = TaskHead("translation", 3, 3, rng)
    z = rng.normal(size=(2, 8, 3))
    expected = z[:, :4] @ head.projection.data + head.bias.data
    np.testing.assert_allclose(head(z).data, expected)


def test_translation_head_needs_square_projection():
    with pytest.raises(DimensionError):
        TaskHead("translation", 4, 2)
    with pytest.raises(ConfigError):
        TaskHead("regression", 4, 4)


def test_best_linear_translation_leaves_the_noise_floor():
    # identity flow: z equals the raw tokens, so the head alone predicts B from A
    batch = generate(SyntheticDataset("toy-translation", seed=0, size=2000))
    a = batch.a_tokens.reshape(-1, 4)
    b = batch.targets.reshape(-1, 4)
    design = np.hstack([a, np.ones((len(a), 1))])
    solution, *_ = np.linalg.lstsq(design, b, rcond=None)
    head = TaskHead("translation", 4, 4)
    head.projection.assign(solution[:4])
    head.bias.assign(solution[4])
    mse = task_loss(head, batch.tokens, batch.targets, layout=batch.layout).item()
    assert 0.012 < mse < 0.018


def test_zero_task_weight_is_exactly_the_nll(small_model, rng):
    batch = generate(SyntheticDataset("two-moons-pair", seed=1, size=16))
    head = TaskHead("classification", 4, 2, rng)
    with_head = joint_loss(small_model, head, batch, weight_task=0.0)
    without = joint_loss(small_model, None, batch)
    assert with_head.total is with_head.nll
    assert with_head.task is None
    assert with_head.total.item() == without.total.item()


def test_joint_loss_combines_terms(small_model, rng):
    batch = generate(SyntheticDataset("two-moons-pair", seed=1, size=16))
    head = TaskHead("classification", 4, 2, rng)
    loss = joint_loss(small_model, head, batch, weight_task=0.5)
    assert loss.total.item() == pytest.approx(loss.nll.item() + 0.5 * loss.task.item(), rel=1e-12)
    assert loss.nll.item() == pytest.approx(small_model.nll(batch.tokens).data.mean(), rel=1e-12)


def test_negative_task_weight(small_model):
    batch = generate(SyntheticDataset("two-moons-pair", size=4))
    with pytest.raises(ConfigError):
        joint_loss(small_model, None, batch, weight_task=-1.0)


def test_missing_labels_are_an_input_error(small_model, rng):
    batch = generate(SyntheticDataset("correlated-gaussians", size=4))
    with pytest.raises(InputError):
        joint_loss(small_model, TaskHead("classification", 4, 2, rng), batch)


def test_joint_gradients_reach_flow_and_head(rng):
    model = build_model(ModelConfig(blocks=1, seed=2))
    batch = generate(SyntheticDataset("two-moons-pair", size=8))
    head = TaskHead("classification", 4, 2, rng)
    with Tape() as tape:
        loss = joint_loss(model, head, batch)
    tape.backward(loss.total)
    assert np.any(head.projection.grad != 0.0)
    assert np.any(model.blocks[0].layers[0].ica.w_q.grad != 0.0)


def test_accuracy_counts_argmax_hits():
    head = TaskHead("classification", 2, 2)
    head.projection.assign(np.eye(2))
    z = Tensor(np.array([[[1.0, 0.0]], [[0.0, 1.0]], [[2.0, 0.0]]]))
    assert accuracy(head, z, np.array([0, 1, 1])) == pytest.approx(2 / 3)


def test_heavy_task_weight_aligns_the_gradient_with_the_task_term():
    rng = np.random.default_rng(8)
    model = build_model(ModelConfig(blocks=1, seed=8))
    head = TaskHead("classification", 4, 2, rng)
    params = model.parameters() + head.parameters()
    for p in params:
        p.assign(p.data + rng.normal(0.0, 0.2, p.shape))
    batch = generate(SyntheticDataset("two-moons-pair", seed=8, size=16))

    def gradient(pick):
        for p in params:
            p.zero_grad()
        with Tape() as tape:
            loss = joint_loss(model, head, batch, weight_task=1e6)
        tape.backward(pick(loss))
        return np.concatenate([p.grad.ravel() for p in params])

    joint = gradient(lambda loss: loss.total)
    task_only = gradient(lambda loss: loss.task)
    cosine = joint @ task_only / (np.linalg.norm(joint) * np.linalg.norm(task_only))
    assert cosine > 0.99
