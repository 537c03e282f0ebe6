"""Cross-entropy, stain entropy and the weighted total."""

import math

import numpy as np
import pytest

from conftest import tiny_trunk
from shortcut_probe import tensor as T
from shortcut_probe.errors import ConfigError, UsageError
from shortcut_probe.model import LESION, STAIN, DualHeadModel, make_dual_head_model
from shortcut_probe.objectives import (
    ENTROPY_MAX,
    NONE,
    SUPERVISED_CE,
    LossWeights,
    combined_loss,
    cross_entropy,
    stain_entropy,
)
from shortcut_probe.tensor import Tape, Tensor
from shortcut_probe.training import TrainConfig, train

LN4 = math.log(4.0)


def _probs(rng, n, k):
    return Tensor(T.softmax_np(3 * rng.standard_normal((n, k))), requires_grad=True)


def test_cross_entropy_examples():
    assert cross_entropy(Tensor([[1.0, 0.0]]), [0]).item() == pytest.approx(0.0, abs=1e-12)
    assert cross_entropy(Tensor(np.full((3, 4), 0.25)), [0, 2, 3]).item() == pytest.approx(LN4, abs=1e-12)
    # a zero probability on the label is clamped, not infinite
    assert cross_entropy(Tensor([[1.0, 0.0]]), [1]).item() == pytest.approx(-math.log(1e-12))


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.full((2, 4), 0.25)), [0, 4])


def test_entropy_examples_and_equality_cases():
    assert stain_entropy(Tensor(np.eye(4))).item() == 0.0
    assert stain_entropy(Tensor(np.full((5, 4), 0.25))).item() == pytest.approx(LN4, abs=1e-15)
    assert stain_entropy(Tensor([[0.5, 0.5, 0.0, 0.0]])).item() == pytest.approx(math.log(2), abs=1e-15)


def test_entropy_bounds_on_random_distributions():
    rng = np.random.default_rng(0)
    for _ in range(200):
        p = T.softmax_np(rng.standard_normal((6, 4)) * rng.uniform(0.1, 30))
        h = stain_entropy(Tensor(p)).item()
        assert -1e-12 <= h <= LN4 + 1e-12


def test_combined_loss_is_linear_in_weights():
    rng = np.random.default_rng(1)
    for mode in (SUPERVISED_CE, ENTROPY_MAX):
        for _ in range(20):
            pl, ps = _probs(rng, 8, 2), _probs(rng, 8, 4)
            yl, ys = rng.integers(0, 2, 8), rng.integers(0, 4, 8)
            ce_l = cross_entropy(pl, yl).item()
            s = cross_entropy(ps, ys).item() if mode == SUPERVISED_CE else stain_entropy(ps).item()
            mu1 = rng.uniform(0, 2)
            mu2 = rng.uniform(-2, 2) if mode == SUPERVISED_CE else rng.uniform(-2, 0)
            got = combined_loss(pl, yl, ps, ys, LossWeights(mu1, mu2, mode)).item()
            assert abs(got - (mu1 * ce_l + mu2 * s)) < 1e-10


def test_entropy_mode_uniform_substitution():
    rng = np.random.default_rng(2)
    pl = _probs(rng, 4, 2)
    yl = [0, 1, 1, 0]
    got = combined_loss(pl, yl, Tensor(np.full((4, 4), 0.25)), None, LossWeights(1.0, -0.5, ENTROPY_MAX))
    assert got.item() == pytest.approx(cross_entropy(pl, yl).item() - 0.5 * LN4, abs=1e-12)


@pytest.mark.parametrize("w", [LossWeights(0.7, 0.0), LossWeights(0.7, 0.9, NONE)])
def test_zero_weight_gives_lesion_loss_and_no_stain_gradient(w):
    rng = np.random.default_rng(3)
    pl, ps = _probs(rng, 5, 2), _probs(rng, 5, 4)
    yl, ys = rng.integers(0, 2, 5), rng.integers(0, 4, 5)
    tape = Tape()
    with tape:
        loss = combined_loss(pl, yl, ps, ys, w)
    T.backward(loss, tape)
    assert loss.item() == 0.7 * cross_entropy(pl, yl).item()
    assert ps.grad is None


def test_weight_validation():
    with pytest.raises(ConfigError):
        LossWeights(1.0, 0.5, ENTROPY_MAX)
    with pytest.raises(ConfigError):
        LossWeights(1.0, 0.0, "rce")
    with pytest.raises(ConfigError):
        LossWeights(-1.0, 0.0)
    rng = np.random.default_rng(4)
    with pytest.raises(UsageError):
        combined_loss(_probs(rng, 2, 2), [0, 1], _probs(rng, 2, 4), None, LossWeights(1.0, 0.5))


def test_small_step_along_gradient_moves_stain_loss_with_sign_of_weight():
    # descending the total with mu2 < 0 raises the stain term, mu2 > 0 lowers it
    rng = np.random.default_rng(5)
    x = Tensor(rng.uniform(0, 1, (8, 3, 8, 8)))
    yl, ys = rng.integers(0, 2, 8), rng.integers(0, 4, 8)
    for mu2, sign in ((-1.0, 1.0), (1.0, -1.0)):
        model = make_dual_head_model(tiny_trunk(dropout_rate=0.0, head_output_init="glorot"), 1)
        stain_params = model.head_parameters(STAIN)

        def stain_ce():
            return cross_entropy(T.softmax(model.outputs(x)[STAIN]), ys).item()

        before = stain_ce()
        tape = Tape()
        with tape:
            out = model.outputs(x)
            loss = combined_loss(T.softmax(out[LESION]), yl, T.softmax(out[STAIN]), ys, LossWeights(1.0, mu2))
        T.backward(loss, tape)
        for p in stain_params:
            p.data = p.data - 1e-3 * p.grad
        assert sign * (stain_ce() - before) > 0


def test_zero_weight_training_is_bit_identical_to_lesion_only(tiny_data):
    train_part = tiny_data.subset(np.arange(0, 160))
    val_part = tiny_data.subset(np.arange(160, 240))
    cfg = TrainConfig(max_epochs=3, batch_size=16)
    dual, h_dual = train(make_dual_head_model(tiny_trunk(), 2), train_part, None, LossWeights(1.0, 0.0),
                         cfg, seed=4, val_data=val_part)
    solo, h_solo = train(DualHeadModel(tiny_trunk(), 2, heads=(LESION,)), train_part, None,
                         LossWeights(1.0, 0.0, NONE), cfg, seed=4, val_data=val_part)
    sd_dual, sd_solo = dual.state_dict(), solo.state_dict()
    for name, arr in sd_solo.items():
        assert np.array_equal(arr, sd_dual[name]), name
    assert h_dual.column("val_lesion_loss") == h_solo.column("val_lesion_loss")
    assert h_dual.column("train_loss") == h_solo.column("train_loss")
