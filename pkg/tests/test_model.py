import numpy as np
import pytest

from oracles import check_gradients
from shortcut_probe import tensor as T
from shortcut_probe.errors import ConfigError, ShapeError, UsageError
from shortcut_probe.model import (
    LESION,
    STAIN,
    TrunkConfig,
    load_checkpoint,
    make_dual_head_model,
    make_stain_only_model,
    mc_predict,
    predict_probs,
    save_checkpoint,
)
from shortcut_probe.objectives import ENTROPY_MAX, SUPERVISED_CE, LossWeights, combined_loss, cross_entropy
from shortcut_probe.tensor import Tensor

SMALL = dict(widths=[2, 3], input_shape=[3, 8, 8], feature_dim=5, head_hidden=4,
             head_output_init="glorot")


def small_config(**kw):
    return TrunkConfig(**{**SMALL, **kw})


def _fixed_mask_forward(model, x):
    """Forward with dropout masks pinned, so repeated calls are the same function."""
    model.reseed_dropout(99)
    return {name: T.softmax(logits) for name, logits in model.outputs(x).items()}


def _model_case(kind, i):
    rng = np.random.default_rng([23, i])
    cfg = small_config(kind="dense", widths=[6]) if kind == "dense" else small_config()
    model = make_stain_only_model(cfg, i) if kind == "stain_only" else make_dual_head_model(cfg, i)
    # zero biases put ReLU inputs exactly on the kink when a layer is dead;
    # random offsets keep every instance away from it
    for name, p in model.named_parameters():
        if name.endswith("bias"):
            p.data = rng.uniform(0.05, 0.3, p.shape) * rng.choice([-1.0, 1.0], p.shape)
    xs = rng.uniform(0, 1, (3, 3, 8, 8))
    model.fit_input_norm(xs)
    x = Tensor(xs, requires_grad=True)
    yl, ys = rng.integers(0, 2, 3), rng.integers(0, 4, 3)
    if kind == "stain_only":
        def build():
            return cross_entropy(_fixed_mask_forward(model, x)[STAIN], ys)
    else:
        w = LossWeights(1.0, -0.5, ENTROPY_MAX) if kind == "entropy" else LossWeights(0.8, -0.7, SUPERVISED_CE)

        def build():
            p = _fixed_mask_forward(model, x)
            return combined_loss(p[LESION], yl, p[STAIN], None if kind == "entropy" else ys, w)
    return check_gradients(build, model.parameters() + [x])


@pytest.mark.parametrize("kind", ["supervised", "entropy", "stain_only", "dense"])
def test_composed_model_gradients(kind):
    worst = max(_model_case(kind, i) for i in range(20))
    assert worst < 1e-4, f"{kind}: worst relative error {worst:.3g}"


def test_trunk_config_validation():
    with pytest.raises(ConfigError):
        TrunkConfig(kind="rnn")
    with pytest.raises(ConfigError):
        TrunkConfig(widths=[4, 4, 4, 4, 4])  # 16 is not divisible by 32
    with pytest.raises(ConfigError):
        TrunkConfig(dropout_rate=1.0)
    with pytest.raises(ConfigError):
        TrunkConfig(head_output_init="ones")


def test_forward_shapes_and_input_check():
    model = make_dual_head_model(small_config(), 0)
    les, st = model(Tensor(np.ones((2, 3, 8, 8))))
    assert les.shape == (2, 2) and st.shape == (2, 4)
    assert make_stain_only_model(small_config(), 0)(Tensor(np.ones((2, 3, 8, 8)))).shape == (2, 4)
    with pytest.raises(ShapeError):
        model(Tensor(np.ones((2, 3, 16, 16))))


def test_trunk_identical_across_head_sets():
    a = make_dual_head_model(small_config(), 4).state_dict()
    b = make_stain_only_model(small_config(), 4).state_dict()
    for name, arr in b.items():
        if name.startswith("trunk"):
            assert np.array_equal(arr, a[name])


def test_zero_output_init_gives_uniform_predictions():
    model = make_dual_head_model(small_config(head_output_init="zero"), 0)
    p = predict_probs(model, np.random.default_rng(0).uniform(0, 1, (5, 3, 8, 8)))
    np.testing.assert_array_equal(p[STAIN], 0.25)
    np.testing.assert_array_equal(p[LESION], 0.5)


def test_input_norm_standardizes_channels():
    model = make_dual_head_model(small_config(), 0)
    x = np.random.default_rng(1).uniform(0.2, 0.9, (20, 3, 8, 8))
    model.fit_input_norm(x)
    z = T.channel_affine(Tensor(x), model.input_shift, model.input_scale).data
    np.testing.assert_allclose(z.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=(0, 2, 3)), 1.0, atol=1e-12)
    off = make_dual_head_model(small_config(input_norm=False), 0)
    off.fit_input_norm(x)
    assert not off.input_shift.any() and (off.input_scale == 1).all()


def _trained_like(seed=0):
    model = make_dual_head_model(small_config(dropout_rate=0.3), seed)
    x = np.random.default_rng(seed).uniform(0, 1, (16, 3, 8, 8))
    return model, x


def test_mc_predict_deterministic_given_seed():
    model, x = _trained_like()
    a = mc_predict(model, x, 10, seed=3)
    b = mc_predict(model, x, 10, seed=3)
    c = mc_predict(model, x, 10, seed=4)
    assert np.array_equal(a[0].mean_probs, b[0].mean_probs)
    assert not np.array_equal(a[0].mean_probs, c[0].mean_probs)


def test_mc_predict_uncertainty_definition():
    model, x = _trained_like()
    les, st = mc_predict(model, x, 7, seed=0)
    np.testing.assert_allclose(st.uncertainty, st.var_probs.mean(axis=1))
    np.testing.assert_allclose(st.mean_probs.sum(axis=1), 1.0, atol=1e-12)
    assert les.T == 7 and st.mean_uncertainty == pytest.approx(st.uncertainty.mean())


def test_mc_predict_single_pass_and_zero_rate_have_zero_variance():
    model, x = _trained_like()
    les, _ = mc_predict(model, x, 1, seed=0)
    assert not les.uncertainty.any()
    model0 = make_dual_head_model(small_config(dropout_rate=0.0), 0)
    les0, st0 = mc_predict(model0, x, 20, seed=0)
    assert not les0.uncertainty.any() and not st0.uncertainty.any()
    assert not st0.var_probs.any()


def test_mc_predict_rejects_bad_T():
    model, x = _trained_like()
    with pytest.raises(UsageError):
        mc_predict(model, x, 0)


def test_mc_predict_leaves_dropout_state_untouched():
    model, x = _trained_like()
    modes = [d.mode for d in model.dropout_layers()]
    state = [d.rng.bit_generator.state for d in model.dropout_layers()]
    mc_predict(model, x, 5, seed=1)
    assert [d.mode for d in model.dropout_layers()] == modes
    assert [d.rng.bit_generator.state for d in model.dropout_layers()] == state


def test_mc_mean_converges_with_T():
    model, x = _trained_like(2)
    a = mc_predict(model, x[:4], 500, seed=0)[1].mean_probs
    b = mc_predict(model, x[:4], 5000, seed=1)[1].mean_probs
    assert np.abs(a - b).max() < 0.02


def test_checkpoint_round_trip(tmp_path):
    model, x = _trained_like()
    model.fit_input_norm(x)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.config == model.config and loaded.head_names == model.head_names
    for name, arr in model.state_dict().items():
        assert np.array_equal(arr, loaded.state_dict()[name])
    p1, p2 = predict_probs(model, x), predict_probs(loaded, x)
    assert np.array_equal(p1[LESION], p2[LESION])


def test_checkpoint_layout(tmp_path):
    import json
    import struct

    model = make_stain_only_model(small_config(), 0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    blob = path.read_bytes()
    assert blob[:4] == b"SPCK"
    (hlen,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8:8 + hlen])
    n_values = sum(int(np.prod(t["shape"])) for t in header["tensors"])
    assert len(blob) == 8 + hlen + 8 * n_values
    first = header["tensors"][0]
    arr = np.frombuffer(blob, "<f8", count=int(np.prod(first["shape"])), offset=8 + hlen + first["offset"])
    assert np.array_equal(arr.reshape(first["shape"]), model.state_dict()[first["name"]])


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"XXXX" + b"\0" * 8)
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_zero_heads_give_zero_logits_and_disabled_dropout_is_repeatable():
    model = make_dual_head_model(small_config(), 0)
    for name in model.head_names:
        for p in model.head_parameters(name):
            p.data = np.zeros_like(p.data)
    x = Tensor(np.random.default_rng(0).uniform(0, 1, (3, 3, 8, 8)))
    model.set_dropout("disabled")
    les, st = model(x)
    assert not les.data.any() and not st.data.any()
    model = make_dual_head_model(small_config(), 1)
    model.set_dropout("disabled")
    assert np.array_equal(model(x)[1].data, model(x)[1].data)


def test_zero_rate_mc_mean_equals_deterministic_softmax():
    model = make_dual_head_model(small_config(dropout_rate=0.0), 2)
    x = np.random.default_rng(1).uniform(0, 1, (6, 3, 8, 8))
    _, st = mc_predict(model, x, 10, seed=0)
    np.testing.assert_array_equal(st.mean_probs, predict_probs(model, x)[STAIN])


def test_stain_output_init_override():
    model = make_dual_head_model(small_config(head_output_init="zero", stain_output_init="glorot"), 0)
    assert not model.heads[LESION][-1].weight.data.any()
    assert model.heads[STAIN][-1].weight.data.any()
    ref = make_dual_head_model(small_config(head_output_init="glorot"), 0)
    assert np.array_equal(model.heads[STAIN][-1].weight.data, ref.heads[STAIN][-1].weight.data)
    with pytest.raises(ConfigError):
        TrunkConfig(stain_output_init="ones")


def test_heads_do_not_interact():
    model = make_dual_head_model(small_config(), 3)
    model.set_dropout("disabled")
    x = Tensor(np.random.default_rng(2).uniform(0, 1, (4, 3, 8, 8)))
    les, st = (a.data.copy() for a in model(x))
    for p in model.head_parameters(LESION):
        p.data = p.data + 0.5
    les_moved = model(x)[0].data.copy()
    assert not np.array_equal(les_moved, les)
    assert np.array_equal(model(x)[1].data, st)
    for p in model.head_parameters(STAIN):
        p.data = p.data - 0.5
    assert np.array_equal(model(x)[0].data, les_moved)
