"""Shape propagation, parameter counting, training, gradients, checkpoints."""

import numpy as np
import pytest

from neurolgp import data
from neurolgp.genome import TensorShape, decode, from_text
from neurolgp import nn

SHAPE16 = TensorShape(16, 16, 1)


def arch_of(text, shape=SHAPE16, classes=3):
    return decode(from_text(text), shape, classes)


# --------------------------------------------------------------------------
# shapes and parameter counts


def test_conv_preserves_spatial_dims():
    arch = arch_of("r[0] := Conv8k3(r[1])")
    assert nn.propagate_shape(arch) == [TensorShape(16, 16, 8)]


def test_pool_chain_shrinks_then_exhausts():
    arch = arch_of("r[0] := Conv8k3(r[1])\nr[0] := MaxPool3(r[0])\nr[0] := MaxPool3(r[0])")
    shapes = nn.propagate_shape(arch)
    assert (shapes[1].height, shapes[2].height) == (5, 1)
    broken = arch_of(
        "r[0] := Conv8k3(r[1])\nr[0] := MaxPool3(r[0])\n"
        "r[0] := MaxPool3(r[0])\nr[0] := MaxPool3(r[0])"
    )
    with pytest.raises(nn.ShapeExhausted):
        nn.propagate_shape(broken)


def test_example_chain_compiles_at_full_resolution():
    arch = arch_of(
        "r[0] := Conv(r[1])\nr[5] := MaxPool(r[0])\nr[11] := BatchNorm(r[5])\nr[0] := Dense(r[11])",
        shape=TensorShape(64, 64, 3),
        classes=2,
    )
    net = nn.compile_network(arch)
    assert net.param_count == nn.param_count(arch)


def test_dense_width_resolution():
    assert nn.dense_width(512) == 64
    assert nn.dense_width(8) == 16  # clamped up
    assert nn.dense_width(100_000) == 128  # clamped down


def test_param_count_conv_formula():
    arch = arch_of("r[0] := Conv8k3(r[1])", shape=TensorShape(8, 8, 3))
    # conv: 8 * (3*3*3 + 1) = 224; head: 3 * (8*8*8 + 1)
    assert nn.param_count(arch) == 224 + 3 * (8 * 8 * 8 + 1)


def test_param_count_pool_and_dropout_free():
    base = arch_of("r[0] := Conv8k3(r[1])\nr[0] := Dense(r[0])")
    with_extras = arch_of(
        "r[0] := Conv8k3(r[1])\nr[0] := MaxPool2(r[0])\nr[0] := Dropout25(r[0])\nr[0] := Dense(r[0])"
    )
    # pooling changes the flatten size, so compare a pool-free pair instead
    plain = arch_of("r[0] := Conv8k3(r[1])\nr[0] := Dense(r[0])")
    dropped = arch_of("r[0] := Conv8k3(r[1])\nr[0] := Dropout50(r[0])\nr[0] := Dense(r[0])")
    assert nn.param_count(plain) == nn.param_count(dropped)
    assert nn.param_count(with_extras) < nn.param_count(base)


def test_param_count_batchnorm_contribution():
    without = arch_of("r[0] := Conv16k3(r[1])\nr[0] := Dense(r[0])")
    with_bn = arch_of("r[0] := Conv16k3(r[1])\nr[0] := BatchNorm(r[0])\nr[0] := Dense(r[0])")
    assert nn.param_count(with_bn) - nn.param_count(without) == 2 * 16


def test_param_count_additive_over_layers():
    arch = arch_of("r[0] := Conv8k3(r[1])\nr[0] := MaxPool2(r[0])\nr[0] := Dense(r[0])")
    per_layer = []
    cur = arch.input_shape
    total = 0
    for op, out in zip(arch.layers, nn.propagate_shape(arch)):
        partial = nn.param_count(
            type(arch)(layers=arch.layers[: len(per_layer) + 1], input_shape=arch.input_shape,
                       num_classes=arch.num_classes)
        )
        per_layer.append(partial)
        cur = out
        total = partial
    assert total == nn.param_count(arch)


# --------------------------------------------------------------------------
# gradients


def _micro_setup(seed=0):
    arch = arch_of(
        "r[0] := Conv8k3(r[1])\n"
        "r[0] := MaxPool2(r[0])\n"
        "r[0] := BatchNorm(r[0])\n"
        "r[0] := Dropout25(r[0])\n"
        "r[0] := Dense(r[0])",
        shape=TensorShape(4, 4, 1),
        classes=2,
    )
    net = nn.compile_network(arch)
    net.init_params(np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    x = rng.random((3, 4, 4, 1))
    y = np.array([0, 1, 0])
    return net, x, y


def _loss(net, x, y):
    # a fresh generator per call keeps the dropout masks identical
    logits = net.forward(x, training=True, rng=np.random.default_rng(1234))
    return nn.cross_entropy_and_grad(logits, y)[0]


def test_gradients_match_finite_differences():
    net, x, y = _micro_setup()
    logits = net.forward(x, training=True, rng=np.random.default_rng(1234))
    # guard the finite-difference validity: no pre-activation near a ReLU kink
    margins = [np.abs(l._cache[0] @ l.weights["w"] + l.weights["b"]).min()
               for l in net.layers if isinstance(l, nn._ConvLayer)]
    assert min(margins) > 1e-4
    _, dlogits = nn.cross_entropy_and_grad(logits, y)
    net.backward(dlogits)
    analytic = {
        (i, k): layer.grads[k].copy()
        for i, layer in enumerate(net.layers)
        for k in layer.weights
    }
    h = 1e-6
    for (i, k), grad in analytic.items():
        w = net.layers[i].weights[k]
        flat = w.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = _loss(net, x, y)
            flat[j] = orig - h
            down = _loss(net, x, y)
            flat[j] = orig
            fd = (up - down) / (2 * h)
            an = grad.ravel()[j]
            if abs(fd - an) < 1e-8:  # below the h^2 noise floor (dead units)
                continue
            rel = abs(fd - an) / (abs(fd) + abs(an))
            assert rel < 1e-5, f"layer {i} param {k}[{j}]: fd={fd}, analytic={an}"


# --------------------------------------------------------------------------
# training behaviour


@pytest.fixture(scope="module")
def toy_dataset():
    return data.generate(
        data.DataConfig(n_images=120, n_classes=2, class_weights=(1, 1), noise=0.0, seed=5)
    )


def test_minimal_net_learns_separable_toy(toy_dataset):
    arch = arch_of("r[0] := Conv8k3(r[1])\nr[0] := Dense(r[0])", classes=2)
    model = nn.train(arch, toy_dataset, 30, seed=[0, 1])
    assert model.history[-1]["train_acc"] >= 0.9


def test_training_is_bit_deterministic(toy_dataset):
    arch = arch_of("r[0] := Conv8k3(r[1])\nr[0] := MaxPool2(r[0])\nr[0] := Dense(r[0])", classes=2)
    m1 = nn.train(arch, toy_dataset, 3, seed=[7, 7])
    m2 = nn.train(arch, toy_dataset, 3, seed=[7, 7])
    for l1, l2 in zip(m1.network.layers, m2.network.layers):
        for k in l1.weights:
            assert np.array_equal(l1.weights[k], l2.weights[k])
    assert m1.history == m2.history


def test_warm_start_equals_uninterrupted(toy_dataset):
    arch = arch_of(
        "r[0] := Conv8k3(r[1])\nr[0] := BatchNorm(r[0])\nr[0] := Dropout25(r[0])\nr[0] := Dense(r[0])",
        classes=2,
    )
    part = nn.train(arch, toy_dataset, 4, seed=[3, 9])
    cont = nn.train(arch, toy_dataset, 6, seed=[3, 9], start=part)
    full = nn.train(arch, toy_dataset, 10, seed=[3, 9])
    for l1, l2 in zip(cont.network.layers, full.network.layers):
        for k in l1.weights:
            assert np.array_equal(l1.weights[k], l2.weights[k])
    assert cont.history == full.history


def test_evaluation_idempotent_and_phenotype_shape(toy_dataset):
    arch = arch_of("r[0] := Conv8k3(r[1])\nr[0] := Dense(r[0])", classes=2)
    model = nn.train(arch, toy_dataset, 2, seed=[0, 2])
    e1 = nn.evaluate(model, toy_dataset)
    e2 = nn.evaluate(model, toy_dataset)
    assert e1.fitness == e2.fitness
    assert np.array_equal(e1.phenotype, e2.phenotype)  # running stats, no drift
    n_val = len(toy_dataset.splits["validation"])
    assert e1.phenotype.shape == (n_val * 2,)
    rows = e1.phenotype.reshape(n_val, 2)
    assert np.allclose(rows.sum(axis=1), 1.0, atol=1e-6)


def test_accuracy_matches_bruteforce_recount(toy_dataset):
    arch = arch_of("r[0] := Conv8k3(r[1])\nr[0] := Dense(r[0])", classes=2)
    model = nn.train(arch, toy_dataset, 3, seed=[0, 3])
    x, y = toy_dataset.split_arrays("test1")
    probs = model.network.predict_proba(x)
    manual = sum(int(np.argmax(p) == t) for p, t in zip(probs, y)) / len(y)
    assert nn.evaluate(model, toy_dataset).fitness == manual


def test_conv_after_dense_trains_on_flat_input(toy_dataset):
    # a dense layer mid-chain flattens; downstream convs act on the 1x1xW map
    arch = arch_of(
        "r[0] := Conv8k3(r[1])\nr[0] := Dense(r[0])\nr[0] := Conv8k3(r[0])\nr[0] := Dense(r[0])",
        classes=2,
    )
    shapes = nn.propagate_shape(arch)
    assert (shapes[1].height, shapes[1].width) == (1, 1)
    model = nn.train(arch, toy_dataset, 2, seed=[8, 1])
    ev = nn.evaluate(model, toy_dataset)
    assert 0.0 <= ev.fitness <= 1.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises(toy_dataset):
    arch = arch_of("r[0] := Conv32k5(r[1])\nr[0] := Dense(r[0])", classes=2)
    with pytest.raises(nn.NumericalDivergence) as err:
        nn.train(arch, toy_dataset, 5, seed=[0, 4], cfg=nn.TrainConfig(lr=1e200))
    assert err.value.model is not None
    assert err.value.model.epochs_trained < 5


def test_checkpoint_round_trip(tmp_path, toy_dataset):
    arch = arch_of(
        "r[0] := Conv8k3(r[1])\nr[0] := BatchNorm(r[0])\nr[0] := Dense(r[0])", classes=2
    )
    model = nn.train(arch, toy_dataset, 3, seed=[5, 5])
    path = tmp_path / "model.nlgp"
    nn.save_model(model, path)
    assert path.read_bytes()[:4] == b"NLGP"
    loaded = nn.load_model(path)
    x, _ = toy_dataset.split_arrays("test1")
    assert np.array_equal(model.network.predict_proba(x), loaded.network.predict_proba(x))
    cont_orig = nn.train(arch, toy_dataset, 2, seed=[5, 5], start=model)
    cont_load = nn.train(arch, toy_dataset, 2, seed=[5, 5], start=loaded)
    assert np.array_equal(
        cont_orig.network.predict_proba(x), cont_load.network.predict_proba(x)
    )


# --------------------------------------------------------------------------
# proxy fitness


def _conv_stack(depth: int) -> str:
    lines = ["r[0] := Conv8k3(r[1])"]
    lines += ["r[0] := Conv8k3(r[0])"] * (depth - 1)
    lines.append("r[0] := Dense(r[0])")
    return "\n".join(lines)


def test_proxy_fitness_fixture_values():
    # frozen once from the scoring formula (recomputed by hand in review)
    arch = arch_of("r[0] := Conv8k3(r[1])\nr[0] := MaxPool2(r[0])\nr[0] := Dense(r[0])")
    assert nn.proxy_fitness(arch) == pytest.approx(0.6964022711289153, abs=1e-12)
    assert nn.proxy_fitness(arch_of(_conv_stack(5))) == pytest.approx(
        0.8861304983936578, abs=1e-12
    )


def test_proxy_ignores_introns():
    plain = from_text("r[0] := Conv8k3(r[1])\nr[0] := Dense(r[0])")
    with_introns = from_text(
        "r[7] := MaxPool3(r[6])\nr[0] := Conv8k3(r[1])\nr[4] := Dropout50(r[4])\nr[0] := Dense(r[0])"
    )
    f1 = nn.proxy_fitness(decode(plain, SHAPE16))
    f2 = nn.proxy_fitness(decode(with_introns, SHAPE16))
    assert f1 == f2


def test_proxy_monotone_in_conv_depth():
    values = [nn.proxy_fitness(arch_of(_conv_stack(k))) for k in range(1, 5)]
    assert all(a < b for a, b in zip(values, values[1:]))
