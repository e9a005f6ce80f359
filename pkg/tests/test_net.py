import numpy as np
import pytest

from codanets import tensor as tn
from codanets.dau import DauBank
from codanets.data import LabeledImageSet
from codanets.decomposition import explicit_global_matrix, layer_matrix
from codanets.errors import ConfigurationError, ContractError, DimensionError, TrainingError
from codanets.net import (
    CodaConvLayer, NetConfig, PatchEmbedding, SixChannel, StemBlock, build_coda_net, build_hybrid,
    loss, one_hot, uniform_prior_bias,
)
from codanets.training import TrainConfig, accuracy, train

from conftest import numeric_grad, rel_err

TINY = NetConfig(in_channels=1, num_classes=2, widths=(3,), strides=(2,), ranks=(2, 2), embed_channels=3,
                 stem_widths=(3,), stem_strides=(1,))


def tiny_net(kind="L2", encoding="six", stem=0, seed=0, **kw):
    cfg = NetConfig(**{**TINY.__dict__, "kind": kind, "encoding": encoding, **kw})
    if stem:
        return build_hybrid(stem, 2, cfg, seed=seed)
    return build_coda_net(cfg, seed=seed)


def randomise_bias(net, rng, scale=0.3):
    for layer in net.layers:
        if layer.bank.b is not None:
            layer.bank.b.data = rng.normal(size=layer.bank.b.shape) * scale


# -- layers ------------------------------------------------------------------------------------------------
def test_pointwise_identity_layer_gives_pixel_norm():
    c = 3
    bank = DauBank(np.tile(np.eye(c)[None], (c, 1, 1)), np.eye(c), np.zeros((c, c)), "L2")
    layer = CodaConvLayer(c, c, kernel=1, bank=bank)
    rng = np.random.default_rng(0)
    x = rng.uniform(0.1, 1.0, size=(c, 4, 4))
    out = layer.forward(x).data[0]
    # each pixel vector is an eigenvector of AB = I, so every unit attains the bound
    assert np.allclose(out, np.linalg.norm(x, axis=0)[None].repeat(c, axis=0))


@pytest.mark.parametrize("kind", ["L2", "SQ", "WB"])
def test_zero_input_gives_zero_output(kind):
    layer = CodaConvLayer(2, 4, 3, 1, 1, rank=3, kind=kind, rng=0)
    assert np.array_equal(layer.forward(np.zeros((2, 5, 5))).data, np.zeros((1, 4, 5, 5)))


@pytest.mark.parametrize("kind", ["L2", "SQ", "WB"])
@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1)])
def test_layer_equals_assembled_matrix(kind, stride, padding, rng):
    layer = CodaConvLayer(2, 3, 2, stride, padding, rank=3, kind=kind, rng=rng)
    if layer.bank.b is not None:
        layer.bank.b.data = rng.normal(size=layer.bank.b.shape)
    x = rng.normal(size=(2, 4, 4))
    M = layer_matrix(layer, x)
    out = layer.forward(x).data[0]
    assert np.abs(M @ x.reshape(-1) - out.reshape(-1)).max() <= 1e-6


def test_layer_outputs_are_bounded_by_patch_norm(rng):
    for kind in ("L2", "SQ", "WB"):
        layer = CodaConvLayer(3, 5, 3, 2, 1, rank=4, kind=kind, rng=rng)
        x = rng.normal(size=(2, 3, 7, 7)) * 10
        out = layer.forward(x).data
        patch_norms = np.linalg.norm(tn.unfold_array(x, (3, 3), 2, 1), axis=1)
        assert (np.abs(out.reshape(2, 5, -1)) <= patch_norms[:, None] * (1 + 1e-9)).all()


def test_layer_shape_errors():
    layer = CodaConvLayer(2, 3, 3)
    with pytest.raises(DimensionError):
        layer.forward(np.zeros((3, 5, 5)))
    with pytest.raises(DimensionError):
        layer.forward(np.zeros((2, 2, 2)))
    with pytest.raises(ConfigurationError):
        CodaConvLayer(2, 3, 3, stride=0)


def test_stem_block_is_relu_conv(rng):
    block = StemBlock(2, 3, 3, 1, 1, rng=rng)
    x = rng.normal(size=(2, 5, 5))
    out = block.forward(x).data[0]
    M = layer_matrix(block, x)
    assert np.allclose(M @ x.reshape(-1), out.reshape(-1))
    assert (out >= 0).all()


# -- encodings -----------------------------------------------------------------------------------------------
def test_six_channel_encoding(rng):
    x = rng.uniform(size=(2, 3, 4, 4))
    e = SixChannel(3).forward(x).data
    assert e.shape == (2, 6, 4, 4)
    assert np.array_equal(e[:, :3] + e[:, 3:], np.ones((2, 3, 4, 4)))
    assert np.allclose(e.sum(axis=1), 3.0)


def test_patch_embedding_running_statistics(rng):
    emb = PatchEmbedding(1, 4, rng=rng)
    x = rng.uniform(size=(8, 1, 6, 6))
    before = emb.running_mean.copy()
    train_out = emb.forward(x, training=True).data
    assert not np.array_equal(emb.running_mean, before)
    assert np.allclose(train_out.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
    frozen = emb.running_mean.copy()
    a = emb.forward(x, training=False).data
    b = emb.forward(x, training=False).data
    assert np.array_equal(a, b) and np.array_equal(emb.running_mean, frozen)


# -- networks ------------------------------------------------------------------------------------------------
def test_zero_image_gives_finite_logits():
    net = build_coda_net(seed=0)
    logits = net.forward(np.zeros((1, 28, 28))).data
    assert np.isfinite(logits).all() and logits.shape == (1, 3)
    # bound: |pooled| <= sum of patch norms of the encoded input chained through layers
    assert (np.abs(logits - net.output_bias) * net.temperature <= 28 * 28 * 3 * np.sqrt(2) * 10).all()


def test_temperature_scaling_is_exact(rng):
    net = tiny_net()
    x = rng.uniform(size=(2, 1, 6, 6))
    z1 = net.forward(x).data - net.output_bias
    net.temperature *= 2
    z2 = net.forward(x).data - net.output_bias
    assert np.allclose(z2, z1 / 2, rtol=1e-14, atol=0)
    assert np.allclose(z2 * net.temperature, z1 * net.temperature / 2)


@pytest.mark.parametrize("kind", ["L2", "SQ", "WB"])
@pytest.mark.parametrize("encoding", ["six", "embed"])
def test_logits_collapse_to_explicit_linear_map(kind, encoding, rng):
    net = tiny_net(kind, encoding, seed=3)
    randomise_bias(net, rng)
    x = rng.uniform(size=(1, 6, 6))
    a0 = net.activations(x)[0]
    M = explicit_global_matrix(net, x, 0)
    lhs = net.forward(x).data[0] - net.output_bias
    rhs = M @ a0.reshape(-1) / net.temperature
    assert rel_err(lhs, rhs) <= 1e-5


def test_wrong_input_shape():
    net = tiny_net()
    with pytest.raises(DimensionError):
        net.forward(np.zeros((2, 6, 6)))
    with pytest.raises(DimensionError):
        net.forward(np.zeros(36))


def test_uniform_prior_bias():
    b = uniform_prior_bias(4)
    assert np.allclose(1 / (1 + np.exp(-b)), 0.25)


def test_build_hybrid_shapes():
    pure = build_hybrid(0, 3, seed=0)
    assert pure.stem == [] and len(pure.layers) == 3
    hybrid = build_hybrid(2, 2, seed=0)
    assert len(hybrid.stem) == 2 and len(hybrid.layers) == 2 and hybrid.num_depths == 5
    with pytest.raises(ContractError):
        build_hybrid(0, 0)


def test_network_config_round_trip():
    net = build_hybrid(1, 2, NetConfig(encoding="embed", kind="WB"), seed=0)
    cfg = net.config()
    assert cfg["encoding"]["type"] == "embed" and len(cfg["stem"]) == 1
    assert all(layer["kind"] == "WB" for layer in cfg["layers"])


# -- loss ------------------------------------------------------------------------------------------------------
def test_loss_at_uniform_prior():
    k = 3
    net = build_coda_net(seed=0, temperature=1e15)
    x = np.random.default_rng(0).uniform(size=(1, 1, 28, 28))
    value = loss(net, x, one_hot([1], k)).item()
    assert value == pytest.approx(-np.log(1 / k) - (k - 1) * np.log(1 - 1 / k), rel=1e-9)


def test_loss_saturation_limit():
    k = 4
    b0 = uniform_prior_bias(k)
    z = b0.copy()
    z[2] = 40.0
    value = tn.bce_with_logits(z[None], one_hot([2], k)).sum().item()
    assert value == pytest.approx(-(k - 1) * np.log(1 - 1 / k), rel=1e-9)


def test_loss_rejects_non_one_hot():
    net = tiny_net()
    x = np.zeros((1, 1, 6, 6))
    with pytest.raises(ContractError):
        loss(net, x, np.array([[0.5, 0.5]]))
    with pytest.raises(ContractError):
        loss(net, x, np.array([[1.0, 1.0]]))


@pytest.mark.parametrize("kind", ["L2", "SQ", "WB"])
@pytest.mark.parametrize("encoding,stem", [("six", 0), ("embed", 0), ("six", 1)])
def test_loss_gradients_match_finite_differences(kind, encoding, stem):
    rng = np.random.default_rng(11)
    net = tiny_net(kind, encoding, stem=stem, seed=2)
    randomise_bias(net, rng)
    net.train()
    x = rng.uniform(size=(3, 1, 6, 6))
    y = one_hot([0, 1, 1], 2)
    net.temperature = 0.5
    params = net.named_parameters()
    emb = getattr(net.encoding, "running_mean", None)

    def value():
        if emb is not None:
            net.encoding.running_mean[:] = 0.0
            net.encoding.running_var[:] = 1.0
        return loss(net, x, y)

    net.zero_grad()
    value().backward()
    for name, p in params.items():
        analytic = p.grad.copy()
        original = p.data.copy()

        def f(v):
            p.data = v
            out = value().item()
            p.data = original
            return out

        fd = numeric_grad(f, original)
        # a bias feeding batch standardisation has an exactly zero gradient
        assert rel_err(analytic, fd) <= 1e-4 or np.abs(analytic - fd).max() <= 1e-9, name


# -- training --------------------------------------------------------------------------------------------------
def toy_set(rng, n=24, size=6):
    labels = np.arange(n) % 2
    images = rng.uniform(0, 0.2, size=(n, 1, size, size))
    images[labels == 1, :, :size // 2] += 0.7
    return LabeledImageSet(images, labels, 2)


def test_lr_zero_leaves_parameters_bit_identical(rng):
    net = tiny_net("SQ", "embed", seed=1)
    before = {k: v.data.copy() for k, v in net.named_parameters().items()}
    for opt in ("sgd", "adam"):
        train(net, toy_set(rng), TrainConfig(optimizer=opt, lr=0.0, epochs=2, batch_size=8))
        for k, v in net.named_parameters().items():
            assert np.array_equal(v.data, before[k]), (opt, k)


def test_training_is_deterministic(rng):
    data = toy_set(rng)
    runs = []
    for _ in range(2):
        net = tiny_net("WB", seed=4)
        _, hist = train(net, data, TrainConfig(epochs=3, batch_size=8, seed=5, lr=1e-2))
        runs.append((hist, net.layers[0].bank.A.data.copy()))
    assert runs[0][0] == runs[1][0]
    assert np.array_equal(runs[0][1], runs[1][1])


def test_training_learns_toy_problem(rng):
    data = toy_set(rng, n=64)
    net = tiny_net("L2", seed=0, temperature=1.0)
    start = accuracy(net, data.images, data.labels)
    _, hist = train(net, data, TrainConfig(epochs=15, batch_size=16, lr=1e-2))
    assert hist[-1]["accuracy"] >= 0.95 and hist[-1]["loss"] < hist[0]["loss"]
    assert len(hist) == 15 and start <= 1.0


def test_training_errors(rng):
    net = tiny_net()
    empty = LabeledImageSet(np.zeros((0, 1, 6, 6)), np.zeros(0, dtype=int), 2)
    with pytest.raises(ContractError):
        train(net, empty, TrainConfig(epochs=1))
    with pytest.raises(TrainingError), np.errstate(invalid="ignore"):
        train(net, toy_set(rng), TrainConfig(epochs=1, lr=float("nan"), optimizer="sgd"), epochs=2)
