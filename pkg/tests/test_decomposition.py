import numpy as np
import pytest

from codanets.dau import DauBank, DauParams, dau_weight_materialize, unit_forward
from codanets.decomposition import (
    baseline_attributions, batch_contributions, effective_row, explicit_global_matrix, frozen_rows,
    single_layer_contrib, spatial_map,
)
from codanets.errors import ContractError
from codanets.net import CodaConvLayer, CodaNet, NetConfig, SixChannel, build_coda_net
from codanets.training import TrainConfig, train

from test_net import randomise_bias, tiny_net, toy_set


def test_single_layer_contrib_examples(rng):
    bank = DauBank.from_units([DauParams(np.eye(2), np.eye(2), np.zeros(2), "L2")])
    c = single_layer_contrib(bank, [3.0, 4.0], 0)
    assert np.allclose(c, [1.8, 3.2]) and c.sum() == pytest.approx(5.0)
    assert single_layer_contrib(bank, [0.0, 4.0], 0)[0] == 0.0
    for kind in ("L2", "SQ", "WB"):
        bank = DauBank.init(3, 6, 2, kind, rng=rng)
        x = rng.normal(size=6)
        for j in range(3):
            assert single_layer_contrib(bank, x, j).sum() == pytest.approx(unit_forward(bank.unit(j), x).item(),
                                                                           abs=1e-9)


@pytest.mark.parametrize("kind", ["L2", "SQ", "WB"])
def test_one_layer_net_row_is_the_unit_weight(kind, rng):
    # a single layer whose kernel covers the whole image is one DAU per class
    layer = CodaConvLayer(2, 3, kernel=4, rank=3, kind=kind, rng=rng)
    net = CodaNet(SixChannel(1), [layer], temperature=5.0)
    image = rng.uniform(size=(1, 4, 4))
    a0 = net.activations(image)[0][0]
    for j in range(3):
        dec = effective_row(net, image, j)
        w = dau_weight_materialize(layer.bank.unit(j), a0.reshape(-1))
        assert np.allclose(dec.weight_row.reshape(-1), w, atol=1e-12)


@pytest.mark.parametrize("kind", ["L2", "SQ", "WB"])
@pytest.mark.parametrize("encoding", ["six", "embed"])
def test_completeness_at_every_depth(kind, encoding, rng):
    net = tiny_net(kind, encoding, stem=1)
    randomise_bias(net, rng)
    image = rng.uniform(size=(1, 6, 6))
    for depth in range(net.num_depths):
        for j in range(net.num_classes):
            dec = effective_row(net, image, j, depth)
            assert dec.relative_error <= 1e-5
            assert dec.spatial().total() == pytest.approx(dec.contributions.sum())


@pytest.mark.parametrize("kind", ["L2", "SQ", "WB"])
def test_frozen_extraction_equals_matrix_product(kind, rng):
    net = tiny_net(kind, seed=5)
    randomise_bias(net, rng)
    image = rng.uniform(size=(1, 6, 6))
    for depth in range(net.num_depths - 1):
        M = explicit_global_matrix(net, image, depth)
        for j in range(net.num_classes):
            row = effective_row(net, image, j, depth).weight_row.reshape(-1)
            assert np.abs(row - M[j]).max() <= 1e-6


def test_depth_consistency(rng):
    net = tiny_net("SQ", stem=1, seed=2)
    image = rng.uniform(size=(1, 6, 6))
    totals = [effective_row(net, image, 1, t).contributions.sum() for t in range(net.num_depths)]
    assert np.allclose(totals, totals[0], rtol=1e-10)


def test_batch_contributions_match_single(rng):
    net = tiny_net("WB", seed=3)
    images = rng.uniform(size=(4, 1, 6, 6))
    classes = np.array([0, 1, 1, 0])
    batch = batch_contributions(net, images, classes, batch_size=3)
    for n in range(4):
        single = effective_row(net, images[n], int(classes[n])).contributions
        assert np.allclose(batch[n], single, atol=1e-12)


def test_invalid_arguments(rng):
    net = tiny_net()
    image = rng.uniform(size=(1, 6, 6))
    with pytest.raises(ContractError):
        effective_row(net, image, 5)
    with pytest.raises(ContractError):
        effective_row(net, image, 0, depth=net.num_depths)
    with pytest.raises(ContractError):
        effective_row(tiny_net(encoding="embed"), image, 0, space="pixel")
    assert effective_row(net, image, 0, space="pixel").weight_row.shape == (2, 6, 6)


def test_last_depth_is_the_pooling_map(rng):
    net = tiny_net(seed=4)
    image = rng.uniform(size=(1, 6, 6))
    dec = effective_row(net, image, 1, net.num_depths - 1)
    expected = np.zeros_like(dec.weight_row)
    expected[1] = 1.0
    assert np.array_equal(dec.weight_row, expected)


def test_spatial_map_sign_split(rng):
    net = tiny_net(seed=6)
    dec = effective_row(net, rng.uniform(size=(1, 6, 6)), 0)
    m = spatial_map(dec)
    assert np.allclose(m.positive + m.negative, m.values)
    assert (m.positive >= 0).all() and (m.negative <= 0).all()


# -- baselines --------------------------------------------------------------------------------------------
@pytest.mark.parametrize("kind", ["L2", "SQ", "WB"])
def test_frozen_ixg_equals_inherent_contributions(kind, rng):
    net = tiny_net(kind, stem=1, seed=7)
    image = rng.uniform(size=(1, 6, 6))
    for j in range(2):
        inherent = effective_row(net, image, j).spatial().values
        ixg = baseline_attributions(net, image, j, "ixg", frozen=True).values
        assert np.allclose(ixg * net.temperature, inherent, atol=1e-12)


def test_grad_of_constant_output_net_is_zero(rng):
    net = tiny_net(seed=8)
    first = net.layers[0].bank
    first.A.data = np.zeros_like(first.A.data)
    first.b.data = np.zeros_like(first.b.data)
    image = rng.uniform(size=(1, 6, 6))
    assert np.array_equal(net.forward(image).data[0], net.output_bias)
    assert np.array_equal(baseline_attributions(net, image, 0, "grad").values, np.zeros((6, 6)))


def test_grad_matches_finite_differences_in_encoded_space(rng):
    net = tiny_net("SQ", seed=9)
    image = rng.uniform(size=(1, 6, 6))
    a0 = net.activations(image)[0]
    g = baseline_attributions(net, image, 1, "grad").values
    h = 1e-6
    fd = np.zeros((6, 6))
    for i in range(6):
        for k in range(6):
            up, down = a0.copy(), a0.copy()
            up[0, :, i, k] += h
            down[0, :, i, k] -= h
            fd[i, k] = (net.logits_from(up, 0).data[0, 1] - net.logits_from(down, 0).data[0, 1]) / (2 * h)
    assert np.allclose(g, fd, atol=1e-7)


def test_occlusion_tracks_inherent_contributions():
    rng = np.random.default_rng(0)
    data = toy_set(rng, n=64, size=8)
    net = tiny_net("L2", seed=0, temperature=1.0)
    train(net, data, TrainConfig(epochs=10, batch_size=16, lr=1e-2))
    image = data.images[1]
    inherent = effective_row(net, image, 1).spatial().values
    occ = baseline_attributions(net, image, 1, "occlusion", occlusion_size=2, occlusion_stride=2).values
    # region the model ignores most versus uses most, per 2x2 block
    blocks_inh = np.abs(inherent).reshape(4, 2, 4, 2).sum(axis=(1, 3))
    blocks_occ = np.abs(occ).reshape(4, 2, 4, 2).mean(axis=(1, 3))
    low, high = np.unravel_index(blocks_inh.argmin(), (4, 4)), np.unravel_index(blocks_inh.argmax(), (4, 4))
    assert blocks_occ[low] <= blocks_occ[high]
    assert np.corrcoef(blocks_inh.ravel(), blocks_occ.ravel())[0, 1] > 0


def test_baseline_rejects_bad_parameters(rng):
    net = tiny_net()
    image = rng.uniform(size=(1, 6, 6))
    with pytest.raises(ContractError):
        baseline_attributions(net, image, 0, "lime")
    with pytest.raises(ContractError):
        baseline_attributions(net, image, 0, "occlusion", occlusion_size=0)


def test_frozen_rows_batch_shape(rng):
    net = build_coda_net(NetConfig(widths=(4,), strides=(2,), ranks=(2,)), seed=0)
    a0 = net.activations(rng.uniform(size=(3, 1, 28, 28)))[0]
    rows = frozen_rows(net, a0, [0, 1, 2], 0)
    assert rows.shape == a0.shape
    pooled = net.pooled_from(a0).data
    assert np.allclose((rows * a0).sum(axis=(1, 2, 3)), pooled[np.arange(3), [0, 1, 2]])
