import numpy as np
import pytest

from gpda import autodiff as ad
from gpda.autodiff import ShapeError, Tensor
from gpda.graph import LabelGraph, NodeLabels, build_adjacency
from gpda.models import (
    GcnHead,
    MlpStack,
    ModelSpec,
    classify,
    discriminate,
    feature_extract,
    gcn_forward,
    init_params,
    load_checkpoint,
    read_weights,
    save_checkpoint,
)

from conftest import central_difference, max_rel_error


def identity_mlp(d):
    m = MlpStack((d, d))
    m.weights[0].values = np.eye(d)
    return m


def identity_gcn(d, layers=1):
    g = GcnHead((d,) * (layers + 1))
    for f in g.filters:
        f.values = np.eye(d)
    return g


class TestFeatureExtract:
    def test_zero_network(self, rng):
        out = feature_extract(MlpStack((3, 5, 4)), rng.standard_normal((6, 3)))
        assert np.all(out.values == 0)

    def test_identity_layer(self, rng):
        x = rng.standard_normal((5, 3))
        np.testing.assert_array_equal(feature_extract(identity_mlp(3), x).values, x)

    def test_row_permutation(self, rng):
        e = MlpStack((3, 8, 4), rng)
        x = rng.standard_normal((7, 3))
        perm = rng.permutation(7)
        np.testing.assert_allclose(feature_extract(e, x[perm]).values, feature_extract(e, x).values[perm], atol=1e-14)

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            feature_extract(MlpStack((3, 4)), np.zeros((2, 5)))


class TestGcn:
    def test_identity_graph_and_filter(self, rng):
        x = rng.standard_normal((4, 3))
        two = gcn_forward(identity_gcn(3, layers=2), Tensor(x), LabelGraph.identity(4))
        assert np.array_equal(two.values, np.maximum(x, 0))
        single = gcn_forward(identity_gcn(3), Tensor(x), LabelGraph.identity(4))
        assert np.array_equal(single.values, x)

    def test_two_same_class_nodes(self):
        x = np.array([[3.0, -1.0], [0.0, 6.0]])
        g = build_adjacency(NodeLabels.ground_truth([0, 0], 2))
        out = gcn_forward(identity_gcn(2), Tensor(x), g).values
        np.testing.assert_allclose(out[0], 2 / 3 * x[0] + 1 / 3 * x[1], atol=1e-15)
        np.testing.assert_allclose(out[1], 1 / 3 * x[0] + 2 / 3 * x[1], atol=1e-15)

    def test_matches_dense_formula(self, rng):
        for _ in range(20):
            n = int(rng.integers(1, 10))
            y = np.eye(3)[rng.integers(0, 3, n)]
            x = rng.standard_normal((n, 4))
            head = GcnHead((4, 5), rng)
            a = y @ y.T + np.eye(n)
            d = np.diag(a.sum(1) ** -0.5)
            expected = d @ a @ d @ x @ head.filters[0].values
            got = gcn_forward(head, Tensor(x), build_adjacency(NodeLabels.ground_truth(y.argmax(1), 3)))
            np.testing.assert_allclose(got.values, expected, atol=1e-12, rtol=0)

    def test_permutation_equivariance(self, rng):
        head = GcnHead((4, 6, 3), rng)
        lab = np.eye(3)[rng.integers(0, 3, 8)]
        x = rng.standard_normal((8, 4))
        perm = rng.permutation(8)
        base = gcn_forward(head, Tensor(x), build_adjacency(NodeLabels(lab, np.zeros(8, np.int8)))).values
        permuted = gcn_forward(
            head, Tensor(x[perm]), build_adjacency(NodeLabels(lab[perm], np.zeros(8, np.int8)))
        ).values
        np.testing.assert_allclose(permuted, base[perm], atol=1e-12)

    def test_node_count_mismatch(self):
        with pytest.raises(ShapeError):
            gcn_forward(identity_gcn(2), Tensor(np.zeros((3, 2))), LabelGraph.identity(2))

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            gcn_forward(identity_gcn(2), Tensor(np.zeros((2, 3))), LabelGraph.identity(2))


class TestClassify:
    def test_zero_parameters_uniform(self):
        logits = classify(MlpStack((4, 5)), Tensor(np.ones((3, 4))))
        np.testing.assert_allclose(ad.softmax(logits.values), 0.2)

    def test_empty_batch(self):
        assert classify(MlpStack((4, 5)), Tensor(np.zeros((0, 4)))).shape == (0, 5)

    def test_gradients(self, rng):
        f = MlpStack((3, 6, 4), rng)
        feats = Tensor(rng.uniform(-1, 1, (5, 3)))
        y = np.eye(4)[rng.integers(0, 4, 5)]
        loss = lambda: ad.softmax_cross_entropy(classify(f, feats), y)
        ad.backward(loss())
        for p in f.parameters():
            assert max_rel_error(p.grad, central_difference(lambda: loss().item(), p)) < 1e-4

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            classify(MlpStack((4, 2)), Tensor(np.zeros((1, 3))))


class TestDiscriminate:
    def test_zero_parameters_half(self, rng):
        out = discriminate(MlpStack((3, 4, 1)), Tensor(rng.standard_normal((5, 3))), 1.0)
        np.testing.assert_array_equal(out.values, 0.5)

    def test_no_adversarial_gradient_at_zero_coefficient(self, rng):
        e = MlpStack((2, 3), rng)
        d = MlpStack((3, 4, 1), rng)
        probs = discriminate(d, feature_extract(e, rng.standard_normal((4, 2))), 0.0)
        ad.backward(ad.total(probs))
        assert all(np.all(p.grad == 0) for p in e.parameters())
        assert any(np.any(p.grad != 0) for p in d.parameters())

    def test_strictly_inside_unit_interval(self, rng):
        d = MlpStack((2, 1), rng)
        d.weights[0].values[:] = 1e6
        out = discriminate(d, Tensor(np.array([[1e3, 1e3], [-1e3, -1e3]])), 1.0).values
        assert np.all(out > 0) and np.all(out < 1)

    def test_forward_invariant_to_coefficient(self, rng):
        d = MlpStack((3, 4, 1), rng)
        x = Tensor(rng.standard_normal((5, 3)))
        assert np.array_equal(discriminate(d, x, 0.0).values, discriminate(d, x, 0.9).values)


class TestInit:
    def test_same_seed(self):
        a = init_params(ModelSpec(2, 4), 3).state_dict()
        b = init_params(ModelSpec(2, 4), 3).state_dict()
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_different_seed(self):
        a = init_params(ModelSpec(2, 4), 3).state_dict()
        b = init_params(ModelSpec(2, 4), 4).state_dict()
        assert any(not np.array_equal(a[k], b[k]) for k in a)

    def test_biases_zero_and_bounds(self):
        m = init_params(ModelSpec(2, 4), 0)
        w = m.extractor.weights[0].values
        assert np.all(np.abs(w) <= np.sqrt(6 / (2 + 128)))
        assert all(np.all(b.values == 0) for b in m.extractor.biases)

    def test_weight_mean_statistics(self):
        # uniform(-a, a): mean 0, sd a / sqrt(3); 10k draws.
        w = MlpStack((100, 100), np.random.default_rng(0)).weights[0].values.ravel()
        a = np.sqrt(6 / 200)
        sigma = a / np.sqrt(3) / np.sqrt(w.size)
        assert abs(w.mean()) < 3 * sigma

    def test_default_architecture(self):
        m = init_params(ModelSpec(2, 6), 0)
        assert m.extractor.sizes == (2, 128, 64)
        assert m.gcn.sizes == (64, 64, 64)
        assert m.source_classifier.sizes == (64, 6)
        assert m.discriminator.sizes == (64, 32, 1)


def test_checkpoint_round_trip(tmp_path, rng):
    m = init_params(ModelSpec(3, 4, (8, 5), (5, 5), (4,)), 11)
    m.fit_input_scaling(rng.standard_normal((10, 3)))
    save_checkpoint(m, tmp_path)
    back = load_checkpoint(tmp_path)
    a, b = m.state_dict(), back.state_dict()
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
    np.testing.assert_array_equal(back.input_mean, m.input_mean)
    raw = (tmp_path / "weights.bin").read_bytes()
    assert int.from_bytes(raw[:4], "little") == len(a) + 2


def test_truncated_checkpoint(tmp_path):
    save_checkpoint(init_params(ModelSpec(2, 2, (4,), (4, 4), (2,)), 0), tmp_path)
    path = tmp_path / "weights.bin"
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ValueError, match="truncated"):
        read_weights(path)
