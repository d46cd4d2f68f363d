import os
import sys
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__),
                                                '../..')))

import pytest
import numpy as np
from scipy.signal import correlate

from majnet.bitcore import MajParams
from majnet.bitcore import pack
from majnet.bitcore import to_bits
from majnet.bitcore import unpack
from majnet.bitcore import xnor_popcount_neuron
from majnet.bitcore import xnormaj_neuron
from majnet.binlayers import ALWAYS
from majnet.binlayers import LayerConfig
from majnet.binlayers import LayerParams
from majnet.binlayers import NetworkConfig
from majnet.binlayers import NetworkConfigError
from majnet.binlayers import bn_apply
from majnet.binlayers import conv_forward
from majnet.binlayers import derive_folding
from majnet.binlayers import fc_forward
from majnet.binlayers import fold_bn_to_threshold
from majnet.binlayers import forward_network
from majnet.binlayers import kernel_rows
from majnet.binlayers import kernel_tensor
from majnet.binlayers import layer_affine
from majnet.binlayers import maxpool_binary
from majnet.binlayers import mconv_forward
from majnet.binlayers import mfc_forward
from majnet.binlayers import predict_network
from majnet.binlayers import receptive_fields
from majnet.binlayers import threshold_activate
from majnet.binlayers import threshold_bits


def is_equal(a, b, tol=1e-9):
    return np.allclose(np.asarray(a, dtype=float), np.asarray(b, dtype=float),
                       rtol=0, atol=tol)


def random_signs(rng, shape):
    return rng.choice([-1., 1.], size=shape)


def dense_conv(values, kernel, pad):
    """ Float +-1 convolution with -1 padding, shape (Ho, Wo, cout). """
    d = kernel.shape[0]
    if pad:
        p = d // 2
        values = np.pad(values, ((p, p), (p, p), (0, 0)), constant_values=-1.)
    outputs = [correlate(values, kernel[..., o], mode='valid')[..., 0]
               for o in range(kernel.shape[3])]
    return np.stack(outputs, axis=-1)


def dense_mconv(values, kernel, pad, scale=2.25):
    """ Sum over (channel, kernel row) of clip(row dot, -1, 1) * scale. """
    d = kernel.shape[0]
    if pad:
        p = d // 2
        values = np.pad(values, ((p, p), (p, p), (0, 0)), constant_values=-1.)
    h, w, _ = values.shape
    ho, wo = h - d + 1, w - d + 1
    out = np.zeros((ho, wo, kernel.shape[3]))
    for y in range(ho):
        for x in range(wo):
            patch = values[y:y + d, x:x + d, :]
            for o in range(kernel.shape[3]):
                rows = (patch * kernel[..., o]).sum(axis=1)
                out[y, x, o] = (np.clip(rows, -1, 1) * scale).sum()
    return out


def test_conv_forward_examples():
    cfg1 = LayerConfig('conv', cin=1, cout=1, kernel=1)
    cfg3 = LayerConfig('conv', cin=1, cout=1, kernel=3)
    ones = pack(np.ones((3, 3, 1)))

    tests = [conv_forward(pack([1.], shape=(1, 1, 1)),
                          pack([1.], shape=(1, 1, 1, 1)), 0, cfg1)[0, 0, 0] == 1,
             conv_forward(ones, pack(np.ones((3, 3, 1, 1))), 0,
                          cfg3)[0, 0, 0] == 9,
             conv_forward(ones, pack(np.ones((3, 3, 1, 1))), 0,
                          cfg3).shape == (1, 1, 1)]
    assert all(tests)


@pytest.mark.parametrize('pad', [False, True])
def test_conv_forward_matches_dense(pad):
    rng = np.random.RandomState(0)
    values = random_signs(rng, (8, 8, 4))
    kernel = random_signs(rng, (3, 3, 4, 2))
    cfg = LayerConfig('conv', cin=4, cout=2, pad=pad)
    bias = np.array([1, -2])

    out = conv_forward(pack(values), pack(kernel), bias, cfg)
    expected = dense_conv(values, kernel, pad) + bias
    assert out.dtype.kind == 'i'
    assert is_equal(out, expected)


def test_mconv_forward_examples():
    rng = np.random.RandomState(1)
    cfg = LayerConfig('conv', cin=1, cout=1, majority=True)
    values = random_signs(rng, (3, 3, 1))

    same = mconv_forward(pack(values), pack(values.reshape(3, 3, 1, 1)), 0.,
                         cfg)
    opposite = mconv_forward(pack(values), pack(-values.reshape(3, 3, 1, 1)),
                             0., cfg)
    assert is_equal(same, [[[6.75]]])
    assert is_equal(opposite, [[[-6.75]]])
    with pytest.raises(ValueError):
        mconv_forward(pack(values), pack(values.reshape(3, 3, 1, 1)), 0.,
                      LayerConfig('conv', cin=1, cout=1))


@pytest.mark.parametrize('pad', [False, True])
def test_mconv_forward_matches_group_oracles(pad):
    rng = np.random.RandomState(2)
    values = random_signs(rng, (5, 5, 2))
    kernel = random_signs(rng, (3, 3, 2, 3))
    cfg = LayerConfig('conv', cin=2, cout=3, pad=pad, majority=True)
    out = mconv_forward(pack(values), pack(kernel), 0., cfg)

    assert is_equal(out, dense_mconv(values, kernel, pad))

    fields = receptive_fields((values > 0).reshape(1, 5, 5, 2), 3, pad)[0]
    rows = kernel_rows(pack(kernel))
    params = MajParams()
    for y in range(out.shape[0]):
        for x in range(out.shape[1]):
            field = pack(fields[y, x].astype(bool))
            for o in range(3):
                row = pack(rows[o].astype(bool))
                assert is_equal(out[y, x, o],
                                xnormaj_neuron(field, row, params))


def test_mconv_forward_random_layers():
    rng = np.random.RandomState(12)
    worst = 0.
    for _ in range(100):
        d = int(rng.choice([3, 5]))
        h, w = rng.randint(d, d + 3, size=2)
        cin, cout = rng.randint(1, 4), rng.randint(1, 4)
        pad = bool(rng.randint(2))
        params = MajParams(m=d, v1=rng.uniform(1, 4), v0=rng.uniform(0, 1))
        cfg = LayerConfig('conv', cin=cin, cout=cout, kernel=d, pad=pad,
                          majority=True, maj_params=params)
        values = random_signs(rng, (h, w, cin))
        kernel = random_signs(rng, (d, d, cin, cout))
        bias = rng.uniform(-2, 2, size=cout)
        out = mconv_forward(pack(values), pack(kernel), bias, cfg)

        fields = receptive_fields((values > 0).reshape(1, h, w, cin), d,
                                  pad)[0]
        rows = kernel_rows(pack(kernel))
        for y in range(out.shape[0]):
            for x in range(out.shape[1]):
                field = pack(fields[y, x].astype(bool))
                for o in range(cout):
                    expected = xnormaj_neuron(field, pack(rows[o].astype(bool)),
                                              params, bias[o])
                    worst = max(worst, abs(out[y, x, o] - expected))
    assert worst <= 1e-9


def test_negation_symmetry():
    rng = np.random.RandomState(3)
    values = pack(random_signs(rng, (6, 6, 3)))
    kernel = random_signs(rng, (3, 3, 3, 4))
    b_cfg = LayerConfig('conv', cin=3, cout=4)
    m_cfg = LayerConfig('conv', cin=3, cout=4, majority=True)

    tests = [is_equal(conv_forward(values, pack(kernel), 0, b_cfg),
                      -conv_forward(values, pack(-kernel), 0, b_cfg)),
             is_equal(mconv_forward(values, pack(kernel), 0., m_cfg),
                      -mconv_forward(values, pack(-kernel), 0., m_cfg))]
    assert all(tests)


def test_fc_forward():
    rng = np.random.RandomState(4)
    x = pack(random_signs(rng, 12))
    W = pack(unpack(x).reshape(1, 12))
    W_neg = pack(-unpack(x).reshape(1, 12))
    b_cfg = LayerConfig('fc', cin=12, cout=1)
    m_cfg = LayerConfig('fc', cin=12, cout=1, majority=True)

    tests = [fc_forward(x, W, 0, b_cfg)[0] == 12,
             fc_forward(x, W_neg, 0, b_cfg)[0] == -12,
             is_equal(mfc_forward(x, W, 0., m_cfg), [9.]),
             is_equal(mfc_forward(x, W_neg, 0., m_cfg), [-9.])]
    assert all(tests)


def test_fc_forward_matches_neurons():
    rng = np.random.RandomState(5)
    x = pack(random_signs(rng, 30))
    W = random_signs(rng, (5, 30))
    b_cfg = LayerConfig('fc', cin=30, cout=5)
    m_cfg = LayerConfig('fc', cin=30, cout=5, majority=True)
    exact = fc_forward(x, pack(W), 2, b_cfg)
    approx = mfc_forward(x, pack(W), 0.5, m_cfg)

    for o in range(5):
        row = pack(W[o])
        assert exact[o] == xnor_popcount_neuron(x, row, 2)
        assert is_equal(approx[o], xnormaj_neuron(x, row, MajParams(), 0.5))


def test_mfc_padding():
    rng = np.random.RandomState(6)
    x_bits = rng.randint(0, 2, size=10).astype(bool)
    W_bits = rng.randint(0, 2, size=(2, 10)).astype(bool)
    cfg = LayerConfig('fc', cin=10, cout=2, majority=True)
    out = mfc_forward(pack(x_bits), pack(W_bits), 0., cfg)
    padded_x = pack(np.concatenate([x_bits, [False, False]]))

    tests = [cfg.n_inputs == 12,
             cfg.n_groups == 4]
    for o in range(2):
        padded_row = pack(np.concatenate([W_bits[o], [False, False]]))
        tests.append(is_equal(out[o],
                              xnormaj_neuron(padded_x, padded_row,
                                             MajParams())))
    assert all(tests)


def test_fold_bn_examples():
    identity = fold_bn_to_threshold(1., 0., 1., 0.)
    flipped = fold_bn_to_threshold(-1., 0., 1., 0.)
    constant = fold_bn_to_threshold(0., 3., 1., 0.5)
    s = np.arange(-5, 6)[:, np.newaxis]

    tests = [int(identity.threshold[0]) == 0,
             bool(identity.ge[0]),
             int(flipped.threshold[0]) == 0,
             not flipped.ge[0],
             list(threshold_bits(s, flipped)[:, 0]) == list(s[:, 0] <= 0),
             int(constant.threshold[0]) == ALWAYS,
             threshold_bits(s, constant).all()]
    assert all(tests)
    with pytest.raises(ValueError):
        fold_bn_to_threshold(1., 0., 0., 0.)
    with pytest.raises(ValueError):
        fold_bn_to_threshold(1., 0., 1., 0., a=0.)


@pytest.mark.parametrize('majority', [False, True])
def test_fold_bn_exhaustive(majority):
    rng = np.random.RandomState(7)
    layer = LayerConfig('conv', cin=64, cout=16, majority=majority)
    a, c = layer_affine(layer)
    gamma = rng.randn(16)
    gamma[0] = 0.
    mu = rng.randn(16) * 20
    inv_std = rng.uniform(0.01, 2., size=16)
    beta = rng.randn(16)
    t = fold_bn_to_threshold(gamma, mu, inv_std, beta, a, c)

    top = layer.n_groups if majority else layer.n_inputs
    s = np.arange(top + 1)[:, np.newaxis]
    counts = np.repeat(s, 16, axis=1)
    expected = bn_apply(s, gamma, mu, inv_std, beta, a, c) >= 0
    assert np.array_equal(threshold_bits(counts, t), expected)


@pytest.mark.parametrize('majority', [False, True])
def test_fold_bn_random_sets(majority):
    rng = np.random.RandomState(13)
    layer = LayerConfig('conv', cin=64, cout=4, majority=majority)
    a, c = layer_affine(layer)
    top = layer.n_groups if majority else layer.n_inputs
    s = np.arange(top + 1)[:, np.newaxis]
    counts = np.repeat(s, 4, axis=1)
    mismatches = 0
    for _ in range(100):
        gamma = rng.randn(4)
        gamma[rng.rand(4) < 0.1] = 0.
        mu = rng.randn(4) * 20
        inv_std = rng.uniform(0.01, 2., size=4)
        beta = rng.randn(4)
        t = fold_bn_to_threshold(gamma, mu, inv_std, beta, a, c)
        expected = bn_apply(s, gamma, mu, inv_std, beta, a, c) >= 0
        mismatches += int((threshold_bits(counts, t) != expected).sum())
    assert mismatches == 0


def test_threshold_activate():
    t = fold_bn_to_threshold(1., 0., 1., 0.)
    below = fold_bn_to_threshold(1., 10., 1., 0.)
    counts = np.array([[-2], [0], [5]])

    tests = [list(to_bits(threshold_activate(counts, t))) == [0, 1, 1],
             threshold_activate(counts, t).shape == (3, 1),
             not to_bits(threshold_activate(counts, below)).any()]
    assert all(tests)
    with pytest.raises(ValueError):
        threshold_activate(np.zeros((3, 2)), t)


def test_maxpool_binary():
    rng = np.random.RandomState(8)
    one = pack(np.array([1, 0, 0, 0], dtype=bool), shape=(2, 2, 1))
    zero = pack(np.zeros(4, dtype=bool), shape=(2, 2, 1))
    values = random_signs(rng, (4, 6, 3))
    pooled = maxpool_binary(pack(values))
    oracle = values.reshape(2, 2, 3, 2, 3).max(axis=(1, 3))

    tests = [to_bits(maxpool_binary(one))[0] == 1,
             to_bits(maxpool_binary(zero))[0] == 0,
             pooled.shape == (2, 3, 3),
             np.array_equal(unpack(pooled), oracle.reshape(-1))]
    assert all(tests)
    with pytest.raises(ValueError):
        maxpool_binary(pack(random_signs(rng, (3, 4, 1))))


def test_kernel_rows_roundtrip():
    rng = np.random.RandomState(9)
    K = pack(random_signs(rng, (3, 3, 4, 5)))
    rows = kernel_rows(K)

    tests = [rows.shape == (5, 36),
             kernel_tensor(rows, 3, 4) == K,
             rows[2, 3 * 9 + 1 * 3 + 2] ==
             to_bits(K).reshape(3, 3, 4, 5)[1, 2, 3, 2]]
    assert all(tests)


def test_layer_config():
    fc = LayerConfig('fc', cin=10, cout=4, majority=True)
    conv = LayerConfig('conv', cin=2, cout=3, kernel=5, majority=True)

    tests = [fc.maj_params == MajParams(),
             conv.maj_params.m == 5,
             conv.n_inputs == 50,
             conv.n_groups == 10,
             LayerConfig('FC', cin=3, cout=1).kind == 'fc',
             LayerConfig('fc', cin=3, cout=1,
                         maj_params=MajParams()).maj_params is None,
             not fc.with_majority(False).majority,
             LayerConfig.from_dict(fc.to_dict()) == fc]
    assert all(tests)
    with pytest.raises(NetworkConfigError):
        LayerConfig('conv', cin=1, cout=1, majority=True,
                    maj_params=MajParams(m=5))
    with pytest.raises(NetworkConfigError):
        LayerConfig('conv', cin=1, cout=1, kernel=2)
    with pytest.raises(NetworkConfigError):
        LayerConfig('maxpool', majority=True)
    with pytest.raises(NetworkConfigError):
        LayerConfig.from_dict(dict(kind='fc', cin=1, cout=1, stride=2))


def test_layer_affine():
    b = layer_affine(LayerConfig('fc', cin=12, cout=2), bias=1.)
    m = layer_affine(LayerConfig('fc', cin=12, cout=2, majority=True))

    tests = [b[0] == 2.,
             is_equal(b[1], [-11., -11.]),
             m[0] == 4.5,
             is_equal(m[1], [-9., -9.])]
    assert all(tests)


def test_network_config(tmpdir):
    net = NetworkConfig.cnv_p()
    path = str(tmpdir.join('net.json'))
    net.save_json(path)
    flags = [None, True, True, False, False, True, True, True, False]
    modified = net.with_majority(flags)

    tests = [len(net.compute_layers) == 9,
             net.n_classes == 10,
             net.output_shapes()[8] == (4, 4, 256),
             derive_folding(net) == [layer.ff for _, layer in
                                     net.compute_layers],
             NetworkConfig.load_json(path) == net,
             [layer.majority for _, layer in modified.compute_layers] ==
             [False, True, True, False, False, True, True, True, False]]
    assert all(tests)


def test_network_config_errors():
    with pytest.raises(NetworkConfigError, match='Layer 1'):
        NetworkConfig((4, 4, 1), [LayerConfig('conv', cin=1, cout=2),
                                  LayerConfig('fc', cin=9, cout=2)])
    with pytest.raises(NetworkConfigError, match='Layer 1'):
        NetworkConfig((4, 4, 1), [LayerConfig('conv', cin=1, cout=2, pad=True),
                                  LayerConfig('maxpool', pool=3),
                                  LayerConfig('fc', cin=2, cout=2)])
    with pytest.raises(NetworkConfigError):
        NetworkConfig((4, 4, 1), [LayerConfig('maxpool')])
    with pytest.raises(NetworkConfigError, match='Layer 0'):
        NetworkConfig.from_dict(dict(input_shape=[1, 1, 4],
                                     layers=[dict(kind='dense')]))


def make_threshold(rng, layer):
    a, c = layer_affine(layer)
    return fold_bn_to_threshold(rng.uniform(0.5, 1.5, layer.cout) *
                                rng.choice([-1., 1.], layer.cout),
                                rng.randn(layer.cout), rng.uniform(0.5, 2.),
                                rng.randn(layer.cout) * 0.1, a, c)


def test_forward_network_single_fc():
    rng = np.random.RandomState(10)
    net = NetworkConfig((1, 1, 12), [LayerConfig('fc', cin=12, cout=3)])
    W = pack(random_signs(rng, (3, 12)))
    x = pack(random_signs(rng, (1, 1, 12)))
    logits = forward_network(net, [LayerParams(W, np.zeros(3))], x)
    expected = fc_forward(x.reshape((12,)), W, 0, net.layers[0])
    assert is_equal(logits, expected)


def test_forward_network_majority_only_changes_majority_layers():
    rng = np.random.RandomState(11)
    hidden = LayerConfig('fc', cin=15, cout=9)
    b_net = NetworkConfig((1, 1, 15), [hidden,
                                       LayerConfig('fc', cin=9, cout=4)])
    m_net = b_net.with_majority([False, True])
    t = make_threshold(rng, hidden)
    W1 = pack(random_signs(rng, (9, 15)))
    W2 = pack(random_signs(rng, (4, 9)))
    params = [LayerParams(W1, np.zeros(9), t), LayerParams(W2, np.zeros(4))]
    x = pack(random_signs(rng, (1, 1, 15)))

    counts = (fc_forward(x.reshape((15,)), W1, 0, hidden) + 15) // 2
    hidden_bits = threshold_activate(counts.reshape(1, 9), t).reshape((9,))
    tests = [is_equal(forward_network(b_net, params, x),
                      fc_forward(hidden_bits, W2, 0, b_net.layers[1])),
             is_equal(forward_network(m_net, params, x),
                      mfc_forward(hidden_bits, W2, 0., m_net.layers[1]))]
    assert all(tests)


def test_forward_network_matches_dense_oracle():
    rng = np.random.RandomState(12)
    layers = [LayerConfig('conv', cin=1, cout=2, pad=True),
              LayerConfig('maxpool'),
              LayerConfig('conv', cin=2, cout=2, majority=True),
              LayerConfig('fc', cin=2, cout=3, majority=True)]
    net = NetworkConfig((6, 6, 1), layers)
    K1 = random_signs(rng, (3, 3, 1, 2))
    K2 = random_signs(rng, (3, 3, 2, 2))
    W3 = random_signs(rng, (3, 2))
    bn = [(rng.uniform(0.5, 1.5, 2) * rng.choice([-1., 1.], 2),
           rng.randn(2), rng.uniform(0.5, 2., 2), rng.randn(2) * 0.1)
          for _ in range(2)]
    params = [LayerParams(pack(K1), np.zeros(2),
                          fold_bn_to_threshold(*bn[0], *layer_affine(layers[0]))),
              None,
              LayerParams(pack(K2), np.zeros(2),
                          fold_bn_to_threshold(*bn[1], *layer_affine(layers[2]))),
              LayerParams(pack(W3), np.array([0.5, 0., -0.5]))]
    X = rng.randint(0, 2, size=(5, 6, 6, 1)).astype(bool)

    logits = forward_network(net, params, X)
    for n in range(5):
        a1 = dense_conv(2. * X[n] - 1., K1, pad=True)
        a1 = np.where(bn_apply(a1, *bn[0]) >= 0, 1., -1.)
        a1 = a1.reshape(3, 2, 3, 2, 2).max(axis=(1, 3))
        a2 = dense_mconv(a1, K2, pad=False)
        a2 = np.where(bn_apply(a2, *bn[1]) >= 0, 1., -1.).reshape(-1)
        x3 = np.concatenate([a2, [-1.]])
        w3 = np.concatenate([W3, -np.ones((3, 1))], axis=1)
        groups = (x3 * w3).reshape(3, 1, 3).sum(axis=-1)
        expected = (np.clip(groups, -1, 1) * 2.25).sum(axis=1) + [0.5, 0., -0.5]
        assert is_equal(logits[n], expected)

    single = forward_network(net, params, pack(X[0]))
    tests = [logits.shape == (5, 3),
             is_equal(single, logits[0]),
             list(predict_network(net, params, X)) ==
             list(np.argmax(logits, axis=1))]
    assert all(tests)
