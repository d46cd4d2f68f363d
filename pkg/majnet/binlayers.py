""" Binary layers, threshold folding and whole-network inference. """

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .bitcore import (BitTensor, MajParams, pack, pack_rows, unpack_rows,
                      to_bits, bit_count64, tail_mask)

logger = logging.getLogger(__name__)

KINDS = ('conv', 'fc', 'maxpool')

# Sentinel thresholds for channels whose decision does not depend on s.
ALWAYS = -(2 ** 62)
NEVER = 2 ** 62

# Upper bound on words (or bytes) materialized per chunk by batch kernels.
_CHUNK_ELEMENTS = 1 << 22


class NetworkConfigError(ValueError):
    """ Invalid layer or network configuration. """


@dataclass(frozen=True)
class LayerConfig(object):
    """
    Geometry and arithmetic of one layer.

    Parameters
    ----------
    kind : {'conv', 'fc', 'maxpool'}

    cin : int
        Logical input channels (Conv) or input width (FC).

    cout : int
        Output channels (Conv) or output width (FC).

    kernel : int, default 3
        Spatial kernel size, odd (Conv only).

    pad : bool, default False
        Same-size padding with logic-0 inputs (Conv only).

    pool : int, default 2
        Window size (MaxPool only).

    ff : int, default 1
        Folding factor dividing the number of instantiated processing units.

    majority : bool, default False
        Use majority-compressed groups instead of an exact popcount.

    maj_params : MajParams, optional
        Defaults to ``MajParams(m=kernel)`` for Conv and ``MajParams()`` for
        FC when ``majority`` is set.
    """

    kind: str
    cin: int = 0
    cout: int = 0
    kernel: int = 3
    pad: bool = False
    pool: int = 2
    ff: int = 1
    majority: bool = False
    maj_params: Optional[MajParams] = None

    def __post_init__(self):
        kind = str(self.kind).lower()
        object.__setattr__(self, 'kind', kind)
        if kind not in KINDS:
            raise NetworkConfigError(
                'Unknown layer kind {!r}, expected one of {}'.format(
                    self.kind, KINDS))
        if self.ff < 1:
            raise NetworkConfigError(
                'Folding factor must be >= 1, got {}'.format(self.ff))
        if kind == 'maxpool':
            if self.pool < 1:
                raise NetworkConfigError(
                    'Pool window must be >= 1, got {}'.format(self.pool))
            if self.majority:
                raise NetworkConfigError('MaxPool layers have no majority form')
            return
        if self.cin < 1 or self.cout < 1:
            raise NetworkConfigError(
                'cin and cout must be positive, got {} and {}'.format(
                    self.cin, self.cout))
        if kind == 'conv' and (self.kernel < 1 or self.kernel % 2 == 0):
            raise NetworkConfigError(
                'Kernel size must be odd, got {}'.format(self.kernel))
        if not self.majority:
            object.__setattr__(self, 'maj_params', None)
            return
        if self.maj_params is None:
            m = self.kernel if kind == 'conv' else 3
            object.__setattr__(self, 'maj_params', MajParams(m=m))
        if kind == 'conv' and self.maj_params.m != self.kernel:
            raise NetworkConfigError(
                'Majority convolution needs m equal to the kernel size, got '
                'm={} kernel={}'.format(self.maj_params.m, self.kernel))

    @property
    def is_compute(self):
        return self.kind != 'maxpool'

    @property
    def n_inputs(self):
        """ Popcount width of one neuron (FC majority inputs padded to m). """
        if self.kind == 'conv':
            return self.kernel * self.kernel * self.cin
        if self.kind == 'fc':
            if self.majority:
                m = self.maj_params.m
                return int(math.ceil(self.cin / m)) * m
            return self.cin
        return 0

    @property
    def n_groups(self):
        return self.n_inputs // self.maj_params.m if self.majority else 0

    def with_majority(self, majority, maj_params=None):
        if not self.is_compute:
            return self
        return replace(self, majority=bool(majority),
                       maj_params=maj_params if majority else None)

    def to_dict(self):
        d = dict(kind=self.kind, cin=self.cin, cout=self.cout,
                 kernel=self.kernel, pad=self.pad, pool=self.pool, ff=self.ff,
                 majority=self.majority)
        if self.majority:
            d.update(m=self.maj_params.m, v1=self.maj_params.v1,
                     v0=self.maj_params.v0)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        params = None
        if {'m', 'v1', 'v0'} & set(d):
            defaults = MajParams()
            params = MajParams(m=int(d.pop('m', defaults.m)),
                               v1=float(d.pop('v1', defaults.v1)),
                               v0=float(d.pop('v0', defaults.v0)))
        unknown = set(d) - {'kind', 'cin', 'cout', 'kernel', 'pad', 'pool',
                            'ff', 'majority'}
        if unknown:
            raise NetworkConfigError(
                'Unknown layer keys: {}'.format(sorted(unknown)))
        if 'kind' not in d:
            raise NetworkConfigError('Layer entry without "kind"')
        return cls(kind=d['kind'], cin=int(d.get('cin', 0)),
                   cout=int(d.get('cout', 0)), kernel=int(d.get('kernel', 3)),
                   pad=bool(d.get('pad', False)), pool=int(d.get('pool', 2)),
                   ff=int(d.get('ff', 1)),
                   majority=bool(d.get('majority', False)), maj_params=params)


@dataclass(frozen=True)
class NetworkConfig(object):
    """
    A chain of layers applied to an (H, W, C) binary input.

    Parameters
    ----------
    input_shape : tuple of 3 ints

    layers : tuple of LayerConfig
        The last layer must be a Conv or FC layer; it emits raw scores.

    name : str, optional
    """

    input_shape: tuple
    layers: tuple
    name: str = ''

    def __post_init__(self):
        object.__setattr__(self, 'input_shape',
                           tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, 'layers', tuple(self.layers))
        if len(self.input_shape) != 3:
            raise NetworkConfigError(
                'Input shape must be (H, W, C), got {}'.format(self.input_shape))
        if not self.layers:
            raise NetworkConfigError('Network has no layers')
        if not self.layers[-1].is_compute:
            raise NetworkConfigError(
                'Layer {}: the last layer must be conv or fc'.format(
                    len(self.layers) - 1))
        self.output_shapes()

    def output_shapes(self):
        """
        Output shape of every layer.

        Raises
        ------
        NetworkConfigError
            If the chain is broken; the message names the layer index.
        """
        h, w, c = self.input_shape
        shapes = []
        for i, layer in enumerate(self.layers):
            if layer.kind == 'conv':
                if c != layer.cin:
                    raise NetworkConfigError(
                        'Layer {} (conv): expects {} input channels, got {}'
                        .format(i, layer.cin, c))
                if not layer.pad:
                    h, w = h - layer.kernel + 1, w - layer.kernel + 1
                if h < 1 or w < 1:
                    raise NetworkConfigError(
                        'Layer {} (conv): kernel {} larger than the input'
                        .format(i, layer.kernel))
                c = layer.cout
            elif layer.kind == 'maxpool':
                if h % layer.pool or w % layer.pool:
                    raise NetworkConfigError(
                        'Layer {} (maxpool): {}x{} not divisible by window {}'
                        .format(i, h, w, layer.pool))
                h, w = h // layer.pool, w // layer.pool
            else:
                width = h * w * c
                if width != layer.cin:
                    raise NetworkConfigError(
                        'Layer {} (fc): expects {} inputs, got {}'.format(
                            i, layer.cin, width))
                h, w, c = 1, 1, layer.cout
            shapes.append((h, w, c))
        return shapes

    @property
    def compute_layers(self):
        return [(i, layer) for i, layer in enumerate(self.layers)
                if layer.is_compute]

    @property
    def n_classes(self):
        return self.layers[-1].cout

    def with_majority(self, flags):
        """
        Copy of the network with majority flags set per compute layer.

        Parameters
        ----------
        flags : sequence of bool or None
            One entry per compute layer; None keeps the current setting.
        """
        compute = self.compute_layers
        if len(flags) != len(compute):
            raise NetworkConfigError(
                'Expected {} flags, got {}'.format(len(compute), len(flags)))
        layers = list(self.layers)
        for (i, layer), flag in zip(compute, flags):
            if flag is not None:
                layers[i] = layer.with_majority(flag)
        return replace(self, layers=tuple(layers))

    def to_dict(self):
        return dict(name=self.name, input_shape=list(self.input_shape),
                    layers=[layer.to_dict() for layer in self.layers])

    @classmethod
    def from_dict(cls, d):
        if 'input_shape' not in d or 'layers' not in d:
            raise NetworkConfigError(
                'Network description needs "input_shape" and "layers"')
        layers = []
        for i, entry in enumerate(d['layers']):
            try:
                layers.append(LayerConfig.from_dict(entry))
            except (ValueError, TypeError) as e:
                raise NetworkConfigError('Layer {}: {}'.format(i, e))
        return cls(input_shape=d['input_shape'], layers=layers,
                   name=d.get('name', ''))

    def save_json(self, path):
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write('\n')

    @classmethod
    def load_json(cls, path):
        with open(path) as f:
            try:
                d = json.load(f)
            except json.JSONDecodeError as e:
                raise NetworkConfigError('{}: {}'.format(path, e))
        return cls.from_dict(d)

    @classmethod
    def cnv_p(cls):
        """ Padded CNV network for 32x32x3 inputs, with its folding factors. """
        conv = dict(kind='conv', kernel=3, pad=True)
        layers = [LayerConfig(cin=3, cout=64, ff=1, **conv),
                  LayerConfig(cin=64, cout=64, ff=1, **conv),
                  LayerConfig('maxpool'),
                  LayerConfig(cin=64, cout=128, ff=4, **conv),
                  LayerConfig(cin=128, cout=128, ff=4, **conv),
                  LayerConfig('maxpool'),
                  LayerConfig(cin=128, cout=256, ff=16, **conv),
                  LayerConfig(cin=256, cout=256, ff=16, **conv),
                  LayerConfig('maxpool'),
                  LayerConfig('fc', cin=4096, cout=512, ff=64),
                  LayerConfig('fc', cin=512, cout=512, ff=64),
                  LayerConfig('fc', cin=512, cout=10, ff=10)]
        return cls(input_shape=(32, 32, 3), layers=layers, name='cnv-p')

    @classmethod
    def mlp(cls, input_shape=(28, 28, 1), hidden=(256, 128), n_classes=10,
            majority=False, name='mlp'):
        """ Fully-connected network; ``majority`` applies to every layer. """
        width = int(np.prod(input_shape))
        layers = []
        for cout in list(hidden) + [n_classes]:
            layers.append(LayerConfig('fc', cin=width, cout=cout,
                                      majority=majority))
            width = cout
        return cls(input_shape=input_shape, layers=layers, name=name)


def derive_folding(net, base_ff=1):
    """
    Folding factors that keep throughput balanced across the network.

    A layer after a k x k max-pool is folded k**2 times more than the
    previous compute layer; factors are capped at the layer's ``cout``.

    Returns
    -------
    ffs : list of int
        One factor per compute layer.
    """
    ffs = []
    carry = base_ff
    for layer in net.layers:
        if layer.kind == 'maxpool':
            carry *= layer.pool * layer.pool
        else:
            ffs.append(min(carry, layer.cout))
    return ffs


@dataclass(frozen=True)
class ThresholdParams(object):
    """
    Batch normalization folded into per-channel integer thresholds.

    Output bit of channel ``k`` is 1 iff ``s >= threshold[k]`` when
    ``ge[k]`` is True, else iff ``s <= threshold[k]``, where ``s`` is the
    layer's integer count.
    """

    gamma: np.ndarray
    mu: np.ndarray
    inv_std: np.ndarray
    beta: np.ndarray
    a: np.ndarray
    c: np.ndarray
    threshold: np.ndarray
    ge: np.ndarray

    @property
    def n_channels(self):
        return self.threshold.shape[0]


def bn_apply(s, gamma, mu, inv_std, beta, a=1.0, c=0.0):
    """ Floating-point batch normalization of the affine pre-activation. """
    return gamma * (a * s + c - mu) * inv_std + beta


def _channel(values, n, name):
    arr = np.broadcast_to(np.asarray(values, dtype=np.float64), (n,))
    if not np.isfinite(arr).all():
        raise ValueError('{} must be finite'.format(name))
    return arr.copy()


def fold_bn_to_threshold(gamma, mu, inv_std, beta, a=1.0, c=0.0):
    """
    Fold per-channel batch normalization and sign activation into integer
    thresholds on the count ``s``.

    The decision ``bn_apply(s, ...) >= 0`` is monotone in ``s``; the
    threshold is seeded from the real root and then moved until it agrees
    with the floating-point decision on both sides, so folding is exact for
    every integer ``s``.

    Parameters
    ----------
    gamma, mu, inv_std, beta : array-like
        Per-channel batch normalization parameters.

    a, c : float or array-like
        Layer affine ``pre = a * s + c``.

    Returns
    -------
    t : ThresholdParams

    Examples
    --------
    >>> t = fold_bn_to_threshold(1., 0., 1., 0.)
    >>> int(t.threshold[0]), bool(t.ge[0])
    (0, True)
    """
    n = max(np.size(gamma), np.size(mu), np.size(inv_std), np.size(beta),
            np.size(a), np.size(c))
    gamma = _channel(gamma, n, 'gamma')
    mu = _channel(mu, n, 'mu')
    inv_std = _channel(inv_std, n, 'inv_std')
    beta = _channel(beta, n, 'beta')
    a = _channel(a, n, 'a')
    c = _channel(c, n, 'c')
    if (inv_std <= 0).any():
        raise ValueError('inv_std must be positive')
    if (a == 0).any():
        raise ValueError('Layer affine slope must be nonzero')

    thresholds = np.zeros(n, dtype=np.int64)
    ge = np.ones(n, dtype=bool)
    for k in range(n):
        args = (gamma[k], mu[k], inv_std[k], beta[k], a[k], c[k])

        def decide(s):
            return bn_apply(float(s), *args) >= 0

        slope = gamma[k] * a[k] * inv_std[k]
        if slope == 0:
            thresholds[k] = ALWAYS if decide(0) else NEVER
            continue
        root = -(gamma[k] * (c[k] - mu[k]) * inv_std[k] + beta[k]) / slope
        root = min(max(root, ALWAYS), NEVER)
        if slope > 0:
            t = int(math.ceil(root))
            while t > ALWAYS and decide(t - 1):
                t -= 1
            while t < NEVER and not decide(t):
                t += 1
        else:
            ge[k] = False
            t = int(math.floor(root))
            while t < NEVER and decide(t + 1):
                t += 1
            while t > ALWAYS and not decide(t):
                t -= 1
        thresholds[k] = t
    return ThresholdParams(gamma=gamma, mu=mu, inv_std=inv_std, beta=beta,
                           a=a, c=c, threshold=thresholds, ge=ge)


def threshold_bits(pre, t):
    """ Threshold decisions of an (..., C) array as a boolean array. """
    pre = np.asarray(pre)
    if pre.shape[-1] != t.n_channels:
        raise ValueError(
            'Got {} channels, thresholds cover {}'.format(
                pre.shape[-1], t.n_channels))
    return np.where(t.ge, pre >= t.threshold, pre <= t.threshold)


def threshold_activate(pre, t):
    """
    Per-channel comparison of counts against folded thresholds.

    Parameters
    ----------
    pre : array-like of shape (..., C)

    t : ThresholdParams

    Returns
    -------
    bits : BitTensor
        Same logical shape as ``pre``.
    """
    pre = np.asarray(pre)
    return pack(threshold_bits(pre, t), shape=pre.shape, bits=True)


def _maxpool_bits(bits, window):
    n, h, w, c = bits.shape
    if h % window or w % window:
        raise ValueError(
            'Feature map {}x{} not divisible by window {}'.format(h, w, window))
    grid = bits.reshape(n, h // window, window, w // window, window, c)
    return grid.max(axis=(2, 4))


def maxpool_binary(F, window=2):
    """
    Binary max-pool: the max of +-1 values is +1 iff any bit is set, so the
    pool is an OR over each window.
    """
    h, w, c = F.shape
    bits = to_bits(F).reshape(1, h, w, c)
    pooled = _maxpool_bits(bits, window)[0]
    return pack(pooled, shape=pooled.shape, bits=True)


def receptive_fields(bits, kernel, pad):
    """
    Receptive fields of a batch of (n, H, W, C) bit maps.

    Each field is flattened in (channel, kernel row, kernel column) order,
    so consecutive runs of ``kernel`` bits are one kernel row of one
    channel. Padding inserts logic-0 (-1) inputs.

    Returns
    -------
    fields : numpy array of shape (n, Ho, Wo, C * kernel * kernel)
    """
    bits = np.asarray(bits, dtype=np.uint8)
    if pad:
        p = kernel // 2
        bits = np.pad(bits, ((0, 0), (p, p), (p, p), (0, 0)))
    n, h, w, c = bits.shape
    windows = sliding_window_view(bits, (kernel, kernel), axis=(1, 2))
    ho, wo = h - kernel + 1, w - kernel + 1
    return windows.reshape(n, ho, wo, c * kernel * kernel)


def kernel_rows(K):
    """ (D, D, cin, cout) kernel bits as (cout, cin * D * D) neuron rows. """
    d, _, cin, cout = K.shape
    bits = to_bits(K).reshape(d, d, cin, cout)
    return bits.transpose(3, 2, 0, 1).reshape(cout, cin * d * d)


def kernel_tensor(rows, kernel, cin):
    """ Inverse of :func:`kernel_rows`, returning a BitTensor. """
    rows = np.asarray(rows, dtype=np.uint8)
    cout = rows.shape[0]
    bits = rows.reshape(cout, cin, kernel, kernel).transpose(2, 3, 1, 0)
    return pack(bits, shape=bits.shape, bits=True)


def _pad_columns(bits, width):
    bits = np.asarray(bits, dtype=np.uint8)
    missing = width - bits.shape[-1]
    if missing < 0:
        raise ValueError(
            'Got {} inputs for a {}-input layer'.format(bits.shape[-1], width))
    if missing:
        bits = np.pad(bits, ((0, 0), (0, missing)))
    return bits


def weight_rows(layer, W):
    """
    Neuron rows (cout, n_inputs) of a layer's weight tensor. FC inputs
    padded up to a multiple of m get logic-0 weights.
    """
    if layer.kind == 'conv':
        expected = (layer.kernel, layer.kernel, layer.cin, layer.cout)
        if W.shape != expected:
            raise ValueError(
                'Kernel shape {} does not match {}'.format(W.shape, expected))
        return kernel_rows(W)
    if len(W.shape) != 2 or W.shape[0] != layer.cout:
        raise ValueError(
            'Weight shape {} does not match ({}, {})'.format(
                W.shape, layer.cout, layer.n_inputs))
    if W.shape[1] not in (layer.cin, layer.n_inputs):
        raise ValueError(
            'Weight shape {} does not match ({}, {})'.format(
                W.shape, layer.cout, layer.n_inputs))
    rows = to_bits(W).reshape(W.shape)
    return _pad_columns(rows, layer.n_inputs)


def _chunks(n_rows, per_row):
    step = max(1, _CHUNK_ELEMENTS // max(1, per_row))
    for start in range(0, n_rows, step):
        yield start, min(n_rows, start + step)


def xnor_counts(fields, rows):
    """
    Popcount of XNOR between every field and every neuron row.

    Parameters
    ----------
    fields : array of shape (P, n) of bits

    rows : array of shape (cout, n) of bits

    Returns
    -------
    s : numpy array of int64, shape (P, cout)
    """
    n = fields.shape[-1]
    fw = pack_rows(fields)
    ww = pack_rows(rows)
    mask = tail_mask(n)
    out = np.empty((fw.shape[0], ww.shape[0]), dtype=np.int64)
    for start, stop in _chunks(fw.shape[0], ww.size):
        z = ~(fw[start:stop, None, :] ^ ww[None, :, :])
        z[..., -1] &= mask
        out[start:stop] = bit_count64(z).sum(axis=-1)
    return out


def majority_counts(fields, rows, m):
    """
    Number of majority-true groups of ``m`` XNOR bits for every field and
    neuron row, shape (P, cout).
    """
    n = fields.shape[-1]
    if n % m:
        raise ValueError(
            'Neuron width {} is not divisible by group size {}'.format(n, m))
    fw = pack_rows(fields)
    ww = pack_rows(rows)
    out = np.empty((fw.shape[0], ww.shape[0]), dtype=np.int64)
    half = (m + 1) // 2
    for start, stop in _chunks(fw.shape[0], rows.shape[0] * n):
        z = ~(fw[start:stop, None, :] ^ ww[None, :, :])
        agree = unpack_rows(z, n).reshape(stop - start, ww.shape[0], n // m, m)
        out[start:stop] = (agree.sum(axis=-1) >= half).sum(axis=-1)
    return out


def layer_affine(layer, bias=0.0):
    """
    Affine map ``pre = a * s + c`` from a layer's integer count to its
    pre-activation.

    ``s`` is the XNOR popcount for exact layers and the number of
    majority-true groups for majority layers.

    Returns
    -------
    a : float
    c : numpy array of float64, shape (cout,)
    """
    n = layer.n_inputs
    bias = np.broadcast_to(np.asarray(bias, dtype=np.float64), (layer.cout,))
    if layer.majority:
        p = layer.maj_params
        return 2.0 * p.scale, bias + 2.0 * layer.n_groups * p.v0 - n
    return 2.0, bias - n


def _with_bias(y, bias):
    bias = np.asarray(bias)
    if bias.dtype.kind in 'iub':
        return y + bias.astype(np.int64)
    return y + bias.astype(np.float64)


def _single_fields(F, cfg):
    if len(F.shape) != 3 or F.shape[2] != cfg.cin:
        raise ValueError(
            'Feature map shape {} does not have {} channels'.format(
                F.shape, cfg.cin))
    bits = to_bits(F).reshape((1,) + F.shape)
    fields = receptive_fields(bits, cfg.kernel, cfg.pad)
    return fields[0]


def conv_forward(F, K, bias, cfg):
    """
    Exact binary convolution (stride 1).

    Parameters
    ----------
    F : BitTensor of shape (H, W, cin)

    K : BitTensor of shape (D, D, cin, cout)

    bias : int, float or array of shape (cout,)

    cfg : LayerConfig
        Conv layer without majority.

    Returns
    -------
    G : numpy array of shape (Ho, Wo, cout)
        ``2 * popcount - N + bias`` per output; integer when the bias is.
    """
    if cfg.kind != 'conv' or cfg.majority:
        raise ValueError('conv_forward needs a non-majority conv layer')
    fields = _single_fields(F, cfg)
    ho, wo, n = fields.shape
    s = xnor_counts(fields.reshape(-1, n), weight_rows(cfg, K))
    y = 2 * s - n
    return _with_bias(y, bias).reshape(ho, wo, cfg.cout)


def mconv_forward(F, K, bias, cfg):
    """
    Majority convolution computed as clipped group dot products.

    Every (channel, kernel row) group contributes
    ``clip(t_in . t_w, -1, 1) * scale``; the per-group constant
    ``v1 + v0 - m`` (zero for the default scales) keeps the result equal to
    the packed majority neuron.

    Returns
    -------
    G : numpy array of float64, shape (Ho, Wo, cout)
    """
    if cfg.kind != 'conv' or not cfg.majority:
        raise ValueError('mconv_forward needs a majority conv layer')
    p = cfg.maj_params
    if p.m != cfg.kernel:
        raise ValueError(
            'Group size {} differs from kernel size {}'.format(p.m, cfg.kernel))
    d = cfg.kernel
    fields = _single_fields(F, cfg)
    ho, wo, n = fields.shape
    t_in = 2.0 * fields.reshape(ho * wo, cfg.cin, d, d) - 1.0
    t_w = 2.0 * weight_rows(cfg, K).reshape(cfg.cout, cfg.cin, d, d) - 1.0
    t_d = np.einsum('pcij,ocij->poci', t_in, t_w)
    y = (np.clip(t_d, -1, 1) * p.scale).sum(axis=(2, 3))
    y = y + cfg.n_groups * p.group_offset
    bias = np.broadcast_to(np.asarray(bias, dtype=np.float64), (cfg.cout,))
    return (y + bias).reshape(ho, wo, cfg.cout)


def _fc_inputs(x, cfg):
    if cfg.kind != 'fc':
        raise ValueError('Expected an fc layer, got {}'.format(cfg.kind))
    if x.len not in (cfg.cin, cfg.n_inputs):
        raise ValueError(
            'Input has {} bits, layer expects {}'.format(x.len, cfg.cin))
    return _pad_columns(to_bits(x).reshape(1, -1), cfg.n_inputs)


def fc_forward(x, W, bias, cfg):
    """
    Exact binary fully-connected layer, ``2 * popcount - N + bias`` per
    output.
    """
    if cfg.majority:
        raise ValueError('fc_forward needs a non-majority fc layer')
    fields = _fc_inputs(x, cfg)
    s = xnor_counts(fields, weight_rows(cfg, W))[0]
    return _with_bias(2 * s - cfg.n_inputs, bias)


def mfc_forward(x, W, bias, cfg):
    """
    Majority fully-connected layer evaluated on packed XNOR bits.

    Inputs are padded to a multiple of m with logic-0 bits paired with
    logic-0 weights, so every padded pair agrees.
    """
    if not cfg.majority:
        raise ValueError('mfc_forward needs a majority fc layer')
    fields = _fc_inputs(x, cfg)
    p = cfg.maj_params
    s = majority_counts(fields, weight_rows(cfg, W), p.m)[0]
    y = 2.0 * (s * p.scale + cfg.n_groups * p.v0) - cfg.n_inputs
    return y + np.asarray(bias, dtype=np.float64)


@dataclass
class LayerParams(object):
    """
    Deployed parameters of one compute layer.

    Parameters
    ----------
    weights : BitTensor
        (D, D, cin, cout) for Conv, (cout, cin) or (cout, n_inputs) for FC.

    bias : numpy array of shape (cout,)

    threshold : ThresholdParams, optional
        Folded against :func:`layer_affine`; None for the last layer.
    """

    weights: BitTensor
    bias: np.ndarray = field(default_factory=lambda: np.zeros(0))
    threshold: Optional[ThresholdParams] = None


def _layer_counts(layer, rows, fields):
    if layer.majority:
        return majority_counts(fields, rows, layer.maj_params.m)
    return xnor_counts(fields, rows)


def forward_network(net, params, x):
    """
    Deployment inference: packed kernels, folded thresholds, OR pooling.

    Parameters
    ----------
    net : NetworkConfig

    params : list
        One entry per layer of ``net``: LayerParams for compute layers and
        None for max-pool layers. Every compute layer except the last needs
        a threshold.

    x : BitTensor of shape net.input_shape, or bool array (n, H, W, C)

    Returns
    -------
    logits : numpy array
        Raw scores of the last layer, shape (cout,) for a single input or
        (n, cout) for a batch (conv last layers keep their spatial axes).
    """
    single = isinstance(x, BitTensor)
    if single:
        if x.len != int(np.prod(net.input_shape)):
            raise ValueError(
                'Input has {} bits, network expects shape {}'.format(
                    x.len, net.input_shape))
        bits = to_bits(x).reshape((1,) + net.input_shape)
    else:
        bits = np.asarray(x, dtype=np.uint8)
        if bits.shape[1:] != net.input_shape:
            raise ValueError(
                'Input batch shape {} does not match {}'.format(
                    bits.shape[1:], net.input_shape))
    if len(params) != len(net.layers):
        raise ValueError(
            'Got {} parameter entries for {} layers'.format(
                len(params), len(net.layers)))

    n = bits.shape[0]
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        if layer.kind == 'maxpool':
            bits = _maxpool_bits(bits, layer.pool)
            continue
        p = params[i]
        if p is None:
            raise ValueError('Layer {}: missing parameters'.format(i))
        if layer.kind == 'conv':
            if bits.shape[-1] != layer.cin:
                raise ValueError(
                    'Layer {}: expects {} channels, got {}'.format(
                        i, layer.cin, bits.shape[-1]))
            fields = receptive_fields(bits, layer.kernel, layer.pad)
            out_shape = fields.shape[:3]
            fields = fields.reshape(-1, layer.n_inputs)
        else:
            flat = bits.reshape(n, -1)
            if flat.shape[1] != layer.cin:
                raise ValueError(
                    'Layer {}: expects {} inputs, got {}'.format(
                        i, layer.cin, flat.shape[1]))
            fields = _pad_columns(flat, layer.n_inputs)
            out_shape = (n, 1, 1)
        s = _layer_counts(layer, weight_rows(layer, p.weights), fields)
        if i == last:
            a, c = layer_affine(layer, p.bias)
            y = a * s + c
            if layer.kind == 'fc':
                y = y.reshape(n, layer.cout)
            else:
                y = y.reshape(out_shape + (layer.cout,))
            return y[0] if single else y
        if p.threshold is None:
            raise ValueError('Layer {}: missing threshold'.format(i))
        bits = threshold_bits(s, p.threshold).astype(np.uint8)
        bits = bits.reshape(out_shape + (layer.cout,))


def predict_network(net, params, X):
    """ Argmax class of every input of a boolean batch (n, H, W, C). """
    logits = forward_network(net, params, X)
    return np.argmax(logits.reshape(logits.shape[0], -1), axis=1)


__all__ = ['LayerConfig',
           'NetworkConfig',
           'NetworkConfigError',
           'ThresholdParams',
           'LayerParams',
           'derive_folding',
           'bn_apply',
           'fold_bn_to_threshold',
           'threshold_activate',
           'threshold_bits',
           'maxpool_binary',
           'receptive_fields',
           'kernel_rows',
           'kernel_tensor',
           'weight_rows',
           'xnor_counts',
           'majority_counts',
           'layer_affine',
           'conv_forward',
           'mconv_forward',
           'fc_forward',
           'mfc_forward',
           'forward_network',
           'predict_network']
