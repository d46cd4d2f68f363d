""" Binarization-aware training of B/M networks. """

import copy as cp
import json
import logging
import os
from dataclasses import dataclass, field
from itertools import product
from time import time
from typing import Optional

import numpy as np
from joblib import Parallel, delayed
from numpy.lib.stride_tricks import sliding_window_view
from pandas import DataFrame, read_csv
from scipy.special import log_softmax
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.metrics import accuracy_score
from sklearn.utils import check_random_state

from . import bitcore
from .binlayers import (LayerParams, NetworkConfig, bn_apply,
                        fold_bn_to_threshold, kernel_tensor, layer_affine,
                        predict_network)
from .costmodel import apply_config
from .datasets import binarize_images

logger = logging.getLogger(__name__)

OPTIMIZERS = ('adam', 'sgd')
LOSSES = ('squared_hinge', 'cross_entropy')

CHECKPOINT_FORMAT = 'majnet-checkpoint'
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """ The training loss stopped being finite. """

    def __init__(self, epoch, loss):
        super(TrainingDivergedError, self).__init__(
            'Training diverged at epoch {}: loss is {}'.format(epoch, loss))
        self.epoch = epoch
        self.loss = loss


def binarize_ste_forward(w):
    """
    Sign binarization with sign(0) = +1.

    Examples
    --------
    >>> binarize_ste_forward([0.3, -0.7, 0.0]).tolist()
    [1.0, -1.0, 1.0]
    """
    return np.where(np.asarray(w, dtype=np.float64) >= 0, 1.0, -1.0)


def binarize_ste_backward(grad_out, w):
    """ Hard-tanh straight-through gradient: passes where |w| <= 1. """
    w = np.asarray(w, dtype=np.float64)
    return np.asarray(grad_out, dtype=np.float64) * (np.abs(w) <= 1)


def _check_group(x, w, params):
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.shape != w.shape or x.shape[-1] != params.m:
        raise ValueError(
            'Group of shape {} / {} does not match m={}'.format(
                x.shape, w.shape, params.m))
    return x, w


def majority_forward_train(x, w, params):
    """
    Training-domain majority of one group: ``scale * clip(x . w, -1, 1)``.

    Parameters
    ----------
    x, w : array-like of shape (..., m)
        Activations and weights of the group(s).

    params : MajParams
    """
    x, w = _check_group(x, w, params)
    return params.scale * np.clip((x * w).sum(axis=-1), -1, 1)


def majority_backward_train(grad_out, x, w, params):
    """
    Gradients of :func:`majority_forward_train`.

    The clip passes gradient where the group dot product lies in [-1, 1]
    (inclusive) and blocks it elsewhere; the fixed scale multiplies both
    gradients.

    Returns
    -------
    grad_x, grad_w : numpy arrays, shapes of ``x`` and ``w``
    """
    x, w = _check_group(x, w, params)
    t = (x * w).sum(axis=-1)
    g = np.asarray(grad_out, dtype=np.float64) * params.scale * (np.abs(t) <= 1)
    g = g[..., np.newaxis]
    return g * w, g * x


@dataclass(frozen=True)
class TrainConfig(object):
    """ Training recipe. """

    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    optimizer: str = 'adam'
    loss: str = 'squared_hinge'
    momentum: float = 0.9

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError('Learning rate must be positive, got {}'.format(
                self.lr))
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError('epochs and batch_size must be >= 1')
        if self.optimizer not in OPTIMIZERS:
            raise ValueError('Unknown optimizer {!r}, expected one of {}'.format(
                self.optimizer, OPTIMIZERS))
        if self.loss not in LOSSES:
            raise ValueError('Unknown loss {!r}, expected one of {}'.format(
                self.loss, LOSSES))


@dataclass
class LayerState(object):
    """
    Latent parameters of one compute layer.

    ``weights`` has shape (cout, n_inputs) in neuron-row order; columns at
    or beyond ``n_valid`` are FC padding, frozen at -1. Layers followed by a
    threshold carry batch normalization parameters; the last layer carries
    a trained bias instead.
    """

    weights: np.ndarray
    bias: np.ndarray
    n_valid: int
    gamma: Optional[np.ndarray] = None
    beta: Optional[np.ndarray] = None
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None

    @property
    def has_bn(self):
        return self.gamma is not None


@dataclass
class ShadowWeights(object):
    """ Latent weights of a whole network, one entry per layer. """

    layers: list = field(default_factory=list)
    eps: float = 1e-5

    def inv_std(self, i):
        return 1.0 / np.sqrt(self.layers[i].running_var + self.eps)

    def copy(self):
        return cp.deepcopy(self)


def init_weights(net, random_state=None, eps=1e-5):
    """ Glorot-uniform latent weights with identity batch normalization. """
    rng = check_random_state(random_state)
    last = len(net.layers) - 1
    layers = []
    for i, layer in enumerate(net.layers):
        if not layer.is_compute:
            layers.append(None)
            continue
        n_valid = layer.cin if layer.kind == 'fc' else layer.n_inputs
        limit = np.sqrt(6.0 / (n_valid + layer.cout))
        w = rng.uniform(-limit, limit, size=(layer.cout, layer.n_inputs))
        w[:, n_valid:] = -1.0
        state = LayerState(weights=w, bias=np.zeros(layer.cout),
                           n_valid=n_valid)
        if i != last:
            state.gamma = np.ones(layer.cout)
            state.beta = np.zeros(layer.cout)
            state.running_mean = np.zeros(layer.cout)
            state.running_var = np.ones(layer.cout)
        layers.append(state)
    return ShadowWeights(layers=layers, eps=eps)


def check_weights(net, weights):
    if len(weights.layers) != len(net.layers):
        raise ValueError(
            'Weights cover {} layers, network has {}'.format(
                len(weights.layers), len(net.layers)))
    for i, (layer, state) in enumerate(zip(net.layers, weights.layers)):
        if not layer.is_compute:
            continue
        expected = (layer.cout, layer.n_inputs)
        if state is None or state.weights.shape != expected:
            got = None if state is None else state.weights.shape
            raise ValueError(
                'Layer {}: weights of shape {} do not match {}'.format(
                    i, got, expected))


def _fields(a, layer):
    """ Real receptive fields (P, n_inputs), padding with -1. """
    if layer.kind == 'conv':
        k = layer.kernel
        if layer.pad:
            p = k // 2
            a = np.pad(a, ((0, 0), (p, p), (p, p), (0, 0)),
                       constant_values=-1.0)
        n, h, w, c = a.shape
        ho, wo = h - k + 1, w - k + 1
        windows = sliding_window_view(a, (k, k), axis=(1, 2))
        return windows.reshape(n * ho * wo, c * k * k), (n, ho, wo)
    flat = a.reshape(a.shape[0], -1)
    missing = layer.n_inputs - flat.shape[1]
    if missing:
        flat = np.pad(flat, ((0, 0), (0, missing)), constant_values=-1.0)
    return flat, (a.shape[0], 1, 1)


def _fields_backward(dcols, layer, in_shape):
    if layer.kind != 'conv':
        return dcols[:, :layer.cin].reshape(in_shape)
    n, h, w, c = in_shape
    k = layer.kernel
    p = k // 2 if layer.pad else 0
    ho, wo = h + 2 * p - k + 1, w + 2 * p - k + 1
    d = dcols.reshape(n, ho, wo, c, k, k)
    dx = np.zeros((n, h + 2 * p, w + 2 * p, c))
    for i in range(k):
        for j in range(k):
            dx[:, i:i + ho, j:j + wo, :] += d[..., i, j]
    return dx[:, p:p + h, p:p + w, :]


def _maxpool_forward(a, pool):
    n, h, w, c = a.shape
    r = a.reshape(n, h // pool, pool, w // pool, pool, c)
    r = r.transpose(0, 1, 3, 5, 2, 4).reshape(n, h // pool, w // pool, c, -1)
    idx = np.argmax(r, axis=-1)
    out = np.take_along_axis(r, idx[..., np.newaxis], axis=-1)[..., 0]
    return out, dict(idx=idx, shape=a.shape, pool=pool)


def _maxpool_backward(dout, cache):
    n, h, w, c = cache['shape']
    pool = cache['pool']
    dr = np.zeros((n, h // pool, w // pool, c, pool * pool))
    np.put_along_axis(dr, cache['idx'][..., np.newaxis],
                      dout[..., np.newaxis], axis=-1)
    dr = dr.reshape(n, h // pool, w // pool, c, pool, pool)
    return dr.transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)


def _loss(z, y, kind):
    """ Mean loss over the batch and its gradient with respect to ``z``. """
    n = z.shape[0]
    rows = np.arange(n)
    if kind == 'squared_hinge':
        t = -np.ones_like(z)
        t[rows, y] = 1.0
        margin = np.maximum(0.0, 1.0 - t * z)
        return (margin ** 2).sum(axis=1).mean(), -2.0 * t * margin / n
    logp = log_softmax(z, axis=1)
    dz = np.exp(logp)
    dz[rows, y] -= 1.0
    return -logp[rows, y].mean(), dz / n


class SurrogateNetwork(object):
    """
    Real-valued training graph of a B/M network.

    Weights and activations are sign-binarized in the forward pass with
    straight-through gradients; majority layers use the clipped group dot
    product times the layer scale. With ``relaxed=True`` the sign is
    replaced by hard-tanh so the graph is differentiable almost everywhere.

    Parameters
    ----------
    net : NetworkConfig

    weights : ShadowWeights

    relaxed : bool, default False

    bn_momentum : float, default 0.9
        Weight of the old running statistics in each update.
    """

    def __init__(self, net, weights, relaxed=False, bn_momentum=0.9):
        self.net = net
        self.weights = weights
        self.relaxed = relaxed
        self.bn_momentum = bn_momentum
        self.first = net.compute_layers[0][0]

    def _binarize(self, values):
        if self.relaxed:
            return np.clip(values, -1.0, 1.0)
        return binarize_ste_forward(values)

    def forward(self, a, train=False, update_stats=False):
        """
        Parameters
        ----------
        a : numpy array of shape (n, H, W, C)
            +-1 inputs.

        train : bool
            Batch statistics in batch normalization.

        Returns
        -------
        logits : numpy array of shape (n, n_classes)

        caches : list
        """
        caches = []
        last = len(self.net.layers) - 1
        for i, layer in enumerate(self.net.layers):
            if layer.kind == 'maxpool':
                a, cache = _maxpool_forward(a, layer.pool)
                caches.append(cache)
                continue
            state = self.weights.layers[i]
            wb = self._binarize(state.weights)
            cols, out_shape = _fields(a, layer)
            cache = dict(in_shape=a.shape, cols=cols, wb=wb)
            if layer.majority:
                p = layer.maj_params
                cg = cols.reshape(cols.shape[0], layer.n_groups, p.m)
                wg = wb.reshape(layer.cout, layer.n_groups, p.m)
                t = np.einsum('pgk,ogk->pog', cg, wg)
                pre = (np.clip(t, -1.0, 1.0) * p.scale).sum(axis=-1)
                pre = pre + layer.n_groups * p.group_offset
                cache['t'] = t
            else:
                pre = cols.dot(wb.T)
            pre = pre + state.bias
            caches.append(cache)
            if i == last:
                return pre.reshape(out_shape[0], -1), caches

            if train:
                mean = pre.mean(axis=0)
                var = pre.var(axis=0)
                inv = 1.0 / np.sqrt(var + self.weights.eps)
                xhat = (pre - mean) * inv
                z = state.gamma * xhat + state.beta
                cache.update(xhat=xhat, inv=inv)
                if update_stats:
                    m = self.bn_momentum
                    state.running_mean = m * state.running_mean + (1 - m) * mean
                    state.running_var = m * state.running_var + (1 - m) * var
            else:
                z = bn_apply(pre, state.gamma, state.running_mean,
                             self.weights.inv_std(i), state.beta)
            cache['z'] = z
            a = self._binarize(z).reshape(out_shape + (layer.cout,))

    def backward(self, dlogits, caches):
        """
        Gradients of the loss for every trainable array.

        Returns
        -------
        grads : dict
            ``(layer_index, name) -> array``, names being ``weights``,
            ``gamma``, ``beta`` and ``bias``.
        """
        grads = {}
        last = len(self.net.layers) - 1
        da = dlogits
        for i in range(last, -1, -1):
            layer = self.net.layers[i]
            cache = caches[i]
            if layer.kind == 'maxpool':
                da = _maxpool_backward(da, cache)
                continue
            state = self.weights.layers[i]
            if i == last:
                dpre = da
                grads[(i, 'bias')] = dpre.sum(axis=0)
            else:
                dz = binarize_ste_backward(da.reshape(-1, layer.cout),
                                           cache['z'])
                xhat, inv = cache['xhat'], cache['inv']
                grads[(i, 'gamma')] = (dz * xhat).sum(axis=0)
                grads[(i, 'beta')] = dz.sum(axis=0)
                dxhat = dz * state.gamma
                P = dz.shape[0]
                dpre = inv / P * (P * dxhat - dxhat.sum(axis=0)
                                  - xhat * (dxhat * xhat).sum(axis=0))
            cols, wb = cache['cols'], cache['wb']
            if layer.majority:
                p = layer.maj_params
                cg = cols.reshape(cols.shape[0], layer.n_groups, p.m)
                wg = wb.reshape(layer.cout, layer.n_groups, p.m)
                dt = (dpre[:, :, np.newaxis] * p.scale
                      * (np.abs(cache['t']) <= 1))
                dcols = np.einsum('pog,ogk->pgk', dt, wg).reshape(cols.shape)
                dwb = np.einsum('pog,pgk->ogk', dt, cg).reshape(wb.shape)
            else:
                dcols = dpre.dot(wb)
                dwb = dpre.T.dot(cols)
            dw = binarize_ste_backward(dwb, state.weights)
            dw[:, state.n_valid:] = 0.0
            grads[(i, 'weights')] = dw
            if i > self.first:
                da = _fields_backward(dcols, layer, cache['in_shape'])
        return grads

    def window_masks(self, caches):
        """ Membership of every clip and STE window, and max-pool routing. """
        masks = []
        for cache in caches:
            if 'idx' in cache:
                masks.append(cache['idx'])
            if 't' in cache:
                masks.append(np.abs(cache['t']) <= 1)
            if 'z' in cache:
                masks.append(np.abs(cache['z']) <= 1)
        return masks


class _Optimizer(object):

    def __init__(self, kind, lr, momentum=0.9, beta2=0.999, eps=1e-8):
        self.kind = kind
        self.lr = lr
        self.momentum = momentum
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.state = {}

    def step(self, params, grads):
        self.t += 1
        for key, g in grads.items():
            p = params[key]
            if self.kind == 'adam':
                m, v = self.state.get(key, (np.zeros_like(p), np.zeros_like(p)))
                m = self.momentum * m + (1 - self.momentum) * g
                v = self.beta2 * v + (1 - self.beta2) * g * g
                self.state[key] = (m, v)
                m_hat = m / (1 - self.momentum ** self.t)
                v_hat = v / (1 - self.beta2 ** self.t)
                p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            else:
                v = self.momentum * self.state.get(key, np.zeros_like(p)) + g
                self.state[key] = v
                p -= self.lr * v


def _trainable(weights):
    params = {}
    for i, state in enumerate(weights.layers):
        if state is None:
            continue
        params[(i, 'weights')] = state.weights
        if state.has_bn:
            params[(i, 'gamma')] = state.gamma
            params[(i, 'beta')] = state.beta
        else:
            params[(i, 'bias')] = state.bias
    return params


def _clip_weights(weights):
    for state in weights.layers:
        if state is None:
            continue
        np.clip(state.weights, -1.0, 1.0, out=state.weights)
        state.weights[:, state.n_valid:] = -1.0


def _as_bits(X):
    """ Boolean (n, H, W, C) bits from bits, 0/1 integers or [-1, 1] reals. """
    X = np.asarray(X)
    if X.dtype.kind in 'biu':
        return X != 0
    return binarize_images(X)


def export_params(net, weights):
    """
    Deployment parameters: sign-binarized weights and folded thresholds.

    Returns
    -------
    params : list
        LayerParams per compute layer, None per max-pool layer.
    """
    check_weights(net, weights)
    params = []
    for i, layer in enumerate(net.layers):
        state = weights.layers[i]
        if state is None:
            params.append(None)
            continue
        rows = state.weights >= 0
        if layer.kind == 'conv':
            W = kernel_tensor(rows, layer.kernel, layer.cin)
        else:
            W = bitcore.pack(rows, shape=rows.shape, bits=True)
        threshold = None
        if state.has_bn:
            a, c = layer_affine(layer, state.bias)
            threshold = fold_bn_to_threshold(state.gamma, state.running_mean,
                                             weights.inv_std(i), state.beta,
                                             a, c)
        params.append(LayerParams(W, state.bias.copy(), threshold))
    return params


class BinaryNetClassifier(BaseEstimator, ClassifierMixin):
    """
    Trainable binary network.

    Training runs the real-valued surrogate with straight-through
    gradients; ``predict`` runs the deployment path (packed kernels and
    folded integer thresholds).

    Parameters
    ----------
    net : NetworkConfig
        Its last layer must be an fc layer with one output per class.

    lr : float, default 1e-3

    epochs : int, default 10

    batch_size : int, default 64

    optimizer : {'adam', 'sgd'}, default 'adam'
        ``sgd`` is SGD with momentum.

    loss : {'squared_hinge', 'cross_entropy'}, default 'squared_hinge'
        Computed on the last layer's scores times ``1 / sqrt(N)``.

    momentum : float, default 0.9
        SGD momentum, or the first-moment decay of Adam.

    bn_momentum : float, default 0.9

    eps : float, default 1e-5
        Batch normalization epsilon.

    random_state : int, RandomState or None, default 0

    relaxed : bool, default False
        Hard-tanh instead of sign binarization during training.

    Attributes
    ----------
    weights_ : ShadowWeights

    history_ : pandas DataFrame
        Columns ``epoch``, ``train_acc``, ``val_acc``, ``loss``.

    classes_ : numpy array
    """

    def __init__(self, net=None, lr=1e-3, epochs=10, batch_size=64,
                 optimizer='adam', loss='squared_hinge', momentum=0.9,
                 bn_momentum=0.9, eps=1e-5, random_state=0, relaxed=False):
        self.net = net
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.loss = loss
        self.momentum = momentum
        self.bn_momentum = bn_momentum
        self.eps = eps
        self.random_state = random_state
        self.relaxed = relaxed

    @classmethod
    def from_config(cls, net, cfg):
        return cls(net=net, lr=cfg.lr, epochs=cfg.epochs,
                   batch_size=cfg.batch_size, optimizer=cfg.optimizer,
                   loss=cfg.loss, momentum=cfg.momentum, random_state=cfg.seed)

    def _validate(self, X, y=None):
        if not isinstance(self.net, NetworkConfig):
            raise ValueError('Provide a NetworkConfig as net')
        if self.net.layers[-1].kind != 'fc':
            raise ValueError('The last layer must be an fc layer')
        TrainConfig(lr=self.lr, epochs=self.epochs,
                    batch_size=self.batch_size, optimizer=self.optimizer,
                    loss=self.loss, momentum=self.momentum)
        bits = _as_bits(X)
        if bits.ndim != 4 or bits.shape[1:] != self.net.input_shape:
            raise ValueError(
                'Provide array of valid shape: (n,) + {}, got {}'.format(
                    self.net.input_shape, bits.shape))
        if bits.shape[0] == 0:
            raise ValueError('Empty dataset')
        if y is None:
            return bits, None
        y = np.asarray(y, dtype=np.int64)
        if y.shape != (bits.shape[0],):
            raise ValueError('Got {} samples and {} labels'.format(
                bits.shape[0], y.shape[0]))
        if y.min() < 0 or y.max() >= self.net.n_classes:
            raise ValueError(
                'Labels must lie in [0, {})'.format(self.net.n_classes))
        return bits, y

    def _surrogate(self):
        return SurrogateNetwork(self.net, self.weights_, relaxed=self.relaxed,
                                bn_momentum=self.bn_momentum)

    @property
    def logit_scale(self):
        return 1.0 / np.sqrt(self.net.layers[-1].n_inputs)

    def fit(self, X, y, X_val=None, y_val=None):
        """
        Train from scratch.

        Parameters
        ----------
        X : array of shape (n, H, W, C)
            Bits, or reals binarized at 0.

        y : array of int, shape (n,)

        X_val, y_val : optional
            Validation split scored with the deployment path every epoch.

        Raises
        ------
        TrainingDivergedError
            If the loss becomes NaN or infinite.
        """
        bits, y = self._validate(X, y)
        rng = check_random_state(self.random_state)
        self.weights_ = init_weights(self.net, rng, eps=self.eps)
        self.classes_ = np.arange(self.net.n_classes)
        surrogate = self._surrogate()
        opt = _Optimizer(self.optimizer, self.lr, self.momentum)
        params = _trainable(self.weights_)
        signs = 2.0 * bits - 1.0
        scale = self.logit_scale
        n = signs.shape[0]

        rows = []
        for epoch in range(self.epochs):
            time_point = time()
            order = rng.permutation(n)
            losses, correct = [], 0
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                logits, caches = surrogate.forward(signs[idx], train=True,
                                                   update_stats=True)
                loss, dz = _loss(logits * scale, y[idx], self.loss)
                if not np.isfinite(loss):
                    raise TrainingDivergedError(epoch, loss)
                grads = surrogate.backward(dz * scale, caches)
                opt.step(params, grads)
                _clip_weights(self.weights_)
                losses.append(loss * len(idx))
                correct += int((np.argmax(logits, axis=1) == y[idx]).sum())

            val_acc = np.nan
            if X_val is not None:
                val_acc = self.score(X_val, y_val)
            row = dict(epoch=epoch, train_acc=correct / n, val_acc=val_acc,
                       loss=sum(losses) / n)
            rows.append(row)
            logger.info('Epoch {}/{}: loss {:.4f}, train acc {:.4f}, '
                        'val acc {:.4f} ({} sec)'.format(
                            epoch + 1, self.epochs, row['loss'],
                            row['train_acc'], val_acc,
                            round(time() - time_point, 3)))
        self.history_ = DataFrame(rows, columns=['epoch', 'train_acc',
                                                 'val_acc', 'loss'])
        return self

    def export(self):
        return export_params(self.net, self.weights_)

    def predict(self, X):
        """ Deployment-path predictions. """
        bits, _ = self._validate(X)
        return predict_network(self.net, self.export(), bits)

    def surrogate_logits(self, X, batch_size=256):
        """ Training-graph scores with running batch statistics. """
        bits, _ = self._validate(X)
        surrogate = self._surrogate()
        signs = 2.0 * bits - 1.0
        out = [surrogate.forward(signs[s:s + batch_size])[0]
               for s in range(0, signs.shape[0], batch_size)]
        return np.concatenate(out)


def check_gradients(model, X, y, n_points=100, h=1e-5, seed=0, margin=1e-2):
    """
    Compare analytic gradients of a relaxed model with central differences.

    The loss is evaluated on the whole batch with batch statistics. Sampled
    weights within ``margin`` of +-1 are skipped, and so is every
    coordinate whose perturbation changes the membership of any clip or STE
    window (or a max-pool routing, or the hinge active set).

    Parameters
    ----------
    model : BinaryNetClassifier
        With ``relaxed=True``; initialized from its ``random_state`` when
        not fitted.

    X, y : training batch

    n_points : int, default 100

    h : float, default 1e-5

    seed : int, default 0

    Returns
    -------
    report : pandas DataFrame
        Columns ``layer``, ``param``, ``index``, ``analytic``, ``numeric``,
        ``rel_error``.
    """
    if not model.relaxed:
        raise ValueError('Gradient checks need relaxed=True')
    bits, y = model._validate(X, y)
    if not hasattr(model, 'weights_'):
        model.weights_ = init_weights(model.net, model.random_state,
                                      eps=model.eps)
    surrogate = model._surrogate()
    signs = 2.0 * bits - 1.0
    scale = model.logit_scale

    def evaluate():
        logits, caches = surrogate.forward(signs, train=True)
        z = logits * scale
        loss, dz = _loss(z, y, model.loss)
        masks = surrogate.window_masks(caches)
        if model.loss == 'squared_hinge':
            t = -np.ones_like(z)
            t[np.arange(len(y)), y] = 1.0
            masks.append(t * z < 1.0)
        return loss, dz, caches, masks

    loss, dz, caches, base_masks = evaluate()
    grads = surrogate.backward(dz * scale, caches)
    params = _trainable(model.weights_)

    candidates = []
    for key in sorted(params):
        values = params[key]
        allowed = np.ones(values.shape, dtype=bool)
        if key[1] == 'weights':
            allowed[:, model.weights_.layers[key[0]].n_valid:] = False
            allowed &= np.abs(values) < 1.0 - margin
        candidates.extend((key, int(j)) for j in np.flatnonzero(allowed))

    rng = check_random_state(seed)
    rows = []
    for c in rng.permutation(len(candidates)):
        if len(rows) >= n_points:
            break
        key, j = candidates[c]
        values = params[key].reshape(-1)
        original = values[j]
        values[j] = original + h
        loss_plus, _, _, masks_plus = evaluate()
        values[j] = original - h
        loss_minus, _, _, masks_minus = evaluate()
        values[j] = original
        same = all(np.array_equal(a, b) and np.array_equal(a, d)
                   for a, b, d in zip(base_masks, masks_plus, masks_minus))
        if not same:
            continue
        numeric = (loss_plus - loss_minus) / (2 * h)
        analytic = float(grads[key].reshape(-1)[j])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-4)
        rows.append(dict(layer=key[0], param=key[1], index=j,
                         analytic=analytic, numeric=numeric, rel_error=rel))
    logger.info('Checked {} gradient coordinates'.format(len(rows)))
    return DataFrame(rows, columns=['layer', 'param', 'index', 'analytic',
                                    'numeric', 'rel_error'])


def train(net, data, cfg=TrainConfig()):
    """
    Train a network on the ``train`` split of a Dataset.

    The ``val`` split, when present, is scored every epoch.

    Returns
    -------
    weights : ShadowWeights

    history : pandas DataFrame
    """
    X, y = data.binary('train')
    if len(y) == 0:
        raise ValueError('Empty training split')
    X_val, y_val = data.binary('val')
    if len(y_val) == 0:
        X_val, y_val = None, None
    clf = BinaryNetClassifier.from_config(net, cfg)
    clf.fit(X, y, X_val, y_val)
    return clf.weights_, clf.history_


def evaluate(net, weights, data, split='test'):
    """ Deployment-path accuracy on one split of a Dataset. """
    X, y = data.binary(split)
    if len(y) == 0:
        raise ValueError('Empty {} split'.format(split))
    pred = predict_network(net, export_params(net, weights), X)
    return accuracy_score(y, pred)


def _sweep_run(idx, n_runs, net, config, seed, data, params):
    logger.info('Run: {}/{}'.format(idx + 1, n_runs))
    time_point = time()
    clf = BinaryNetClassifier(net=apply_config(net, config),
                              random_state=seed, **params)
    X, y = data.binary('train')
    clf.fit(X, y)
    score = clf.score(*data.binary('test'))
    logger.info('{} seed {}: accuracy {:.4f} ({} sec)'.format(
        config, seed, score, round(time() - time_point, 3)))
    return score


class ConfigSweep(object):
    """
    Train every B/M configuration string with several seeds.

    Parameters
    ----------
    net : NetworkConfig
        Network shape; majority flags are set per configuration.

    configs : list of str
        Configuration strings, e.g. ``['+BBB', '+MMM']``.

    seeds : sequence of int, default (0,)

    n_jobs : int, default 1
        Runs executed in parallel with joblib.

    **params
        BinaryNetClassifier parameters shared by every run.

    Attributes
    ----------
    plan_table : pandas DataFrame
        One row per (config, seed) run.
    """

    def __init__(self, net, configs, seeds=(0,), n_jobs=1, **params):
        self.net = net
        self.seeds = list(seeds)
        self.n_jobs = n_jobs
        self.params = params
        plan_rows = [dict(config=config, seed=seed)
                     for config, seed in product(configs, self.seeds)]
        self.plan_table = DataFrame(plan_rows, columns=['config', 'seed'])

    def get_results(self, data):
        """
        Test accuracy of every configuration.

        Returns
        -------
        results : pandas DataFrame
            Columns ``config``, ``eval_accuracy_mean``,
            ``eval_accuracy_std``, ``eval_accuracy_scores``.
        """
        n_runs = len(self.plan_table.index)
        scores = Parallel(n_jobs=self.n_jobs)(
            delayed(_sweep_run)(idx, n_runs, self.net, row.config, row.seed,
                                data, self.params)
            for idx, row in enumerate(self.plan_table.itertuples()))
        plan = self.plan_table.assign(score=scores)
        rows = []
        for config, group in plan.groupby('config', sort=False):
            values = list(group['score'])
            rows.append(dict(config=config,
                             eval_accuracy_mean=np.mean(values),
                             eval_accuracy_std=np.std(values),
                             eval_accuracy_scores=str(values)))
        return DataFrame(rows, columns=['config', 'eval_accuracy_mean',
                                        'eval_accuracy_std',
                                        'eval_accuracy_scores'])

    @staticmethod
    def to_accuracy_table(results):
        """ ``config,error_percent`` table for the Pareto explorer. """
        return DataFrame({'config': results['config'],
                          'error_percent': 100.0 * (
                              1.0 - results['eval_accuracy_mean'])})


def _tensor_name(i, name, ext):
    return 'layer{:02d}_{}.{}'.format(i, name, ext)


def save_checkpoint(directory, net, weights, history=None, meta=None,
                    seed=None):
    """
    Write a checkpoint directory.

    The manifest records ``meta`` together with the training seed, when
    given, and the number of trained epochs taken from ``history``.

    Layout: ``manifest.json`` (sorted keys), latent arrays as raw
    little-endian float64 ``*.f64`` files, binarized weights as serialized
    BitTensors ``*.bits``, and ``history.csv`` when a history is given.
    """
    check_weights(net, weights)
    os.makedirs(directory, exist_ok=True)
    layers = []
    for i, state in enumerate(weights.layers):
        if state is None:
            layers.append(None)
            continue
        entry = dict(n_valid=state.n_valid, files={})
        for name in ('weights', 'bias', 'gamma', 'beta', 'running_mean',
                     'running_var'):
            values = getattr(state, name)
            if values is None:
                continue
            filename = _tensor_name(i, name, 'f64')
            np.ascontiguousarray(values, dtype='<f8').tofile(
                os.path.join(directory, filename))
            entry['files'][name] = dict(file=filename,
                                        shape=list(values.shape))
        bits = state.weights >= 0
        filename = _tensor_name(i, 'weights', 'bits')
        bitcore.save(bitcore.pack(bits, shape=bits.shape, bits=True),
                     os.path.join(directory, filename))
        entry['files']['binary_weights'] = dict(file=filename,
                                                shape=list(bits.shape))
        layers.append(entry)
    meta = dict(meta or {})
    if seed is not None:
        meta['seed'] = seed
    if history is not None:
        meta.setdefault('epochs', len(history))
    manifest = dict(format=CHECKPOINT_FORMAT, version=CHECKPOINT_VERSION,
                    network=net.to_dict(), eps=weights.eps, layers=layers,
                    meta=meta)
    with open(os.path.join(directory, 'manifest.json'), 'w') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write('\n')
    if history is not None:
        history.to_csv(os.path.join(directory, 'history.csv'), index=False)
    logger.info('Wrote checkpoint to {}'.format(directory))


def load_checkpoint(directory):
    """
    Read a checkpoint written by :func:`save_checkpoint`.

    Returns
    -------
    net : NetworkConfig

    weights : ShadowWeights

    meta : dict
        With the training history under ``'history'`` when present.
    """
    with open(os.path.join(directory, 'manifest.json')) as f:
        manifest = json.load(f)
    if manifest.get('format') != CHECKPOINT_FORMAT:
        raise ValueError('{} is not a checkpoint directory'.format(directory))
    net = NetworkConfig.from_dict(manifest['network'])
    layers = []
    for i, entry in enumerate(manifest['layers']):
        if entry is None:
            layers.append(None)
            continue
        arrays = {}
        for name, info in entry['files'].items():
            if name == 'binary_weights':
                continue
            path = os.path.join(directory, info['file'])
            values = np.fromfile(path, dtype='<f8')
            if values.size != int(np.prod(info['shape'])):
                raise ValueError(
                    '{}: expected {} values, got {}'.format(
                        info['file'], int(np.prod(info['shape'])), values.size))
            arrays[name] = values.reshape(info['shape']).astype(np.float64)
        layers.append(LayerState(n_valid=entry['n_valid'], **arrays))
    weights = ShadowWeights(layers=layers, eps=manifest['eps'])
    check_weights(net, weights)
    meta = dict(manifest.get('meta', {}))
    history_path = os.path.join(directory, 'history.csv')
    if os.path.exists(history_path):
        meta['history'] = read_csv(history_path)
    return net, weights, meta


__all__ = ['TrainingDivergedError',
           'TrainConfig',
           'LayerState',
           'ShadowWeights',
           'SurrogateNetwork',
           'BinaryNetClassifier',
           'ConfigSweep',
           'binarize_ste_forward',
           'binarize_ste_backward',
           'majority_forward_train',
           'majority_backward_train',
           'init_weights',
           'check_weights',
           'export_params',
           'check_gradients',
           'train',
           'evaluate',
           'save_checkpoint',
           'load_checkpoint']
