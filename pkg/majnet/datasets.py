""" Datasets: IDX files, the scikit-learn digits set and toy problems. """

import gzip
import logging
import os
import struct
from dataclasses import dataclass

import numpy as np
from sklearn.datasets import load_digits
from sklearn.model_selection import train_test_split
from sklearn.utils import check_random_state

logger = logging.getLogger(__name__)

SPLITS = ('train', 'val', 'test')

IDX_UBYTE = 0x08
IDX_IMAGES = 3
IDX_LABELS = 1

MNIST_FILES = {'train': ('train-images-idx3-ubyte', 'train-labels-idx1-ubyte'),
               'test': ('t10k-images-idx3-ubyte', 't10k-labels-idx1-ubyte')}


class IdxFormatError(ValueError):
    """ Malformed or truncated IDX file. """


@dataclass
class Dataset(object):
    """
    Images normalized to [-1, 1] with labels and split tags.

    Parameters
    ----------
    images : numpy array of shape (n, H, W, C)

    labels : numpy array of int, shape (n,)

    split : numpy array of str, shape (n,)
        One of ``'train'``, ``'val'``, ``'test'`` per sample.

    name : str, optional
    """

    images: np.ndarray
    labels: np.ndarray
    split: np.ndarray
    name: str = ''

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.split = np.asarray(self.split, dtype=object)
        if self.images.ndim != 4:
            raise ValueError(
                'Provide images of shape (n, H, W, C), got {}'.format(
                    self.images.shape))
        n = self.images.shape[0]
        if self.labels.shape != (n,) or self.split.shape != (n,):
            raise ValueError(
                'Got {} images, {} labels and {} split tags'.format(
                    n, self.labels.shape[0], self.split.shape[0]))
        unknown = set(self.split) - set(SPLITS)
        if unknown:
            raise ValueError('Unknown split tags: {}'.format(sorted(unknown)))
        if n and self.labels.min() < 0:
            raise ValueError('Labels must be non-negative class indices')

    @classmethod
    def from_splits(cls, name='', **splits):
        """ Build a dataset from ``train=(X, y)``, ``val=...``, ``test=...``. """
        images, labels, tags = [], [], []
        for tag in SPLITS:
            if splits.get(tag) is None:
                continue
            X, y = splits[tag]
            images.append(np.asarray(X, dtype=np.float64))
            labels.append(np.asarray(y))
            tags.append(np.full(len(y), tag, dtype=object))
        if not images:
            raise ValueError('Provide at least one split')
        return cls(np.concatenate(images), np.concatenate(labels),
                   np.concatenate(tags), name=name)

    @property
    def input_shape(self):
        return self.images.shape[1:]

    @property
    def n_classes(self):
        return int(self.labels.max()) + 1

    def subset(self, tag):
        """ (images, labels) of one split. """
        if tag not in SPLITS:
            raise ValueError('Unknown split {!r}'.format(tag))
        mask = self.split == tag
        return self.images[mask], self.labels[mask]

    def binary(self, tag):
        """ (bits, labels) of one split, bits as in :func:`binarize_images`. """
        images, labels = self.subset(tag)
        return binarize_images(images), labels

    def counts(self):
        return {tag: int((self.split == tag).sum()) for tag in SPLITS}


def binarize_images(images):
    """
    Input binarization for the first layer.

    Parameters
    ----------
    images : numpy array
        Images normalized to [-1, 1].

    Returns
    -------
    bits : numpy array of bool
        True (logic 1, +1) where the pixel is >= 0.
    """
    return np.asarray(images) >= 0


def parse_idx(buf, name='<buffer>'):
    """
    Decode an unsigned-byte IDX buffer.

    Raises
    ------
    IdxFormatError
        On a bad magic number or a truncated buffer; truncation messages
        name the missing byte count.
    """
    buf = bytes(buf)
    if len(buf) < 4:
        raise IdxFormatError(
            '{}: truncated header, missing {} bytes'.format(name, 4 - len(buf)))
    if buf[0] != 0 or buf[1] != 0 or buf[2] != IDX_UBYTE:
        raise IdxFormatError(
            '{}: bad magic bytes {}'.format(name, buf[:4].hex()))
    ndim = buf[3]
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IdxFormatError(
            '{}: truncated header, missing {} bytes'.format(
                name, header - len(buf)))
    dims = struct.unpack_from('>{}I'.format(ndim), buf, 4)
    size = int(np.prod(dims)) if dims else 1
    if len(buf) < header + size:
        raise IdxFormatError(
            '{}: truncated data, missing {} bytes'.format(
                name, header + size - len(buf)))
    data = np.frombuffer(buf, dtype=np.uint8, count=size, offset=header)
    return data.reshape(dims)


def read_idx(path):
    """ Read an IDX file, gzip-compressed when the name ends in ``.gz``. """
    opener = gzip.open if str(path).endswith('.gz') else open
    with opener(path, 'rb') as f:
        buf = f.read()
    return parse_idx(buf, name=os.path.basename(str(path)))


def normalize_images(pixels):
    """ uint8 pixels to [-1, 1] reals of shape (n, H, W, 1). """
    pixels = np.asarray(pixels, dtype=np.float64)
    return (pixels / 127.5 - 1.0)[..., np.newaxis]


def load_idx(images_path, labels_path, split='train', name=''):
    """
    Load one image/label pair of IDX files.

    Parameters
    ----------
    images_path : str
        IDX file with magic ``00 00 08 03``.

    labels_path : str
        IDX file with magic ``00 00 08 01``.

    split : str, default 'train'
        Tag given to every sample.

    Returns
    -------
    data : Dataset
        Images of shape (n, rows, cols, 1) normalized to [-1, 1].
    """
    pixels = read_idx(images_path)
    labels = read_idx(labels_path)
    if pixels.ndim != IDX_IMAGES:
        raise IdxFormatError(
            '{}: expected 3 dimensions, got {}'.format(images_path, pixels.ndim))
    if labels.ndim != IDX_LABELS:
        raise IdxFormatError(
            '{}: expected 1 dimension, got {}'.format(labels_path, labels.ndim))
    if pixels.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            'Image/label count mismatch: {} images, {} labels'.format(
                pixels.shape[0], labels.shape[0]))
    tags = np.full(labels.shape[0], split, dtype=object)
    return Dataset(normalize_images(pixels), labels, tags, name=name)


def _find(directory, stem):
    for candidate in (stem, stem + '.gz'):
        path = os.path.join(directory, candidate)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(
        'No {} or {}.gz in {}'.format(stem, stem, directory))


def _split_train(X, y, val_fraction, seed):
    if not val_fraction:
        return (X, y), None
    X_tr, X_val, y_tr, y_val = train_test_split(
        X, y, test_size=val_fraction, random_state=seed, stratify=y)
    return (X_tr, y_tr), (X_val, y_val)


def load_mnist(directory, n_train=None, n_test=None, val_fraction=0.1, seed=0):
    """
    MNIST from a directory of (optionally gzipped) IDX files.

    Parameters
    ----------
    directory : str

    n_train : int, optional
        Size of a seeded random subset of the training images.

    n_test : int, optional
        Keep only the first ``n_test`` test images.

    val_fraction : float, default 0.1
        Stratified share of the training subset held out for validation.

    seed : int, default 0

    Returns
    -------
    data : Dataset
    """
    parts = {}
    for tag, (images_stem, labels_stem) in sorted(MNIST_FILES.items()):
        parts[tag] = load_idx(_find(directory, images_stem),
                              _find(directory, labels_stem), split=tag)
    X, y = parts['train'].images, parts['train'].labels
    if n_train is not None and n_train < len(y):
        rng = check_random_state(seed)
        idx = np.sort(rng.choice(len(y), size=n_train, replace=False))
        X, y = X[idx], y[idx]
    train, val = _split_train(X, y, val_fraction, seed)
    X_test, y_test = parts['test'].images, parts['test'].labels
    if n_test is not None:
        X_test, y_test = X_test[:n_test], y_test[:n_test]
    data = Dataset.from_splits(name='mnist', train=train, val=val,
                               test=(X_test, y_test))
    logger.info('Loaded MNIST: {}'.format(data.counts()))
    return data


def load_digits_dataset(seed=0, test_size=0.25, val_fraction=0.1):
    """
    The scikit-learn 8x8 digits as a (n, 8, 8, 1) dataset in [-1, 1].

    Splits are stratified and seeded.
    """
    digits = load_digits()
    X = (digits.images / 8.0 - 1.0)[..., np.newaxis]
    y = digits.target
    X_rest, X_test, y_rest, y_test = train_test_split(
        X, y, test_size=test_size, random_state=seed, stratify=y)
    train, val = _split_train(X_rest, y_rest, val_fraction, seed)
    return Dataset.from_splits(name='digits', train=train, val=val,
                               test=(X_test, y_test))


def make_toy_dataset(n_samples=200, n_features=30, n_classes=2, noise=0.1,
                     test_size=0.25, seed=0):
    """
    Noisy copies of random +-1 class prototypes.

    Every feature of a sample is its class prototype's value, flipped with
    probability ``noise``. Images have shape (n, 1, 1, n_features).

    Examples
    --------
    >>> data = make_toy_dataset(n_samples=40, seed=1)
    >>> data.images.shape
    (40, 1, 1, 30)
    """
    rng = check_random_state(seed)
    prototypes = rng.choice([-1.0, 1.0], size=(n_classes, n_features))
    labels = rng.permutation(np.arange(n_samples) % n_classes)
    flips = np.where(rng.rand(n_samples, n_features) < noise, -1.0, 1.0)
    images = (prototypes[labels] * flips).reshape(n_samples, 1, 1, n_features)
    if not test_size:
        return Dataset.from_splits(name='toy', train=(images, labels))
    X_tr, X_te, y_tr, y_te = train_test_split(
        images, labels, test_size=test_size, random_state=seed, stratify=labels)
    return Dataset.from_splits(name='toy', train=(X_tr, y_tr),
                               test=(X_te, y_te))


__all__ = ['Dataset',
           'IdxFormatError',
           'binarize_images',
           'parse_idx',
           'read_idx',
           'normalize_images',
           'load_idx',
           'load_mnist',
           'load_digits_dataset',
           'make_toy_dataset']
