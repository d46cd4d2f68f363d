""" Packed binary tensors and XnorPopcount / XNorMaj neuron kernels. """

import logging
import struct
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

WORD_BITS = 64

m1 = np.uint64(0x5555555555555555)
m2 = np.uint64(0x3333333333333333)
m4 = np.uint64(0x0F0F0F0F0F0F0F0F)
h01 = np.uint64(0x0101010101010101)
ALL_ONES = np.uint64(0xFFFFFFFFFFFFFFFF)


def bit_count64(words):
    """
    Population count of every 64-bit word.

    Parameters
    ----------
    words : numpy array of uint64
        Words of any shape.

    Returns
    -------
    counts : numpy array of uint64
        Number of set bits in each word, same shape as ``words``.
    """
    x = np.array(words, dtype=np.uint64, ndmin=1)
    x = x - ((x >> np.uint64(1)) & m1)
    x = (x & m2) + ((x >> np.uint64(2)) & m2)
    x = (x + (x >> np.uint64(4))) & m4
    return (x * h01) >> np.uint64(56)


def n_words(n_bits):
    return (n_bits + WORD_BITS - 1) // WORD_BITS


def tail_mask(n_bits):
    """ Mask of the logical bits held by the final word. """
    rest = n_bits % WORD_BITS
    if rest == 0:
        return ALL_ONES
    return np.uint64((1 << rest) - 1)


def pack_rows(bits):
    """
    Pack the last axis of a 0/1 array into little-endian 64-bit words.

    Parameters
    ----------
    bits : array-like of bool or {0, 1}
        Array of shape (..., n).

    Returns
    -------
    words : numpy array of uint64
        Array of shape (..., ceil(n / 64)); padding bits are zero.
    """
    bits = np.asarray(bits, dtype=np.uint8)
    n = bits.shape[-1]
    pad = n_words(n) * WORD_BITS - n
    if pad:
        widths = [(0, 0)] * (bits.ndim - 1) + [(0, pad)]
        bits = np.pad(bits, widths)
    packed = np.packbits(bits, axis=-1, bitorder='little')
    packed = np.ascontiguousarray(packed)
    return packed.view('<u8').astype(np.uint64)


def unpack_rows(words, n):
    """
    Inverse of :func:`pack_rows`.

    Parameters
    ----------
    words : numpy array of uint64
        Array of shape (..., n_words).

    n : int
        Number of logical bits per row.

    Returns
    -------
    bits : numpy array of uint8
        Array of shape (..., n).
    """
    words = np.ascontiguousarray(np.asarray(words, dtype='<u8'))
    as_bytes = words.view(np.uint8)
    bits = np.unpackbits(as_bytes, axis=-1, bitorder='little')
    return bits[..., :n]


class BitTensor(object):
    """
    Packed binary tensor.

    Bit ``i`` of the row-major flattened tensor lives in word ``i // 64`` at
    bit position ``i % 64``. Bit 1 encodes +1 and bit 0 encodes -1. Padding
    bits beyond ``len`` are always zero.

    Parameters
    ----------
    shape : tuple of ints
        Logical shape.

    words : numpy array of uint64
        ``ceil(len / 64)`` words in canonical form.
    """

    __slots__ = ('shape', 'words', 'len')

    def __init__(self, shape, words):
        shape = tuple(int(d) for d in shape)
        length = int(np.prod(shape)) if shape else 0
        if length <= 0:
            raise ValueError(
                'BitTensor must hold at least one bit, got shape {}'.format(shape))
        words = np.array(words, dtype=np.uint64).reshape(-1)
        if words.size != n_words(length):
            raise ValueError(
                'Expected {} words for {} bits, got {}'.format(
                    n_words(length), length, words.size))
        if words[-1] & ~tail_mask(length):
            raise ValueError('Padding bits beyond len must be zero')
        words.flags.writeable = False
        self.shape = shape
        self.words = words
        self.len = length

    def __len__(self):
        return self.len

    def __eq__(self, other):
        if not isinstance(other, BitTensor):
            return NotImplemented
        return (self.shape == other.shape and
                bool(np.array_equal(self.words, other.words)))

    def __ne__(self, other):
        result = self.__eq__(other)
        if result is NotImplemented:
            return result
        return not result

    def __hash__(self):
        return hash((self.shape, self.words.tobytes()))

    def __repr__(self):
        return 'BitTensor(shape={}, len={})'.format(self.shape, self.len)

    def reshape(self, shape):
        shape = tuple(int(d) for d in shape)
        if int(np.prod(shape)) != self.len:
            raise ValueError(
                'Cannot reshape {} bits into shape {}'.format(self.len, shape))
        return BitTensor(shape, self.words)


def _from_bits(bits, shape):
    bits = np.asarray(bits, dtype=np.uint8).reshape(-1)
    return BitTensor(shape, pack_rows(bits))


def pack(values, shape=None, bits=False):
    """
    Pack signs (or explicit bits) into a :class:`BitTensor`.

    Parameters
    ----------
    values : array-like
        Reals whose sign is taken (bit is 1 iff value > 0), or explicit
        bits when ``values`` is boolean or ``bits`` is True.

    shape : tuple of ints, optional
        Logical shape; defaults to the shape of ``values``.

    bits : bool, default False
        Interpret ``values`` as 0/1 bits.

    Returns
    -------
    t : BitTensor

    Examples
    --------
    >>> int(pack([1, -1, -1, 1]).words[0])
    9
    """
    arr = np.asarray(values)
    if shape is None:
        shape = arr.shape if arr.ndim else (1,)
    shape = tuple(int(d) for d in shape)
    flat = arr.reshape(-1)
    if flat.size != int(np.prod(shape)):
        raise ValueError(
            'Got {} values for shape {} ({} elements)'.format(
                flat.size, shape, int(np.prod(shape))))
    if bits or arr.dtype == np.bool_:
        if not np.isin(flat, (0, 1)).all():
            raise ValueError('Explicit bits must be 0 or 1')
        return _from_bits(flat, shape)
    flat = flat.astype(np.float64)
    zeros = np.flatnonzero(flat == 0)
    if zeros.size:
        raise ValueError(
            'Value at index {} is zero and has no sign; binarize before '
            'packing'.format(int(zeros[0])))
    if np.isnan(flat).any():
        raise ValueError('Cannot pack NaN values')
    return _from_bits(flat > 0, shape)


def to_bits(t):
    """ Logical bits of ``t`` as a flat uint8 array. """
    return unpack_rows(t.words, t.len)


def unpack(t):
    """
    Unpack a tensor into real values in {-1, +1}.

    Returns
    -------
    values : numpy array of float64
        Flat array of length ``t.len``; element ``i`` is ``2 * bit(i) - 1``.
    """
    return 2.0 * to_bits(t) - 1.0


def _check_same_len(a, b):
    if a.len != b.len:
        raise ValueError(
            'Length mismatch: {} bits vs {} bits'.format(a.len, b.len))


def xnor(a, b):
    """
    Bit-wise XNOR; the sign of each output element is the product of the
    input signs.
    """
    _check_same_len(a, b)
    words = ~(a.words ^ b.words)
    words[-1] &= tail_mask(a.len)
    return BitTensor(a.shape, words)


def popcount(t):
    """ Number of set bits among the ``len`` logical bits. """
    return int(bit_count64(t.words).sum())


def check_group_size(m):
    if int(m) != m or m < 3 or m % 2 == 0:
        raise ValueError(
            'Majority group size must be an odd integer >= 3, got {}'.format(m))


def maj_reduce(t, m):
    """
    Majority of every consecutive group of ``m`` bits.

    Parameters
    ----------
    t : BitTensor
        Input bits; ``t.len`` must be divisible by ``m``.

    m : int
        Odd group size.

    Returns
    -------
    g : BitTensor
        Flat tensor of ``t.len // m`` bits; bit ``g`` is 1 iff at least
        ``(m + 1) // 2`` bits of group ``g`` are set.
    """
    check_group_size(m)
    if t.len % m:
        raise ValueError(
            'Length {} is not divisible by group size {}'.format(t.len, m))
    counts = to_bits(t).reshape(-1, m).sum(axis=1)
    majority = counts >= (m + 1) // 2
    return _from_bits(majority, (t.len // m,))


@dataclass(frozen=True)
class MajParams(object):
    """
    Majority group size and the scales of majority-true / majority-false
    groups.

    Parameters
    ----------
    m : int, default 3
        Odd group size.

    v1 : float, default 2.625
        Scale of a group whose majority is true.

    v0 : float, default 0.375
        Scale of a group whose majority is false.
    """

    m: int = 3
    v1: float = 2.625
    v0: float = 0.375

    def __post_init__(self):
        check_group_size(self.m)
        if not self.v1 > self.v0:
            raise ValueError(
                'v1 must exceed v0, got v1={} v0={}'.format(self.v1, self.v0))

    @property
    def scale(self):
        return self.v1 - self.v0

    @property
    def group_offset(self):
        """ Per-group constant of the expanded majority sum; zero when
        ``v1 + v0 == m``. """
        return self.v1 + self.v0 - self.m


@dataclass(frozen=True)
class NeuronResult(object):
    exact: float
    approx: float


def xnor_popcount_neuron(x, w, bias=0):
    """
    Exact binary neuron: ``2 * popcount(xnor(x, w)) - N + bias``.

    With an integer bias the result is an exact integer.
    """
    _check_same_len(x, w)
    return 2 * popcount(xnor(x, w)) - x.len + bias


def xnormaj_neuron(x, w, params, bias=0.0):
    """
    Approximate binary neuron with majority-compressed groups.

    Computes ``2 * sum_g(maj_g * (v1 - v0) + v0) - N + bias`` over the
    ``N / m`` consecutive groups of the XNOR bits.

    Parameters
    ----------
    x, w : BitTensor
        Activations and weights of equal length N, divisible by ``params.m``.

    params : MajParams

    bias : float, default 0.0

    Returns
    -------
    y : float
    """
    _check_same_len(x, w)
    g = maj_reduce(xnor(x, w), params.m)
    n_groups = g.len
    ones = popcount(g)
    return (2.0 * (ones * params.scale + n_groups * params.v0)
            - x.len + bias)


def neuron(x, w, params, bias=0):
    """ Exact and approximate outputs of one neuron. """
    return NeuronResult(exact=xnor_popcount_neuron(x, w, bias),
                        approx=xnormaj_neuron(x, w, params, bias))


def _oracle_bit(t, i):
    return (int(t.words[i // WORD_BITS]) >> (i % WORD_BITS)) & 1


def oracle_xnor(a, b):
    _check_same_len(a, b)
    bits = [1 - (_oracle_bit(a, i) ^ _oracle_bit(b, i)) for i in range(a.len)]
    return _from_bits(bits, a.shape)


def oracle_popcount(t):
    count = 0
    for i in range(t.len):
        count += _oracle_bit(t, i)
    return count


def oracle_maj_reduce(t, m):
    check_group_size(m)
    if t.len % m:
        raise ValueError(
            'Length {} is not divisible by group size {}'.format(t.len, m))
    out = []
    for g in range(t.len // m):
        ones = 0
        for k in range(m):
            ones += _oracle_bit(t, g * m + k)
        out.append(1 if 2 * ones >= m else 0)
    return _from_bits(out, (t.len // m,))


def oracle_xnor_popcount_neuron(x, w, bias=0):
    _check_same_len(x, w)
    total = 0
    for i in range(x.len):
        if _oracle_bit(x, i) == _oracle_bit(w, i):
            total += 1
    return 2 * total - x.len + bias


def oracle_xnormaj_neuron(x, w, params, bias=0.0):
    _check_same_len(x, w)
    m = params.m
    check_group_size(m)
    if x.len % m:
        raise ValueError(
            'Length {} is not divisible by group size {}'.format(x.len, m))
    y = 0.0
    for g in range(x.len // m):
        ones = 0
        for k in range(m):
            i = g * m + k
            if _oracle_bit(x, i) == _oracle_bit(w, i):
                ones += 1
        maj = 1 if 2 * ones >= m else 0
        y += 2.0 * (maj * (params.v1 - params.v0) + params.v0)
    return y - x.len + bias


# Serialized layout: <Q len, <H rank, <Q dims..., then <u8 words.

def to_bytes(t):
    header = struct.pack('<QH', t.len, len(t.shape))
    dims = struct.pack('<{}Q'.format(len(t.shape)), *t.shape)
    return header + dims + t.words.astype('<u8').tobytes()


def from_bytes(buf):
    """ Decode a tensor written by :func:`to_bytes`. """
    buf = bytes(buf)
    if len(buf) < 10:
        raise ValueError(
            'Truncated BitTensor header: {} of 10 bytes'.format(len(buf)))
    length, rank = struct.unpack_from('<QH', buf, 0)
    need = 10 + 8 * rank + 8 * n_words(length)
    if len(buf) < need:
        raise ValueError(
            'Truncated BitTensor: missing {} bytes'.format(need - len(buf)))
    shape = struct.unpack_from('<{}Q'.format(rank), buf, 10)
    if int(np.prod(shape)) != length:
        raise ValueError(
            'Shape {} does not match length {}'.format(shape, length))
    words = np.frombuffer(buf, dtype='<u8', count=n_words(length),
                          offset=10 + 8 * rank)
    return BitTensor(shape, words.astype(np.uint64))


def save(t, path):
    with open(path, 'wb') as f:
        f.write(to_bytes(t))


def load(path):
    with open(path, 'rb') as f:
        return from_bytes(f.read())


__all__ = ['BitTensor',
           'MajParams',
           'NeuronResult',
           'pack',
           'unpack',
           'to_bits',
           'pack_rows',
           'unpack_rows',
           'bit_count64',
           'xnor',
           'popcount',
           'maj_reduce',
           'xnor_popcount_neuron',
           'xnormaj_neuron',
           'neuron',
           'oracle_xnor',
           'oracle_popcount',
           'oracle_maj_reduce',
           'oracle_xnor_popcount_neuron',
           'oracle_xnormaj_neuron',
           'to_bytes',
           'from_bytes',
           'save',
           'load']
