""" FPGA logic-element cost model for B/M network configurations. """

import logging
import math
from dataclasses import dataclass
from itertools import product

import numpy as np
from joblib import Parallel, delayed
from pandas import DataFrame, concat, read_csv

from .binlayers import NetworkConfig

logger = logging.getLogger(__name__)

DEVICES = ('xilinx', 'intel')
UNITS = ('xnorfa', 'maj3', 'maj5', 'maj7', 'maj9')

# Delays are printed to 0.01 ns.
DELAY_RESOLUTION = 0.01

# XNorFA counts 3 input pairs into a 2-bit sum.
FA_PAIRS = 3
FA_WIDTH = 2


class ConfigStringError(ValueError):
    """ Malformed B/M configuration string. """


@dataclass(frozen=True)
class UnitCost(object):
    """
    Synthesis figures of one frontend unit.

    Parameters
    ----------
    luts : int
        LUTs (Xilinx) or ALMs (Intel).

    delay_ns : float
        Registered-I/O delay.

    pairs : int
        Input pairs consumed.

    outputs : int
        Output bits produced.

    printed_eff : float
        Published efficiency, compression rate / (luts * delay).
    """

    luts: int
    delay_ns: float
    pairs: int
    outputs: int
    printed_eff: float

    @property
    def compression(self):
        return self.pairs, self.outputs

    @property
    def compression_rate(self):
        return self.pairs / self.outputs


UNIT_COSTS = {
    'xilinx': {'xnorfa': UnitCost(2, 0.68, 3, 2, 1.11),
               'maj3': UnitCost(1, 0.64, 3, 1, 4.67),
               'maj5': UnitCost(3, 1.10, 5, 1, 1.52),
               'maj7': UnitCost(5, 0.99, 7, 1, 1.41),
               'maj9': UnitCost(7, 1.07, 9, 1, 1.20)},
    'intel': {'xnorfa': UnitCost(2, 0.86, 3, 2, 0.87),
              'maj3': UnitCost(1, 0.70, 3, 1, 4.26),
              'maj5': UnitCost(3, 0.96, 5, 1, 1.74),
              'maj7': UnitCost(5, 1.24, 7, 1, 1.13),
              'maj9': UnitCost(9, 1.78, 9, 1, 0.56)},
}

# Synthesized LE counts of the padded CNV network (layer 1 excluded):
# (layer, cin, cout, ff, B LEs, M LEs, folded %, non-folded %).
CNV_P_REFERENCE = DataFrame(
    [('Conv2', 64, 64, 1, 55000, 40000, 27, 27),
     ('Conv3', 64, 128, 4, 38000, 30000, 20, 26),
     ('Conv4', 128, 128, 4, 86000, 63000, 27, 36),
     ('Conv5', 128, 256, 16, 43000, 33000, 27, 36),
     ('Conv6', 256, 256, 16, 87000, 50000, 43, 56),
     ('FC1', 4096, 512, 64, 96000, 67000, 30, 36),
     ('FC2', 512, 512, 64, 11000, 8000, 22, 36),
     ('FC3', 512, 10, 10, 1000, 700, 29, 30),
     ('TOTAL', 0, 0, 0, 417000, 291000, 30, 43)],
    columns=['layer', 'cin', 'cout', 'ff', 'ref_b_le', 'ref_m_le',
             'ref_improvement_folded', 'ref_improvement_nonfolded'])


def _device(device):
    key = str(device).lower()
    if key not in UNIT_COSTS:
        raise ValueError('Unknown device {!r}, expected one of {}'.format(
            device, DEVICES))
    return key


def unit_key(majority=False, m=3):
    return 'maj{}'.format(m) if majority else 'xnorfa'


def unit_cost(device, unit):
    """
    Published cost of a frontend unit.

    Examples
    --------
    >>> unit_cost('xilinx', 'maj3')
    UnitCost(luts=1, delay_ns=0.64, pairs=3, outputs=1, printed_eff=4.67)
    """
    table = UNIT_COSTS[_device(device)]
    if unit not in table:
        raise ValueError('Unknown unit {!r}, expected one of {}'.format(
            unit, UNITS))
    return table[unit]


def efficiency(device, unit):
    """
    Published efficiency of a unit, as printed in the unit table.

    This is not recomputed: the listed delays are rounded to 0.01 ns, so
    ``compression_rate / (luts * delay)`` can differ from the printed
    figure (4.6875 against 4.67 for the Xilinx Maj-3 unit). Use
    :func:`computed_efficiency` for the recomputed value and
    :func:`efficiency_bounds` for the range the rounding allows.
    """
    return unit_cost(device, unit).printed_eff


def computed_efficiency(device, unit):
    """ Compression rate / (luts * delay) from the listed luts and delay. """
    cost = unit_cost(device, unit)
    return cost.compression_rate / (cost.luts * cost.delay_ns)


def efficiency_bounds(device, unit):
    """
    Efficiencies consistent with the delay's printed rounding.

    Returns
    -------
    low, high : float
    """
    cost = unit_cost(device, unit)
    half = DELAY_RESOLUTION / 2
    rate = cost.compression_rate / cost.luts
    return rate / (cost.delay_ns + half), rate / (cost.delay_ns - half)


def adder_tree(num_inputs, input_width):
    """
    Balanced adder tree over equal-width operands.

    Operands are paired level by level; adding a b1-bit and a b2-bit
    operand costs max(b1, b2) LUTs and yields max(b1, b2) + 1 bits. An odd
    operand is carried to the next level.

    Returns
    -------
    luts : int

    output_width : int
    """
    if num_inputs < 1 or input_width < 1:
        raise ValueError(
            'Provide num_inputs >= 1 and input_width >= 1, got {} and {}'
            .format(num_inputs, input_width))
    widths = [input_width] * num_inputs
    luts = 0
    while len(widths) > 1:
        level = []
        for a, b in zip(widths[0::2], widths[1::2]):
            luts += max(a, b)
            level.append(max(a, b) + 1)
        if len(widths) % 2:
            level.append(widths[-1])
        widths = level
    return luts, widths[0]


def adder_tree_cost(num_inputs, input_width):
    """
    LUTs of :func:`adder_tree`.

    Examples
    --------
    >>> adder_tree_cost(4, 2)
    7
    """
    return adder_tree(num_inputs, input_width)[0]


def comparator_cost(width):
    """ Threshold comparator LUTs, two bits per LUT. """
    return int(math.ceil(width / 2.0))


@dataclass(frozen=True)
class LayerCost(object):
    n_pairs: int
    frontend_units: int
    frontend_luts: int
    tree_luts: int
    threshold_luts: int
    pus: int
    ff: int

    @property
    def per_neuron(self):
        return self.frontend_luts + self.tree_luts + self.threshold_luts

    @property
    def total(self):
        return self.pus * self.per_neuron / self.ff


def layer_cost(cfg, device, has_threshold=True, ff=None):
    """
    LE estimate of one Conv or FC layer.

    Each of the ``cout`` processing units evaluates one neuron: a row of
    frontend units (XNorFA for exact layers, XNorMaj-m for majority ones),
    an adder tree over their outputs and an optional threshold comparator.
    The folding factor divides the number of instantiated units.

    Parameters
    ----------
    cfg : LayerConfig

    device : {'xilinx', 'intel'}

    has_threshold : bool, default True
        False for the network's last layer.

    ff : int, optional
        Overrides ``cfg.ff``.

    Returns
    -------
    cost : LayerCost
    """
    if not cfg.is_compute:
        raise ValueError('Only conv and fc layers have a cost')
    n_pairs = cfg.n_inputs
    if cfg.majority:
        m = cfg.maj_params.m
        unit = unit_cost(device, unit_key(True, m))
        units = int(math.ceil(n_pairs / m))
        width = 1
    else:
        unit = unit_cost(device, 'xnorfa')
        units = int(math.ceil(n_pairs / FA_PAIRS))
        width = FA_WIDTH
    tree_luts, out_width = adder_tree(units, width)
    threshold = comparator_cost(out_width) if has_threshold else 0
    return LayerCost(n_pairs=n_pairs, frontend_units=units,
                     frontend_luts=units * unit.luts, tree_luts=tree_luts,
                     threshold_luts=threshold, pus=cfg.cout,
                     ff=cfg.ff if ff is None else ff)


def _compute_names(net):
    names, counts = [], {'conv': 0, 'fc': 0}
    for i, layer in net.compute_layers:
        counts[layer.kind] += 1
        names.append('{}{}'.format('Conv' if layer.kind == 'conv' else 'FC',
                                   counts[layer.kind]))
    return names


def config_shape(net):
    """ Default (n_conv, n_fc) characters of a network's config strings. """
    n_convs = sum(1 for _, layer in net.compute_layers if layer.kind == 'conv')
    n_fcs = len(net.compute_layers) - n_convs
    if n_convs:
        return max(n_convs - 1, 0), min(1, n_fcs)
    return 0, n_fcs


def parse_config_string(s, n_conv=5, n_fc=1):
    """
    Parse a B/M configuration string.

    Characters before ``+`` select Conv2.. (the first Conv layer is never
    substituted), characters after it select FC1... ``B`` keeps the exact
    popcount, ``M`` uses majority groups.

    Parameters
    ----------
    s : str

    n_conv, n_fc : int or None
        Expected character counts; None accepts any count.

    Returns
    -------
    flags : tuple of bool
        Conv flags followed by FC flags.

    Examples
    --------
    >>> parse_config_string('BBMBM+M')
    (False, False, True, False, True, True)
    """
    if not isinstance(s, str):
        raise ConfigStringError('Config string must be str, got {!r}'.format(s))
    if s.count('+') != 1:
        raise ConfigStringError(
            "Config string {!r} needs exactly one '+' separator".format(s))
    for pos, char in enumerate(s):
        if char not in 'BM+':
            raise ConfigStringError(
                'Invalid character {!r} at position {} in {!r}; expected B '
                'or M'.format(char, pos, s))
    conv, fc = s.split('+')
    if n_conv is not None and len(conv) != n_conv:
        raise ConfigStringError(
            "Config string {!r} needs {} characters before '+', got {}".format(
                s, n_conv, len(conv)))
    if n_fc is not None and len(fc) != n_fc:
        raise ConfigStringError(
            "Config string {!r} needs {} characters after '+', got {}".format(
                s, n_fc, len(fc)))
    return tuple(char == 'M' for char in conv + fc)


def format_config_string(flags, n_conv=5):
    flags = list(flags)
    chars = ['M' if flag else 'B' for flag in flags]
    return ''.join(chars[:n_conv]) + '+' + ''.join(chars[n_conv:])


def all_config_strings(n_conv=5, n_fc=1):
    """ Every configuration, in lexicographic B < M order. """
    return [format_config_string([c == 'M' for c in chars], n_conv)
            for chars in product('BM', repeat=n_conv + n_fc)]


def apply_config(net, s):
    """
    Network with majority flags taken from a configuration string.

    Conv characters map onto Conv2, Conv3, ...; FC characters onto FC1,
    FC2, .... Layers the string does not cover are exact.
    """
    flags = parse_config_string(s, n_conv=None, n_fc=None)
    n_conv = s.index('+')
    conv = [i for i, layer in net.compute_layers if layer.kind == 'conv']
    fc = [i for i, layer in net.compute_layers if layer.kind == 'fc']
    eligible = conv[1:]
    if n_conv > len(eligible) or len(flags) - n_conv > len(fc):
        raise ConfigStringError(
            'Config string {!r} does not fit a network with {} conv and {} fc '
            'layers'.format(s, len(conv), len(fc)))
    chosen = dict(zip(eligible, flags[:n_conv]))
    chosen.update(zip(fc, flags[n_conv:]))
    return net.with_majority([chosen.get(i, False)
                              for i, _ in net.compute_layers])


@dataclass
class CostReport(object):
    """
    Per-layer LE estimates of a configuration and of the all-B baseline.

    Attributes
    ----------
    layers : pandas DataFrame
        One row per counted layer.
    """

    device: str
    config: str
    layers: DataFrame

    @property
    def total(self):
        return float(self.layers['total'].sum())

    @property
    def baseline_total(self):
        return float(self.layers['baseline_total'].sum())

    @property
    def improvement_percent(self):
        if self.baseline_total == 0:
            return 0.0
        return 100.0 * (1.0 - self.total / self.baseline_total)

    def to_frame(self):
        """ Layer rows followed by a TOTAL row. """
        total = {column: np.nan for column in self.layers.columns}
        total.update(layer='TOTAL', kind='', majority='',
                     frontend_luts=self.layers['frontend_luts'].sum(),
                     tree_luts=self.layers['tree_luts'].sum(),
                     threshold_luts=self.layers['threshold_luts'].sum(),
                     total=self.total, baseline_total=self.baseline_total,
                     improvement_percent=self.improvement_percent)
        return concat([self.layers, DataFrame([total])], ignore_index=True)

    def with_reference(self, reference=CNV_P_REFERENCE):
        """ Report joined with synthesized LE counts by layer name. """
        columns = ['layer', 'ref_b_le', 'ref_m_le', 'ref_improvement_folded',
                   'ref_improvement_nonfolded']
        return self.to_frame().merge(reference[columns], on='layer',
                                     how='left')

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False)


def network_cost(net, device, config=None, folded=True, ff_multiplier=1):
    """
    LE report of a network against its all-B baseline.

    Parameters
    ----------
    net : NetworkConfig

    device : {'xilinx', 'intel'}

    config : str, optional
        B/M string applied with :func:`apply_config`; defaults to the
        network's own majority flags.

    folded : bool, default True
        False costs every layer with ff = 1.

    ff_multiplier : int, default 1
        Extra folding applied to every layer.

    Returns
    -------
    report : CostReport
        The first Conv layer is not counted.
    """
    device = _device(device)
    if config is not None:
        net = apply_config(net, config)
    compute = net.compute_layers
    flags = [layer.majority for _, layer in compute]
    names = _compute_names(net)
    last = compute[-1][0]
    skip = compute[0][0] if compute[0][1].kind == 'conv' else None

    rows = []
    for name, (i, layer) in zip(names, compute):
        if i == skip:
            continue
        ff = (layer.ff if folded else 1) * ff_multiplier
        cost = layer_cost(layer, device, has_threshold=i != last, ff=ff)
        base = layer_cost(layer.with_majority(False), device,
                          has_threshold=i != last, ff=ff)
        rows.append(dict(layer=name, kind=layer.kind, cin=layer.cin,
                         cout=layer.cout, ff=ff,
                         majority='M' if layer.majority else 'B',
                         n_pairs=cost.n_pairs,
                         frontend_units=cost.frontend_units,
                         frontend_luts=cost.frontend_luts,
                         tree_luts=cost.tree_luts,
                         threshold_luts=cost.threshold_luts,
                         per_neuron=cost.per_neuron, total=cost.total,
                         baseline_total=base.total,
                         improvement_percent=100.0 * (
                             1.0 - cost.total / base.total)))
    columns = ['layer', 'kind', 'cin', 'cout', 'ff', 'majority', 'n_pairs',
               'frontend_units', 'frontend_luts', 'tree_luts',
               'threshold_luts', 'per_neuron', 'total', 'baseline_total',
               'improvement_percent']
    label = config
    if label is None:
        _, n_fc = config_shape(net)
        conv_flags = [f for (_, layer), f in zip(compute, flags)
                      if layer.kind == 'conv'][1:]
        fc_flags = [f for (_, layer), f in zip(compute, flags)
                    if layer.kind == 'fc'][:n_fc]
        label = format_config_string(conv_flags + fc_flags, len(conv_flags))
    return CostReport(device=device, config=label,
                      layers=DataFrame(rows, columns=columns))


def _config_cost(net, config, device):
    report = network_cost(net, device, config=config)
    return report.total, report.baseline_total


def enumerate_configs(net, device, n_conv=None, n_fc=None, n_jobs=1):
    """
    Cost of every B/M configuration of a network.

    Returns
    -------
    costs : pandas DataFrame
        Columns ``config``, ``luts``, ``baseline_luts``,
        ``improvement_percent`` in :func:`all_config_strings` order.
    """
    default_conv, default_fc = config_shape(net)
    n_conv = default_conv if n_conv is None else n_conv
    n_fc = default_fc if n_fc is None else n_fc
    configs = all_config_strings(n_conv, n_fc)
    results = Parallel(n_jobs=n_jobs)(
        delayed(_config_cost)(net, config, device) for config in configs)
    luts = [total for total, _ in results]
    base = [baseline for _, baseline in results]
    return DataFrame({'config': configs, 'luts': luts, 'baseline_luts': base,
                      'improvement_percent': [100.0 * (1.0 - t / b)
                                              for t, b in results]},
                     columns=['config', 'luts', 'baseline_luts',
                              'improvement_percent'])


def pareto_front(points):
    """
    Indices of the non-dominated points, minimizing both coordinates.

    A point is dominated when another is no worse in both coordinates and
    strictly better in one.
    """
    points = [tuple(p) for p in points]
    front = []
    for i, (cost_i, err_i) in enumerate(points):
        dominated = False
        for cost_j, err_j in points:
            if (cost_j <= cost_i and err_j <= err_i and
                    (cost_j < cost_i or err_j < err_i)):
                dominated = True
                break
        if not dominated:
            front.append(i)
    return front


def read_accuracy_table(path):
    """ CSV with header ``config,error_percent``. """
    table = read_csv(path, dtype={'config': str})
    missing = {'config', 'error_percent'} - set(table.columns)
    if missing:
        raise ValueError('{}: missing columns {}'.format(path, sorted(missing)))
    return table[['config', 'error_percent']]


def _accuracy_items(accuracy_table):
    if isinstance(accuracy_table, DataFrame):
        return list(zip(accuracy_table['config'],
                        accuracy_table['error_percent']))
    return list(dict(accuracy_table).items())


def pareto_table(net, device, accuracy_table, n_jobs=1):
    """
    Join configuration costs with measured error rates.

    Parameters
    ----------
    net : NetworkConfig

    device : {'xilinx', 'intel'}

    accuracy_table : dict or pandas DataFrame
        ``config -> error_percent``.

    Returns
    -------
    table : pandas DataFrame
        Columns ``config``, ``luts``, ``error_percent``, ``on_front``,
        sorted by cost, then error, then config string.
    """
    n_conv, n_fc = config_shape(net)
    items = _accuracy_items(accuracy_table)
    for config, _ in items:
        parse_config_string(config, n_conv, n_fc)
    costs = enumerate_configs(net, device, n_conv, n_fc, n_jobs=n_jobs)
    luts = dict(zip(costs['config'], costs['luts']))
    rows = [dict(config=config, luts=luts[config],
                 error_percent=float(error)) for config, error in items]
    table = DataFrame(rows, columns=['config', 'luts', 'error_percent'])
    front = set(pareto_front(zip(table['luts'], table['error_percent'])))
    table['on_front'] = [i in front for i in range(len(table))]
    table = table.sort_values(['luts', 'error_percent', 'config'],
                              kind='mergesort').reset_index(drop=True)
    logger.info('Pareto front: {} of {} configurations'.format(
        int(table['on_front'].sum()), len(table)))
    return table


def pareto(net, device, accuracy_table, n_jobs=1):
    """
    Pareto-optimal configurations.

    Returns
    -------
    front : list of (config, luts, error_percent)
    """
    table = pareto_table(net, device, accuracy_table, n_jobs=n_jobs)
    table = table[table['on_front']]
    return list(zip(table['config'], table['luts'], table['error_percent']))


__all__ = ['ConfigStringError',
           'UnitCost',
           'LayerCost',
           'CostReport',
           'UNIT_COSTS',
           'CNV_P_REFERENCE',
           'unit_cost',
           'unit_key',
           'efficiency',
           'computed_efficiency',
           'efficiency_bounds',
           'adder_tree',
           'adder_tree_cost',
           'comparator_cost',
           'layer_cost',
           'network_cost',
           'config_shape',
           'parse_config_string',
           'format_config_string',
           'all_config_strings',
           'apply_config',
           'enumerate_configs',
           'pareto_front',
           'read_accuracy_table',
           'pareto_table',
           'pareto']
