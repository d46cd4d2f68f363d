"""
Command-line front end.

Commands: ``train``, ``eval``, ``sweep``, ``estimate``, ``pareto``,
``emit-hdl`` and ``selfcheck``. :func:`main` returns the exit code: 0 on
success, 1 on a runtime failure, 2 on a usage or parse error.
"""

import argparse
import logging
import os
import sys

import numpy as np
from pandas import DataFrame
from sklearn.utils import check_random_state

from . import bitcore
from .binlayers import (NetworkConfig, NetworkConfigError, bn_apply,
                        fold_bn_to_threshold, layer_affine, threshold_bits,
                        LayerConfig)
from .costmodel import (DEVICES, ConfigStringError, apply_config,
                        network_cost, pareto_table, read_accuracy_table)
from .datasets import (Dataset, IdxFormatError, load_digits_dataset,
                       load_mnist)
from .hdlgen import (HdlParseError, HdlTreeSpec, emit_unit, parse_unit_spec,
                     reference_for, verify_emitted, write_verilog)
from .trainer import (LOSSES, OPTIMIZERS, ConfigSweep, TrainConfig,
                      TrainingDivergedError, evaluate, load_checkpoint,
                      save_checkpoint, train)

logger = logging.getLogger(__name__)

MLP_HIDDEN = {'sfc': (256, 256, 256),
              'lfc': (1024, 1024, 1024)}
BUILTIN_NETS = ('cnv-p',) + tuple(sorted(MLP_HIDDEN))

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class UsageError(ValueError):
    """ Arguments that parse but do not fit together. """


def load_network(spec, input_shape=None, n_classes=10):
    """
    A built-in network name or a JSON network file.

    ``sfc`` and ``lfc`` are MLPs with three hidden layers of 256 and 1024
    neurons, built for ``input_shape`` (MNIST by default).
    """
    if spec == 'cnv-p':
        return NetworkConfig.cnv_p()
    if spec in MLP_HIDDEN:
        return NetworkConfig.mlp(input_shape=tuple(input_shape or (28, 28, 1)),
                                 hidden=MLP_HIDDEN[spec], n_classes=n_classes,
                                 name=spec)
    return NetworkConfig.load_json(spec)


def _train_subset(data, n):
    train_idx = np.flatnonzero(data.split == 'train')
    keep = np.ones(len(data.labels), dtype=bool)
    keep[train_idx[n:]] = False
    return Dataset(data.images[keep], data.labels[keep], data.split[keep],
                   name=data.name)


def load_data(spec, seed=0, subset=None):
    """ ``digits`` or a directory of MNIST IDX files. """
    if spec == 'digits':
        data = load_digits_dataset(seed=seed)
        if subset is not None:
            data = _train_subset(data, subset)
        return data
    if os.path.isdir(spec):
        return load_mnist(spec, n_train=subset, seed=seed)
    raise UsageError(
        '--data must be "digits" or a directory of IDX files, got {!r}'
        .format(spec))


def _check_input_shape(net, data):
    if tuple(net.input_shape) != tuple(data.input_shape):
        raise UsageError(
            'Network expects inputs of shape {}, data has {}'.format(
                tuple(net.input_shape), tuple(data.input_shape)))


def _write_csv(frame, path):
    if path is None:
        frame.to_csv(sys.stdout, index=False)
        return
    frame.to_csv(path, index=False)
    logger.info('Wrote {}'.format(path))


def cmd_train(args):
    data = load_data(args.data, seed=args.seed, subset=args.subset)
    net = load_network(args.net, data.input_shape, data.n_classes)
    _check_input_shape(net, data)
    if args.config:
        net = apply_config(net, args.config)
    cfg = TrainConfig(lr=args.lr, epochs=args.epochs,
                      batch_size=args.batch_size, seed=args.seed,
                      optimizer=args.optimizer, loss=args.loss)
    weights, history = train(net, data, cfg)
    meta = dict(config=args.config or '', data=args.data)
    if data.counts()['test']:
        error = 100.0 * (1.0 - evaluate(net, weights, data, 'test'))
        meta['test_error_percent'] = error
        print('test error: {:.2f}%'.format(error))
    save_checkpoint(args.out, net, weights, history=history, meta=meta,
                    seed=args.seed)
    return EXIT_OK


def cmd_eval(args):
    net, weights, meta = load_checkpoint(args.ckpt)
    seed = args.seed if args.seed is not None else meta.get('seed', 0)
    data = load_data(args.data, seed=seed)
    _check_input_shape(net, data)
    error = 100.0 * (1.0 - evaluate(net, weights, data, args.split))
    print('{} error: {:.2f}%'.format(args.split, error))
    return EXIT_OK


def cmd_sweep(args):
    data = load_data(args.data, seed=args.seeds[0], subset=args.subset)
    net = load_network(args.net, data.input_shape, data.n_classes)
    _check_input_shape(net, data)
    for config in args.configs:
        apply_config(net, config)
    sweep = ConfigSweep(net, args.configs, seeds=args.seeds,
                        n_jobs=args.n_jobs, epochs=args.epochs, lr=args.lr,
                        batch_size=args.batch_size)
    results = sweep.get_results(data)
    _write_csv(ConfigSweep.to_accuracy_table(results), args.out)
    return EXIT_OK


def cmd_estimate(args):
    net = load_network(args.net)
    report = network_cost(net, args.device, config=args.config,
                          folded=not args.nonfolded,
                          ff_multiplier=args.ff_multiplier)
    logger.info('{} on {}: {} LUTs, {:.1f}% below the all-B baseline'.format(
        report.config, report.device, report.total,
        report.improvement_percent))
    frame = report.with_reference() if args.reference else report.to_frame()
    _write_csv(frame, args.out)
    return EXIT_OK


def cmd_pareto(args):
    net = load_network(args.net)
    table = pareto_table(net, args.device, read_accuracy_table(args.acc),
                         n_jobs=args.n_jobs)
    _write_csv(table, args.out)
    return EXIT_OK


def cmd_emit_hdl(args):
    try:
        spec = parse_unit_spec(args.unit, register_io=args.register_io)
    except ValueError as e:
        raise UsageError(str(e))
    if args.register_io and isinstance(spec, HdlTreeSpec):
        raise UsageError('--register-io applies to xnorfa and maj units only')
    text = emit_unit(spec)
    if args.out is None:
        sys.stdout.write(text)
    else:
        write_verilog(text, args.out)
    if not args.verify:
        return EXIT_OK
    report = verify_emitted(text, reference_for(spec))
    print('{}: {}/{} match{}'.format(
        spec.name, report.matched, report.total,
        ' (exhaustive)' if report.exhaustive else ''))
    for mismatch in report.mismatches:
        logger.error('Mismatch: {}'.format(mismatch))
    return EXIT_OK if report.ok else EXIT_FAILURE


def _random_tensor(rng, n):
    return bitcore.pack(rng.randint(0, 2, size=n).astype(bool), bits=True)


def _check_xnor(rng):
    n = rng.randint(1, 200)
    a, b = _random_tensor(rng, n), _random_tensor(rng, n)
    return bitcore.xnor(a, b) == bitcore.oracle_xnor(a, b)


def _check_popcount(rng):
    t = _random_tensor(rng, rng.randint(1, 300))
    return bitcore.popcount(t) == bitcore.oracle_popcount(t)


def _check_maj_reduce(rng):
    m = int(rng.choice([3, 5, 7, 9]))
    t = _random_tensor(rng, m * rng.randint(1, 40))
    return bitcore.maj_reduce(t, m) == bitcore.oracle_maj_reduce(t, m)


def _check_neurons(rng):
    params = bitcore.MajParams(m=int(rng.choice([3, 5, 7])))
    n = params.m * rng.randint(1, 40)
    x, w = _random_tensor(rng, n), _random_tensor(rng, n)
    bias = int(rng.randint(-5, 6))
    result = bitcore.neuron(x, w, params, bias)
    return (result.exact == bitcore.oracle_xnor_popcount_neuron(x, w, bias)
            and abs(result.approx - bitcore.oracle_xnormaj_neuron(
                x, w, params, bias)) <= 1e-9)


def _check_serialization(rng):
    shape = tuple(int(d) for d in rng.randint(1, 9, size=rng.randint(1, 4)))
    t = bitcore.pack(rng.randint(0, 2, size=shape).astype(bool), shape=shape,
                     bits=True)
    return bitcore.from_bytes(bitcore.to_bytes(t)) == t


def _check_threshold_folding(rng):
    layer = LayerConfig('fc', cin=3 * rng.randint(1, 20), cout=4,
                        majority=bool(rng.randint(2)))
    a, c = layer_affine(layer, bias=float(rng.randn()))
    gamma, mu, beta = rng.randn(3, 4)
    inv_std = rng.uniform(0.1, 2.0, size=4)
    t = fold_bn_to_threshold(gamma, mu, inv_std, beta, a, c)
    s = np.arange(layer.n_inputs + 1)[:, np.newaxis]
    expected = bn_apply(s, gamma, mu, inv_std, beta, a, c) >= 0
    return bool((threshold_bits(np.repeat(s, 4, axis=1), t) == expected).all())


CHECKS = [('xnor', _check_xnor),
          ('popcount', _check_popcount),
          ('maj_reduce', _check_maj_reduce),
          ('neurons', _check_neurons),
          ('serialization', _check_serialization),
          ('threshold_folding', _check_threshold_folding)]

HDL_CHECKS = ['maj:3', 'maj:5', 'xnorfa', 'tree:8:1', 'tree:9:2']


def run_selfcheck(trials=50, seed=0):
    """
    Packed kernels against their bit-loop oracles, threshold folding
    against floating-point batch normalization, and emitted HDL against
    its references.

    Returns
    -------
    summary : pandas DataFrame
        Columns ``name``, ``trials``, ``passed``.
    """
    rng = check_random_state(seed)
    rows = []
    for name, check in CHECKS:
        passed = all([check(rng) for _ in range(trials)])
        rows.append(dict(name=name, trials=trials, passed=passed))
    for unit in HDL_CHECKS:
        spec = parse_unit_spec(unit)
        report = verify_emitted(emit_unit(spec), reference_for(spec))
        rows.append(dict(name='hdl ' + unit, trials=report.total,
                         passed=report.ok))
    return DataFrame(rows, columns=['name', 'trials', 'passed'])


def cmd_selfcheck(args):
    summary = run_selfcheck(trials=args.trials, seed=args.seed)
    print(summary.to_string(index=False))
    return EXIT_OK if summary['passed'].all() else EXIT_FAILURE


def _add_training_flags(p):
    p.add_argument('--epochs', type=int, default=10)
    p.add_argument('--batch-size', type=int, default=64)
    p.add_argument('--lr', type=float, default=1e-3)
    p.add_argument('--subset', type=int, default=None,
                   help='Use only the first N training images.')


def build_arg_parser():
    parser = argparse.ArgumentParser(
        prog='majnet',
        description='Binary networks with majority-compressed popcounts.')
    parser.add_argument('--verbose', action='store_true',
                        help='Enable debug logging.')
    sub = parser.add_subparsers(dest='command')
    sub.required = True
    net_help = 'Network JSON file or one of {}.'.format(', '.join(BUILTIN_NETS))

    p = sub.add_parser('train', help='Train a network and write a checkpoint.')
    p.add_argument('--net', required=True, help=net_help)
    p.add_argument('--data', required=True,
                   help='"digits" or a directory of MNIST IDX files.')
    p.add_argument('--config', default=None, help='B/M string, e.g. "+MMB".')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out', required=True, help='Checkpoint directory.')
    p.add_argument('--optimizer', choices=OPTIMIZERS, default='adam')
    p.add_argument('--loss', choices=LOSSES, default='squared_hinge')
    _add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('eval', help='Error rate of a checkpoint.')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--split', choices=('train', 'val', 'test'),
                   default='test')
    p.add_argument('--seed', type=int, default=None,
                   help='Split seed; defaults to the training seed.')
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('sweep', help='Train several B/M configurations.')
    p.add_argument('--net', required=True, help=net_help)
    p.add_argument('--data', required=True)
    p.add_argument('--configs', nargs='+', required=True)
    p.add_argument('--seeds', type=int, nargs='+', default=[0])
    p.add_argument('--n-jobs', type=int, default=1)
    p.add_argument('--out', default=None,
                   help='Accuracy table CSV (config,error_percent).')
    _add_training_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser('estimate', help='LUT estimate of a configuration.')
    p.add_argument('--net', required=True, help=net_help)
    p.add_argument('--config', default=None)
    p.add_argument('--device', choices=DEVICES, required=True)
    p.add_argument('--nonfolded', action='store_true',
                   help='Cost every layer with folding factor 1.')
    p.add_argument('--ff-multiplier', type=int, default=1)
    p.add_argument('--reference', action='store_true',
                   help='Join the synthesized CNV-P reference counts.')
    p.add_argument('--out', default=None)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser('pareto', help='Accuracy/LUT Pareto table.')
    p.add_argument('--net', required=True, help=net_help)
    p.add_argument('--acc', required=True,
                   help='CSV with header config,error_percent.')
    p.add_argument('--device', choices=DEVICES, required=True)
    p.add_argument('--n-jobs', type=int, default=1)
    p.add_argument('--out', default=None)
    p.set_defaults(func=cmd_pareto)

    p = sub.add_parser('emit-hdl', help='Write a Verilog unit.')
    p.add_argument('--unit', required=True, help='xnorfa, maj:M or tree:N:W.')
    p.add_argument('--register-io', action='store_true')
    p.add_argument('--verify', action='store_true',
                   help='Check the text against its reference.')
    p.add_argument('--out', default=None)
    p.set_defaults(func=cmd_emit_hdl)

    p = sub.add_parser('selfcheck', help='Run the oracle suites.')
    p.add_argument('--trials', type=int, default=50)
    p.add_argument('--seed', type=int, default=0)
    p.set_defaults(func=cmd_selfcheck)
    return parser


def _configure_logging(verbose):
    level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(level=level, format='%(levelname)s: %(message)s')


def main(argv=None):
    """ Run one command; returns the exit code. """
    try:
        args = build_arg_parser().parse_args(argv)
    except SystemExit as e:
        return e.code
    _configure_logging(args.verbose)
    try:
        return args.func(args)
    except (ConfigStringError, NetworkConfigError, IdxFormatError,
            HdlParseError, UsageError) as e:
        logger.error(str(e))
        return EXIT_USAGE
    except (TrainingDivergedError, OSError, ValueError, RuntimeError) as e:
        logger.error(str(e))
        return EXIT_FAILURE


__all__ = ['UsageError',
           'load_network',
           'load_data',
           'run_selfcheck',
           'build_arg_parser',
           'main']


if __name__ == '__main__':
    sys.exit(main())
