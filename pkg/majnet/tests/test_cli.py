import os
import sys
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__),
                                                '../..')))

import json

import pytest
import pandas as pd

from majnet.binlayers import NetworkConfig
from majnet.cli import UsageError
from majnet.cli import build_arg_parser
from majnet.cli import load_data
from majnet.cli import load_network
from majnet.cli import main
from majnet.cli import run_selfcheck
from majnet.hdlgen import HdlTreeSpec
from majnet.hdlgen import emit_unit


@pytest.fixture
def digits_net(tmpdir):
    path = str(tmpdir.join('net.json'))
    NetworkConfig.mlp(input_shape=(8, 8, 1), hidden=(32,), n_classes=10,
                      name='digits-mlp').save_json(path)
    return path


def read_total(path):
    frame = pd.read_csv(path)
    return frame[frame['layer'] == 'TOTAL'].iloc[0]


def test_parser():
    args = build_arg_parser().parse_args(
        ['estimate', '--net', 'cnv-p', '--device', 'intel'])

    tests = [args.command == 'estimate',
             args.config is None,
             args.ff_multiplier == 1,
             not args.nonfolded,
             not args.verbose]
    assert all(tests)


def test_usage_errors(capsys):
    tests = [main([]) == 2,
             main(['estimate', '--net', 'cnv-p', '--device', 'lattice']) == 2,
             main(['emit-hdl']) == 2,
             main(['frobnicate']) == 2]
    assert all(tests)


def test_bad_config_string(caplog):
    code = main(['estimate', '--net', 'cnv-p', '--config', 'BBXBB+B',
                 '--device', 'xilinx'])
    assert code == 2
    assert "'X' at position 2" in caplog.text


def test_bad_network_file(tmpdir, caplog):
    path = tmpdir.join('broken.json')
    path.write('{"input_shape": [8, 8, 1], "layers": [')
    assert main(['estimate', '--net', str(path), '--device', 'xilinx']) == 2
    assert 'broken.json' in caplog.text
    missing = str(tmpdir.join('missing.json'))
    assert main(['estimate', '--net', missing, '--device', 'xilinx']) == 1


def test_estimate(tmpdir, capsys):
    all_m = str(tmpdir.join('m.csv'))
    all_b = str(tmpdir.join('b.csv'))
    ref = str(tmpdir.join('ref.csv'))

    tests = [main(['estimate', '--net', 'cnv-p', '--config', 'MMMMM+M',
                   '--device', 'xilinx', '--out', all_m]) == 0,
             main(['estimate', '--net', 'cnv-p', '--config', 'BBBBB+B',
                   '--device', 'xilinx', '--out', all_b]) == 0,
             main(['estimate', '--net', 'cnv-p', '--config', 'MMMMM+M',
                   '--device', 'intel', '--reference', '--nonfolded',
                   '--out', ref]) == 0]
    assert all(tests)
    assert 20 <= read_total(all_m)['improvement_percent'] <= 55
    assert read_total(all_b)['improvement_percent'] == 0
    assert read_total(ref)['ref_m_le'] == 291000

    assert main(['estimate', '--net', 'cnv-p', '--device', 'xilinx']) == 0
    out = capsys.readouterr().out
    assert out.startswith('layer,kind,cin,cout,ff,majority')
    assert 'TOTAL' in out


def test_pareto(tmpdir):
    acc = tmpdir.join('acc.csv')
    acc.write('config,error_percent\nBBBBB+B,1.0\nMMMMM+M,1.4\n'
              'BBMBM+M,1.2\nMBBBB+B,1.5\n')
    out = str(tmpdir.join('pareto.csv'))
    assert main(['pareto', '--net', 'cnv-p', '--acc', str(acc),
                 '--device', 'xilinx', '--out', out]) == 0
    table = pd.read_csv(out)

    tests = [list(table.columns) == ['config', 'luts', 'error_percent',
                                     'on_front'],
             len(table) == 4,
             table['config'].iloc[0] == 'MMMMM+M',
             set(table.loc[table['on_front'], 'config']) ==
             {'MMMMM+M', 'BBMBM+M', 'BBBBB+B'}]
    assert all(tests)

    bad = tmpdir.join('bad.csv')
    bad.write('config,error_percent\nBBBB+B,1.0\n')
    assert main(['pareto', '--net', 'cnv-p', '--acc', str(bad),
                 '--device', 'xilinx', '--out', out]) == 2


def test_emit_hdl(tmpdir, capsys):
    first = str(tmpdir.join('first.v'))
    second = str(tmpdir.join('second.v'))
    assert main(['emit-hdl', '--unit', 'tree:8:1', '--out', first]) == 0
    assert main(['emit-hdl', '--unit', 'tree:8:1', '--verify',
                 '--out', second]) == 0
    with open(first, 'rb') as f, open(second, 'rb') as g:
        assert f.read() == g.read()
    out = capsys.readouterr().out
    assert 'popcount_tree_n8_w1: 256/256 match (exhaustive)' in out

    assert main(['emit-hdl', '--unit', 'tree:3:2']) == 0
    assert capsys.readouterr().out == emit_unit(HdlTreeSpec(3, 2))
    assert main(['emit-hdl', '--unit', 'maj:3', '--register-io',
                 '--verify']) == 0
    assert 'xnormaj3_reg: 64/64 match' in capsys.readouterr().out


def test_emit_hdl_errors():
    tests = [main(['emit-hdl', '--unit', 'maj:4']) == 2,
             main(['emit-hdl', '--unit', 'adder']) == 2,
             main(['emit-hdl', '--unit', 'tree:8:1', '--register-io']) == 2]
    assert all(tests)


def test_selfcheck(capsys):
    summary = run_selfcheck(trials=5, seed=1)

    tests = [len(summary) == 11,
             list(summary.columns) == ['name', 'trials', 'passed'],
             summary['passed'].all(),
             summary.loc[summary['name'] == 'hdl tree:8:1',
                         'trials'].iloc[0] == 256]
    assert all(tests)
    assert main(['selfcheck', '--trials', '3']) == 0
    assert 'threshold_folding' in capsys.readouterr().out


def test_load_helpers(tmpdir):
    sfc = load_network('sfc', (8, 8, 1), 10)
    tests = [load_network('cnv-p') == NetworkConfig.cnv_p(),
             sfc.input_shape == (8, 8, 1),
             len(sfc.layers) == 4,
             load_data('digits', subset=100).counts()['train'] == 100]
    assert all(tests)
    with pytest.raises(UsageError):
        load_data(str(tmpdir.join('nowhere')))


def test_train_and_eval(tmpdir, capsys, digits_net):
    first = str(tmpdir.join('first'))
    second = str(tmpdir.join('second'))
    flags = ['train', '--net', digits_net, '--data', 'digits', '--epochs', '2',
             '--subset', '200', '--seed', '3', '--config', '+MB']
    assert main(flags + ['--out', first]) == 0
    trained = capsys.readouterr().out
    assert main(flags + ['--out', second]) == 0
    capsys.readouterr()

    history = pd.read_csv(os.path.join(first, 'history.csv'))
    with open(os.path.join(first, 'manifest.json')) as f:
        meta = json.load(f)['meta']
    tests = [trained.startswith('test error: '),
             len(history) == 2,
             meta['seed'] == 3,
             meta['epochs'] == 2,
             meta['config'] == '+MB',
             list(history.columns) == ['epoch', 'train_acc', 'val_acc',
                                       'loss'],
             sorted(os.listdir(first)) == sorted(os.listdir(second))]
    for name in os.listdir(first):
        with open(os.path.join(first, name), 'rb') as f, \
                open(os.path.join(second, name), 'rb') as g:
            tests.append(f.read() == g.read())
    assert all(tests)

    assert main(['eval', '--ckpt', first, '--data', 'digits']) == 0
    assert capsys.readouterr().out == trained
    assert main(['eval', '--ckpt', str(tmpdir.join('none')),
                 '--data', 'digits']) == 1


def test_train_shape_mismatch(tmpdir):
    path = str(tmpdir.join('mnist.json'))
    NetworkConfig.mlp(hidden=(16,)).save_json(path)
    tests = [main(['train', '--net', path, '--data', 'digits', '--epochs', '1',
                   '--out', str(tmpdir.join('ckpt'))]) == 2,
             main(['train', '--net', path, '--data', 'nowhere', '--epochs',
                   '1', '--out', str(tmpdir.join('ckpt'))]) == 2]
    assert all(tests)


def test_sweep(tmpdir, digits_net):
    out = str(tmpdir.join('acc.csv'))
    assert main(['sweep', '--net', digits_net, '--data', 'digits',
                 '--configs', '+BB', '+MM', '--seeds', '0', '1',
                 '--epochs', '1', '--subset', '150', '--out', out]) == 0
    table = pd.read_csv(out)
    assert list(table['config']) == ['+BB', '+MM']
    assert list(table.columns) == ['config', 'error_percent']
    assert main(['sweep', '--net', digits_net, '--data', 'digits',
                 '--configs', '+BX', '--epochs', '1']) == 2
