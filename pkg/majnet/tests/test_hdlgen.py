import os
import sys
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__),
                                                '../..')))

import pytest
import numpy as np

from majnet.bitcore import maj_reduce
from majnet.bitcore import pack
from majnet.bitcore import to_bits
from majnet.bitcore import xnor
from majnet.hdlgen import HdlParseError
from majnet.hdlgen import HdlTreeSpec
from majnet.hdlgen import HdlUnitSpec
from majnet.hdlgen import emit_popcount_tree
from majnet.hdlgen import emit_unit
from majnet.hdlgen import emit_xnorfa_unit
from majnet.hdlgen import emit_xnormaj_unit
from majnet.hdlgen import evaluate_verilog
from majnet.hdlgen import parse_unit_spec
from majnet.hdlgen import parse_verilog
from majnet.hdlgen import reference_for
from majnet.hdlgen import reference_xnormaj
from majnet.hdlgen import verify_emitted
from majnet.hdlgen import write_verilog


GOLDEN = os.path.join(os.path.dirname(__file__), 'golden')


def golden(name):
    with open(os.path.join(GOLDEN, name), encoding='utf-8', newline='') as f:
        return f.read()


@pytest.mark.parametrize('name, spec', [
    ('xnormaj3.v', HdlUnitSpec('xnormaj', 3)),
    ('xnormaj3_reg.v', HdlUnitSpec('xnormaj', 3, register_io=True)),
    ('xnorfa.v', HdlUnitSpec('xnorfa')),
    ('popcount_tree_n3_w2.v', HdlTreeSpec(3, 2)),
])
def test_golden(name, spec):
    assert emit_unit(spec) == golden(name)
    assert emit_unit(spec) == emit_unit(spec)


def test_specs():
    tests = [HdlUnitSpec().name == 'xnormaj3',
             HdlUnitSpec('xnormaj', 5, register_io=True).name ==
             'xnormaj5_reg',
             HdlUnitSpec('xnorfa').name == 'xnorfa',
             HdlTreeSpec(8).output_width == 4,
             HdlTreeSpec(1).output_width == 1,
             HdlTreeSpec(3, 2).output_width == 4,
             HdlTreeSpec(9, 2).name == 'popcount_tree_n9_w2']
    assert all(tests)
    with pytest.raises(ValueError):
        HdlUnitSpec('xnormaj', 4)
    with pytest.raises(ValueError):
        HdlUnitSpec('xnorfa', 5)
    with pytest.raises(ValueError):
        HdlUnitSpec('lut6')
    with pytest.raises(ValueError):
        HdlTreeSpec(0)
    with pytest.raises(ValueError):
        HdlTreeSpec(33, 2)


def test_parse_unit_spec():
    tests = [parse_unit_spec('xnorfa') == HdlUnitSpec('xnorfa'),
             parse_unit_spec('maj:5') == HdlUnitSpec('xnormaj', 5),
             parse_unit_spec('maj:3', register_io=True) ==
             HdlUnitSpec('xnormaj', 3, register_io=True),
             parse_unit_spec('tree:8:1') == HdlTreeSpec(8, 1)]
    assert all(tests)
    for text in ('maj', 'maj:x', 'maj:4', 'tree:8', 'adder:3'):
        with pytest.raises(ValueError, match='Bad unit'):
            parse_unit_spec(text)


def test_xnormaj3_examples():
    text = emit_xnormaj_unit(HdlUnitSpec('xnormaj', 3))

    tests = [evaluate_verilog(text, {'x': 0b111, 'w': 0b111}) == {'maj': 1},
             evaluate_verilog(text, {'x': 0b111, 'w': 0b000}) == {'maj': 0},
             evaluate_verilog(text, {'x': 0b110, 'w': 0b100}) == {'maj': 1},
             evaluate_verilog(text, {'x': 0b011, 'w': 0b100}) == {'maj': 0}]
    assert all(tests)


def test_xnormaj3_matches_bitcore():
    module = parse_verilog(emit_xnormaj_unit(HdlUnitSpec('xnormaj', 3)))
    for xv in range(8):
        for wv in range(8):
            x = pack([bool(xv >> k & 1) for k in range(3)])
            w = pack([bool(wv >> k & 1) for k in range(3)])
            expected = int(to_bits(maj_reduce(xnor(x, w), 3))[0])
            assert module.evaluate({'x': xv, 'w': wv})['maj'] == expected


def test_xnorfa_examples():
    text = emit_xnorfa_unit()

    tests = [evaluate_verilog(text, {'x': 0b110, 'w': 0b110}) == {'sum': 3},
             evaluate_verilog(text, {'x': 0b110, 'w': 0b001}) == {'sum': 0},
             evaluate_verilog(text, {'x': 0b101, 'w': 0b100}) == {'sum': 2}]
    assert all(tests)


def test_tree_pass_through():
    text = emit_popcount_tree(HdlTreeSpec(1))
    assert 'assign sum = in[0];' in text
    assert evaluate_verilog(text, {'in': 1}) == {'sum': 1}
    assert evaluate_verilog(text, {'in': 0}) == {'sum': 0}


def test_tree_vectorized():
    text = emit_popcount_tree(HdlTreeSpec(8))
    values = np.arange(256, dtype=np.uint64)
    out = evaluate_verilog(text, {'in': values})['sum']
    assert [int(v) for v in out] == [bin(v).count('1') for v in range(256)]


@pytest.mark.parametrize('unit, total', [
    ('maj:3', 64),
    ('maj:5', 1024),
    ('maj:9', 2 ** 18),
    ('xnorfa', 64),
    ('tree:1:1', 2),
    ('tree:8:1', 256),
    ('tree:9:1', 512),
    ('tree:3:2', 64),
    ('tree:5:3', 2 ** 15),
])
def test_verify_exhaustive(unit, total):
    spec = parse_unit_spec(unit)
    report = verify_emitted(emit_unit(spec), reference_for(spec))

    tests = [report.ok,
             report.exhaustive,
             report.total == total,
             report.matched == total,
             report.mismatches == []]
    assert all(tests)


def test_verify_registered():
    spec = HdlUnitSpec('xnormaj', 5, register_io=True)
    report = verify_emitted(emit_unit(spec), reference_xnormaj(5))
    assert report.ok and report.total == 1024
    assert 'clk' in dict(parse_verilog(emit_unit(spec)).inputs)


def test_verify_random():
    spec = HdlTreeSpec(16, 2)
    report = verify_emitted(emit_unit(spec), reference_for(spec),
                            n_random=2000, seed=3)
    assert report.ok and not report.exhaustive and report.total == 2000


def test_verify_detects_corruption():
    text = emit_xnormaj_unit(HdlUnitSpec('xnormaj', 3)).replace('|', '&')
    report = verify_emitted(text, reference_xnormaj(3))

    tests = [not report.ok,
             report.matched < report.total,
             0 < len(report.mismatches) <= 10,
             set(report.mismatches[0]) == {'inputs', 'got', 'expected'}]
    assert all(tests)


def test_parse_errors():
    text = golden('xnormaj3.v')
    with pytest.raises(HdlParseError, match='undeclared'):
        parse_verilog(text.replace('p[1] & p[2]', 'p[1] & q[2]'))
    with pytest.raises(HdlParseError):
        parse_verilog(text.replace('p[0] & p[2]', 'p[0] & p[7]'))
    with pytest.raises(HdlParseError):
        parse_verilog(text.replace('endmodule\n', ''))
    with pytest.raises(HdlParseError):
        parse_verilog(text.replace('~(x ^ w)', '~(x ^ w'))
    with pytest.raises(HdlParseError):
        parse_verilog('')
    with pytest.raises(ValueError):
        evaluate_verilog(text, {'y': 1})


def test_write_verilog(tmpdir):
    path = str(tmpdir.join('xnorfa.v'))
    write_verilog(emit_xnorfa_unit(), path)
    with open(path, 'rb') as f:
        content = f.read()
    assert content == golden('xnorfa.v').encode('utf-8')
    assert b'\r' not in content
