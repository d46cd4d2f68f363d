"""
Verilog emission of XNorFA, XNorMaj-m and popcount adder-tree units, with
a structural evaluator used to verify the emitted text.
"""

import logging
import re
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from sklearn.utils import check_random_state

from .bitcore import bit_count64, check_group_size

logger = logging.getLogger(__name__)

UNIT_KINDS = ('xnorfa', 'xnormaj')
MAX_WIDTH = 64


class HdlParseError(ValueError):
    """ Text outside the supported Verilog subset. """


@dataclass(frozen=True)
class HdlUnitSpec(object):
    """
    One frontend unit.

    Parameters
    ----------
    kind : {'xnorfa', 'xnormaj'}

    m : int, default 3
        Group size; XNorFA always takes 3 pairs.

    register_io : bool, default False
        Register inputs and outputs on ``clk``.
    """

    kind: str = 'xnormaj'
    m: int = 3
    register_io: bool = False

    def __post_init__(self):
        if self.kind not in UNIT_KINDS:
            raise ValueError('Unknown unit kind {!r}, expected one of {}'.format(
                self.kind, UNIT_KINDS))
        if self.kind == 'xnorfa' and self.m != 3:
            raise ValueError('XNorFA takes 3 pairs, got m={}'.format(self.m))
        check_group_size(self.m)

    @property
    def name(self):
        base = 'xnorfa' if self.kind == 'xnorfa' else 'xnormaj{}'.format(self.m)
        return base + '_reg' if self.register_io else base


@dataclass(frozen=True)
class HdlTreeSpec(object):
    """ Adder tree summing ``n_inputs`` unsigned operands of ``input_width`` bits. """

    n_inputs: int
    input_width: int = 1

    def __post_init__(self):
        if self.n_inputs < 1 or self.input_width < 1:
            raise ValueError(
                'Provide n_inputs >= 1 and input_width >= 1, got {} and {}'
                .format(self.n_inputs, self.input_width))
        if self.n_inputs * self.input_width > MAX_WIDTH:
            raise ValueError(
                'Trees are limited to {} input bits'.format(MAX_WIDTH))

    @property
    def output_width(self):
        return (self.n_inputs * (2 ** self.input_width - 1)).bit_length()

    @property
    def name(self):
        return 'popcount_tree_n{}_w{}'.format(self.n_inputs, self.input_width)


def _range(width):
    return '[{}:0] '.format(width - 1) if width > 1 else ''


def _bit(name, i):
    return '{}[{}]'.format(name, i)


def _majority_expr(bits, m):
    terms = ['({})'.format(' & '.join(group))
             for group in combinations(bits, (m + 1) // 2)]
    return ' | '.join(terms)


def _module(name, comment, inputs, outputs, body, register_io=False):
    """
    Module text around a combinational body.

    ``body(src, dst)`` maps input names to the signals carrying them and
    output names to the signals it must drive, and returns
    ``(wires, assigns)``.
    """
    ports = list(inputs)
    if register_io:
        ports = [('clk', 1)] + ports
    port_lines = ['  input wire {}{}'.format(_range(w), n) for n, w in ports]
    port_lines += ['  output wire {}{}'.format(_range(w), n) for n, w in outputs]
    lines = ['// {}: {}'.format(name, comment), 'module {} ('.format(name)]
    lines += [line + ',' for line in port_lines[:-1]] + [port_lines[-1]]
    lines.append(');')

    if register_io:
        src = {n: n + '_q' for n, _ in inputs}
        dst = {n: n + '_d' for n, _ in outputs}
    else:
        src = {n: n for n, _ in inputs}
        dst = {n: n for n, _ in outputs}
    wires, assigns = body(src, dst)

    if register_io:
        lines += ['  reg {}{}_q;'.format(_range(w), n) for n, w in inputs]
        lines += ['  reg {}{}_q;'.format(_range(w), n) for n, w in outputs]
        wires = wires + [(n + '_d', w) for n, w in outputs]
    lines += ['  wire {}{};'.format(_range(w), n) for n, w in wires]
    if register_io:
        lines.append('  always @(posedge clk) begin')
        lines += ['    {0}_q <= {0};'.format(n) for n, _ in inputs]
        lines += ['    {0}_q <= {0}_d;'.format(n) for n, _ in outputs]
        lines.append('  end')
    lines += ['  assign {} = {};'.format(lhs, expr) for lhs, expr in assigns]
    if register_io:
        lines += ['  assign {0} = {0}_q;'.format(n) for n, _ in outputs]
    lines.append('endmodule')
    return '\n'.join(lines) + '\n'


def emit_xnormaj_unit(spec):
    """
    XNorMaj-m unit: majority of the m XNOR products of ``x`` and ``w``.

    Ports are ``x[m-1:0]``, ``w[m-1:0]`` and the 1-bit output ``maj``; the
    majority is an OR of the AND of every ceil(m/2)-subset.
    """
    if spec.kind != 'xnormaj':
        raise ValueError('Expected an xnormaj spec, got {!r}'.format(spec.kind))
    m = spec.m

    def body(src, dst):
        p = [_bit('p', i) for i in range(m)]
        assigns = [('p', '~({} ^ {})'.format(src['x'], src['w'])),
                   (dst['maj'], _majority_expr(p, m))]
        return [('p', m)], assigns

    return _module(spec.name, 'majority of {} XNOR products'.format(m),
                   [('x', m), ('w', m)], [('maj', 1)], body, spec.register_io)


def emit_xnorfa_unit(spec=None):
    """ XNorFA unit: full-adder count of 3 XNOR products into ``sum[1:0]``. """
    spec = spec or HdlUnitSpec('xnorfa')
    if spec.kind != 'xnorfa':
        raise ValueError('Expected an xnorfa spec, got {!r}'.format(spec.kind))

    def body(src, dst):
        p = [_bit('p', i) for i in range(3)]
        assigns = [('p', '~({} ^ {})'.format(src['x'], src['w'])),
                   ('s', ' ^ '.join(p)),
                   ('c', _majority_expr(p, 3)),
                   (dst['sum'], '{c, s}')]
        return [('p', 3), ('s', 1), ('c', 1)], assigns

    return _module(spec.name, 'full-adder count of 3 XNOR products',
                   [('x', 3), ('w', 3)], [('sum', 2)], body, spec.register_io)


def emit_popcount_tree(spec):
    """
    Pairwise adder tree over the fields of the flattened input ``in``.

    Operand ``i`` is ``in[(i+1)*W-1:i*W]``. Level ``k`` wires are named
    ``lk_j``; an odd operand is carried to the next level unchanged, and
    every wire is just wide enough for its maximum value.
    """
    n, width = spec.n_inputs, spec.input_width
    field_max = 2 ** width - 1

    def operand(i):
        if width == 1:
            return _bit('in', i)
        return 'in[{}:{}]'.format((i + 1) * width - 1, i * width)

    def body(src, dst):
        level = [(operand(i), field_max) for i in range(n)]
        wires, assigns = [], []
        depth = 0
        while len(level) > 1:
            depth += 1
            nxt = []
            for j, ((a, a_max), (b, b_max)) in enumerate(
                    zip(level[0::2], level[1::2])):
                name = 'l{}_{}'.format(depth, j)
                wires.append((name, (a_max + b_max).bit_length()))
                assigns.append((name, '{} + {}'.format(a, b)))
                nxt.append((name, a_max + b_max))
            if len(level) % 2:
                nxt.append(level[-1])
            level = nxt
        assigns.append((dst['sum'], level[0][0]))
        return wires, assigns

    return _module(spec.name,
                   'adder tree over {} {}-bit operands'.format(n, width),
                   [('in', n * width)], [('sum', spec.output_width)], body)


def emit_unit(spec):
    """ Text of any unit or tree spec. """
    if isinstance(spec, HdlTreeSpec):
        return emit_popcount_tree(spec)
    if spec.kind == 'xnorfa':
        return emit_xnorfa_unit(spec)
    return emit_xnormaj_unit(spec)


def parse_unit_spec(text, register_io=False):
    """
    Parse ``xnorfa``, ``maj:M`` or ``tree:N:W``.

    Examples
    --------
    >>> parse_unit_spec('tree:8:1')
    HdlTreeSpec(n_inputs=8, input_width=1)
    """
    parts = text.split(':')
    try:
        if parts == ['xnorfa']:
            return HdlUnitSpec('xnorfa', register_io=register_io)
        if parts[0] == 'maj' and len(parts) == 2:
            return HdlUnitSpec('xnormaj', m=int(parts[1]),
                               register_io=register_io)
        if parts[0] == 'tree' and len(parts) == 3:
            return HdlTreeSpec(int(parts[1]), int(parts[2]))
    except ValueError as e:
        raise ValueError('Bad unit {!r}: {}'.format(text, e))
    raise ValueError(
        'Bad unit {!r}, expected xnorfa, maj:M or tree:N:W'.format(text))


def write_verilog(text, path):
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(text)
    logger.info('Wrote {}'.format(path))


# Structural evaluator

_PORT = re.compile(r'^(input|output)\s+(?:wire|reg)\s+(?:\[(\d+):0\]\s*)?(\w+),?$')
_DECL = re.compile(r'^(wire|reg)\s+(?:\[(\d+):0\]\s*)?(\w+);$')
_ASSIGN = re.compile(r'^assign\s+(\w+)\s*=\s*(.+);$')
_NONBLOCKING = re.compile(r'^(\w+)\s*<=\s*(.+);$')
_MODULE = re.compile(r'^module\s+(\w+)\s*\($')
_ALWAYS = re.compile(r'^always\s*@\(\s*posedge\s+\w+\s*\)\s*begin$')
_TOKEN = re.compile(r"\s*(?:(\d+)'([bdh])([0-9a-fA-F_]+)|(\d+)|([A-Za-z_]\w*)|(.))")


def _mask(width):
    return np.uint64((1 << width) - 1)


def _tokenize(expr, lineno):
    tokens = []
    pos = 0
    expr = expr.strip()
    while pos < len(expr):
        match = _TOKEN.match(expr, pos)
        if match is None:
            break
        pos = match.end()
        size, base, digits, number, ident, symbol = match.groups()
        if size is not None:
            radix = {'b': 2, 'd': 10, 'h': 16}[base]
            tokens.append(('num', int(digits.replace('_', ''), radix),
                           int(size)))
        elif number is not None:
            tokens.append(('num', int(number), 32))
        elif ident is not None:
            tokens.append(('name', ident))
        elif symbol is not None and symbol.strip():
            if symbol not in '~&|^+()[]:{},':
                raise HdlParseError(
                    'Line {}: unsupported symbol {!r}'.format(lineno, symbol))
            tokens.append(('sym', symbol))
    return tokens


class _ExprParser(object):
    """
    Recursive-descent parser producing closures over an environment of
    uint64 arrays. Precedence from loosest: ``|``, ``^``, ``&``, ``+``,
    unary ``~``.
    """

    def __init__(self, tokens, widths, lineno):
        self.tokens = tokens
        self.widths = widths
        self.lineno = lineno
        self.pos = 0

    def error(self, message):
        return HdlParseError('Line {}: {}'.format(self.lineno, message))

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def take(self, symbol=None):
        token = self.peek()
        if token is None:
            raise self.error('unexpected end of expression')
        if symbol is not None and token != ('sym', symbol):
            raise self.error('expected {!r}, got {!r}'.format(
                symbol, token[-1]))
        self.pos += 1
        return token

    def parse(self):
        fn, _ = self.binary(0)
        if self.peek() is not None:
            raise self.error('trailing tokens after expression')
        return fn

    _LEVELS = ('|', '^', '&', '+')

    def binary(self, level):
        if level == len(self._LEVELS):
            return self.unary()
        op = self._LEVELS[level]
        left, width = self.binary(level + 1)
        while self.peek() == ('sym', op):
            self.take()
            right, right_width = self.binary(level + 1)
            left = self._combine(op, left, right)
            width = None
        return left, width

    @staticmethod
    def _combine(op, left, right):
        if op == '|':
            return lambda env: left(env) | right(env)
        if op == '^':
            return lambda env: left(env) ^ right(env)
        if op == '&':
            return lambda env: left(env) & right(env)
        return lambda env: left(env) + right(env)

    def unary(self):
        if self.peek() == ('sym', '~'):
            self.take()
            inner, width = self.unary()
            return (lambda env: ~inner(env)), width
        return self.primary()

    def primary(self):
        token = self.take()
        if token == ('sym', '('):
            fn, width = self.binary(0)
            self.take(')')
            return fn, width
        if token == ('sym', '{'):
            return self.concat()
        if token[0] == 'num':
            value = np.uint64(token[1] & ((1 << MAX_WIDTH) - 1))
            return (lambda env: value), token[2]
        if token[0] != 'name':
            raise self.error('unexpected {!r}'.format(token[-1]))
        name = token[1]
        if name not in self.widths:
            raise self.error('undeclared signal {!r}'.format(name))
        width = self.widths[name]
        if self.peek() != ('sym', '['):
            return (lambda env: env[name]), width
        self.take('[')
        hi = self.index()
        lo = hi
        if self.peek() == ('sym', ':'):
            self.take(':')
            lo = self.index()
        self.take(']')
        if not width > hi >= lo >= 0:
            raise self.error('select [{}:{}] outside {}-bit {!r}'.format(
                hi, lo, width, name))
        shift = np.uint64(lo)
        mask = _mask(hi - lo + 1)
        return (lambda env: (env[name] >> shift) & mask), hi - lo + 1

    def index(self):
        token = self.take()
        if token[0] != 'num':
            raise self.error('expected a constant index')
        return token[1]

    def concat(self):
        parts = []
        while True:
            fn, width = self.binary(0)
            if width is None:
                raise self.error('concatenation needs sized operands')
            parts.append((fn, width))
            if self.peek() == ('sym', ','):
                self.take(',')
                continue
            self.take('}')
            break
        total = sum(width for _, width in parts)
        if total > MAX_WIDTH:
            raise self.error('concatenation wider than {} bits'.format(
                MAX_WIDTH))

        def evaluate(env):
            value = np.uint64(0)
            for fn, width in parts:
                value = (value << np.uint64(width)) | (fn(env) & _mask(width))
            return value

        return evaluate, total


@dataclass
class VerilogModule(object):
    """ Parsed module: ports, declared widths and continuous statements. """

    name: str
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    widths: dict = field(default_factory=dict)
    statements: list = field(default_factory=list)

    def evaluate(self, inputs):
        """
        Steady-state values of every output.

        Parameters
        ----------
        inputs : dict
            Input name to int or array of ints; missing inputs are 0.

        Returns
        -------
        outputs : dict
            Output name to numpy uint64 array (or int for scalar inputs).
        """
        known = dict(self.inputs)
        unknown = set(inputs) - set(known)
        if unknown:
            raise ValueError('Unknown inputs: {}'.format(sorted(unknown)))
        scalar = all(np.ndim(v) == 0 for v in inputs.values())
        values = {k: np.atleast_1d(np.asarray(v, dtype=np.uint64))
                  for k, v in inputs.items()}
        n = max([v.shape[0] for v in values.values()] + [1])
        env = {}
        for name, width in self.widths.items():
            value = values.get(name, np.zeros(1, dtype=np.uint64))
            env[name] = np.broadcast_to(value & _mask(width), (n,)).copy()
        for _ in range(len(self.statements) + 1):
            changed = False
            for lhs, fn in self.statements:
                value = np.broadcast_to(fn(env) & _mask(self.widths[lhs]), (n,))
                if not np.array_equal(value, env[lhs]):
                    env[lhs] = value.copy()
                    changed = True
            if not changed:
                break
        else:
            raise HdlParseError(
                'Module {} does not settle: combinational loop'.format(
                    self.name))
        if scalar:
            return {name: int(env[name][0]) for name, _ in self.outputs}
        return {name: env[name] for name, _ in self.outputs}


def parse_verilog(text):
    """
    Parse the emitted Verilog subset.

    Supported: one module with ANSI ``input``/``output`` ports, ``wire``
    and ``reg`` declarations with ``[N:0]`` ranges, ``assign`` statements,
    and ``always @(posedge clk)`` blocks of non-blocking copies (evaluated
    in steady state). Expressions use ``~ & ^ | +``, parentheses,
    bit/part selects, sized literals and concatenation.

    Raises
    ------
    HdlParseError
        Naming the offending line.
    """
    module = None
    in_ports = in_always = done = False
    pending = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split('//', 1)[0].strip()
        if not line:
            continue
        if done:
            raise HdlParseError('Line {}: text after endmodule'.format(lineno))
        if module is None:
            match = _MODULE.match(line)
            if match is None:
                raise HdlParseError(
                    'Line {}: expected a module header'.format(lineno))
            module = VerilogModule(name=match.group(1))
            in_ports = True
            continue
        if in_ports:
            if line == ');':
                in_ports = False
                continue
            match = _PORT.match(line)
            if match is None:
                raise HdlParseError(
                    'Line {}: bad port declaration {!r}'.format(lineno, line))
            direction, hi, name = match.groups()
            width = int(hi) + 1 if hi is not None else 1
            module.widths[name] = width
            target = module.inputs if direction == 'input' else module.outputs
            target.append((name, width))
            continue
        if line == 'endmodule':
            done = True
            continue
        if in_always:
            if line == 'end':
                in_always = False
                continue
            match = _NONBLOCKING.match(line)
            if match is None:
                raise HdlParseError(
                    'Line {}: expected a non-blocking copy'.format(lineno))
            pending.append((lineno,) + match.groups())
            continue
        match = _DECL.match(line)
        if match is not None:
            _, hi, name = match.groups()
            module.widths[name] = int(hi) + 1 if hi is not None else 1
            continue
        if _ALWAYS.match(line):
            in_always = True
            continue
        match = _ASSIGN.match(line)
        if match is not None:
            pending.append((lineno,) + match.groups())
            continue
        raise HdlParseError(
            'Line {}: unsupported statement {!r}'.format(lineno, line))
    if module is None or not done:
        raise HdlParseError('Missing module or endmodule')
    for name, width in module.widths.items():
        if width > MAX_WIDTH:
            raise HdlParseError('Signal {!r} wider than {} bits'.format(
                name, MAX_WIDTH))
    inputs = {name for name, _ in module.inputs}
    for lineno, lhs, expr in pending:
        if lhs not in module.widths:
            raise HdlParseError(
                'Line {}: undeclared signal {!r}'.format(lineno, lhs))
        if lhs in inputs:
            raise HdlParseError(
                'Line {}: cannot drive input {!r}'.format(lineno, lhs))
        parser = _ExprParser(_tokenize(expr, lineno), module.widths, lineno)
        module.statements.append((lhs, parser.parse()))
    return module


def evaluate_verilog(text, inputs):
    """ Parse ``text`` and evaluate it on ``inputs``. """
    return parse_verilog(text).evaluate(inputs)


def reference_xnormaj(m):
    """ Reference of an XNorMaj-m unit on uint64 input arrays. """
    check_group_size(m)

    def reference(inputs):
        p = ~(inputs['x'] ^ inputs['w']) & _mask(m)
        return {'maj': (bit_count64(p) >= (m + 1) // 2).astype(np.uint64)}

    return reference


def reference_xnorfa():
    def reference(inputs):
        p = ~(inputs['x'] ^ inputs['w']) & _mask(3)
        return {'sum': bit_count64(p)}

    return reference


def reference_popcount_tree(spec):
    """ Sum of the ``input_width``-bit fields of ``in``. """
    width = spec.input_width

    def reference(inputs):
        value = inputs['in']
        total = np.zeros(np.shape(value), dtype=np.uint64)
        for i in range(spec.n_inputs):
            total = total + ((value >> np.uint64(i * width)) & _mask(width))
        return {'sum': total}

    return reference


def reference_for(spec):
    if isinstance(spec, HdlTreeSpec):
        return reference_popcount_tree(spec)
    if spec.kind == 'xnorfa':
        return reference_xnorfa()
    return reference_xnormaj(spec.m)


@dataclass
class VerificationReport(object):
    """
    Outcome of comparing a module against a reference.

    ``mismatches`` lists up to ten failing input vectors together with the
    emitted and expected outputs.
    """

    total: int
    matched: int
    mismatches: list
    exhaustive: bool

    @property
    def ok(self):
        return self.matched == self.total


def _random_values(rng, n, width):
    bits = rng.randint(0, 2, size=(n, width)).astype(np.uint64)
    return (bits << np.arange(width, dtype=np.uint64)).sum(axis=1,
                                                           dtype=np.uint64)


def verify_emitted(text, reference_fn, max_exhaustive_bits=20,
                   n_random=100000, seed=0):
    """
    Check emitted text against a reference function.

    Every input combination is tried when the data inputs (all but
    ``clk``) total at most ``max_exhaustive_bits``; otherwise ``n_random``
    seeded random vectors are used. The first data input occupies the
    lowest bits of an exhaustive code.

    Parameters
    ----------
    text : str

    reference_fn : callable
        Maps a dict of uint64 input arrays to a dict of output arrays.

    Returns
    -------
    report : VerificationReport
    """
    module = parse_verilog(text)
    ports = [(n, w) for n, w in module.inputs if n != 'clk']
    total_bits = sum(w for _, w in ports)
    exhaustive = total_bits <= max_exhaustive_bits
    vectors = {}
    if exhaustive:
        codes = np.arange(2 ** total_bits, dtype=np.uint64)
        shift = 0
        for name, width in ports:
            vectors[name] = (codes >> np.uint64(shift)) & _mask(width)
            shift += width
        n = codes.shape[0]
    else:
        rng = check_random_state(seed)
        n = n_random
        for name, width in ports:
            vectors[name] = _random_values(rng, n, width)

    got = module.evaluate(vectors)
    expected = reference_fn(vectors)
    match = np.ones(n, dtype=bool)
    for name, width in module.outputs:
        want = np.asarray(expected[name], dtype=np.uint64) & _mask(width)
        match &= got[name] == want
    mismatches = []
    for i in np.flatnonzero(~match)[:10]:
        mismatches.append(dict(
            inputs={k: int(v[i]) for k, v in vectors.items()},
            got={k: int(v[i]) for k, v in got.items()},
            expected={k: int(np.asarray(expected[k], dtype=np.uint64)[i])
                      for k, _ in module.outputs}))
    report = VerificationReport(total=n, matched=int(match.sum()),
                                mismatches=mismatches, exhaustive=exhaustive)
    logger.info('{}: {}/{} vectors match{}'.format(
        module.name, report.matched, report.total,
        ' (exhaustive)' if exhaustive else ''))
    return report


__all__ = ['HdlParseError',
           'HdlUnitSpec',
           'HdlTreeSpec',
           'VerilogModule',
           'VerificationReport',
           'emit_xnormaj_unit',
           'emit_xnorfa_unit',
           'emit_popcount_tree',
           'emit_unit',
           'parse_unit_spec',
           'write_verilog',
           'parse_verilog',
           'evaluate_verilog',
           'reference_xnormaj',
           'reference_xnorfa',
           'reference_popcount_tree',
           'reference_for',
           'verify_emitted']
