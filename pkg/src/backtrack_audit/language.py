"""Line-oriented model description language.

One declaration per line, ``#`` starts a comment::

    exo U_A ~ bernoulli(0.5)
    exo U_Z ~ normal(0.5*A, 1)        # mean may reference endogenous variables
    exo U_Y ~ point(0)
    exo U_T ~ uniform(0, 1)
    endo A = linear(0) + U_A
    endo X1 = linear(2*Z + W - 1) + U_X1
    endo Yhat = or(A, gt(X, 0))       # optional "+ U" slot acts as an extra disjunct
    endo Q = gt(X1 + X2, 0.5)         # optional "+ U" is added to the index
    endo Y = bernexpit(0.3*R - 1) + U_T
    endo C = const(1)
"""

from __future__ import annotations

import hashlib
import re

from .scm_core import (
    BernExpit,
    Bernoulli,
    CausalModel,
    Constant,
    Index,
    Linear,
    ModelError,
    Normal,
    Or,
    Point,
    Threshold,
    Uniform,
)


class ModelSyntaxError(ModelError):
    def __init__(self, message, line, column):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z0-9_]*)|(?P<op>[()~=,+\-*/]))"
)


def _tokenize(text, lineno):
    tokens, pos = [], 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            col = pos + len(text[pos:]) - len(text[pos:].lstrip()) + 1
            raise ModelSyntaxError(f"unexpected character {text[col - 1]!r}", lineno, col)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start + 1))
        pos = m.end()
    tokens.append(("end", "", len(text) + 1))
    return tokens


class _Line:
    def __init__(self, text, lineno):
        self.tokens = _tokenize(text, lineno)
        self.i = 0
        self.lineno = lineno

    def peek(self):
        return self.tokens[self.i]

    def error(self, message, token=None):
        token = token or self.peek()
        return ModelSyntaxError(message, self.lineno, token[2])

    def take(self, kind=None, value=None):
        tok = self.peek()
        if (kind and tok[0] != kind) or (value is not None and tok[1] != value):
            want = repr(value) if value is not None else kind
            got = repr(tok[1]) if tok[0] != "end" else "end of line"
            raise self.error(f"expected {want}, found {got}")
        self.i += 1
        return tok

    def accept(self, value):
        if self.peek()[1] == value and self.peek()[0] == "op":
            self.i += 1
            return True
        return False

    def number(self):
        sign = -1.0 if self.accept("-") else 1.0
        if not sign < 0:
            self.accept("+")
        tok = self.peek()
        if tok[0] == "name" and tok[1] == "inf":
            self.i += 1
            return sign * float("inf")
        return sign * float(self.take("num")[1])

    def index(self):
        """linexpr := [-] term (('+'|'-') term)*"""
        terms, intercept = {}, 0.0
        sign = -1.0 if self.accept("-") else 1.0
        while True:
            tok = self.peek()
            if tok[0] == "num":
                value = float(self.take("num")[1])
                if self.accept("*"):
                    name = self.take("name")[1]
                    terms[name] = terms.get(name, 0.0) + sign * value
                else:
                    intercept += sign * value
            elif tok[0] == "name":
                name = self.take("name")[1]
                w = 1.0
                if self.accept("*"):
                    w = float(self.take("num")[1])
                elif self.accept("/"):
                    w = 1.0 / float(self.take("num")[1])
                terms[name] = terms.get(name, 0.0) + sign * w
            else:
                raise self.error("expected a number or variable name")
            if self.accept("+"):
                sign = 1.0
            elif self.accept("-"):
                sign = -1.0
            else:
                break
        return Index(tuple(terms.items()), intercept)

    def slot(self, required):
        if self.accept("+"):
            return self.take("name")[1]
        if required:
            raise self.error("expected '+ <exogenous>' after mechanism")
        return None

    def done(self):
        if self.peek()[0] != "end":
            raise self.error(f"unexpected {self.peek()[1]!r}")


def _noise(line, name):
    kind = line.take("name")
    line.take("op", "(")
    if kind[1] == "normal":
        mean = line.index()
        line.take("op", ",")
        sd = line.number()
        out = Normal(name, mean, sd)
    elif kind[1] == "bernoulli":
        out = Bernoulli(name, line.number())
    elif kind[1] == "point":
        out = Point(name, line.number())
    elif kind[1] == "uniform":
        low = line.number()
        line.take("op", ",")
        out = Uniform(name, low, line.number())
    else:
        raise line.error(f"unknown distribution {kind[1]!r}", kind)
    line.take("op", ")")
    return out


def _or_term(line):
    tok = line.peek()
    if tok[0] == "name" and tok[1] == "gt" and line.tokens[line.i + 1][1] == "(":
        line.take("name")
        line.take("op", "(")
        index = line.index()
        line.take("op", ",")
        cutoff = line.number()
        line.take("op", ")")
        return index, cutoff
    name = line.take("name")[1]
    return Index(((name, 1.0),), 0.0), 0.5


def _mechanism(line, name):
    kind = line.take("name")
    line.take("op", "(")
    form = kind[1]
    if form == "linear":
        index = line.index()
        line.take("op", ")")
        return Linear(name, index, line.slot(required=True))
    if form == "bernexpit":
        index = line.index()
        line.take("op", ")")
        return BernExpit(name, index, line.slot(required=True))
    if form == "gt":
        index = line.index()
        line.take("op", ",")
        cutoff = line.number()
        line.take("op", ")")
        return Threshold(name, index, cutoff, line.slot(required=False))
    if form == "or":
        terms = [_or_term(line)]
        while line.accept(","):
            terms.append(_or_term(line))
        line.take("op", ")")
        return Or(name, tuple(terms), line.slot(required=False))
    if form == "const":
        value = line.number()
        line.take("op", ")")
        return Constant(name, value)
    raise line.error(f"unknown mechanism form {form!r}", kind)


def parse(text: str) -> list:
    """Declarations in file order; raises ModelSyntaxError with line/column."""
    decls = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0]
        if not body.strip():
            continue
        line = _Line(body, lineno)
        head = line.take("name")
        if head[1] not in ("exo", "endo"):
            raise line.error(f"expected 'exo' or 'endo', found {head[1]!r}", head)
        name = line.take("name")[1]
        try:
            if head[1] == "exo":
                line.take("op", "~")
                decl = _noise(line, name)
            else:
                line.take("op", "=")
                decl = _mechanism(line, name)
        except ModelSyntaxError:
            raise
        except ModelError as exc:
            raise ModelSyntaxError(str(exc), lineno, head[2]) from None
        line.done()
        decls.append(decl)
    return decls


# -- writer ------------------------------------------------------------------


def _num(x):
    x = float(x)
    if x in (float("inf"), float("-inf")):
        return "inf" if x > 0 else "-inf"
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def _index(index):
    parts = []
    for name, w in index.terms:
        mag = abs(w)
        body = name if mag == 1.0 else f"{_num(mag)}*{name}"
        parts.append(("-" if w < 0 else "+", body))
    if index.intercept != 0.0 or not parts:
        parts.append(("-" if index.intercept < 0 else "+", _num(abs(index.intercept))))
    out = ("-" if parts[0][0] == "-" else "") + parts[0][1]
    for sign, body in parts[1:]:
        out += f" {sign} {body}"
    return out


def _slot(exo):
    return f" + {exo}" if exo else ""


def dump_declaration(decl) -> str:
    if isinstance(decl, Normal):
        return f"exo {decl.variable} ~ normal({_index(decl.mean)}, {_num(decl.sd)})"
    if isinstance(decl, Bernoulli):
        return f"exo {decl.variable} ~ bernoulli({_num(decl.p)})"
    if isinstance(decl, Point):
        return f"exo {decl.variable} ~ point({_num(decl.value)})"
    if isinstance(decl, Uniform):
        return f"exo {decl.variable} ~ uniform({_num(decl.low)}, {_num(decl.high)})"
    if isinstance(decl, Linear):
        return f"endo {decl.target} = linear({_index(decl.index)}){_slot(decl.exo)}"
    if isinstance(decl, BernExpit):
        return f"endo {decl.target} = bernexpit({_index(decl.index)}){_slot(decl.exo)}"
    if isinstance(decl, Threshold):
        return f"endo {decl.target} = gt({_index(decl.index)}, {_num(decl.cutoff)}){_slot(decl.exo)}"
    if isinstance(decl, Or):
        terms = []
        for index, cutoff in decl.terms:
            if len(index.terms) == 1 and index.terms[0][1] == 1.0 and index.intercept == 0.0 and cutoff == 0.5:
                terms.append(index.terms[0][0])
            else:
                terms.append(f"gt({_index(index)}, {_num(cutoff)})")
        return f"endo {decl.target} = or({', '.join(terms)}){_slot(decl.exo)}"
    if isinstance(decl, Constant):
        return f"endo {decl.target} = const({_num(decl.value)})"
    raise ModelError(f"cannot describe {decl!r}")


def dump(model: CausalModel) -> str:
    lines = []
    for name in model.declared:
        decl = model.noise.get(name) or model.mechanisms[name]
        lines.append(dump_declaration(decl))
    return "\n".join(lines) + "\n"


def fingerprint(model: CausalModel) -> str:
    return hashlib.sha256(dump(model).encode("utf-8")).hexdigest()[:16]
