"""Multi-part regression formula language.

Grammar (whitespace-insensitive)::

    formula   :=  lhs '~' rhs [ '|' fe_part ] [ '|' iv_part ]
    lhs       :=  column_term  |  'c' '(' column_term (',' column_term)* ')'
    rhs       :=  '1'  |  term ('+' term)*
    term      :=  ident | 'log'/'exp' '(' ident ')' | i_call | lag_call | stepwise
    fe_part   :=  fe_term ('+' fe_term)*
    fe_term   :=  ident ('^' ident)* [ '[' slopes ']' | '[[' slopes ']]' ] | fe stepwise
    iv_part   :=  ident ('+' ident)* '~' term ('+' term)*

Stepwise combinators (``sw``, ``sw0``, ``csw``, ``csw0``, ``mvsw``) expand a
single formula into a family of models; at most one combinator is allowed in
the rhs part and one in the fixed-effects part.  ``i(...)`` builds indicator
columns for a categorical variable with optional reference levels, binning and
interaction.  ``l``/``f``/``d`` are panel lag/lead/difference operators.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

__all__ = [
    "FormulaError",
    "Var",
    "Func",
    "LagOp",
    "InteractionI",
    "Stepwise",
    "FeTerm",
    "FeStepwise",
    "IvPart",
    "FormulaSpec",
    "Provenance",
    "ModelSpec",
    "parse_formula",
    "format_formula",
    "expand_models",
    "expand_i",
    "ast_to_dict",
]

STEPWISE_KINDS = ("sw", "sw0", "csw", "csw0", "mvsw")
LAG_OPS = ("l", "f", "d")
UNARY_FUNCS = ("log", "exp")
RESERVED_CALLS = set(STEPWISE_KINDS) | set(LAG_OPS) | set(UNARY_FUNCS) | {"i", "c"}

IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9._]*")


class FormulaError(ValueError):
    """Syntax or structural error in a formula, with a byte offset."""

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)


# ---------------------------------------------------------------------------
# AST node types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Func:
    fn: str  # 'log' or 'exp'
    var: str


@dataclass(frozen=True)
class LagOp:
    op: str  # 'l', 'f' or 'd'
    var: str
    offsets: tuple[int, ...] = (1,)


@dataclass(frozen=True)
class InteractionI:
    """``i(var, interact?, ref=..., bin=...)`` indicator expansion."""

    var: str
    interact: Optional[str] = None
    interact_categorical: bool = False
    ref: tuple = ()
    bin: tuple = ()  # tuple of (label, tuple_of_values)


@dataclass(frozen=True)
class Stepwise:
    kind: str
    args: tuple  # tuple of tuples of terms


Term = Union[Var, Func, LagOp, InteractionI, Stepwise]


@dataclass(frozen=True)
class FeTerm:
    factors: tuple[str, ...]
    slope_vars: tuple[str, ...] = ()
    intercept: bool = True


@dataclass(frozen=True)
class FeStepwise:
    kind: str
    args: tuple  # tuple of tuples of FeTerm


@dataclass(frozen=True)
class IvPart:
    endo: tuple[str, ...]
    instruments: tuple[Term, ...]


@dataclass(frozen=True)
class FormulaSpec:
    lhs: tuple[Term, ...]
    rhs: tuple[Term, ...]
    fe: tuple = ()
    iv: Optional[IvPart] = None
    intercept_only: bool = False  # rhs was a literal `1`


@dataclass(frozen=True)
class Provenance:
    lhs_index: int = 0
    rhs_step: int = 0
    fe_step: int = 0
    sample_label: str = ""


@dataclass(frozen=True)
class ModelSpec:
    lhs: Term
    rhs_terms: tuple[Term, ...]
    fe_terms: tuple[FeTerm, ...] = ()
    iv: Optional[IvPart] = None
    provenance: Provenance = field(default_factory=Provenance)


# ---------------------------------------------------------------------------
# Tokenizer
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>-?\d+\.\d*(?:[eE][+-]?\d+)?|-?\.\d+(?:[eE][+-]?\d+)?|-?\d+(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9._]*)
  | (?P<string>"[^"]*"|'[^']*')
  | (?P<punct>\[\[|\]\]|[~+|^,()\[\]{}:=])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Tok:
    kind: str
    text: str
    pos: int


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    pos = 0
    n = len(text)
    while pos < n:
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise FormulaError(f"unexpected character {text[pos]!r}", pos)
        if m.lastgroup != "ws":
            toks.append(_Tok(m.lastgroup, m.group(), pos))
        pos = m.end()
    toks.append(_Tok("eof", "", n))
    return toks


def _num(text: str):
    f = float(text)
    i = int(f)
    return i if i == f else f


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.toks = _tokenize(text)
        self.i = 0

    # -- token helpers --
    def peek(self) -> _Tok:
        return self.toks[self.i]

    def next(self) -> _Tok:
        t = self.toks[self.i]
        self.i += 1
        return t

    def accept(self, text: str) -> Optional[_Tok]:
        if self.peek().text == text and self.peek().kind != "eof":
            return self.next()
        return None

    def expect(self, text: str) -> _Tok:
        t = self.peek()
        if t.text != text or t.kind == "eof":
            raise FormulaError(f"expected {text!r}, found {t.text or 'end of input'!r}", t.pos)
        return self.next()

    def ident(self, what: str = "identifier") -> str:
        t = self.peek()
        if t.kind != "ident":
            raise FormulaError(f"expected {what}, found {t.text or 'end of input'!r}", t.pos)
        return self.next().text

    # -- entry --
    def parse(self) -> FormulaSpec:
        lhs = self.parse_lhs()
        self.expect("~")
        rhs, intercept_only = self.parse_rhs()
        fe: tuple = ()
        iv = None
        parts = []
        while self.accept("|"):
            parts.append(self.parse_post_part())
        if len(parts) > 2:
            raise FormulaError("too many formula parts: expected lhs ~ rhs | fe | iv")
        if len(parts) == 1:
            kind, payload, pos = parts[0]
            if kind == "iv":
                iv = payload
            else:
                fe = payload
        elif len(parts) == 2:
            kind1, payload1, pos1 = parts[0]
            kind2, payload2, pos2 = parts[1]
            if kind1 == "iv":
                raise FormulaError("IV part must be the last formula part", pos1)
            if kind2 != "iv":
                raise FormulaError("expected IV part (endo ~ instruments) as third part", pos2)
            fe = payload1
            iv = payload2
        self._check_eof()
        spec = FormulaSpec(lhs=lhs, rhs=rhs, fe=fe, iv=iv, intercept_only=intercept_only)
        _validate(spec)
        return spec

    def _check_eof(self):
        t = self.peek()
        if t.kind != "eof":
            raise FormulaError(f"unexpected trailing input {t.text!r}", t.pos)

    # -- lhs --
    def parse_lhs(self) -> tuple[Term, ...]:
        t = self.peek()
        if t.kind == "ident" and t.text == "c" and self.toks[self.i + 1].text == "(":
            self.next()
            self.next()
            terms = [self.parse_column_term("left-hand side")]
            while self.accept(","):
                terms.append(self.parse_column_term("left-hand side"))
            self.expect(")")
            return tuple(terms)
        return (self.parse_column_term("left-hand side"),)

    def parse_column_term(self, where: str) -> Term:
        """A term producing exactly one column: var, log/exp(var), l/f/d(var, k)."""
        t = self.peek()
        if t.kind != "ident":
            raise FormulaError(f"expected a variable in {where}, found {t.text!r}", t.pos)
        name = t.text
        if name in STEPWISE_KINDS and self.toks[self.i + 1].text == "(":
            raise FormulaError(f"stepwise function {name!r} is not allowed in {where}", t.pos)
        if name in UNARY_FUNCS and self.toks[self.i + 1].text == "(":
            self.next()
            self.next()
            var = self.ident("variable name")
            self.expect(")")
            return Func(name, var)
        if name in LAG_OPS and self.toks[self.i + 1].text == "(":
            lag = self.parse_lag_call()
            if len(lag.offsets) != 1:
                raise FormulaError(
                    f"{lag.op}() in {where} must have a single offset", t.pos)
            return lag
        self.next()
        return Var(name)

    # -- rhs --
    def parse_rhs(self) -> tuple[tuple[Term, ...], bool]:
        t = self.peek()
        if t.kind == "number" and t.text == "1":
            self.next()
            if self.peek().text == "+":
                raise FormulaError(
                    "literal 1 is only supported as the sole right-hand-side term", t.pos)
            return (), True
        terms = [self.parse_term()]
        while self.accept("+"):
            terms.append(self.parse_term())
        return tuple(terms), False

    def parse_term(self) -> Term:
        t = self.peek()
        if t.kind == "number":
            raise FormulaError(f"unexpected numeric literal {t.text!r} in term position", t.pos)
        name = self.ident("term")
        nxt = self.peek()
        if nxt.text != "(":
            return Var(name)
        if name in STEPWISE_KINDS:
            return self.parse_stepwise(name)
        if name == "i":
            return self.parse_i_call()
        if name in LAG_OPS:
            self.i -= 1  # rewind to the op name
            return self.parse_lag_call()
        if name in UNARY_FUNCS:
            self.next()
            var = self.ident("variable name")
            self.expect(")")
            return Func(name, var)
        raise FormulaError(
            f"unknown function {name!r}; supported calls are "
            f"i, sw, sw0, csw, csw0, mvsw, l, f, d, log, exp", t.pos)

    def parse_stepwise(self, kind: str) -> Stepwise:
        pos = self.expect("(").pos
        args = [self.parse_term_group()]
        while self.accept(","):
            args.append(self.parse_term_group())
        self.expect(")")
        if not args or not all(args):
            raise FormulaError(f"{kind}() requires nonempty arguments", pos)
        for group in args:
            for term in group:
                if isinstance(term, Stepwise):
                    raise FormulaError("nested stepwise functions are not allowed", pos)
        return Stepwise(kind, tuple(tuple(g) for g in args))

    def parse_term_group(self) -> list[Term]:
        terms = [self.parse_term()]
        while self.accept("+"):
            terms.append(self.parse_term())
        return terms

    def parse_lag_call(self) -> LagOp:
        op = self.ident()
        pos = self.expect("(").pos
        var = self.ident("variable name")
        offsets: list[int] = []
        while self.accept(","):
            offsets.extend(self.parse_offset_group())
        self.expect(")")
        if not offsets:
            offsets = [1]
        if any(not isinstance(k, int) for k in offsets):
            raise FormulaError(f"{op}() offsets must be integers", pos)
        return LagOp(op, var, tuple(offsets))

    def parse_offset_group(self) -> list[int]:
        t = self.peek()

        def as_int(v):
            if not isinstance(v, int):
                raise FormulaError(f"offsets must be integers, got {v!r}", t.pos)
            return v

        if t.text == "[" or (t.kind == "ident" and t.text == "c"):
            return [as_int(v) for v in self.parse_value_list()]
        if t.kind != "number":
            raise FormulaError(f"expected offset, found {t.text!r}", t.pos)
        a = as_int(_num(self.next().text))
        if self.accept(":"):
            b_tok = self.peek()
            if b_tok.kind != "number":
                raise FormulaError("expected integer after ':'", b_tok.pos)
            b = as_int(_num(self.next().text))
            step = 1 if b >= a else -1
            return list(range(a, b + step, step))
        return [a]

    def parse_i_call(self) -> InteractionI:
        pos = self.expect("(").pos
        var = self.ident("variable name")
        interact = None
        interact_cat = False
        ref: tuple = ()
        bins: list[tuple] = []
        while self.accept(","):
            t = self.peek()
            if t.kind == "ident" and t.text == "ref" and self.toks[self.i + 1].text == "=":
                self.next()
                self.next()
                ref = tuple(self.parse_value_or_list())
            elif t.kind == "ident" and t.text == "bin" and self.toks[self.i + 1].text == "=":
                self.next()
                self.next()
                bins = self.parse_bin_map()
            elif t.kind == "ident":
                if interact is not None:
                    raise FormulaError("i() accepts a single interacting variable", t.pos)
                name = self.next().text
                if name.startswith("i.") and len(name) > 2:
                    interact = name[2:]
                    interact_cat = True
                else:
                    interact = name
            else:
                raise FormulaError(f"unexpected token {t.text!r} in i()", t.pos)
        self.expect(")")
        return InteractionI(var=var, interact=interact, interact_categorical=interact_cat,
                            ref=ref, bin=tuple(bins))

    def parse_value(self):
        t = self.peek()
        if t.kind == "number":
            return _num(self.next().text)
        if t.kind == "string":
            return self.next().text[1:-1]
        if t.kind == "ident":
            return self.next().text
        raise FormulaError(f"expected a value, found {t.text!r}", t.pos)

    def parse_value_list(self) -> list:
        if self.accept("["):
            vals = [self.parse_value()]
            while self.accept(","):
                vals.append(self.parse_value())
            self.expect("]")
            return vals
        if self.peek().text == "c" and self.toks[self.i + 1].text == "(":
            self.next()
            self.next()
            vals = [self.parse_value()]
            while self.accept(","):
                vals.append(self.parse_value())
            self.expect(")")
            return vals
        raise FormulaError(f"expected a list, found {self.peek().text!r}", self.peek().pos)

    def parse_value_or_list(self) -> list:
        t = self.peek()
        if t.text == "[" or (t.text == "c" and self.toks[self.i + 1].text == "("):
            return self.parse_value_list()
        v = self.parse_value()
        if self.accept(":"):
            b = self.parse_value()
            if not isinstance(v, int) or not isinstance(b, int):
                raise FormulaError("range bounds must be integers", t.pos)
            step = 1 if b >= v else -1
            return list(range(v, b + step, step))
        return [v]

    def parse_bin_map(self) -> list[tuple]:
        pos = self.expect("{").pos
        bins = []
        while True:
            t = self.peek()
            if t.kind != "string":
                raise FormulaError("bin keys must be quoted strings", t.pos)
            label = self.next().text[1:-1]
            self.expect(":")
            vals = tuple(self.parse_value_or_list())
            bins.append((label, vals))
            if not self.accept(","):
                break
        self.expect("}")
        if not bins:
            raise FormulaError("empty bin map", pos)
        return bins

    # -- post parts (fe or iv) --
    def parse_post_part(self):
        start = self.i
        pos = self.peek().pos
        # scan ahead for a top-level '~' before the next '|' to detect an IV part
        depth = 0
        is_iv = False
        j = self.i
        while j < len(self.toks):
            tk = self.toks[j]
            if tk.kind == "eof":
                break
            if tk.text in "([{":
                depth += 1
            elif tk.text in ")]}":
                depth -= 1
            elif depth == 0 and tk.text == "|":
                break
            elif depth == 0 and tk.text == "~":
                is_iv = True
                break
            j += 1
        if is_iv:
            return ("iv", self.parse_iv_part(), pos)
        self.i = start
        return ("fe", self.parse_fe_part(), pos)

    def parse_iv_part(self) -> IvPart:
        endo = [self.ident("endogenous variable")]
        while self.accept("+"):
            endo.append(self.ident("endogenous variable"))
        self.expect("~")
        instruments = [self.parse_term()]
        while self.accept("+"):
            instruments.append(self.parse_term())
        for term in instruments:
            if isinstance(term, Stepwise):
                raise FormulaError("stepwise functions are not allowed among instruments")
        return IvPart(tuple(endo), tuple(instruments))

    def parse_fe_part(self) -> tuple:
        terms = [self.parse_fe_term()]
        while self.accept("+"):
            terms.append(self.parse_fe_term())
        return tuple(terms)

    def parse_fe_term(self):
        t = self.peek()
        if t.kind == "ident" and t.text in STEPWISE_KINDS and self.toks[self.i + 1].text == "(":
            kind = self.next().text
            pos = self.expect("(").pos
            args = [self.parse_fe_group()]
            while self.accept(","):
                args.append(self.parse_fe_group())
            self.expect(")")
            if not args or not all(args):
                raise FormulaError(f"{kind}() requires nonempty arguments", pos)
            return FeStepwise(kind, tuple(tuple(g) for g in args))
        return self.parse_fe_atom()

    def parse_fe_group(self) -> list[FeTerm]:
        terms = [self.parse_fe_atom()]
        while self.accept("+"):
            terms.append(self.parse_fe_atom())
        return terms

    def parse_fe_atom(self) -> FeTerm:
        pos = self.peek().pos
        factors = [self.ident("fixed-effect factor")]
        while self.accept("^"):
            factors.append(self.ident("fixed-effect factor"))
        slope_vars: tuple[str, ...] = ()
        intercept = True
        if self.accept("[["):
            slope_vars = self.parse_slope_list("]]")
            intercept = False
        elif self.accept("["):
            slope_vars = self.parse_slope_list("]")
        term = FeTerm(tuple(factors), slope_vars, intercept)
        if set(term.slope_vars) & set(term.factors):
            raise FormulaError("slope variables must be distinct from factors", pos)
        return term

    def parse_slope_list(self, closer: str) -> tuple[str, ...]:
        names = [self.ident("slope variable")]
        while self.accept(","):
            names.append(self.ident("slope variable"))
        if closer == "]]":
            # the tokenizer may have produced ']' ']' or ']]'
            if not self.accept("]]"):
                self.expect("]")
                self.expect("]")
        else:
            self.expect("]")
        return tuple(names)


def _count_stepwise(terms) -> int:
    return sum(1 for t in terms if isinstance(t, (Stepwise, FeStepwise)))


def _validate(spec: FormulaSpec):
    if _count_stepwise(spec.rhs) > 1:
        raise FormulaError("only one stepwise function is allowed in the rhs part")
    if _count_stepwise(spec.fe) > 1:
        raise FormulaError("only one stepwise function is allowed in the fixed-effects part")
    if spec.iv is not None:
        if not spec.iv.endo:
            raise FormulaError("IV part requires at least one endogenous variable")
        if not spec.iv.instruments:
            raise FormulaError("IV part requires at least one instrument")


def parse_formula(text: str) -> FormulaSpec:
    """Parse a formula string into a :class:`FormulaSpec`."""
    if not text or not text.strip():
        raise FormulaError("empty formula")
    return _Parser(text).parse()


# ---------------------------------------------------------------------------
# Pretty printing (canonical form; reparsing yields an identical AST)
# ---------------------------------------------------------------------------

def _fmt_value(v) -> str:
    if isinstance(v, str):
        return f'"{v}"'
    return repr(v)


def _fmt_offsets(offsets: tuple[int, ...]) -> str:
    if len(offsets) >= 2 and all(
            offsets[k + 1] == offsets[k] + 1 for k in range(len(offsets) - 1)):
        return f"{offsets[0]}:{offsets[-1]}"
    return ",".join(str(k) for k in offsets)


def format_term(term: Term) -> str:
    if isinstance(term, Var):
        return term.name
    if isinstance(term, Func):
        return f"{term.fn}({term.var})"
    if isinstance(term, LagOp):
        return f"{term.op}({term.var},{_fmt_offsets(term.offsets)})"
    if isinstance(term, InteractionI):
        parts = [term.var]
        if term.interact is not None:
            parts.append(("i." if term.interact_categorical else "") + term.interact)
        if term.ref:
            if len(term.ref) == 1:
                parts.append(f"ref={_fmt_value(term.ref[0])}")
            else:
                parts.append("ref=[" + ",".join(_fmt_value(v) for v in term.ref) + "]")
        if term.bin:
            body = ",".join(
                f'"{label}":[' + ",".join(_fmt_value(v) for v in vals) + "]"
                for label, vals in term.bin)
            parts.append("bin={" + body + "}")
        return "i(" + ", ".join(parts) + ")"
    if isinstance(term, Stepwise):
        body = ", ".join(" + ".join(format_term(t) for t in group) for group in term.args)
        return f"{term.kind}({body})"
    raise TypeError(f"not a term: {term!r}")


def format_fe_term(term) -> str:
    if isinstance(term, FeStepwise):
        body = ", ".join(" + ".join(format_fe_term(t) for t in group) for group in term.args)
        return f"{term.kind}({body})"
    s = "^".join(term.factors)
    if term.slope_vars:
        inner = ", ".join(term.slope_vars)
        s += f"[[{inner}]]" if not term.intercept else f"[{inner}]"
    return s


def format_formula(spec: FormulaSpec) -> str:
    lhs = format_term(spec.lhs[0]) if len(spec.lhs) == 1 else \
        "c(" + ", ".join(format_term(t) for t in spec.lhs) + ")"
    rhs = "1" if spec.intercept_only or not spec.rhs else \
        " + ".join(format_term(t) for t in spec.rhs)
    out = f"{lhs} ~ {rhs}"
    if spec.fe:
        out += " | " + " + ".join(format_fe_term(t) for t in spec.fe)
    if spec.iv is not None:
        endo = " + ".join(spec.iv.endo)
        inst = " + ".join(format_term(t) for t in spec.iv.instruments)
        out += f" | {endo} ~ {inst}"
    return out


def ast_to_dict(obj):
    """JSON-friendly dump of a FormulaSpec / ModelSpec / term."""
    if isinstance(obj, (list, tuple)):
        return [ast_to_dict(x) for x in obj]
    if isinstance(obj, (Var, Func, LagOp, InteractionI, Stepwise, FeTerm, FeStepwise,
                        IvPart, FormulaSpec, ModelSpec, Provenance)):
        d = {"node": type(obj).__name__}
        for name in obj.__dataclass_fields__:
            d[name] = ast_to_dict(getattr(obj, name))
        return d
    return obj


# ---------------------------------------------------------------------------
# Stepwise expansion
# ---------------------------------------------------------------------------

def _stepwise_steps(kind: str, args: tuple) -> list[list]:
    """Term lists contributed by one combinator, one list per step."""
    groups = [list(g) for g in args]
    if kind == "sw":
        return groups
    if kind == "sw0":
        return [[]] + groups
    if kind == "csw":
        return [sum(groups[: k + 1], []) for k in range(len(groups))]
    if kind == "csw0":
        return [[]] + [sum(groups[: k + 1], []) for k in range(len(groups))]
    if kind == "mvsw":
        steps = []
        for size in range(len(groups) + 1):
            for combo in itertools.combinations(range(len(groups)), size):
                steps.append(sum((groups[k] for k in combo), []))
        return steps
    raise FormulaError(f"unknown stepwise kind {kind!r}")


def _part_steps(terms) -> list[list]:
    """Expand a part (rhs or fe) into its stepwise steps, in place."""
    sw_index = None
    for k, t in enumerate(terms):
        if isinstance(t, (Stepwise, FeStepwise)):
            sw_index = k
            break
    if sw_index is None:
        return [list(terms)]
    head = list(terms[:sw_index])
    tail = list(terms[sw_index + 1:])
    node = terms[sw_index]
    return [head + step + tail for step in _stepwise_steps(node.kind, node.args)]


def n_steps(terms) -> int:
    return len(_part_steps(terms))


def expand_models(spec: FormulaSpec) -> list[ModelSpec]:
    """Cartesian expansion into concrete models: lhs-major, then rhs step, then fe step."""
    rhs_steps = _part_steps(spec.rhs)
    fe_steps = _part_steps(spec.fe)
    models = []
    for li, lhs in enumerate(spec.lhs):
        for ri, rhs in enumerate(rhs_steps):
            for fi, fe in enumerate(fe_steps):
                models.append(ModelSpec(
                    lhs=lhs,
                    rhs_terms=tuple(rhs),
                    fe_terms=tuple(fe),
                    iv=spec.iv,
                    provenance=Provenance(lhs_index=li, rhs_step=ri, fe_step=fi),
                ))
    return models


# ---------------------------------------------------------------------------
# i() expansion
# ---------------------------------------------------------------------------

def _level_label(v) -> str:
    if isinstance(v, float) and v == int(v):
        return str(int(v))
    return str(v)


def _level_sort_key(v):
    if isinstance(v, (int, float, np.integer, np.floating)):
        return (0, float(v), "")
    return (1, 0.0, str(v))


def expand_i(term: InteractionI, column: np.ndarray,
             interacting: Optional[np.ndarray] = None) -> list[tuple[str, np.ndarray]]:
    """Expand an ``i()`` term into named indicator (or indicator-product) columns.

    ``column`` holds the categorical values (any dtype); ``interacting`` is the
    companion column when the term interacts.  Binning is applied before the
    reference levels are removed; when no reference is given the lowest level
    is used.  Returns ``(name, float64 column)`` pairs, one per retained level
    (times the interacting levels for a categorical interaction).
    """
    values = np.asarray(column)
    keys = [None if _is_missing(v) else _coerce_key(v) for v in values.tolist()]

    # binning: map member values to the bin label
    bin_of = {}
    bin_min_key = {}
    for label, members in term.bin:
        for m in members:
            bin_of[_coerce_key(m)] = label
        bin_min_key[label] = min(_level_sort_key(m) for m in members)
    binned = [None if v is None else bin_of.get(v, v) for v in keys]

    observed = {v for v in keys if v is not None}
    for label, members in term.bin:
        member_keys = {_coerce_key(m) for m in members}
        if label in observed - member_keys:
            raise FormulaError(
                f"i({term.var}): bin label {label!r} collides with an existing level")

    levels = sorted({v for v in binned if v is not None},
                    key=lambda v: bin_min_key.get(v, _level_sort_key(v)))
    if not levels:
        raise FormulaError(f"i({term.var}): no observed levels")

    if term.ref:
        ref_levels = []
        for r in term.ref:
            k = _coerce_key(r)
            if k not in levels:
                raise FormulaError(f"i({term.var}): unknown reference level {r!r}")
            ref_levels.append(k)
    else:
        ref_levels = [levels[0]]
    kept = [lv for lv in levels if lv not in ref_levels]

    level_code = {lv: k for k, lv in enumerate(levels)}
    codes = np.array([-1 if v is None else level_code[v] for v in binned], dtype=np.int64)

    out = []
    if term.interact is not None and term.interact_categorical:
        ivalues = np.asarray(interacting)
        ikeys = [None if _is_missing(v) else _coerce_key(v) for v in ivalues.tolist()]
        ilevels = sorted({v for v in ikeys if v is not None}, key=_level_sort_key)
        icode = {lv: k for k, lv in enumerate(ilevels)}
        icodes = np.array([-1 if v is None else icode[v] for v in ikeys], dtype=np.int64)
        for lv in kept:
            for ilv in ilevels:
                col = ((codes == level_code[lv]) & (icodes == icode[ilv])).astype(np.float64)
                col[(codes < 0) | (icodes < 0)] = np.nan
                out.append((f"{term.var}::{_level_label(lv)}:{term.interact}::{_level_label(ilv)}", col))
        return out

    z = None
    if term.interact is not None:
        z = np.asarray(interacting, dtype=np.float64)
    for lv in kept:
        col = (codes == level_code[lv]).astype(np.float64)
        col[codes < 0] = np.nan
        if z is not None:
            col = col * z
            name = f"{term.var}::{_level_label(lv)}:{term.interact}"
        else:
            name = f"{term.var}::{_level_label(lv)}"
        out.append((name, col))
    return out


def _is_missing(v) -> bool:
    return v is None or (isinstance(v, float) and np.isnan(v))


def _coerce_key(v):
    """Canonical hashable level key: integral floats collapse to int."""
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating, float)):
        f = float(v)
        return int(f) if f == int(f) else f
    if isinstance(v, (np.str_,)):
        return str(v)
    if isinstance(v, bytes):
        return v.decode()
    return v
