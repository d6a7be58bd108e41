"""A PCTL fragment: AST, recursive-descent parser, printer and trace evaluation.

Concrete syntax (loosest binding last)::

    state  := impl
    impl   := or ("=>" impl)?                     right associative
    or     := and ("|" and)*
    and    := unary ("&" unary)*
    unary  := "!" unary | atom
    atom   := "true" | "false" | IDENT | "(" state ")"
            | "P" "[" NUM "," NUM "]" "(" path ")"
    path   := "X" unary | "G<=" INT unary | "F<=" INT unary
            | state "U<=" INT state | state "U" state

Only ``true``, atoms, ``!``, ``&`` and ``P`` survive parsing; every other
operator is rewritten in terms of them::

    a | b      ->  !(!a & !b)
    a => b     ->  !(a & !b)
    false      ->  !true
    F<=n a     ->  true U<=n a
    G<=n a     ->  BoundedAlways(n, a), evaluated as !(true U<=n !a)
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Sequence, Union


class FormulaSyntaxError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class UnsupportedFormulaError(ValueError):
    """The formula is well formed but cannot be evaluated in this context."""


@dataclass(frozen=True)
class TrueF:
    pass


@dataclass(frozen=True)
class Atom:
    name: str


@dataclass(frozen=True)
class Not:
    arg: "StateFormula"


@dataclass(frozen=True)
class And:
    left: "StateFormula"
    right: "StateFormula"


@dataclass(frozen=True)
class Prob:
    lo: float
    hi: float
    path: "PathFormula"

    def __post_init__(self) -> None:
        if not (0.0 <= self.lo <= self.hi <= 1.0):
            raise ValueError(f"malformed probability interval [{self.lo}, {self.hi}]")


@dataclass(frozen=True)
class Next:
    arg: "StateFormula"


@dataclass(frozen=True)
class Until:
    left: "StateFormula"
    right: "StateFormula"


@dataclass(frozen=True)
class BoundedUntil:
    left: "StateFormula"
    right: "StateFormula"
    bound: int

    def __post_init__(self) -> None:
        if self.bound < 0:
            raise ValueError("until bound must be non-negative")


@dataclass(frozen=True)
class BoundedAlways:
    """``G<=n arg``; semantically the negation of ``true U<=n !arg``."""

    bound: int
    arg: "StateFormula"

    def __post_init__(self) -> None:
        if self.bound < 0:
            raise ValueError("always bound must be non-negative")

    @property
    def dual(self) -> BoundedUntil:
        return BoundedUntil(TRUE, Not(self.arg), self.bound)


StateFormula = Union[TrueF, Atom, Not, And, Prob]
PathFormula = Union[Next, Until, BoundedUntil, BoundedAlways]

TRUE = TrueF()


def Or(a: StateFormula, b: StateFormula) -> StateFormula:
    return Not(And(Not(a), Not(b)))


def Implies(a: StateFormula, b: StateFormula) -> StateFormula:
    return Not(And(a, Not(b)))


def bounded_always(n: int, phi: StateFormula) -> BoundedAlways:
    return BoundedAlways(n, phi)


def bounded_eventually(n: int, phi: StateFormula) -> BoundedUntil:
    return BoundedUntil(TRUE, phi, n)


# ---------------------------------------------------------------- lexing

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<until_b>U\s*<=\s*(?P<ub>\d+))
  | (?P<always>G\s*<=\s*(?P<gb>\d+))
  | (?P<event>F\s*<=\s*(?P<fb>\d+))
  | (?P<num>\d+(?:\.\d*)?(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?)
  | (?P<ident>[a-z][a-z0-9-]*)
  | (?P<imp>=>)
  | (?P<op>[!&|()\[\],XUP])
    """,
    re.VERBOSE,
)


@dataclass
class _Tok:
    kind: str
    text: str
    pos: int
    bound: int | None = None


def _tokenize(text: str) -> list[_Tok]:
    toks: list[_Tok] = []
    i = 0
    while i < len(text):
        m = _TOKEN_RE.match(text, i)
        if not m:
            raise FormulaSyntaxError(f"unknown operator {text[i]!r}", i)
        if m.group("until_b"):
            toks.append(_Tok("U<=", m.group(), i, int(m.group("ub"))))
        elif m.group("always"):
            toks.append(_Tok("G<=", m.group(), i, int(m.group("gb"))))
        elif m.group("event"):
            toks.append(_Tok("F<=", m.group(), i, int(m.group("fb"))))
        elif m.group("num"):
            toks.append(_Tok("num", m.group(), i))
        elif m.group("ident"):
            word = m.group()
            toks.append(_Tok(word if word in ("true", "false") else "ident", word, i))
        elif m.group("imp"):
            toks.append(_Tok("=>", "=>", i))
        elif m.group("op"):
            toks.append(_Tok(m.group(), m.group(), i))
        i = m.end()
    toks.append(_Tok("eof", "", len(text)))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def take(self, kind: str) -> _Tok:
        t = self.tok
        if t.kind != kind:
            found = t.text or "end of input"
            raise FormulaSyntaxError(f"expected {kind!r}, found {found!r}", t.pos)
        self.i += 1
        return t

    def accept(self, kind: str) -> _Tok | None:
        if self.tok.kind == kind:
            return self.take(kind)
        return None

    def state(self) -> StateFormula:
        left = self.disj()
        if self.accept("=>"):
            return Implies(left, self.state())
        return left

    def disj(self) -> StateFormula:
        left = self.conj()
        while self.accept("|"):
            left = Or(left, self.conj())
        return left

    def conj(self) -> StateFormula:
        left = self.unary()
        while self.accept("&"):
            left = And(left, self.unary())
        return left

    def unary(self) -> StateFormula:
        if self.accept("!"):
            return Not(self.unary())
        return self.atom()

    def atom(self) -> StateFormula:
        t = self.tok
        if self.accept("true"):
            return TRUE
        if self.accept("false"):
            return Not(TRUE)
        if self.accept("ident"):
            return Atom(t.text)
        if self.accept("("):
            inner = self.state()
            self.take(")")
            return inner
        if self.accept("P"):
            return self.prob(t.pos)
        found = t.text or "end of input"
        raise FormulaSyntaxError(f"unexpected {found!r}", t.pos)

    def number(self) -> float:
        t = self.tok
        if t.kind != "num":
            raise FormulaSyntaxError("malformed probability interval", t.pos)
        self.i += 1
        return float(t.text)

    def prob(self, pos: int) -> Prob:
        try:
            self.take("[")
            lo = self.number()
            self.take(",")
            hi = self.number()
            self.take("]")
        except FormulaSyntaxError as exc:
            raise FormulaSyntaxError("malformed probability interval", exc.position) from None
        if not (0.0 <= lo <= hi <= 1.0):
            raise FormulaSyntaxError(f"malformed probability interval [{lo}, {hi}]", pos)
        self.take("(")
        path = self.path()
        self.take(")")
        return Prob(lo, hi, path)

    def path(self) -> PathFormula:
        t = self.tok
        if self.accept("X"):
            return Next(self.unary())
        if self.accept("G<="):
            return BoundedAlways(t.bound, self.unary())
        if self.accept("F<="):
            return bounded_eventually(t.bound, self.unary())
        left = self.state()
        t = self.tok
        if self.accept("U<="):
            return BoundedUntil(left, self.state(), t.bound)
        if self.accept("U"):
            return Until(left, self.state())
        found = t.text or "end of input"
        raise FormulaSyntaxError(f"expected a temporal operator, found {found!r}", t.pos)

    def finish(self) -> None:
        if self.tok.kind != "eof":
            raise FormulaSyntaxError(f"unexpected {self.tok.text!r}", self.tok.pos)


def parse_state_formula(text: str) -> StateFormula:
    if not text or not text.strip():
        raise FormulaSyntaxError("empty formula", 0)
    p = _Parser(text)
    phi = p.state()
    p.finish()
    return phi


def parse_path_formula(text: str) -> PathFormula:
    if not text or not text.strip():
        raise FormulaSyntaxError("empty formula", 0)
    p = _Parser(text)
    phi = p.path()
    p.finish()
    return phi


# ---------------------------------------------------------------- printing

def _num(x: float) -> str:
    return repr(float(x))


def format_state_formula(phi: StateFormula) -> str:
    if isinstance(phi, TrueF):
        return "true"
    if isinstance(phi, Atom):
        return phi.name
    if isinstance(phi, Not):
        return "!" + format_state_formula(phi.arg)
    if isinstance(phi, And):
        return f"({format_state_formula(phi.left)} & {format_state_formula(phi.right)})"
    if isinstance(phi, Prob):
        return f"P[{_num(phi.lo)},{_num(phi.hi)}]({format_path_formula(phi.path)})"
    raise TypeError(f"not a state formula: {phi!r}")


def format_path_formula(phi: PathFormula) -> str:
    f = format_state_formula
    if isinstance(phi, Next):
        return f"X {f(phi.arg)}"
    if isinstance(phi, BoundedAlways):
        return f"G<={phi.bound} {f(phi.arg)}"
    if isinstance(phi, BoundedUntil):
        return f"{f(phi.left)} U<={phi.bound} {f(phi.right)}"
    if isinstance(phi, Until):
        return f"{f(phi.left)} U {f(phi.right)}"
    raise TypeError(f"not a path formula: {phi!r}")


# ---------------------------------------------------------------- evaluation

@dataclass(frozen=True)
class Trace:
    """A finite sequence of label sets, ``labels[i]`` being ``tau[i]``."""

    labels: tuple[frozenset[str], ...]

    def __post_init__(self) -> None:
        if len(self.labels) == 0:
            raise ValueError("a trace has at least one state")

    @classmethod
    def of(cls, seq: Iterable[Iterable[str]]) -> "Trace":
        return cls(tuple(frozenset(x) for x in seq))

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> frozenset[str]:
        return self.labels[i]


def eval_state(labels: Iterable[str], phi: StateFormula) -> bool:
    if not isinstance(labels, (set, frozenset)):
        labels = frozenset(labels)
    return _eval(labels, phi)


def _eval(labels: frozenset[str] | set[str], phi: StateFormula) -> bool:
    if isinstance(phi, TrueF):
        return True
    if isinstance(phi, Atom):
        return phi.name in labels
    if isinstance(phi, Not):
        return not _eval(labels, phi.arg)
    if isinstance(phi, And):
        return _eval(labels, phi.left) and _eval(labels, phi.right)
    if isinstance(phi, Prob):
        raise UnsupportedFormulaError("probabilistic operators are checked statistically, not per state")
    raise TypeError(f"not a state formula: {phi!r}")


def eval_path(trace: Trace | Sequence[Iterable[str]], phi: PathFormula) -> bool:
    """Evaluate a path formula over a finite trace.

    Bounds that reach past the end of the trace are clipped to the last
    index, so an episode that ends early without a violation is safe.
    """
    labels = trace.labels if isinstance(trace, Trace) else tuple(trace)
    if len(labels) == 0:
        raise ValueError("cannot evaluate a path formula on an empty trace")
    if isinstance(phi, BoundedAlways):
        return not _bounded_until(labels, phi.dual)
    if isinstance(phi, BoundedUntil):
        return _bounded_until(labels, phi)
    if isinstance(phi, Next):
        if len(labels) < 2:
            raise ValueError("X needs a trace of length at least 2")
        return eval_state(labels[1], phi.arg)
    if isinstance(phi, Until):
        raise UnsupportedFormulaError("unbounded until cannot be decided on a finite trace")
    raise TypeError(f"not a path formula: {phi!r}")


def _bounded_until(labels: Sequence[Iterable[str]], phi: BoundedUntil) -> bool:
    for i in range(min(phi.bound, len(labels) - 1) + 1):
        if eval_state(labels[i], phi.right):
            return True
        if not eval_state(labels[i], phi.left):
            return False
    return False


def atoms(phi: StateFormula | PathFormula) -> frozenset[str]:
    """Atomic propositions mentioned anywhere in ``phi``."""
    if isinstance(phi, Atom):
        return frozenset({phi.name})
    if isinstance(phi, TrueF):
        return frozenset()
    if isinstance(phi, (Not, Next)):
        return atoms(phi.arg)
    if isinstance(phi, BoundedAlways):
        return atoms(phi.arg)
    if isinstance(phi, (And, Until, BoundedUntil)):
        return atoms(phi.left) | atoms(phi.right)
    if isinstance(phi, Prob):
        return atoms(phi.path)
    raise TypeError(f"not a formula: {phi!r}")
