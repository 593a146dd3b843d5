"""PDDL subset: emit scene graphs as domain/problem text and parse them back.

Supported: ``:strips`` and ``:typing`` requirements, typed constants/objects,
conjunctive preconditions and goals of positive atoms, add/delete effects.
Anything else (quantifiers, disjunction, conditional effects, ...) is rejected
with a line/column diagnostic.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

Atom = tuple[str, ...]

DOMAIN_NAME = "srp-tabletop"

# child -> parent
TYPES: dict[str, str] = {
    "item": "object",
    "solid": "item",
    "container": "item",
    "region": "object",
    "surface": "object",
}
CONSTANTS: dict[str, str] = {"table": "surface"}
PREDICATES: dict[str, tuple[tuple[str, str], ...]] = {
    "on": (("?x", "item"), ("?y", "object")),
    "in": (("?x", "object"), ("?y", "object")),
    "clear": (("?x", "object"),),
    "holding": (("?x", "item"),),
    "handempty": (),
    "has": (("?p", "item"), ("?r", "region")),
}


@dataclass(frozen=True)
class ActionSchema:
    name: str
    params: tuple[tuple[str, str], ...]
    pre: tuple[Atom, ...]
    add: tuple[Atom, ...]
    delete: tuple[Atom, ...]


def _schema(name, params, pre, add, delete) -> ActionSchema:
    return ActionSchema(name, tuple(params), tuple(pre), tuple(add), tuple(delete))


SCHEMAS: tuple[ActionSchema, ...] = (
    _schema("pick", [("?x", "item")],
            [("handempty",), ("clear", "?x"), ("on", "?x", "table")],
            [("holding", "?x")],
            [("handempty",), ("clear", "?x"), ("on", "?x", "table")]),
    _schema("place", [("?x", "item")],
            [("holding", "?x")],
            [("on", "?x", "table"), ("clear", "?x"), ("handempty",)],
            [("holding", "?x")]),
    _schema("stack", [("?x", "item"), ("?y", "solid")],
            [("holding", "?x"), ("clear", "?y")],
            [("on", "?x", "?y"), ("clear", "?x"), ("handempty",)],
            [("holding", "?x"), ("clear", "?y")]),
    _schema("unstack", [("?x", "item"), ("?y", "solid")],
            [("handempty",), ("clear", "?x"), ("on", "?x", "?y")],
            [("holding", "?x"), ("clear", "?y")],
            [("handempty",), ("clear", "?x"), ("on", "?x", "?y")]),
    _schema("place_in", [("?x", "item"), ("?y", "container")],
            [("holding", "?x"), ("clear", "?y")],
            [("in", "?x", "?y"), ("clear", "?x"), ("handempty",)],
            [("holding", "?x"), ("clear", "?y")]),
    _schema("remove_from", [("?x", "item"), ("?y", "container")],
            [("handempty",), ("clear", "?x"), ("in", "?x", "?y")],
            [("holding", "?x"), ("clear", "?y")],
            [("handempty",), ("clear", "?x"), ("in", "?x", "?y")]),
    _schema("place_in_region", [("?x", "item"), ("?r", "region")],
            [("holding", "?x"), ("clear", "?r")],
            [("on", "?x", "table"), ("in", "?r", "?x"), ("clear", "?x"), ("handempty",)],
            [("holding", "?x"), ("clear", "?r")]),
    _schema("remove_from_region", [("?x", "item"), ("?r", "region")],
            [("handempty",), ("clear", "?x"), ("on", "?x", "table"), ("in", "?r", "?x")],
            [("holding", "?x"), ("clear", "?r")],
            [("handempty",), ("clear", "?x"), ("on", "?x", "table"), ("in", "?r", "?x")]),
)


@dataclass(frozen=True)
class GroundedState:
    """Planner view of a scene: typed constants plus true atoms."""

    objects: tuple[tuple[str, str], ...]  # (name, type), sorted by name
    atoms: frozenset[Atom]

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(sorted(tuple(o) for o in self.objects)))
        object.__setattr__(self, "atoms", frozenset(tuple(a) for a in self.atoms))

    def problems(self) -> list[str]:
        held = [a for a in self.atoms if a[0] == "holding"]
        out = []
        if len(held) > 1:
            out.append("more than one object held")
        if (("handempty",) in self.atoms) == bool(held):
            out.append("handempty must hold exactly when nothing is held")
        return out


@dataclass(frozen=True)
class Problem:
    name: str
    state: GroundedState
    goal: frozenset[Atom]


@dataclass(frozen=True)
class Domain:
    name: str
    types: Mapping[str, str]
    constants: Mapping[str, str]
    predicates: Mapping[str, tuple[tuple[str, str], ...]]
    schemas: tuple[ActionSchema, ...]


def is_subtype(t: str, parent: str, types: Mapping[str, str] = TYPES) -> bool:
    while True:
        if t == parent:
            return True
        if t not in types:
            return parent == "object"
        t = types[t]


# --------------------------------------------------------------------------
# emit
# --------------------------------------------------------------------------

def _atom(a: Sequence[str]) -> str:
    return "(" + " ".join(a) + ")"


def _typed(pairs: Iterable[tuple[str, str]]) -> str:
    return " ".join(f"{n} - {t}" for n, t in pairs)


def _conj(atoms: Sequence[Atom], negate: Sequence[Atom] = ()) -> str:
    parts = [_atom(a) for a in atoms] + [f"(not {_atom(a)})" for a in negate]
    return "(and " + " ".join(parts) + ")"


def domain_text(schemas: Sequence[ActionSchema] = SCHEMAS) -> str:
    children: dict[str, list[str]] = {}
    for t, p in TYPES.items():
        children.setdefault(p, []).append(t)
    type_lines = [f"    {' '.join(children[p])} - {p}" for p in ("item", "object")]
    lines = [
        f"(define (domain {DOMAIN_NAME})",
        "  (:requirements :strips :typing)",
        "  (:types",
        *type_lines,
        "  )",
        "  (:constants " + _typed(sorted(CONSTANTS.items())) + ")",
        "  (:predicates",
        *[f"    ({name}{' ' + _typed(args) if args else ''})" for name, args in PREDICATES.items()],
        "  )",
    ]
    for s in schemas:
        lines += [
            f"  (:action {s.name}",
            f"    :parameters ({_typed(s.params)})",
            f"    :precondition {_conj(s.pre)}",
            f"    :effect {_conj(s.add, s.delete)}",
            "  )",
        ]
    lines.append(")")
    return "\n".join(lines) + "\n"


def problem_text(state: GroundedState, goal: Iterable[Atom], name: str = "srp-task") -> str:
    objs = [(n, t) for n, t in state.objects if n not in CONSTANTS]
    lines = [
        f"(define (problem {name})",
        f"  (:domain {DOMAIN_NAME})",
        "  (:objects",
        *[f"    {n} - {t}" for n, t in objs],
        "  )",
        "  (:init",
        *[f"    {_atom(a)}" for a in sorted(state.atoms)],
        "  )",
        "  (:goal (and",
        *[f"    {_atom(a)}" for a in sorted(goal)],
        "  ))",
        ")",
    ]
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# parse
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Diagnostic:
    line: int
    col: int
    message: str

    def __str__(self) -> str:
        return f"{self.line}:{self.col}: {self.message}"


class PDDLError(ValueError):
    def __init__(self, diagnostics: list[Diagnostic], source: str = ""):
        self.diagnostics = diagnostics
        prefix = f"{source}:" if source else ""
        super().__init__("; ".join(prefix + str(d) for d in diagnostics))


@dataclass
class Node:
    value: str | list["Node"]
    line: int
    col: int

    @property
    def is_list(self) -> bool:
        return isinstance(self.value, list)

    def head(self) -> str | None:
        if self.is_list and self.value and not self.value[0].is_list:
            return self.value[0].value.lower()
        return None


_TOKEN = re.compile(r"\s+|;[^\n]*|\(|\)|[^\s()]+")
UNSUPPORTED = {"forall", "exists", "or", "imply", "when", "either", "=", "increase", "decrease",
               ":functions", ":durative-action", ":derived", ":constraints", ":metric", "preference"}


def _fail(node_or_pos, message: str, source: str = ""):
    line, col = (node_or_pos.line, node_or_pos.col) if isinstance(node_or_pos, Node) else node_or_pos
    raise PDDLError([Diagnostic(line, col, message)], source)


def read_sexpr(text: str, source: str = "") -> Node:
    stack: list[Node] = []
    root: Node | None = None
    line, col = 1, 1
    for m in _TOKEN.finditer(text):
        tok = m.group()
        pos = (line, col)
        nl = tok.count("\n")
        if nl:
            line += nl
            col = len(tok) - tok.rfind("\n")
        else:
            col += len(tok)
        if tok[0].isspace() or tok[0] == ";":
            continue
        if tok == "(":
            stack.append(Node([], *pos))
        elif tok == ")":
            if not stack:
                _fail(pos, "unbalanced ')'", source)
            node = stack.pop()
            if stack:
                stack[-1].value.append(node)
            elif root is None:
                root = node
            else:
                _fail(pos, "more than one top-level expression", source)
        else:
            if not stack:
                _fail(pos, f"unexpected token {tok!r} outside expression", source)
            stack[-1].value.append(Node(tok.lower(), *pos))
    if stack:
        _fail((stack[-1].line, stack[-1].col), "unclosed '('", source)
    if root is None:
        _fail((1, 1), "empty input", source)
    return root


class _Parser:
    def __init__(self, source: str):
        self.source = source

    def fail(self, node, msg):
        _fail(node, msg, self.source)

    def check_supported(self, node: Node):
        if node.is_list:
            h = node.head()
            if h in UNSUPPORTED:
                self.fail(node, f"unsupported construct '{h}'")
            for c in node.value:
                self.check_supported(c)
        elif node.value in UNSUPPORTED:
            self.fail(node, f"unsupported construct '{node.value}'")

    def sym(self, node: Node) -> str:
        if node.is_list:
            self.fail(node, "expected a name")
        return node.value

    def typed_list(self, nodes: list[Node]) -> list[tuple[str, str, Node]]:
        out, pending = [], []
        i = 0
        while i < len(nodes):
            n = nodes[i]
            name = self.sym(n)
            if name == "-":
                if i + 1 >= len(nodes):
                    self.fail(n, "missing type after '-'")
                t = self.sym(nodes[i + 1])
                out += [(p, t, pn) for p, pn in pending]
                pending = []
                i += 2
                continue
            pending.append((name, n))
            i += 1
        out += [(p, "object", pn) for p, pn in pending]
        return out

    def atom(self, node: Node, predicates, scope: Mapping[str, str]) -> Atom:
        if not node.is_list or not node.value:
            self.fail(node, "expected an atom")
        h = node.head()
        if h == "not":
            self.fail(node, "negation is not allowed here")
        if h == "and":
            self.fail(node, "nested 'and' is not supported")
        if h not in predicates:
            self.fail(node, f"unknown predicate '{h}'")
        args = [self.sym(a) for a in node.value[1:]]
        want = predicates[h]
        if len(args) != len(want):
            self.fail(node, f"arity mismatch: '{h}' takes {len(want)} argument(s), got {len(args)}")
        for a, an, (_, t) in zip(args, node.value[1:], want):
            if a not in scope:
                self.fail(an, f"unknown {'variable' if a.startswith('?') else 'object'} '{a}'")
            if not is_subtype(scope[a], t, self.types):
                self.fail(an, f"'{a}' of type {scope[a]} is not a {t}")
        return (h, *args)

    def conjunction(self, node: Node, predicates, scope, allow_not: bool = False):
        items = node.value[1:] if node.head() == "and" else [node]
        pos, neg = [], []
        for it in items:
            if allow_not and it.is_list and it.head() == "not":
                if len(it.value) != 2:
                    self.fail(it, "'not' takes one atom")
                neg.append(self.atom(it.value[1], predicates, scope))
            else:
                pos.append(self.atom(it, predicates, scope))
        return pos, neg

    def sections(self, root: Node, kind: str) -> tuple[str, list[Node]]:
        if root.head() != "define" or len(root.value) < 2:
            self.fail(root, "expected (define ...)")
        hdr = root.value[1]
        if not hdr.is_list or hdr.head() != kind or len(hdr.value) != 2:
            self.fail(hdr, f"expected ({kind} <name>)")
        return self.sym(hdr.value[1]), root.value[2:]

    # ---- domain ----
    def domain(self, text: str) -> Domain:
        root = read_sexpr(text, self.source)
        self.check_supported(root)
        name, secs = self.sections(root, "domain")
        self.types = dict()
        constants: dict[str, str] = {}
        predicates: dict[str, tuple] = {}
        schemas = []
        for sec in secs:
            h = sec.head()
            if h == ":requirements":
                for r in sec.value[1:]:
                    if self.sym(r) not in (":strips", ":typing"):
                        self.fail(r, f"unsupported requirement '{r.value}'")
            elif h == ":types":
                for t, parent, _ in self.typed_list(sec.value[1:]):
                    self.types[t] = parent
            elif h == ":constants":
                for c, t, cn in self.typed_list(sec.value[1:]):
                    self.known_type(t, cn)
                    constants[c] = t
            elif h == ":predicates":
                for p in sec.value[1:]:
                    if not p.is_list or p.head() is None:
                        self.fail(p, "expected predicate declaration")
                    args = self.typed_list(p.value[1:])
                    for _, t, an in args:
                        self.known_type(t, an)
                    predicates[p.head()] = tuple((a, t) for a, t, _ in args)
            elif h == ":action":
                schemas.append(self.action(sec, predicates, constants))
            else:
                self.fail(sec, f"unsupported domain section '{h}'")
        return Domain(name, self.types, constants, predicates, tuple(schemas))

    def known_type(self, t: str, node: Node):
        if t != "object" and t not in self.types:
            self.fail(node, f"unknown type '{t}'")

    def action(self, sec: Node, predicates, constants) -> ActionSchema:
        if len(sec.value) < 2:
            self.fail(sec, "action needs a name")
        name = self.sym(sec.value[1])
        fields: dict[str, Node] = {}
        rest = sec.value[2:]
        if len(rest) % 2:
            self.fail(sec, "malformed action body")
        for key, val in zip(rest[::2], rest[1::2]):
            k = self.sym(key)
            if k not in (":parameters", ":precondition", ":effect"):
                self.fail(key, f"unsupported action field '{k}'")
            fields[k] = val
        params = self.typed_list(fields[":parameters"].value) if ":parameters" in fields else []
        for _, t, pn in params:
            self.known_type(t, pn)
        scope = dict(constants)
        scope.update({p: t for p, t, _ in params})
        pre: list = []
        if ":precondition" in fields:
            pre, _ = self.conjunction(fields[":precondition"], predicates, scope)
        add, delete = [], []
        if ":effect" in fields:
            add, delete = self.conjunction(fields[":effect"], predicates, scope, allow_not=True)
        return ActionSchema(name, tuple((p, t) for p, t, _ in params), tuple(pre), tuple(add), tuple(delete))

    # ---- problem ----
    def problem(self, text: str, domain: Domain) -> Problem:
        root = read_sexpr(text, self.source)
        self.check_supported(root)
        name, secs = self.sections(root, "problem")
        objects = dict(domain.constants)
        init, goal = set(), set()
        for sec in secs:
            h = sec.head()
            if h == ":domain":
                if len(sec.value) != 2 or self.sym(sec.value[1]) != domain.name:
                    self.fail(sec, f"problem is not for domain '{domain.name}'")
            elif h == ":objects":
                for o, t, on in self.typed_list(sec.value[1:]):
                    self.known_type(t, on)
                    objects[o] = t
            elif h == ":init":
                for a in sec.value[1:]:
                    init.add(self.atom(a, domain.predicates, objects))
            elif h == ":goal":
                if len(sec.value) != 2:
                    self.fail(sec, "goal takes one formula")
                pos, _ = self.conjunction(sec.value[1], domain.predicates, objects)
                goal.update(pos)
            else:
                self.fail(sec, f"unsupported problem section '{h}'")
        return Problem(name, GroundedState(tuple(objects.items()), frozenset(init)), frozenset(goal))


def parse_pddl(domain: str, problem: str) -> tuple[Domain, Problem]:
    p = _Parser("domain")
    d = p.domain(domain)
    p.source = "problem"
    return d, p.problem(problem, d)
