"""Scenario files: line-oriented ``key = value`` pairs under ``[section]`` headers.

Example::

    [scenario]
    kind = forward
    [grid]
    T = 1
    N = 50
    [problem]
    builtin = example-5.2

Inline coefficients are expressions in ``t`` and ``s`` (the two time
arguments), written as numbers, ``diag(a, b)`` or bracketed row lists such
as ``[[1, 0.5 * t], [0, 1]]``.  Free terms may also use ``W`` (the Brownian
path at the row time) and ``WT`` (the path at the horizon).
"""
from __future__ import annotations

import ast
import operator
import os
from dataclasses import dataclass, field

import numpy as np

from .builtins import BUILTINS

KINDS = ("forward", "backward", "duality", "compare", "control", "suite")

SECTIONS = {
    "scenario": {"kind": str, "name": str, "description": str},
    "grid": {"T": float, "N": int},
    "ensemble": {"M": int, "seed": int},
    "solver": {"tol": float, "max_iter": int, "degree": int, "beta": float},
    "problem": {"builtin": str, "b": float, "sigma": float, "a": float, "seed": int, "n": int, "theorem": str,
                "pieces": int, "lower": float, "upper": float, "levels": int, "criteria": str,
                "determinism": bool, "phi": "expr", "psi": "expr",
                "A0": "expr", "A1": "expr", "B0": "expr", "B1": "expr", "C0": "expr", "C1": "expr"},
    "output": {"dir": str, "per_particle": bool},
    "check": {"C": float, "expect": str},
}

INLINE_COEFFS = {"forward": ("A0", "A1", "C0", "C1"), "duality": ("A0", "A1", "C0", "C1"),
                 "backward": ("A0", "B0", "C0", "A1", "B1", "C1")}


class ScenarioError(Exception):
    """All problems found in a scenario file, each with its line number."""

    def __init__(self, errors, path=""):
        self.errors = list(errors)
        self.path = path
        super().__init__("\n".join(f"{path}:{ln}: {msg}" if ln else f"{path}: {msg}" for ln, msg in self.errors))


# ---------------------------------------------------------------------------
# expressions
# ---------------------------------------------------------------------------

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul, ast.Div: operator.truediv,
           ast.Pow: operator.pow}
_UNARY = {ast.USub: operator.neg, ast.UAdd: operator.pos}
_FUNCS = {"exp": np.exp, "cos": np.cos, "sin": np.sin}


@dataclass
class Expr:
    """A parsed coefficient: scalar, vector (diag or flat list) or matrix of polynomial-like entries."""

    text: str
    shape: tuple          # () scalar, (k,) vector / diag, (r, c) matrix
    diag: bool
    tree: ast.AST
    names: frozenset

    def __call__(self, **env):
        return np.asarray(_eval(self.tree, env), dtype=float)

    def matrix(self, n, **env):
        v = self(**env)
        if self.diag:
            return np.diag(v)
        return v * np.eye(n) if v.ndim == 0 else v

    def vector(self, n, **env):
        """Scalar expressions are repeated over the n components; lists already carry them last."""
        v = self(**env)
        if self.shape == ():
            return np.repeat(v[..., None], n, axis=-1)
        return v


def _eval(node, env):
    if isinstance(node, ast.Expression):
        return _eval(node.body, env)
    if isinstance(node, ast.Constant):
        return float(node.value)
    if isinstance(node, ast.Name):
        return env[node.id]
    if isinstance(node, ast.BinOp):
        return _BINOPS[type(node.op)](_eval(node.left, env), _eval(node.right, env))
    if isinstance(node, ast.UnaryOp):
        return _UNARY[type(node.op)](_eval(node.operand, env))
    if isinstance(node, ast.Call):
        args = [_eval(a, env) for a in node.args]
        if node.func.id == "diag":
            return np.stack(np.broadcast_arrays(*args), axis=-1)
        return _FUNCS[node.func.id](*args)
    if isinstance(node, ast.List):
        items = np.broadcast_arrays(*[_eval(e, env) for e in node.elts])
        return np.stack(items, axis=-1) if not isinstance(node.elts[0], ast.List) else np.stack(items, axis=-2)
    raise ValueError(f"unsupported expression element {type(node).__name__}")


def _check(node, allowed) -> set:
    """Validate the syntax tree; returns the names used."""
    names = set()
    for sub in ast.walk(node):
        if isinstance(sub, ast.Name):
            if sub.id in ("diag",) + tuple(_FUNCS):
                continue
            if sub.id not in allowed:
                raise ValueError(f"unknown name {sub.id!r} (allowed: {', '.join(sorted(allowed))})")
            names.add(sub.id)
        elif isinstance(sub, ast.Call):
            if not isinstance(sub.func, ast.Name) or sub.func.id not in ("diag",) + tuple(_FUNCS) or sub.keywords:
                raise ValueError("only diag(...), exp, cos and sin calls are allowed")
        elif isinstance(sub, ast.Constant):
            if not isinstance(sub.value, (int, float)) or isinstance(sub.value, bool):
                raise ValueError(f"not a number: {sub.value!r}")
        elif not isinstance(sub, (ast.Expression, ast.BinOp, ast.UnaryOp, ast.List, ast.Load, ast.Call,
                                  *_BINOPS, *_UNARY)):
            raise ValueError(f"unsupported syntax {type(sub).__name__}")
    return names


def _shape(node) -> tuple[tuple, bool]:
    if isinstance(node, ast.Call) and node.func.id == "diag":
        return (len(node.args),), True
    if not isinstance(node, ast.List):
        return (), False
    if not node.elts:
        raise ValueError("empty list")
    if all(isinstance(e, ast.List) for e in node.elts):
        widths = {len(e.elts) for e in node.elts}
        if len(widths) != 1:
            raise ValueError(f"dimension mismatch: ragged matrix with row lengths {sorted(len(e.elts) for e in node.elts)}")
        if any(isinstance(x, ast.List) for e in node.elts for x in e.elts):
            raise ValueError("matrices nest at most two levels")
        return (len(node.elts), widths.pop()), False
    if any(isinstance(e, ast.List) for e in node.elts):
        raise ValueError("mixed scalars and rows in a matrix")
    return (len(node.elts),), False


def parse_expr(text: str, allowed=("t", "s")) -> Expr:
    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        raise ValueError(f"cannot parse expression {text!r}: {exc.msg}") from None
    names = _check(tree, set(allowed))
    shape, diag = _shape(tree.body)
    return Expr(text.strip(), shape, diag, tree, frozenset(names))


def check_matrix(e: Expr, n: int, key: str):
    if e.shape == ():
        return
    if e.diag:
        if e.shape != (n,):
            raise ValueError(f"dimension mismatch: {key} = diag with {e.shape[0]} entries, expected {n}")
        return
    if len(e.shape) == 1:
        raise ValueError(f"dimension mismatch: {key} has {e.shape[0]} entries, expected a {n}x{n} matrix "
                         "written as a list of rows")
    if e.shape != (n, n):
        raise ValueError(f"dimension mismatch: {key} is {e.shape[0]}x{e.shape[1]}, expected {n}x{n}")


def check_vector(e: Expr, n: int, key: str):
    if e.diag or len(e.shape) > 1 or (e.shape and e.shape != (n,)):
        raise ValueError(f"dimension mismatch: {key} must be a scalar or a list of {n} entries")


# ---------------------------------------------------------------------------
# spec
# ---------------------------------------------------------------------------


@dataclass
class ScenarioSpec:
    kind: str
    name: str = ""
    description: str = ""
    T: float = 1.0
    N: int = 50
    M: int = 10_000
    seed: int = 0
    tol: float = 1e-6
    max_iter: int = 10
    degree: int = 3
    beta: float = 0.0
    builtin: str | None = None
    params: dict = field(default_factory=dict)
    inline: dict = field(default_factory=dict)
    out: str = "out"
    per_particle: bool = False
    C: float | None = None
    expect: str | None = None
    path: str = ""

    @property
    def n(self) -> int:
        return int(self.params.get("n", 1))


def _convert(kind, raw: str):
    if kind is bool:
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected true/false, got {raw!r}")
    if kind is int:
        v = float(raw)
        if v != int(v):
            raise ValueError(f"expected an integer, got {raw!r}")
        return int(v)
    if kind is float:
        return float(raw)
    return raw


def parse_scenario_text(text: str, path: str = "<string>") -> ScenarioSpec:
    errors = []
    values = {}      # (section, key) -> (value, line)
    section = None
    pending = None   # continuation of a bracketed value across lines
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].rstrip()
        if pending is not None:
            pending[1] += " " + line.strip()
            if pending[1].count("[") <= pending[1].count("]"):
                values[(pending[0], pending[2])] = (pending[1], pending[3])
                pending = None
            continue
        if not line.strip():
            continue
        s = line.strip()
        if s.startswith("["):
            if not s.endswith("]"):
                errors.append((ln, f"malformed section header {s!r}"))
                continue
            section = s[1:-1].strip()
            if section not in SECTIONS:
                errors.append((ln, f"unknown section [{section}]"))
            continue
        if "=" not in s:
            errors.append((ln, f"expected 'key = value', got {s!r}"))
            continue
        key, val = (x.strip() for x in s.split("=", 1))
        if section is None:
            errors.append((ln, f"key {key!r} outside any section"))
            continue
        if section not in SECTIONS:
            continue
        if key not in SECTIONS[section]:
            errors.append((ln, f"unknown key {key!r} in [{section}]"))
            continue
        if (section, key) in values:
            errors.append((ln, f"duplicate key {key!r} in [{section}]"))
            continue
        if val.count("[") > val.count("]"):
            pending = [section, val, key, ln]
            continue
        values[(section, key)] = (val, ln)
    if pending is not None:
        errors.append((pending[3], f"unterminated bracket in {pending[2]!r}"))

    parsed = {}
    for (sec, key), (val, ln) in values.items():
        kind = SECTIONS[sec][key]
        if kind == "expr":
            parsed[(sec, key)] = (val, ln)
            continue
        try:
            parsed[(sec, key)] = (_convert(kind, val), ln)
        except ValueError as exc:
            errors.append((ln, f"{key}: {exc}"))

    def get(sec, key, default=None):
        return parsed[(sec, key)][0] if (sec, key) in parsed else default

    kind = get("scenario", "kind")
    if kind is None:
        errors.append((0, "missing [scenario] kind"))
    elif kind not in KINDS:
        errors.append((parsed[("scenario", "kind")][1], f"unknown kind {kind!r} (one of {', '.join(KINDS)})"))
    spec = ScenarioSpec(kind=kind or "", path=path)
    spec.name = get("scenario", "name", os.path.splitext(os.path.basename(path))[0])
    spec.description = get("scenario", "description", "")
    for sec, key, attr in (("grid", "T", "T"), ("grid", "N", "N"), ("ensemble", "M", "M"), ("ensemble", "seed", "seed"),
                           ("solver", "tol", "tol"), ("solver", "max_iter", "max_iter"),
                           ("solver", "degree", "degree"), ("solver", "beta", "beta"), ("output", "dir", "out"),
                           ("output", "per_particle", "per_particle"), ("check", "C", "C"),
                           ("check", "expect", "expect")):
        if (sec, key) in parsed:
            setattr(spec, attr, parsed[(sec, key)][0])
    for key, (label, ok) in {"N": ("grid N", spec.N >= 1), "M": ("particle count M", spec.M >= 1),
                             "T": ("horizon T", spec.T > 0), "tol": ("tol", spec.tol > 0),
                             "max_iter": ("max_iter", spec.max_iter >= 1), "degree": ("degree", spec.degree >= 0)
                             }.items():
        if not ok:
            sec = next(s for s in SECTIONS if key in SECTIONS[s])
            errors.append((parsed.get((sec, key), (None, 0))[1], f"{label} out of range"))
    if spec.expect is not None and spec.expect not in ("pass", "violation"):
        errors.append((parsed[("check", "expect")][1], "expect must be 'pass' or 'violation'"))

    spec.builtin = get("problem", "builtin")
    exprs = {k: parsed[("problem", k)] for k in ("phi", "psi", "A0", "A1", "B0", "B1", "C0", "C1")
             if ("problem", k) in parsed}
    spec.params = {k: v for (sec, k), (v, _) in parsed.items()
                   if sec == "problem" and k != "builtin" and k not in exprs}
    if spec.builtin is not None:
        b = BUILTINS.get(spec.builtin)
        ln = parsed[("problem", "builtin")][1]
        if b is None:
            errors.append((ln, f"unknown built-in {spec.builtin!r}; see 'mfsvie list-builtins'"))
        elif kind in KINDS and b.kind != kind:
            errors.append((ln, f"built-in {spec.builtin!r} is a {b.kind} problem, scenario kind is {kind}"))
        for k, (_, eln) in exprs.items():
            errors.append((eln, f"{k} given together with a built-in problem"))
    elif kind in KINDS:
        if kind not in INLINE_COEFFS:
            errors.append((0, f"kind {kind} needs [problem] builtin"))
        else:
            n = spec.n
            free = {"forward": ("phi",), "duality": ("phi", "psi"), "backward": ("psi",)}[kind]
            for k, (text_, eln) in exprs.items():
                if k not in INLINE_COEFFS[kind] + free:
                    errors.append((eln, f"{k} is not a coefficient of a {kind} problem"))
                    continue
                try:
                    allowed = ("t",) if k == "phi" else ("t", "W", "WT") if k == "psi" else ("t", "s")
                    e = parse_expr(text_, allowed)
                    if k in ("phi", "psi"):
                        check_vector(e, n, k)
                    else:
                        check_matrix(e, n, k)
                    spec.inline[k] = e
                except ValueError as exc:
                    errors.append((eln, f"{k}: {exc}"))
            for k in free:
                if k not in exprs:
                    errors.append((0, f"inline {kind} problem needs {k}"))
    if errors:
        raise ScenarioError(sorted(errors), path)
    return spec


def parse_scenario(path) -> ScenarioSpec:
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise ScenarioError([(0, "no such file")], path)
    with open(path, encoding="utf-8") as fh:
        return parse_scenario_text(fh.read(), path)
