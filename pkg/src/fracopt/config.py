"""Run configuration files and the desired-state expression language.

A configuration is plain ``key = value`` text; ``#`` starts a comment.
See the README for the full schema. Example::

    domain = l-shape
    s = 0.3
    sigma = 0.1
    nu = 0.5
    u_d = 1
    max_iterations = 12
"""

import ast
import math

import numpy as np

from .afem import AfemConfig
from .errors import ParseError, ValidationError
from .mesh import NAMED_DOMAINS
from .optimizer import ProblemData

_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "sqrt": np.sqrt}
_NAMES = {"x": 0, "x1": 0, "y": 1, "x2": 1}
_CONSTS = {"pi": math.pi}
_BINOPS = {ast.Add: np.add, ast.Sub: np.subtract, ast.Mult: np.multiply,
           ast.Div: np.divide, ast.Pow: np.power}


class Expression:
    """A desired state ``u_d(x1, x2)`` given as text.

    Grammar: numbers, the coordinates ``x, y`` (or ``x1, x2``), ``pi``,
    ``+ - * / **``, unary minus and the functions ``sin, cos, exp, sqrt``.
    """

    def __init__(self, text):
        self.text = str(text).strip()
        try:
            tree = ast.parse(self.text, mode="eval")
        except SyntaxError as exc:
            raise ValidationError(f"cannot parse expression {self.text!r}: {exc.msg}") from None
        self._check(tree.body)
        self._tree = tree.body
        self.is_constant = not any(isinstance(n, ast.Name) and n.id in _NAMES
                                   for n in ast.walk(tree))

    def _check(self, node):
        if isinstance(node, ast.Constant):
            if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
                raise ValidationError(f"unsupported constant {node.value!r} in u_d")
        elif isinstance(node, ast.Name):
            if node.id not in _NAMES and node.id not in _CONSTS:
                raise ValidationError(f"unknown name {node.id!r} in u_d")
        elif isinstance(node, ast.BinOp):
            if type(node.op) not in _BINOPS:
                raise ValidationError("unsupported operator in u_d")
            self._check(node.left)
            self._check(node.right)
        elif isinstance(node, ast.UnaryOp):
            if not isinstance(node.op, (ast.USub, ast.UAdd)):
                raise ValidationError("unsupported unary operator in u_d")
            self._check(node.operand)
        elif isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS:
                raise ValidationError("only sin, cos, exp and sqrt may be called in u_d")
            if len(node.args) != 1 or node.keywords:
                raise ValidationError(f"{node.func.id} takes exactly one argument")
            self._check(node.args[0])
        else:
            raise ValidationError(f"unsupported syntax {type(node).__name__} in u_d")

    def _eval(self, node, xs):
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            return xs[_NAMES[node.id]] if node.id in _NAMES else _CONSTS[node.id]
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, xs), self._eval(node.right, xs))
        if isinstance(node, ast.UnaryOp):
            v = self._eval(node.operand, xs)
            return -v if isinstance(node.op, ast.USub) else v
        return _FUNCS[node.func.id](self._eval(node.args[0], xs))

    def __call__(self, x1, x2):
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        out = self._eval(self._tree, (x1, x2))
        return np.broadcast_to(np.asarray(out, dtype=float), np.broadcast(x1, x2).shape).copy()

    def value(self):
        """The number a constant expression evaluates to."""
        return float(self._eval(self._tree, (0.0, 0.0)))

    def __eq__(self, other):
        return isinstance(other, Expression) and other.text == self.text

    def __hash__(self):
        return hash(self.text)

    def __repr__(self):
        return f"Expression({self.text!r})"


def _bool(text):
    t = text.strip().lower()
    if t in ("true", "yes", "on", "1"):
        return True
    if t in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _int(text):
    v = float(text)
    if v != int(v):
        raise ValueError(f"expected an integer, got {text!r}")
    return int(v)


def _domain(text):
    t = text.strip()
    if t.lower() in NAMED_DOMAINS:
        return t.lower()
    # explicit polygon: "x0,y0; x1,y1; ..."
    try:
        pts = [tuple(float(c) for c in p.split(",")) for p in t.split(";") if p.strip()]
    except ValueError:
        raise ValueError(f"unknown domain {t!r}") from None
    if any(len(p) != 2 for p in pts):
        raise ValueError("polygon corners must be 'x,y' pairs separated by ';'")
    return pts


# key -> (section, converter, default)
SCHEMA = {
    "domain": ("run", _domain, "l-shape"),
    "s": ("problem", float, None),
    "sigma": ("problem", float, None),
    "nu": ("problem", float, None),
    "a": ("problem", float, -0.3),
    "b": ("problem", float, 0.3),
    "u_d": ("problem", Expression, "1"),
    "theta": ("problem", float, 0.5),
    "max_iterations": ("run", _int, 10),
    "initial_refinements": ("run", _int, 0),
    "enforce_grading": ("run", _bool, False),
    "grading_C": ("run", float, 10.0),
    "gamma_margin": ("run", float, 0.1),
    "log_base": ("run", str, "e"),
    "m_growth": ("run", _int, 1),
    "interior_stars_only": ("run", _bool, False),
}
REQUIRED = ("s", "sigma", "nu")


def parse_config_text(text):
    """Parse configuration text into an :class:`AfemConfig`."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError("expected 'key = value'", line=lineno)
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ParseError("unknown key", line=lineno, field=key)
        if key in values:
            raise ParseError("duplicate key", line=lineno, field=key)
        if val == "":
            raise ParseError("missing value", line=lineno, field=key)
        conv = SCHEMA[key][1]
        try:
            values[key] = (conv(val), lineno)
        except ValidationError as exc:
            raise ParseError(str(exc), line=lineno, field=key) from None
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno, field=key) from None
    for key in REQUIRED:
        if key not in values:
            raise ParseError("required key is missing", field=key)

    def get(key):
        if key in values:
            return values[key][0]
        default = SCHEMA[key][2]
        return Expression(default) if key == "u_d" else default

    ud = get("u_d")
    problem = ProblemData(s=get("s"), sigma=get("sigma"), nu=get("nu"), a=get("a"), b=get("b"),
                          u_d=ud, theta=get("theta"))
    cfg = AfemConfig(problem=problem, domain=get("domain"), max_iterations=get("max_iterations"),
                     initial_refinements=get("initial_refinements"),
                     enforce_grading=get("enforce_grading"), grading_C=get("grading_C"),
                     gamma_margin=get("gamma_margin"), log_base=get("log_base"),
                     m_growth=get("m_growth"), interior_stars_only=get("interior_stars_only"))
    return cfg


def parse_config(path):
    """Read and validate a configuration file.

    Raises
    ------
    ParseError
        Malformed line, unknown or duplicate key, bad value; the message
        names the line and field.
    ValidationError
        A well-formed value violates a model invariant (e.g. ``a >= 0``).
    OSError
        The file cannot be read.
    """
    with open(path) as fh:
        return parse_config_text(fh.read())


def _fmt_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return "; ".join(f"{x!r},{y!r}" for x, y in v)
    return str(v)


def format_config(cfg):
    """Configuration text that :func:`parse_config_text` maps back to ``cfg``."""
    p = cfg.problem
    ud = p.u_d.text if isinstance(p.u_d, Expression) else repr(float(p.u_d))
    items = [
        ("domain", cfg.domain), ("s", p.s), ("sigma", p.sigma), ("nu", p.nu), ("a", p.a),
        ("b", p.b), ("u_d", ud), ("theta", p.theta), ("max_iterations", cfg.max_iterations),
        ("initial_refinements", cfg.initial_refinements), ("enforce_grading", cfg.enforce_grading),
        ("grading_C", cfg.grading_C), ("gamma_margin", cfg.gamma_margin),
        ("log_base", cfg.log_base), ("m_growth", cfg.m_growth),
        ("interior_stars_only", cfg.interior_stars_only),
    ]
    return "".join(f"{k} = {_fmt_value(v)}\n" for k, v in items)
