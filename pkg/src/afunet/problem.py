"""Problem description files for the ``oracle`` command.

YAML (or JSON) mapping::

    observations:            # arrays: nested lists, or paths to .npy / .hdr files
      y1: ...
      y2: ...
      y3: ...
    gains:                   # scalar, nested list, or path, per exposure
      d1: 0.25
      d2: 1.0
      d3: 4.0
    # or, instead of observations, a noise-free consistent instance y_i = D_i x*:
    synthetic: {height: 8, width: 8, seed: 0, gain_range: [0.8, 1.25]}
    lambda: [1.0, 1.0]
    beta: [1.0, 1.0]
    step: [1.0, 1.0]
    solver: {max_iters: 200, tol: 1.0e-10, exact_align: false, order: AF}

Relative paths resolve against the problem file's directory.
"""
from pathlib import Path

import numpy as np
import yaml

from .oracle import DegradationOp, OracleError, OracleProblem, QuadraticPrior, SolveConfig
from .rgbe import HDRFormatError, read_hdr

__all__ = ["ProblemFileError", "load_problem", "parse_problem"]

_TOP_KEYS = {"observations", "gains", "synthetic", "lambda", "beta", "step", "solver"}
_SOLVER_KEYS = {"max_iters", "tol", "exact_align", "order"}


class ProblemFileError(ValueError):
    def __init__(self, source, field, reason, line=None):
        self.source, self.field, self.line = str(source), field, line
        where = f"{source}:{line}" if line is not None else str(source)
        super().__init__(f"{where}: {field}: {reason}")


def _line_of(node_map, key):
    mark = node_map.get(key)
    return None if mark is None else mark + 1


def _key_lines(text):
    """1-based line of every mapping key path in the document, e.g. ``gains.d1``."""
    lines = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return lines

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}.{k.value}" if prefix else str(k.value)
                lines[path] = k.start_mark.line
                walk(v, path)

    if root is not None:
        walk(root, "")
    return lines


def _array(value, field, base, source, lines):
    if isinstance(value, str):
        path = Path(value)
        path = path if path.is_absolute() else base / path
        try:
            if path.suffix == ".npy":
                return np.load(path).astype(np.float64)
            if path.suffix == ".hdr":
                return read_hdr(path).astype(np.float64)
        except (OSError, ValueError, HDRFormatError) as err:
            raise ProblemFileError(source, field, f"cannot read {path} ({err})", _line_of(lines, field)) from None
        raise ProblemFileError(source, field, f"unsupported array file {path.name}", _line_of(lines, field))
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError):
        raise ProblemFileError(source, field, "expected a number, nested list or file path", _line_of(lines, field)) from None
    return arr


def _pair(d, key, default, source, lines):
    value = d.get(key, default)
    if isinstance(value, (int, float)):
        value = [value, value]
    if not (isinstance(value, (list, tuple)) and len(value) == 2
            and all(isinstance(v, (int, float)) for v in value)):
        raise ProblemFileError(source, key, "expected a number or a pair of numbers", _line_of(lines, key))
    return float(value[0]), float(value[1])


def parse_problem(text, source="<problem>", base=Path(".")):
    """Return ``(OracleProblem, SolveConfig, x_star or None)``."""
    try:
        d = yaml.safe_load(text)
    except yaml.YAMLError as err:
        mark = getattr(err, "problem_mark", None)
        line = None if mark is None else mark.line + 1
        raise ProblemFileError(source, "<syntax>", str(getattr(err, "problem", err)), line) from None
    if not isinstance(d, dict):
        raise ProblemFileError(source, "<root>", "top level must be a mapping")
    lines = _key_lines(text)
    unknown = sorted(set(d) - _TOP_KEYS)
    if unknown:
        raise ProblemFileError(source, unknown[0], "unknown key", _line_of(lines, unknown[0]))

    lam = _pair(d, "lambda", 1.0, source, lines)
    beta = _pair(d, "beta", 1.0, source, lines)
    step = _pair(d, "step", 1.0, source, lines)

    solver = d.get("solver") or {}
    if not isinstance(solver, dict):
        raise ProblemFileError(source, "solver", "expected a mapping", _line_of(lines, "solver"))
    bad = sorted(set(solver) - _SOLVER_KEYS)
    if bad:
        raise ProblemFileError(source, f"solver.{bad[0]}", "unknown key", _line_of(lines, f"solver.{bad[0]}"))
    try:
        config = SolveConfig(
            max_iters=int(solver.get("max_iters", 200)),
            tol=float(solver.get("tol", 1e-10)),
            exact_align=bool(solver.get("exact_align", False)),
            order=str(solver.get("order", "AF")),
            beta1=beta[0],
            beta3=beta[1],
        )
    except (TypeError, ValueError) as err:
        raise ProblemFileError(source, "solver", str(err), _line_of(lines, "solver")) from None
    if config.order not in ("AF", "FA"):
        raise ProblemFileError(source, "solver.order", "must be AF or FA", _line_of(lines, "solver.order"))

    x_star = None
    if "synthetic" in d:
        syn = d["synthetic"] or {}
        if not isinstance(syn, dict):
            raise ProblemFileError(source, "synthetic", "expected a mapping", _line_of(lines, "synthetic"))
        try:
            rng = np.random.default_rng(int(syn.get("seed", 0)))
            shape = (int(syn.get("height", 8)), int(syn.get("width", 8)))
            lo, hi = (float(v) for v in syn.get("gain_range", (0.8, 1.25)))
        except (TypeError, ValueError) as err:
            raise ProblemFileError(source, "synthetic", str(err), _line_of(lines, "synthetic")) from None
        x_star = rng.uniform(0, 1, size=shape)
        gains = [rng.uniform(lo, hi, size=shape) for _ in range(3)]
        ys = [g * x_star for g in gains]
    else:
        obs = d.get("observations")
        if not isinstance(obs, dict):
            raise ProblemFileError(source, "observations", "missing (or give a synthetic block)",
                                   _line_of(lines, "observations"))
        ys = []
        for k in ("y1", "y2", "y3"):
            if k not in obs:
                raise ProblemFileError(source, f"observations.{k}", "missing", _line_of(lines, "observations"))
            ys.append(_array(obs[k], f"observations.{k}", base, source, lines))
        g = d.get("gains") or {}
        if not isinstance(g, dict):
            raise ProblemFileError(source, "gains", "expected a mapping", _line_of(lines, "gains"))
        gains = []
        for k, y in zip(("d1", "d2", "d3"), ys):
            arr = _array(g.get(k, 1.0), f"gains.{k}", base, source, lines)
            try:
                gains.append(np.broadcast_to(arr, y.shape).copy())
            except ValueError:
                raise ProblemFileError(source, f"gains.{k}", f"shape {arr.shape} does not fit {y.shape}",
                                       _line_of(lines, f"gains.{k}")) from None

    fields = ("gains.d1", "gains.d2", "gains.d3")
    ops = []
    for f, gv in zip(fields, gains):
        try:
            ops.append(DegradationOp(gv))
        except OracleError as err:
            raise ProblemFileError(source, f, str(err), _line_of(lines, f)) from None
    try:
        problem = OracleProblem(
            y1=ys[0], y2=ys[1], y3=ys[2], d1=ops[0], d2=ops[1], d3=ops[2],
            prior1=QuadraticPrior(lam[0], "alpha1"), prior3=QuadraticPrior(lam[1], "alpha3"),
            step1=step[0], step3=step[1],
        )
    except OracleError as err:
        field = getattr(err, "field", "observations")
        raise ProblemFileError(source, field, str(err), _line_of(lines, "observations")) from None
    return problem, config, x_star


def load_problem(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ProblemFileError(path, "<file>", str(err)) from None
    return parse_problem(text, source=path, base=path.parent)
