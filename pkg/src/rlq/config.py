"""TOML config files for problem instances.

Layout::

    [problem]
    n = 1
    m = 1
    ell = 2
    T = 1.0
    x = [1.0]
    i0 = 1                      # one-based
    lambda_min = 0.5
    randomness_mode = "deterministic"

    [generator]
    rates = [[-1.0, 1.0], [1.0, -1.0]]

    [regime.1]
    A = [["1 + 0.5*t"]]
    B = [[1.0]]
    Q = [[1.0]]
    R = [[1.0]]
    sigma = [0.2]               # b, sigma, q, r, C, D, S optional (zero / absent)

    [terminal.1]
    G = [[0.0]]
    g = [0.0]
"""
import re
import sys

import numpy as np
import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import DimensionError, ParseError, SchemaError
from .expr import MatrixFunction
from .problem import (COEFFICIENT_NAMES, MODES, REQUIRED_COEFFICIENTS, SYMMETRIC_COEFFICIENTS,
                      CoefficientSet, Generator, ProblemSpec, Terminal, coefficient_shape)

_REQUIRED_PROBLEM = ("n", "m", "ell", "T", "x", "lambda_min")
_TOLS = ("tol_psd", "tol_sym", "tol_gen")


def load_spec(path):
    try:
        with open(path, "rb") as fh:
            text = fh.read().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"config is not valid UTF-8: {exc}") from None
    return loads_spec(text)


def loads_spec(text):
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ParseError(f"invalid TOML: {exc}", line=int(m.group(1)) if m else None) from None
    return spec_from_dict(doc)


def spec_from_dict(doc):
    prob = doc.get("problem")
    if not isinstance(prob, dict):
        raise SchemaError("missing [problem] section")
    for key in _REQUIRED_PROBLEM:
        if key not in prob:
            raise SchemaError(f"[problem] is missing required field {key!r}")
    n, m, ell = (_positive_int(prob, k) for k in ("n", "m", "ell"))
    mode = prob.get("randomness_mode", "deterministic")
    if mode not in MODES:
        raise SchemaError(f"[problem].randomness_mode must be one of {MODES}, got {mode!r}")
    try:
        T = float(prob["T"])
        lam = float(prob["lambda_min"])
        i0 = int(prob.get("i0", 1))
    except (TypeError, ValueError) as exc:
        raise ParseError(f"bad scalar in [problem]: {exc}", field="problem") from None
    x = prob["x"]
    if not isinstance(x, list):
        x = [x]
    if len(x) != n or any(isinstance(v, list) for v in x):
        raise DimensionError(f"[problem].x must have {n} entries, got {prob['x']!r}")

    gen_sec = doc.get("generator", {})
    if "rates" in gen_sec:
        rates = gen_sec["rates"]
        if not isinstance(rates, list) or len(rates) != ell or any(
                not isinstance(r, list) or len(r) != ell for r in rates):
            raise DimensionError(f"[generator].rates must be a {ell}x{ell} matrix")
        rates = np.array(rates, dtype=float)
    elif ell == 1:
        rates = np.zeros((1, 1))
    else:
        raise SchemaError("[generator] section with 'rates' is required when ell > 1")

    regimes = doc.get("regime", {})
    terminals = doc.get("terminal", {})
    coefs, terms = [], []
    for i in range(1, ell + 1):
        sec = regimes.get(str(i))
        if sec is None:
            raise SchemaError(f"missing [regime.{i}] section")
        unknown = set(sec) - set(COEFFICIENT_NAMES)
        if unknown:
            raise SchemaError(f"[regime.{i}] has unknown fields {sorted(unknown)}")
        kw = {}
        for name in COEFFICIENT_NAMES:
            if name not in sec:
                if name in REQUIRED_COEFFICIENTS:
                    raise SchemaError(f"[regime.{i}] is missing required field {name!r}")
                kw[name] = None if name == "S" else MatrixFunction.zeros(coefficient_shape(name, n, m))
                continue
            kw[name] = MatrixFunction.from_literal(sec[name], coefficient_shape(name, n, m),
                                                   field=f"regime.{i}.{name}",
                                                   symmetric=name in SYMMETRIC_COEFFICIENTS)
        coefs.append(CoefficientSet(**kw))
        tsec = terminals.get(str(i), {})
        terms.append(Terminal(
            G=MatrixFunction.from_literal(tsec["G"], (n, n), field=f"terminal.{i}.G", symmetric=True)
            if "G" in tsec else MatrixFunction.zeros((n, n)),
            g=MatrixFunction.from_literal(tsec["g"], (n,), field=f"terminal.{i}.g")
            if "g" in tsec else MatrixFunction.zeros((n,)),
        ))
    tols = {k: float(prob[k]) for k in _TOLS if k in prob}
    return ProblemSpec(n=n, m=m, ell=ell, T=T, generator=Generator(rates), coefficients=tuple(coefs),
                       terminal=tuple(terms), x=np.array(x, dtype=float), i0=i0 - 1, lambda_min=lam,
                       randomness_mode=mode, **tols)


def _positive_int(sec, key):
    val = sec[key]
    if isinstance(val, bool) or not isinstance(val, int) or val < 1:
        raise SchemaError(f"[problem].{key} must be a positive integer, got {val!r}")
    return val


def spec_to_dict(spec):
    """Inverse of :func:`spec_from_dict`; only literal/expression coefficients can be written."""

    def lit(f, label):
        if not f.serialisable():
            raise ValueError(f"{label} was built from a Python callable and cannot be written")
        return f.source

    doc = {
        "problem": {
            "n": spec.n, "m": spec.m, "ell": spec.ell, "T": spec.T,
            "x": [float(v) for v in spec.x], "i0": spec.i0 + 1, "lambda_min": spec.lambda_min,
            "randomness_mode": spec.randomness_mode,
            "tol_psd": spec.tol_psd, "tol_sym": spec.tol_sym, "tol_gen": spec.tol_gen,
        },
        "generator": {"rates": spec.generator.rates.tolist()},
        "regime": {},
        "terminal": {},
    }
    for i, c in enumerate(spec.coefficients, start=1):
        doc["regime"][str(i)] = {name: lit(f, f"regime.{i}.{name}") for name, f in c.items()}
        t = spec.terminal[i - 1]
        doc["terminal"][str(i)] = {"G": lit(t.G, f"terminal.{i}.G"), "g": lit(t.g, f"terminal.{i}.g")}
    return doc


def dumps_spec(spec):
    return tomli_w.dumps(spec_to_dict(spec))


def write_spec(spec, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_spec(spec))
