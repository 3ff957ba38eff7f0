"""Finite-difference verification of reverse-mode gradients.

`grad_check` compares backward-pass gradients against central differences
coordinate by coordinate and emits a JSON-ready report. A couple of
hand-derived vector-Jacobian products (softmax, bilinear sampling) are kept
here as independent cross-checks for the tape's generic backward rules.
"""
from __future__ import annotations

import numpy as np

from .tape import Tape, Variable, backward

__all__ = ["grad_check", "softmax2d_vjp_reference", "bilinear_vjp_reference"]

_ERROR_FLOOR = 1e-8


def _relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), _ERROR_FLOOR)


def grad_check(fn, params, step: float = 1e-5, tolerance: float = 1e-4,
               max_recorded_failures: int = 20) -> dict:
    """Check the gradients of a scalar function of named arrays.

    Args:
        fn: callable taking ``dict[str, Variable]`` and returning a scalar
            Variable. It is called once on tape leaves for the analytic
            gradient and twice per coordinate on constants for the
            central differences.
        params: dict of parameter name -> ndarray (a bare ndarray is
            treated as a single parameter named "x").
        step: central-difference step h; differences are (f(x+h)-f(x-h))/2h.
        tolerance: relative-error threshold for the pass/fail verdict.

    Returns:
        Report dict with per-parameter max/mean relative error, failing and
        non-finite coordinates, the step size, and an overall "passed" flag.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if isinstance(params, np.ndarray):
        params = {"x": params}
    # private copies: the numeric loop perturbs entries in place
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    tape = Tape()
    leaves = {k: tape.variable(v) for k, v in params.items()}
    out = fn(leaves)
    backward(out)
    analytic = {k: leaves[k].grad.copy() for k in params}

    def evaluate(point: dict) -> float:
        result = fn({k: Variable(v) for k, v in point.items()})
        return float(result.value)

    report: dict = {"step": step, "tolerance": tolerance, "params": {}}
    overall_max = 0.0
    for name, base in params.items():
        numeric = np.zeros_like(base)
        nonfinite: list = []
        flat = base.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            f_plus = evaluate(params)
            flat[i] = saved - step
            f_minus = evaluate(params)
            flat[i] = saved
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                nonfinite.append({"index": i, "f_plus": f_plus, "f_minus": f_minus})
                continue
            num_flat[i] = (f_plus - f_minus) / (2.0 * step)

        ana_flat = analytic[name].reshape(-1)
        errors = np.array([_relative_error(a, n) for a, n in zip(ana_flat, num_flat)])
        worst = int(np.argmax(errors)) if errors.size else 0
        failures = [
            {"index": int(i), "analytic": float(ana_flat[i]), "numeric": float(num_flat[i]),
             "relative_error": float(errors[i])}
            for i in np.flatnonzero(errors > tolerance)[:max_recorded_failures]
        ]
        entry = {
            "shape": list(base.shape),
            "max_rel_error": float(errors.max()) if errors.size else 0.0,
            "mean_rel_error": float(errors.mean()) if errors.size else 0.0,
            "worst_index": worst,
            "worst_analytic": float(ana_flat[worst]) if errors.size else 0.0,
            "worst_numeric": float(num_flat[worst]) if errors.size else 0.0,
            "failures": failures,
            "nonfinite": nonfinite,
        }
        report["params"][name] = entry
        overall_max = max(overall_max, entry["max_rel_error"])
        if nonfinite:
            overall_max = np.inf
    report["max_rel_error"] = float(overall_max)
    report["passed"] = bool(overall_max < tolerance)
    return report


def softmax2d_vjp_reference(logits: np.ndarray, adjoint: np.ndarray) -> np.ndarray:
    """Closed-form VJP of a softmax over the last two axes.

    For m = softmax(z): dL/dz = m * (adj - sum(adj * m)).
    """
    shifted = logits - logits.max(axis=(-2, -1), keepdims=True)
    e = np.exp(shifted)
    m = e / e.sum(axis=(-2, -1), keepdims=True)
    inner = (adjoint * m).sum(axis=(-2, -1), keepdims=True)
    return m * (adjoint - inner)


def bilinear_vjp_reference(field: np.ndarray, x: np.ndarray, y: np.ndarray,
                           adjoint: np.ndarray):
    """Closed-form VJP of zero-padded bilinear sampling on a 2-D field.

    Returns (d_field, d_x, d_y) for out = sample(field, x, y) with the
    4-tap formula and zero contributions from out-of-grid corners.
    """
    h, w = field.shape
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    tx = x - x0
    ty = y - y0
    d_field = np.zeros_like(field)
    d_x = np.zeros_like(x)
    d_y = np.zeros_like(y)
    corners = ((0, 0), (1, 0), (0, 1), (1, 1))
    for dx, dy in corners:
        cx = x0 + dx
        cy = y0 + dy
        valid = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
        wx = tx if dx else 1.0 - tx
        wy = ty if dy else 1.0 - ty
        val = np.where(valid, field[np.clip(cy, 0, h - 1), np.clip(cx, 0, w - 1)], 0.0)
        np.add.at(d_field, (np.clip(cy, 0, h - 1), np.clip(cx, 0, w - 1)),
                  adjoint * wx * wy * valid)
        sign_x = 1.0 if dx else -1.0
        sign_y = 1.0 if dy else -1.0
        d_x += adjoint * sign_x * wy * val
        d_y += adjoint * sign_y * wx * val
    return d_field, d_x, d_y
