"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    n_checked: int
    worst: tuple[str, int] | None = None
    per_input: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def relative_error(analytic, numeric, floor: float = 1e-6):
    """|a - n| / max(|a|, |n|, floor), elementwise.

    The floor keeps coordinates whose true gradient is ~0 from turning
    round-off into a huge ratio.
    """
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def gradient_check(f, inputs: dict, h: float = 1e-5, tol: float = 1e-4, *, floor: float = 1e-6,
                   max_coords: int | None = None, seed: int = 0, value=None) -> GradCheckReport:
    """Compare the analytic gradient of ``f`` with central differences.

    ``f(inputs) -> (value, grads)`` where ``grads`` maps input names to arrays
    shaped like the inputs (missing entries mean zero).  Inputs are float64
    arrays perturbed in place and restored.  ``max_coords`` samples that many
    coordinates per input instead of all of them.  ``value(inputs) -> float``,
    when given, is used for the perturbed evaluations so the backward pass
    runs only once.
    """
    for name, x in inputs.items():
        if np.asarray(x).dtype != np.float64:
            raise TypeError(f"gradient check needs float64 inputs; {name} is {np.asarray(x).dtype}")
    _, grads = f(inputs)
    value = value or (lambda x: f(x)[0])
    rng = np.random.default_rng(seed)
    worst_err, worst, n_checked, per_input = 0.0, None, 0, {}
    for name, x in inputs.items():
        g = grads.get(name)
        g = np.zeros_like(x) if g is None else np.asarray(g, dtype=np.float64)
        flat = x.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
        errs = np.empty(coords.size)
        gflat = g.reshape(-1)
        for j, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + h
            fp = value(inputs)
            flat[i] = orig - h
            fm = value(inputs)
            flat[i] = orig
            errs[j] = relative_error(gflat[i], (fp - fm) / (2.0 * h), floor)
        n_checked += coords.size
        if coords.size:
            j = int(np.argmax(errs))
            per_input[name] = float(errs[j])
            if errs[j] > worst_err or worst is None:
                worst_err, worst = float(errs[j]), (name, int(coords[j]))
    return GradCheckReport(worst_err, tol, n_checked, worst, per_input)
