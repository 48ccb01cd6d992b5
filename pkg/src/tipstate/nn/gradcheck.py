from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import LossSpec, loss


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)
    raw_errors: dict[str, float] = field(default_factory=dict)  # before the round-off allowance

    @property
    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.errors.items() if not v < self.tolerance}

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


# objective rounding allowance per finite difference, in ulps of the loss
ROUNDOFF_ULPS = 16


def relative_error(a, b, floor=1e-6, noise=0.0) -> float:
    """Norm-wise relative error; the denominator never drops below
    ``floor * sqrt(size)`` so identically-zero gradients (e.g. a conv bias
    feeding batch norm) are not judged on finite-difference round-off.

    ``noise`` (scalar or per entry) is the absolute resolution of ``b``;
    differences up to it are not counted.
    """
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), floor * np.sqrt(a.size))
    if denom == 0:
        return 0.0
    diff = np.maximum(np.abs(a - b) - noise, 0.0)
    return float(np.linalg.norm(diff) / denom)


def gradient_check(network, inputs, target, tolerance=1e-4, loss_spec=LossSpec(),
                   h=1e-5, max_entries=None, seed=0) -> GradCheckReport:
    """Compare analytic parameter gradients with central differences.

    The network is evaluated in training mode (batch statistics); running
    statistics are restored afterwards.  ``max_entries`` caps the number of
    probed coordinates per parameter (chosen at random).
    """
    rng = np.random.default_rng(seed)
    saved = {k: v.copy() for k, v in network.buffers().items()}

    def restore():
        for k, v in network.buffers().items():
            v[...] = saved[k]

    def objective():
        value, _ = loss(network.forward(inputs, training=True), target, loss_spec)
        return value

    pred = network.forward(inputs, training=True)
    _, g = loss(pred, target, loss_spec)
    network.backward(g)
    analytic = {k: v.copy() for k, v in network.grads().items()}
    restore()

    report = GradCheckReport(tolerance)
    for key, p in network.params().items():
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        numeric = np.empty(idx.size)
        noise = np.empty(idx.size)
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = objective()
            flat[i] = orig - h
            down = objective()
            flat[i] = orig
            numeric[n] = (up - down) / (2 * h)
            noise[n] = ROUNDOFF_ULPS * np.spacing(max(abs(up), abs(down))) / (2 * h)
        restore()
        a = analytic[key].reshape(-1)[idx]
        report.errors[key] = relative_error(a, numeric, noise=noise)
        report.raw_errors[key] = relative_error(a, numeric)
    return report
