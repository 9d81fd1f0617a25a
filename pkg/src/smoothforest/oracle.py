"""Independent checks for the smoothed forest and its gradients.

``mc_expectation`` estimates the smoothed forest by sampling perturbed inputs
and evaluating the hard forest, so it shares no code with the closed-form
CDF computation. ``finite_diff_gradient`` and ``gradcheck_model`` compare the
analytic derivatives against central differences.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .forest import Forest, evaluate_forest_batch
from .neural import embed_backward, loss_and_grad

MC_SHARD = 200_000


@dataclass
class McEstimate:
    mean: np.ndarray
    stderr: np.ndarray
    samples: int


def mc_expectation(forest: Forest, mu, sigma, n_samples=1_000_000, seed=0) -> McEstimate:
    """Sample mean of ``F(mu + sigma * eps)`` over standard normal ``eps``."""
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    mu = np.asarray(mu, dtype=float)
    rng = np.random.default_rng(seed)
    total = np.zeros(forest.output_dim)
    total_sq = np.zeros(forest.output_dim)
    done = 0
    while done < n_samples:
        size = min(MC_SHARD, n_samples - done)
        z = mu + sigma * rng.standard_normal((size, mu.size))
        out = evaluate_forest_batch(forest, z)
        total += out.sum(axis=0)
        total_sq += (out * out).sum(axis=0)
        done += size
    mean = total / n_samples
    var = np.maximum(total_sq / n_samples - mean * mean, 0.0) * n_samples / (n_samples - 1)
    return McEstimate(mean, np.sqrt(var / n_samples), n_samples)


def finite_diff_gradient(func, mu, h=1e-4, richardson=False) -> np.ndarray:
    """Central-difference Jacobian of ``func`` at ``mu``, shape (out, len(mu)).

    ``h`` is a scalar step or one step per coordinate. With ``richardson``
    the central differences at ``h`` and ``2h`` are combined to cancel the
    h^2 error term, which allows a larger step and less rounding noise.
    """
    if richardson:
        fine = finite_diff_gradient(func, mu, h)
        coarse = finite_diff_gradient(func, mu, 2 * np.asarray(h, dtype=float))
        return (4 * fine - coarse) / 3
    mu = np.asarray(mu, dtype=float)
    steps = np.broadcast_to(np.asarray(h, dtype=float), mu.shape)
    if np.any(steps <= 0):
        raise ValueError("finite-difference step must be positive")
    columns = []
    for i in range(mu.size):
        up, down = mu.copy(), mu.copy()
        up.flat[i] += steps.flat[i]
        down.flat[i] -= steps.flat[i]
        diff = np.atleast_1d(np.asarray(func(up), dtype=float)) - \
            np.atleast_1d(np.asarray(func(down), dtype=float))
        columns.append(diff / (up.flat[i] - down.flat[i]))
    return np.stack(columns, axis=-1)


@dataclass
class GradEntry:
    name: str
    analytic: float
    numeric: float
    abs_err: float
    rel_err: float


@dataclass
class GradCheckReport:
    entries: list = field(default_factory=list)
    tolerance: float = 1e-4
    max_rel_err: float = 0.0
    worst: str = None
    message: str = ""

    @property
    def passed(self) -> bool:
        return self.tolerance > 0 and self.max_rel_err <= self.tolerance

    def add(self, name, analytic, numeric, floor):
        abs_err = abs(analytic - numeric)
        rel_err = abs_err / max(abs(analytic), abs(numeric), floor)
        self.entries.append(GradEntry(name, float(analytic), float(numeric),
                                      float(abs_err), float(rel_err)))
        if self.worst is None or rel_err > self.max_rel_err:
            self.max_rel_err = float(rel_err)
            self.worst = name

    def max_rel_err_by_group(self) -> dict:
        """Largest relative error per parameter class (name prefix before ``[``)."""
        out = {}
        for e in self.entries:
            group = e.name.split("[")[0].split(".")[-1]
            out[group] = max(out.get(group, 0.0), e.rel_err)
        return out

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "tolerance": self.tolerance,
            "max_rel_err": self.max_rel_err,
            "worst": self.worst,
            "message": self.message,
            "n_checked": len(self.entries),
            "entries": [asdict(e) for e in self.entries],
        }

    def to_json(self, indent=1) -> str:
        return json.dumps(self.to_dict(), indent=indent)


def _random_label(model, rng):
    if model.loss == "sigmoid_cross_entropy":
        return float(rng.integers(0, 2))
    if model.loss == "softmax_cross_entropy":
        return int(rng.integers(0, model.forest.output_dim))
    return rng.uniform(-1.0, 1.0, size=model.forest.output_dim)


def model_gradients(model, x, label):
    """Analytic gradients of ``loss(label, smoothed_forest(E(x)))``.

    Returns a dict name -> array covering every embedding parameter, the
    leaf values, the raw input ``x``, and the forest Jacobian at ``E(x)``.
    """
    X = np.atleast_2d(np.asarray(x, dtype=float))
    Z, embed_cache = model.forest_input(X)
    smoothed = model.smoothed
    masses, cache = smoothed.forward(Z, model.perturb, need_grad=True)
    pred = masses @ smoothed.leaf_values
    _, grad = loss_and_grad(model.loss, pred, np.atleast_1d(label)[None]
                            if model.loss == "squared_error" else [label])
    grad_z, grad_leaves = smoothed.backward(cache, grad)
    k = len(model.passthrough)
    param_grads, grad_x = embed_backward(model.embed, embed_cache, grad_z[:, k:])
    grad_x = np.array(grad_x[0], copy=True)
    for j, col in enumerate(model.passthrough):
        grad_x[col] += grad_z[0, j]
    out = dict(zip(model.embed.param_names(), param_grads))
    out["leaves"] = grad_leaves
    out["input"] = grad_x
    out["forest_input"] = smoothed.jacobian(Z[0], model.perturb)
    return out


def _composite_loss(model, x, label, leaf_values=None):
    Z, _ = model.forest_input(np.atleast_2d(x))
    pred = model.smoothed.predict(Z, model.perturb, leaf_values)
    y = np.atleast_1d(label)[None] if model.loss == "squared_error" else [label]
    loss, _ = loss_and_grad(model.loss, pred, y)
    return float(loss[0])


def gradcheck_model(model, n_cases=5, tolerance=1e-4, seed=0, rel_step=1e-2,
                    floor=1e-6, corrupt=None, inputs=None) -> GradCheckReport:
    """Compare analytic and central-difference gradients at random inputs.

    Steps are ``rel_step * sigma * max(1, |theta|)`` because the smoothed
    forest varies on the scale of sigma; the numeric side uses Richardson
    extrapolation. Relative errors use ``max(|analytic|, |numeric|, floor)``
    as denominator, so gradients below ``floor`` are judged by absolute
    error: rounding noise in the differences is around 1e-10 absolute and
    would otherwise dominate gradients that are numerically zero. ``corrupt`` maps a
    gradient name to a factor applied to the analytic value (negative
    control). ``inputs`` overrides the random raw inputs.
    """
    report = GradCheckReport(tolerance=tolerance)
    if tolerance <= 0:
        report.message = "tolerance must be positive; a zero tolerance can never pass"
        return report
    rng = np.random.default_rng(seed)
    sigma = model.sigma
    smoothed = model.smoothed
    leaf_mask = model.leaf_mask()
    for case in range(n_cases):
        x = rng.random(model.input_dim) if inputs is None else np.asarray(inputs[case], float)
        label = _random_label(model, rng)
        grads = model_gradients(model, x, label)
        if corrupt:
            for name, factor in corrupt.items():
                grads[name] = grads[name] * factor
        tag = f"case{case}"

        names = model.embed.param_names()
        for name, param in zip(names, model.embed.params()):
            original = param.copy()
            steps = rel_step * sigma * np.maximum(1.0, np.abs(original))

            def f(theta, param=param):
                param[...] = theta.reshape(param.shape)
                return _composite_loss(model, x, label)

            numeric = finite_diff_gradient(f, original.ravel(), steps.ravel(), True)[0]
            param[...] = original
            for i, (a, n) in enumerate(zip(grads[name].ravel(), numeric)):
                report.add(f"{tag}.{name}[{i}]", a, n, floor)

        if model.leaf_trainable:
            base = smoothed.leaf_values
            for l in np.flatnonzero(leaf_mask):
                for c in range(base.shape[1]):
                    h = rel_step * max(1.0, abs(base[l, c]))

                    def g(v, l=l, c=c):
                        values = base.copy()
                        values[l, c] = v[0]
                        return _composite_loss(model, x, label, values)

                    n = finite_diff_gradient(g, [base[l, c]], h, True)[0, 0]
                    report.add(f"{tag}.leaves[{l},{c}]", grads["leaves"][l, c], n, floor)

        steps = rel_step * sigma * np.maximum(1.0, np.abs(x))
        numeric = finite_diff_gradient(lambda v: _composite_loss(model, v, label), x, steps,
                                       True)[0]
        for i, (a, n) in enumerate(zip(grads["input"], numeric)):
            report.add(f"{tag}.input[{i}]", a, n, floor)

        Z, _ = model.forest_input(x[None])
        z0 = Z[0]
        numeric = finite_diff_gradient(lambda v: smoothed.predict(v, model.perturb), z0,
                                       rel_step * sigma * np.maximum(1.0, np.abs(z0)), True)
        for (c, i), a in np.ndenumerate(grads["forest_input"]):
            report.add(f"{tag}.forest_input[{c},{i}]", a, numeric[c, i], floor)
    return report
