"""Finite-difference verification of tape gradients.

``check_gradients`` compares reverse-mode gradients with central differences
in float64. An element whose forward and backward one-sided differences
disagree by more than ``kink_ratio`` times the input's gradient scale sits on
a kink (|x| at 0, a bilinear cell boundary, a clamp edge) and is skipped; the
count is reported.

The error for one input is ``max|analytic - numeric| / max(max|analytic|,
max|numeric|)``, i.e. the worst elementwise error relative to the gradient's
scale.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad

STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    checked: int
    skipped: int
    passed: bool
    per_input: list = field(default_factory=list)


def _scalar(fn, inputs):
    with ad.no_grad():
        out = fn(*inputs)
    return float(np.asarray(out.data).reshape(()))


def check_gradients(name: str, fn: Callable[..., ad.Tensor], arrays: Sequence[np.ndarray],
                    step: float = STEP, tolerance: float = TOLERANCE,
                    max_elements: int | None = None, rng: np.random.Generator | None = None,
                    kink_ratio: float = 1e-2) -> GradCheckResult:
    """Check ``fn(*tensors)`` (a scalar) against central differences.

    With ``max_elements`` set, a random subset of each input's elements is
    probed; this keeps checks over model parameters affordable.
    """
    rng = rng or np.random.default_rng(0)
    with ad.precision(np.float64):
        tensors = [ad.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
        loss = fn(*tensors)
        ad.backward(loss)
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

        worst, checked, skipped, per_input = 0.0, 0, 0, []
        for t, ga in zip(tensors, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_elements is not None and flat.size > max_elements:
                idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
            num = np.zeros(idx.size)
            ana = ga.reshape(-1)[idx]
            keep = np.ones(idx.size, dtype=bool)
            f0 = _scalar(fn, tensors)
            grad_scale = max(float(np.abs(ga).max()), 1e-12)
            for k, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + step
                fp = _scalar(fn, tensors)
                flat[i] = orig - step
                fm = _scalar(fn, tensors)
                flat[i] = orig
                d_plus, d_minus = (fp - f0) / step, (f0 - fm) / step
                num[k] = (fp - fm) / (2 * step)
                if abs(d_plus - d_minus) > kink_ratio * grad_scale:
                    keep[k] = False
            scale = max(np.abs(ana[keep]).max(initial=0.0), np.abs(num[keep]).max(initial=0.0))
            err = 0.0
            if keep.any() and scale > 0:
                err = float(np.abs(ana[keep] - num[keep]).max() / scale)
            per_input.append(err)
            worst = max(worst, err)
            checked += int(keep.sum())
            skipped += int((~keep).sum())
    passed = worst < tolerance and checked > 0
    return GradCheckResult(name, worst, checked, skipped, passed, per_input)


# ---------------------------------------------------------------------------
# the registered sweep
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Check:
    name: str
    fn: Callable[..., ad.Tensor]
    inputs: Callable[[np.random.Generator], list]
    max_elements: int | None = None
    step: float = STEP


def _weighted(op):
    """Reduce an op's output to a scalar with fixed pseudo-random weights."""
    def fn(*ts):
        out = op(*ts)
        w = np.random.default_rng(out.size).standard_normal(out.shape)
        return (out * ad.Tensor(w)).sum()
    return fn


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def _smooth(rng, shape, amplitude):
    from scipy.ndimage import gaussian_filter
    f = gaussian_filter(rng.standard_normal(shape), sigma=(0,) * (len(shape) - 2) + (2, 2))
    return amplitude * f / np.abs(f).max()


def _tiny_model_loss(alpha: float):
    from . import losses as L
    from . import model as M
    from . import deformation as dfm

    cfg = M.ModelConfig(image_size=32, width_factor=1 / 16)
    template = M.init_params(cfg, seed=0)
    names = list(template.named_tensors())
    w = L.LossWeights(alpha=alpha)

    def fn(*ts):
        params = M.ModelParams(cfg)
        for name, t in zip(names, ts[2:]):
            group, key = name.split(".", 1)
            getattr(params, group)[key] = t
        x, y = ts[0], ts[1]
        out = M.forward(x, params, steps=3)
        terms = L.content_alignment_terms(out.y_trans, out.y_warp, y, w, L.DnmiConfig(8),
                                          L.DnmiConfig(8))
        return L.total_generator_loss(
            terms["align"], L.adv_g_loss(M.discriminate(x, out.y_trans, params.d_trans)),
            L.adv_g_loss(M.discriminate(x, out.y_warp, params.d_warp)),
            dfm.smoothness_loss(out.v), w)

    def inputs(rng):
        arrays = [t.data.astype(np.float64) for t in template.named_tensors().values()]
        # Keep the test point off kinks: a fractional mean velocity keeps sample
        # points off integer grid lines, and a target above the tanh output range
        # of the untrained decoder keeps |y_trans - y| away from zero.
        idx = names.index("generator.dec_f.head.weight")
        arrays[idx] = rng.normal(0, 0.3, arrays[idx].shape)
        arrays[idx + 1] = np.array([0.35, -0.4])
        x = rng.uniform(-0.9, 0.9, (1, 1, 32, 32))
        y = rng.uniform(0.7, 0.95, (1, 1, 32, 32))
        return [x, y] + arrays

    return fn, inputs


def registry() -> list[Check]:
    """Every differentiable op and composite loss, with input generators."""
    from . import deformation as dfm
    from . import losses as L

    def img(rng, shape=(2, 1, 8, 8)):
        return rng.uniform(-0.9, 0.9, shape)

    def unit(rng, shape=(2, 40)):
        return rng.uniform(0.02, 0.98, shape)

    def grid(rng, n=2, h=6, w=7, c=1):
        base = dfm.identity_grid(n, h, w, np.float64)
        return [rng.standard_normal((n, c, h, w)), base + rng.uniform(-1.3, 1.3, base.shape)]

    def align(alpha):
        wts = L.LossWeights(alpha=alpha)
        return lambda a, b, c: L.content_alignment_loss(a, b, c, wts, L.DnmiConfig(16), L.DnmiConfig(32))

    shape = (3, 4)
    checks = [
        Check("add", _weighted(lambda a, b: a + b), lambda r: [r.standard_normal(shape), r.standard_normal(shape)]),
        Check("sub", _weighted(lambda a, b: a - b), lambda r: [r.standard_normal(shape), r.standard_normal(shape)]),
        Check("mul", _weighted(lambda a, b: a * b), lambda r: [r.standard_normal(shape), r.standard_normal(shape)]),
        Check("div", _weighted(lambda a, b: a / b), lambda r: [r.standard_normal(shape), _away_from_zero(r, shape, 0.5)]),
        Check("neg", _weighted(lambda a: -a), lambda r: [r.standard_normal(shape)]),
        Check("abs", _weighted(lambda a: a.abs()), lambda r: [_away_from_zero(r, shape)]),
        Check("square", _weighted(lambda a: a.square()), lambda r: [r.standard_normal(shape)]),
        Check("exp", _weighted(ad.exp), lambda r: [r.standard_normal(shape)]),
        Check("log", _weighted(ad.log), lambda r: [r.uniform(0.2, 3.0, shape)]),
        Check("tanh", _weighted(ad.tanh), lambda r: [r.standard_normal(shape)]),
        Check("leaky_relu", _weighted(lambda a: ad.leaky_relu(a, 0.2)), lambda r: [_away_from_zero(r, shape)]),
        Check("clamp", _weighted(lambda a: ad.clamp(a, -0.5, 0.5)),
              lambda r: [np.where(r.random(shape) < 0.5, r.uniform(-0.45, 0.45, shape), _away_from_zero(r, shape, 0.6))]),
        Check("sum", lambda a: (a.sum(axis=1) * ad.Tensor(np.arange(1.0, 4.0))).sum(), lambda r: [r.standard_normal(shape)]),
        Check("mean", lambda a: a.mean().square(), lambda r: [r.standard_normal(shape)]),
        Check("reshape", _weighted(lambda a: a.reshape(2, 6)), lambda r: [r.standard_normal(shape)]),
        Check("transpose", _weighted(lambda a: a.transpose(1, 0)), lambda r: [r.standard_normal(shape)]),
        Check("slice", _weighted(lambda a: a[1:, ::2]), lambda r: [r.standard_normal(shape)]),
        Check("concat", _weighted(lambda a, b: ad.concat([a, b], axis=1)), lambda r: [r.standard_normal(shape), r.standard_normal((3, 2))]),
        Check("matmul", _weighted(ad.matmul), lambda r: [r.standard_normal((3, 4)), r.standard_normal((4, 5))]),
        Check("conv2d", _weighted(lambda x, w, b: ad.conv2d(x, w, b, 1, 1)),
              lambda r: [r.standard_normal((2, 3, 6, 6)), r.standard_normal((4, 3, 3, 3)), r.standard_normal(4)]),
        Check("conv2d_stride2", _weighted(lambda x, w, b: ad.conv2d(x, w, b, 2, 1)),
              lambda r: [r.standard_normal((2, 3, 8, 8)), r.standard_normal((4, 3, 3, 3)), r.standard_normal(4)]),
        Check("upsample_nearest2x", _weighted(ad.upsample_nearest2x), lambda r: [r.standard_normal((2, 3, 3, 4))]),
        Check("grid_sample", _weighted(ad.grid_sample), lambda r: grid(r, c=2)),
        Check("soft_joint_histogram", _weighted(lambda a, b: ad.soft_joint_histogram(a, b, 8, 0.3)),
              lambda r: [unit(r), unit(r)]),
        Check("warp", _weighted(dfm.warp), lambda r: grid(r)),
        Check("integrate_velocity", _weighted(lambda v: dfm.integrate_velocity(v, 4)),
              lambda r: [_smooth(r, (1, 2, 10, 10), 1.5)]),
        Check("jacobian_determinant", _weighted(dfm.jacobian_determinant),
              lambda r: [dfm.identity_grid(1, 6, 6, np.float64) + r.normal(0, 0.2, (1, 2, 6, 6))]),
        Check("smoothness", dfm.smoothness_loss, lambda r: [r.standard_normal((2, 2, 6, 6))]),
        Check("dnmi", lambda a, b: L.dnmi(a, b, L.DnmiConfig(16)), lambda r: [img(r), img(r)]),
        Check("l1", L.l1_loss, lambda r: [img(r), img(r)]),
        Check("l_align_alpha0", align(0.0), lambda r: [img(r), img(r), img(r)]),
        Check("l_align_alpha0.5", align(0.5), lambda r: [img(r), img(r), img(r)]),
        Check("l_align_alpha1", align(1.0), lambda r: [img(r), img(r), img(r)]),
        Check("l_d", lambda a, b, c, d: L.total_discriminator_loss(L.adv_d_loss(a, b), L.adv_d_loss(c, d), L.LossWeights()),
              lambda r: [r.standard_normal((2, 1, 2, 2)) for _ in range(4)]),
    ]
    fn, inputs = _tiny_model_loss(0.5)
    # Leaky ReLU and bilinear cells put many small kinks in a full network; a
    # shorter step keeps them from straddling the stencil.
    checks.append(Check("l_g_model", fn, inputs, max_elements=3, step=1e-6))
    return checks


def run_sweep(seed: int = 0, names: Sequence[str] | None = None) -> list[GradCheckResult]:
    results = []
    for check in registry():
        if names is not None and check.name not in names:
            continue
        rng = np.random.default_rng([seed, len(results)])
        arrays = check.inputs(rng)
        results.append(check_gradients(check.name, check.fn, arrays, step=check.step,
                                       max_elements=check.max_elements, rng=rng))
    return results


def format_table(results: Sequence[GradCheckResult]) -> str:
    lines = [f"{'check':<24} {'max_rel_err':>12} {'checked':>8} {'skipped':>8}  result"]
    for r in results:
        lines.append(f"{r.name:<24} {r.max_rel_error:>12.3e} {r.checked:>8d} {r.skipped:>8d}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
