"""Canned finite-difference cases covering every differentiable operator.

Each case builds float64 inputs away from any kink, runs one taped
forward for the analytic gradients, and compares against central
differences coordinate by coordinate (up to 200 sampled coordinates per
parameter, relative tolerance 1e-4 with a unit floor).  Two compound
cases run whole micro-models: a one-block super-resolution net and a
single-step guided upsampler.

The command-line `gradcheck` subcommand and the test suite both run
exactly this list.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import core, models


def _P(name, value):
    return ad.ParamSlot(name, np.asarray(value, dtype=np.float64))


def _away(x, margin=0.2):
    # keep ReLU-style kinks out of finite-difference reach
    return x + margin * np.sign(x)


def _rand(rng, shape):
    return rng.standard_normal(shape)


def _case_add(rng):
    a = _P("a", _rand(rng, (2, 3, 3)))
    b = _P("b", _rand(rng, (2, 3, 3)))
    t = _rand(rng, (2, 3, 3))
    return lambda tape: ad.mse(ad.add(a, b, tape), t, tape), [a, b]


def _case_relu(rng):
    x = _P("x", _away(_rand(rng, (2, 4, 4))))
    t = _rand(rng, (2, 4, 4))
    return lambda tape: ad.mse(ad.relu(x, tape), t, tape), [x]


def _case_prelu(rng):
    x = _P("x", _away(_rand(rng, (3, 4, 4))))
    s = _P("slope", rng.uniform(0.1, 0.4, 3))
    t = _rand(rng, (3, 4, 4))
    return lambda tape: ad.mse(ad.prelu(x, s, tape), t, tape), [x, s]


def _case_concat_narrow(rng):
    a = _P("a", _rand(rng, (2, 3, 3)))
    b = _P("b", _rand(rng, (3, 3, 3)))
    t = _rand(rng, (2, 3, 3))

    def make(tape):
        cat = ad.concat([a, b], tape)
        return ad.mse(ad.narrow(cat, 1, 3, tape), t, tape)

    return make, [a, b]


def _case_mse(rng):
    x = _P("x", _rand(rng, (2, 4, 4)))
    t = _rand(rng, (2, 4, 4))
    return lambda tape: ad.mse(x, t, tape), [x]


def _case_conv2d(rng):
    x = _P("x", _rand(rng, (3, 5, 5)))
    w = _P("w", _rand(rng, (2, 3, 3, 3)) * 0.4)
    t = _rand(rng, (2, 5, 5))
    return lambda tape: ad.mse(ad.conv2d(x, w, 1, tape), t, tape), [x, w]


def _case_conv1x1(rng):
    x = _P("x", _rand(rng, (3, 4, 4)))
    w = _P("w", _rand(rng, (4, 3)) * 0.5)
    t = _rand(rng, (4, 4, 4))
    return lambda tape: ad.mse(ad.conv1x1(x, w, tape), t, tape), [x, w]


def _case_zero_upsample(rng):
    x = _P("x", _rand(rng, (2, 3, 3)))
    t = _rand(rng, (2, 6, 6))
    return lambda tape: ad.mse(ad.zero_upsample(x, 2, tape), t, tape), [x]


def _case_subsample(rng):
    x = _P("x", _rand(rng, (2, 6, 6)))
    t = _rand(rng, (2, 3, 3))
    return lambda tape: ad.mse(ad.subsample(x, 2, tape), t, tape), [x]


def _case_avg_pool(rng):
    x = _P("x", _rand(rng, (2, 6, 6)))
    t = _rand(rng, (2, 3, 3))
    return lambda tape: ad.mse(ad.avg_pool(x, 2, tape), t, tape), [x]


def _case_bilinear(rng):
    x = _P("x", _rand(rng, (2, 3, 4)))
    t = _rand(rng, (2, 6, 8))
    return lambda tape: ad.mse(ad.bilinear_upsample(x, 2, tape), t, tape), [x]


def _case_transposed_conv2d(rng):
    x = _P("x", _rand(rng, (3, 4, 4)))
    w = _P("w", _rand(rng, (4, 3, 3, 3)) * 0.4)
    t = _rand(rng, (4, 8, 8))
    return lambda tape: ad.mse(ad.transposed_conv2d(x, w, 2, tape), t, tape), [x, w]


def _case_masked_attention(rng):
    q = _P("q", _rand(rng, (4, 6, 6)))
    k = _P("k", _rand(rng, (4, 3, 3)))
    v = _P("v", _rand(rng, (3, 3, 3)))
    px = _P("pos_x", _rand(rng, (3, 2)) * 0.5)
    py = _P("pos_y", _rand(rng, (3, 2)) * 0.5)
    t = _rand(rng, (3, 6, 6))

    def make(tape):
        out = ad.masked_attention(q, k, v, px, py, 3, 2, True, tape)
        return ad.mse(out, t, tape)

    return make, [q, k, v, px, py]


def _case_attention_upsample(rng):
    x = _P("x", _rand(rng, (3, 4, 4)))
    w_q = _P("w_q", _rand(rng, (4, 3)) * 0.5)
    w_k = _P("w_k", _rand(rng, (4, 3)) * 0.5)
    w_v = _P("w_v", _rand(rng, (4, 3)) * 0.5)
    px = _P("pos_x", _rand(rng, (3, 2)) * 0.5)
    py = _P("pos_y", _rand(rng, (3, 2)) * 0.5)
    t = _rand(rng, (4, 8, 8))

    def make(tape):
        out = ad.attention_upsample(x, w_q, w_k, w_v, px, py, 3, 2, True, tape)
        return ad.mse(out, t, tape)

    return make, [x, w_q, w_k, w_v, px, py]


def _case_attention_joint_upsample(rng):
    x_lr = _P("x_lr", _rand(rng, (2, 3, 3)))
    x_hr = _P("x_hr", _rand(rng, (3, 6, 6)))
    w_q = _P("w_q", _rand(rng, (4, 3)) * 0.5)
    w_k = _P("w_k", _rand(rng, (4, 3)) * 0.5)
    w_v = _P("w_v", _rand(rng, (4, 2)) * 0.5)
    px = _P("pos_x", _rand(rng, (3, 2)) * 0.5)
    py = _P("pos_y", _rand(rng, (3, 2)) * 0.5)
    t = _rand(rng, (4, 6, 6))

    def make(tape):
        out = ad.attention_joint_upsample(x_lr, x_hr, w_q, w_k, w_v, px, py, 3, 2, True, tape)
        return ad.mse(out, t, tape)

    return make, [x_lr, x_hr, w_q, w_k, w_v, px, py]


def _case_sisr_micro(rng):
    spec = models.SisrSpec(features=4)
    params = models.build_sisr_params(spec, rng, dtype=np.float64)
    x = _rand(rng, (1, 8, 8))
    t = _rand(rng, (1, 16, 16))

    def make(tape):
        return ad.mse(models.sisr_forward(x, spec, params, tape), t, tape)

    return make, list(params.values())


def _case_joint_micro(rng):
    spec = models.JointSpec(upsample_factor=2, cnn_t=(4,), cnn_g=(4,), cnn_m=(4,), cnn_f=(4,))
    params = models.build_joint_params(spec, rng, dtype=np.float64)
    x_lr = _rand(rng, (1, 4, 4))
    guide = _rand(rng, (3, 8, 8))
    t = _rand(rng, (1, 8, 8))

    def make(tape):
        return ad.mse(models.joint_forward(x_lr, guide, spec, params, tape), t, tape)

    return make, list(params.values())


CASES = [
    ("add", _case_add),
    ("relu", _case_relu),
    ("prelu", _case_prelu),
    ("concat_narrow", _case_concat_narrow),
    ("mse", _case_mse),
    ("conv2d", _case_conv2d),
    ("conv1x1", _case_conv1x1),
    ("zero_upsample", _case_zero_upsample),
    ("subsample", _case_subsample),
    ("avg_pool", _case_avg_pool),
    ("bilinear_upsample", _case_bilinear),
    ("transposed_conv2d", _case_transposed_conv2d),
    ("masked_attention", _case_masked_attention),
    ("attention_upsample", _case_attention_upsample),
    ("attention_joint_upsample", _case_attention_joint_upsample),
    ("sisr_micro_model", _case_sisr_micro),
    ("joint_micro_model", _case_joint_micro),
]


@dataclass
class CaseResult:
    case: str
    results: list  # GradCheckResult per parameter

    @property
    def ok(self):
        return all(r.ok for r in self.results)

    @property
    def max_rel_err(self):
        return max(r.max_rel_err for r in self.results)


def run_suite(seed=0, eps=1e-4, rel_tol=1e-4, max_coords=200):
    """Run every case; returns one CaseResult per entry in CASES."""
    out = []
    for i, (name, build) in enumerate(CASES):
        rng = core.make_rng(seed * 1009 + i)
        make_loss, params = build(rng)
        results = ad.finite_diff_check(make_loss, params, eps=eps, rel_tol=rel_tol, max_coords=max_coords)
        out.append(CaseResult(name, results))
    return out


def suite_ok(case_results):
    return all(c.ok for c in case_results)
