"""Every built-in kernel, checked end to end: finite differences, slice
restriction, planned replay, and the two independent memory accountings."""

import numpy as np
import pytest

import gradflow.examples as examples
from gradflow import (
    compare_gradients,
    finite_difference_gradient,
    gradient,
    plan,
    restrict_to_ccs,
    run_forward,
    run_planned,
    sample_inputs,
    simulate_memory,
)
from gradflow.errors import Infeasible


def _inputs(name, seed=101):
    program = examples.build(name)
    params = examples.DEFAULT_PARAMS[name]
    return program, params, sample_inputs(program, params, np.random.default_rng(seed))


# The stencil is linear, so central differences have no truncation error and
# a larger step only averages away float64 cancellation noise; the automatic
# sqrt(eps) step sits right at that noise floor for a 1600-element sum.
FD_EPS = {"seidel_stencil": 1e-5}


@pytest.mark.parametrize("name", sorted(examples.FD_CORPUS))
def test_gradient_matches_finite_differences(name):
    program, params, inputs = _inputs(name)
    ad = gradient(program, inputs, params)
    fd = finite_difference_gradient(program, inputs, params, eps=FD_EPS.get(name))
    report = compare_gradients(ad.grads, fd, tolerance=1e-5)
    assert report["ok"], (name, report)


@pytest.mark.parametrize("name", sorted(examples.EXAMPLES))
def test_ccs_restriction_preserves_the_dependent(name):
    program, params, inputs = _inputs(name)
    full = run_forward(program, inputs, params).value
    cut = run_forward(restrict_to_ccs(program), inputs, params).value
    assert full == cut  # bit-exact


@pytest.mark.parametrize("name", sorted(examples.EXAMPLES))
def test_planned_replay_is_bit_identical(name):
    program, params, inputs = _inputs(name)
    plain = gradient(program, inputs, params)

    for limit_mib in (None, 0.002):
        try:
            result = plan(program, limit_mib, params)
        except Infeasible:
            continue  # 2 KiB is below this kernel's floor; covered elsewhere
        replay = run_planned(result, inputs, params)
        assert replay.value == plain.value, (name, limit_mib)
        for k in plain.grads:
            assert np.array_equal(replay.grads[k], plain.grads[k]), (name, limit_mib, k)


@pytest.mark.parametrize("name", sorted(examples.EXAMPLES))
def test_simulated_peak_matches_the_parametric_model(name):
    program = examples.build(name)
    params = examples.DEFAULT_PARAMS[name]
    result = plan(program, None, params)
    hints = {fv.name: fv.total_bytes for fv in result.fvs if fv.forced}
    for seq in result.sequences:
        timeline = simulate_memory(
            result.forward, result.backward, params,
            dict(seq.outcomes), stored_hints=hints,
        )
        assert timeline.peak == seq.peak(result.solution.assignment), \
            (name, seq.outcomes)
