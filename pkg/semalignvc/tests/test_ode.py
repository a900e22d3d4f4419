"""
Test the midpoint ODE solver
"""

import numpy as np
import pytest
import torch

from semalignvc.specutils.ode import midpoint_solve


class TestMidpoint(object):

    def test_exponential(self):
        x = midpoint_solve(lambda t, x: x, 1.0, steps=50)
        assert x == pytest.approx(np.e, rel=1e-4)

    def test_second_order(self):
        err = [abs(midpoint_solve(lambda t, x: x, 1.0, steps=n) - np.e) for n in (10, 20)]
        assert err[0] / err[1] == pytest.approx(4.0, rel=0.1)

    def test_exact_for_linear_time(self):
        x = midpoint_solve(lambda t, x: 2.0 * t, 0.0, steps=1)
        assert x == pytest.approx(1.0)

    def test_evaluation_count(self):
        calls = []

        def field(t, x):
            calls.append(t)
            return np.zeros_like(x)

        midpoint_solve(field, np.ones(3), steps=4)
        assert len(calls) == 8
        assert calls[:2] == [0.0, 0.125]

    def test_tensor_state(self):
        x0 = torch.zeros(2, 3)
        x = midpoint_solve(lambda t, x: torch.ones_like(x), x0, steps=3)
        assert isinstance(x, torch.Tensor)
        assert torch.allclose(x, torch.ones(2, 3))

    def test_interval(self):
        x = midpoint_solve(lambda t, x: 1.0, 0.0, steps=2, t0=0.5, t1=2.0)
        assert x == pytest.approx(1.5)

    def test_no_steps(self):
        with pytest.raises(ValueError):
            midpoint_solve(lambda t, x: x, 1.0, steps=0)
