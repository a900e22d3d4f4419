#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# This file is part of semalignvc.
#
# semalignvc is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.

"""Fixed-step ODE integration for flow-matching sampling."""

import logging

__all__ = ['midpoint_solve']

logger = logging.getLogger(__name__)


def midpoint_solve(field, x0, steps, t0=0.0, t1=1.0):
    """Integrate ``dx/dt = field(t, x)`` from `t0` to `t1` with the explicit midpoint method.

    Every step is ``x <- x + h * field(t + h / 2, x + h / 2 * field(t, x))``, so the field
    is evaluated exactly ``2 * steps`` times.

    Parameters
    ----------
    field : callable
        ``field(t, x)`` with a float `t`; `x` may be a float, a numpy array or a torch tensor.
    x0 : float, numpy.ndarray or torch.Tensor
        State at `t0`.
    steps : int
        Number of steps (at least 1).

    Returns
    -------
    Estimate of the state at `t1`, same type as `x0`.
    """
    if steps < 1:
        raise ValueError("the midpoint solver needs at least one step, got {}".format(steps))
    h = (t1 - t0) / float(steps)
    x = x0
    for k in range(steps):
        t = t0 + k * h
        x_half = x + 0.5 * h * field(t, x)
        x = x + h * field(t + 0.5 * h, x_half)
    return x
