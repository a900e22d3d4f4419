#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# This file is part of semalignvc.
#
# semalignvc is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.

"""Monotonic text-to-frame alignment.

Matrices are indexed ``logp[i, j]`` with text index `i` (L rows) and frame `j` (T columns).
A valid alignment assigns every frame to one text index, starts at 0, ends at L - 1,
never goes back and visits every text index.

Examples
--------
>>> import numpy as np
>>> from semalignvc.specutils.align import beta_binomial_prior, mas
>>> path = mas(beta_binomial_prior(3, 7, 1.0))
>>> path.durations.sum()
7
"""

import functools
import logging
import os

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import betabinom

from semalignvc.errors import AlignmentError
from semalignvc.utils import make_dir

__all__ = ['AlignmentPath', 'beta_binomial_prior', 'mas', 'path_score', 'forward_sum_loss',
           'forward_sum_loss_batch', 'upsample_by_durations', 'semalign_loss', 'similarity_logits',
           'similarity_logits_batch', 'dump_alignment']

logger = logging.getLogger(__name__)

# finite stand-in for log(0); keeps logaddexp gradients free of NaN
NEG = -1e30


class AlignmentPath(object):
    """Hard monotonic alignment.

    Attributes
    ----------
    assignment : numpy.ndarray
        [T] text index of every frame.
    durations : numpy.ndarray
        [L] number of frames of every text index.
    score : float or None
        Sum of the aligned scores when the path comes from :func:`mas`.
    """

    def __init__(self, assignment, n_text, score=None):
        assignment = np.asarray(assignment, dtype=np.int64)
        if assignment.ndim != 1 or assignment.shape[0] < 1:
            raise AlignmentError("an alignment needs at least one frame")
        steps = np.diff(assignment)
        if assignment[0] != 0 or assignment[-1] != n_text - 1 or np.any((steps != 0) & (steps != 1)):
            raise AlignmentError("assignment is not a monotonic path over {} text positions".format(n_text))
        self.assignment = assignment
        self.durations = np.bincount(assignment, minlength=n_text).astype(np.int64)
        self.score = score

    @classmethod
    def from_durations(cls, durations):
        durations = np.asarray(durations, dtype=np.int64)
        if durations.ndim != 1 or durations.shape[0] < 1 or np.any(durations < 1):
            raise AlignmentError("durations should be a non-empty vector of positive integers")
        return cls(np.repeat(np.arange(durations.shape[0]), durations), durations.shape[0])

    @property
    def n_text(self):
        return self.durations.shape[0]

    @property
    def n_frames(self):
        return self.assignment.shape[0]

    def to_matrix(self):
        """[L x T] 0/1 matrix with a one at every (assignment[j], j)."""
        mat = np.zeros((self.n_text, self.n_frames), dtype=np.int64)
        mat[self.assignment, np.arange(self.n_frames)] = 1
        return mat


@functools.lru_cache(maxsize=512)
def _prior(L, T, omega):
    i = np.arange(L)
    cols = [betabinom(L - 1, omega * (j + 1), omega * (T - j)).logpmf(i) for j in range(T)]
    prior = np.stack(cols, axis=1)
    prior.setflags(write=False)
    return prior


def beta_binomial_prior(L, T, omega=1.0):
    """Log beta-binomial alignment prior [L x T].

    Column `j` is the log-pmf of ``BetaBinomial(L - 1, omega * (j + 1), omega * (T - j))``
    over text indices, so every column sums to one in probability space and the
    expected text index moves from 0 to L - 1 along the frames.
    """
    if L < 1 or T < 1:
        raise ValueError("prior sizes should be positive, got L={}, T={}".format(L, T))
    if omega <= 0:
        raise ValueError("omega should be positive, got {}".format(omega))
    return _prior(int(L), int(T), float(omega)).copy()


def _as_numpy(logp):
    if isinstance(logp, torch.Tensor):
        logp = logp.detach().cpu().double().numpy()
    return np.asarray(logp, dtype=np.float64)


def mas(logp):
    """Monotonic alignment search.

    Dynamic programme ``Q[i, j] = logp[i, j] + max(Q[i - 1, j - 1], Q[i, j - 1])`` followed by a
    backtrace from ``(L - 1, T - 1)``. On ties the backtrace stays on the current text index.

    Parameters
    ----------
    logp : numpy.ndarray or torch.Tensor
        [L x T] scores; tensors are detached.

    Returns
    -------
    AlignmentPath

    Raises
    ------
    AlignmentError
        ``L > T`` or no path with a finite score.
    """
    logp = _as_numpy(logp)
    if logp.ndim != 2:
        raise AlignmentError("expected an [L x T] matrix, got shape {}".format(logp.shape))
    L, T = logp.shape
    if L > T:
        raise AlignmentError("cannot align {} text positions to {} frames".format(L, T))

    Q = np.full((L, T), -np.inf)
    Q[0, 0] = logp[0, 0]
    for j in range(1, T):
        prev = Q[:, j - 1]
        moved = np.concatenate([[-np.inf], prev[:-1]])
        Q[:, j] = logp[:, j] + np.maximum(prev, moved)
    if not np.isfinite(Q[L - 1, T - 1]):
        raise AlignmentError("no monotonic path with a finite score")

    assignment = np.zeros(T, dtype=np.int64)
    i = L - 1
    for j in range(T - 1, 0, -1):
        assignment[j] = i
        if i > 0 and (i == j or Q[i - 1, j - 1] > Q[i, j - 1]):
            i -= 1
    assignment[0] = i
    return AlignmentPath(assignment, L, score=float(Q[L - 1, T - 1]))


def path_score(logp, path):
    """Sum of ``logp[path.assignment[j], j]`` over frames."""
    logp = _as_numpy(logp)
    return float(logp[path.assignment, np.arange(path.n_frames)].sum())


def forward_sum_loss(logp):
    """Negative log of the summed probability of all monotonic paths.

    ``alpha[i, j] = logp[i, j] + logaddexp(alpha[i - 1, j - 1], alpha[i, j - 1])``, loss
    ``-alpha[L - 1, T - 1]``. Differentiable in `logp` ([L x T] tensor).
    """
    if logp.dim() != 2:
        raise AlignmentError("expected an [L x T] tensor, got shape {}".format(tuple(logp.shape)))
    L, T = logp.shape
    if L > T:
        raise AlignmentError("cannot align {} text positions to {} frames".format(L, T))
    logp = logp.clamp(min=NEG)
    neg = logp.new_full((1,), NEG)
    alpha = torch.cat([logp[:1, 0], logp.new_full((L - 1,), NEG)])
    for j in range(1, T):
        moved = torch.cat([neg, alpha[:-1]])
        alpha = logp[:, j] + torch.logaddexp(alpha, moved)
    return -alpha[L - 1]


def forward_sum_loss_batch(logp, text_lens, frame_lens):
    """Per-item forward-sum losses of a padded batch.

    Parameters
    ----------
    logp : torch.Tensor
        [B x L_max x T_max]; entries outside ``text_lens[b] x frame_lens[b]`` are ignored.
    text_lens, frame_lens : torch.Tensor
        [B] lengths.

    Returns
    -------
    torch.Tensor
        [B] losses.
    """
    B, L, T = logp.shape
    text_lens = torch.as_tensor(text_lens, device=logp.device)
    frame_lens = torch.as_tensor(frame_lens, device=logp.device)
    if torch.any(text_lens > frame_lens):
        bad = torch.nonzero(text_lens > frame_lens).flatten().tolist()
        raise AlignmentError("batch items {} have more text positions than frames".format(bad))
    logp = logp.clamp(min=NEG)
    neg = logp.new_full((B, 1), NEG)
    alpha = torch.cat([logp[:, :1, 0], logp.new_full((B, L - 1), NEG)], dim=1)
    for j in range(1, T):
        moved = torch.cat([neg, alpha[:, :-1]], dim=1)
        updated = logp[:, :, j] + torch.logaddexp(alpha, moved)
        active = (j < frame_lens).unsqueeze(1)
        alpha = torch.where(active, updated, alpha)
    last = alpha.gather(1, (text_lens - 1).long().unsqueeze(1)).squeeze(1)
    return -last


def upsample_by_durations(tau_s, path):
    """Repeat text rows along the frames: row `j` of the output is ``tau_s[path.assignment[j]]``.

    Works on numpy arrays and torch tensors ([L x d] -> [T x d]).
    """
    if tau_s.shape[0] != path.n_text:
        raise AlignmentError("{} text rows for an alignment over {} text positions".format(
            tau_s.shape[0], path.n_text))
    if isinstance(tau_s, torch.Tensor):
        index = torch.as_tensor(path.assignment, dtype=torch.long, device=tau_s.device)
        return tau_s.index_select(0, index)
    return np.asarray(tau_s)[path.assignment]


def semalign_loss(a_s, tau_up, projection, mask=None):
    """Mean squared error between encoder frames and projected, upsampled text embeddings.

    Parameters
    ----------
    a_s : torch.Tensor
        [..., T, d] encoder output.
    tau_up : torch.Tensor
        [..., T, d_text] upsampled text embeddings.
    projection : callable
        Maps d_text to d (a ``torch.nn.Linear``).
    mask : torch.Tensor, optional
        [..., T] boolean frame mask of a padded batch; the mean runs over valid frames.
    """
    if a_s.shape[:-1] != tau_up.shape[:-1]:
        raise AlignmentError("frame counts differ: {} vs {}".format(tuple(a_s.shape[:-1]),
                                                                    tuple(tau_up.shape[:-1])))
    target = projection(tau_up)
    if mask is None:
        return F.mse_loss(a_s, target)
    mask = mask.to(a_s.dtype).unsqueeze(-1)
    sq = (a_s - target) ** 2 * mask
    return sq.sum() / (mask.sum() * a_s.shape[-1]).clamp(min=1.0)


def similarity_logits(a_s, tau_s, projection, omega=1.0):
    """Alignment scores [L x T] between encoder frames and text embeddings.

    ``log_softmax_i(-||proj(tau_s[i]) - a_s[j]||^2)`` plus the beta-binomial prior
    (``omega=None`` leaves the prior out).
    """
    target = projection(tau_s)
    dist = torch.cdist(target.unsqueeze(0), a_s.unsqueeze(0)).squeeze(0) ** 2
    logp = torch.log_softmax(-dist, dim=0)
    if omega is not None:
        L, T = logp.shape
        logp = logp + torch.as_tensor(beta_binomial_prior(L, T, omega), dtype=logp.dtype, device=logp.device)
    return logp


def similarity_logits_batch(a_s, tau_proj, text_lens, frame_lens, omega=1.0):
    """Batched :func:`similarity_logits` on already projected text embeddings.

    Parameters
    ----------
    a_s : torch.Tensor
        [B x T x d]
    tau_proj : torch.Tensor
        [B x L x d]

    Returns
    -------
    torch.Tensor
        [B x L x T]; padded text rows and frames hold ``NEG``.
    """
    B, L, _ = tau_proj.shape
    T = a_s.shape[1]
    dist = torch.cdist(tau_proj, a_s) ** 2
    text_lens = torch.as_tensor(text_lens, device=a_s.device)
    frame_lens = torch.as_tensor(frame_lens, device=a_s.device)
    text_mask = torch.arange(L, device=a_s.device).unsqueeze(0) < text_lens.unsqueeze(1)
    frame_mask = torch.arange(T, device=a_s.device).unsqueeze(0) < frame_lens.unsqueeze(1)
    scores = (-dist).masked_fill(~text_mask.unsqueeze(2), NEG)
    logp = torch.log_softmax(scores, dim=1)
    if omega is not None:
        prior = torch.full_like(logp, 0.0)
        for b in range(B):
            l_b, t_b = int(text_lens[b]), int(frame_lens[b])
            prior[b, :l_b, :t_b] = torch.as_tensor(beta_binomial_prior(l_b, t_b, omega), dtype=logp.dtype)
        logp = logp + prior
    valid = text_mask.unsqueeze(2) & frame_mask.unsqueeze(1)
    return logp.masked_fill(~valid, NEG)


def dump_alignment(filename, logp, path, title=None):
    """Write the scores and the path to ``<filename>.npz`` and a heat map to ``<filename>.png``."""
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt

    logp = _as_numpy(logp)
    make_dir(os.path.dirname(os.path.abspath(filename)))
    np.savez(filename + '.npz', logp=logp, assignment=path.assignment, durations=path.durations)
    fig, ax = plt.subplots(figsize=(8, 4))
    im = ax.imshow(np.maximum(logp, -30.0), aspect='auto', origin='lower', interpolation='none')
    ax.plot(np.arange(path.n_frames), path.assignment, color='white', linewidth=1.0)
    ax.set_xlabel('frame')
    ax.set_ylabel('text position')
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(filename + '.png')
    plt.close(fig)
    logger.debug("alignment written to {}.npz/.png".format(filename))
