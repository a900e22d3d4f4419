"""
Test monotonic alignment search, the forward-sum loss and the semantic alignment loss
"""

import itertools
import os

import numpy as np
import pytest
import torch
from scipy.special import logsumexp

from semalignvc.errors import AlignmentError
from semalignvc.specutils.align import (AlignmentPath, beta_binomial_prior, dump_alignment, forward_sum_loss,
                                        forward_sum_loss_batch, mas, path_score, semalign_loss,
                                        similarity_logits, similarity_logits_batch, upsample_by_durations)
from semalignvc.tests.utils import temporary_file


def all_paths(L, T):
    """Every monotonic assignment of T frames to L text positions."""
    for moves in itertools.combinations(range(1, T), L - 1):
        steps = np.zeros(T, dtype=np.int64)
        steps[list(moves)] = 1
        yield np.cumsum(steps)


@pytest.fixture()
def logp():
    rng = np.random.default_rng(0)
    yield rng.standard_normal((3, 7))


class TestAlignmentPath(object):

    def test_from_durations(self):
        path = AlignmentPath.from_durations([2, 1, 3])
        assert path.assignment.tolist() == [0, 0, 1, 2, 2, 2]
        assert path.n_text == 3 and path.n_frames == 6
        mat = path.to_matrix()
        assert mat.shape == (3, 6)
        assert np.all(mat.sum(axis=0) == 1)
        assert mat.sum(axis=1).tolist() == [2, 1, 3]

    def test_invalid(self):
        with pytest.raises(AlignmentError):
            AlignmentPath([0, 2, 2], 3)
        with pytest.raises(AlignmentError):
            AlignmentPath([1, 1, 2], 3)
        with pytest.raises(AlignmentError):
            AlignmentPath([0, 1, 0, 1], 2)
        with pytest.raises(AlignmentError):
            AlignmentPath.from_durations([2, 0, 1])


class TestMAS(object):

    def test_brute_force(self, logp):
        path = mas(logp)
        best = max(all_paths(*logp.shape), key=lambda a: logp[a, np.arange(logp.shape[1])].sum())
        assert path.assignment.tolist() == best.tolist()
        assert path.score == pytest.approx(path_score(logp, path))

    def test_random_sizes(self):
        rng = np.random.default_rng(1)
        for L, T in [(1, 4), (2, 5), (4, 6), (5, 9)]:
            scores = rng.standard_normal((L, T))
            best = max(path_score(scores, AlignmentPath(a, L)) for a in all_paths(L, T))
            path = mas(scores)
            assert path.score == pytest.approx(best)
            assert path.durations.sum() == T
            assert np.all(path.durations >= 1)

    def test_square_is_diagonal(self):
        path = mas(np.random.default_rng(2).standard_normal((4, 4)))
        assert path.assignment.tolist() == [0, 1, 2, 3]

    def test_single_text_position(self):
        path = mas(np.zeros((1, 5)))
        assert path.durations.tolist() == [5]

    def test_ties_stay(self):
        # uniform scores: the backtrace keeps the current index as long as it can
        path = mas(np.zeros((2, 4)))
        assert path.assignment.tolist() == [0, 1, 1, 1]

    def test_text_longer_than_audio(self):
        with pytest.raises(AlignmentError):
            mas(np.zeros((5, 4)))

    def test_tensor_input(self, logp):
        assert mas(torch.tensor(logp, requires_grad=True)).assignment.tolist() == mas(logp).assignment.tolist()


class TestForwardSum(object):

    def test_brute_force(self, logp):
        L, T = logp.shape
        scores = [logp[a, np.arange(T)].sum() for a in all_paths(L, T)]
        loss = forward_sum_loss(torch.tensor(logp))
        assert float(loss) == pytest.approx(-logsumexp(scores), rel=1e-6)

    def test_upper_bounded_by_best_path(self, logp):
        loss = float(forward_sum_loss(torch.tensor(logp)))
        assert loss <= -mas(logp).score + 1e-9

    def test_gradient(self):
        x = torch.randn(3, 5, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(forward_sum_loss, (x,))

    def test_too_short(self):
        with pytest.raises(AlignmentError):
            forward_sum_loss(torch.zeros(4, 3))

    def test_batch_matches_single(self):
        rng = np.random.default_rng(3)
        a = torch.tensor(rng.standard_normal((2, 5)))
        b = torch.tensor(rng.standard_normal((3, 7)))
        batch = torch.full((2, 3, 7), -5.0, dtype=torch.float64)
        batch[0, :2, :5] = a
        batch[1] = b
        losses = forward_sum_loss_batch(batch, torch.tensor([2, 3]), torch.tensor([5, 7]))
        assert float(losses[0]) == pytest.approx(float(forward_sum_loss(a)))
        assert float(losses[1]) == pytest.approx(float(forward_sum_loss(b)))

    def test_batch_too_short(self):
        with pytest.raises(AlignmentError):
            forward_sum_loss_batch(torch.zeros(1, 4, 4), torch.tensor([4]), torch.tensor([3]))


class TestPrior(object):

    def test_columns_are_distributions(self):
        prior = beta_binomial_prior(5, 12, omega=1.0)
        assert prior.shape == (5, 12)
        assert np.allclose(logsumexp(prior, axis=0), 0.0, atol=1e-9)

    def test_mean_moves_forward(self):
        prior = np.exp(beta_binomial_prior(5, 12))
        means = np.dot(np.arange(5), prior)
        assert np.all(np.diff(means) > 0)
        assert means[0] < 1.0 and means[-1] > 3.0

    def test_single_position(self):
        assert np.allclose(beta_binomial_prior(1, 6), 0.0)

    def test_copy(self):
        prior = beta_binomial_prior(3, 4)
        prior[0, 0] = 7.0
        assert beta_binomial_prior(3, 4)[0, 0] != 7.0

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            beta_binomial_prior(0, 4)
        with pytest.raises(ValueError):
            beta_binomial_prior(2, 4, omega=0.0)


class TestSemanticAlignment(object):

    @pytest.fixture()
    def projection(self):
        torch.manual_seed(0)
        yield torch.nn.Linear(4, 6).double()

    def test_upsample(self):
        path = AlignmentPath.from_durations([1, 3, 2])
        tau = np.arange(6.0).reshape(3, 2)
        up = upsample_by_durations(tau, path)
        assert up.shape == (6, 2)
        assert up[:, 0].tolist() == [0.0, 2.0, 2.0, 2.0, 4.0, 4.0]
        up_t = upsample_by_durations(torch.tensor(tau), path)
        assert np.array_equal(up_t.numpy(), up)
        with pytest.raises(AlignmentError):
            upsample_by_durations(tau[:2], path)

    def test_loss_zero_on_target(self, projection):
        tau_up = torch.randn(8, 4, dtype=torch.float64)
        with torch.no_grad():
            a_s = projection(tau_up)
        assert float(semalign_loss(a_s, tau_up, projection)) == pytest.approx(0.0, abs=1e-12)

    def test_mask_ignores_padding(self, projection):
        tau_up = torch.randn(2, 5, 4, dtype=torch.float64)
        a_s = torch.randn(2, 5, 6, dtype=torch.float64)
        mask = torch.tensor([[True] * 5, [True, True, True, False, False]])
        loss = semalign_loss(a_s, tau_up, projection, mask)
        a_s2 = a_s.clone()
        a_s2[1, 3:] += 100.0
        assert float(semalign_loss(a_s2, tau_up, projection, mask)) == pytest.approx(float(loss))
        full = semalign_loss(a_s[0], tau_up[0], projection)
        first_only = semalign_loss(a_s[:1], tau_up[:1], projection, mask[:1])
        assert float(first_only) == pytest.approx(float(full))

    def test_gradient(self, projection):
        tau_up = torch.randn(5, 4, dtype=torch.float64)
        a_s = torch.randn(5, 6, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(lambda x: semalign_loss(x, tau_up, projection), (a_s,))

    def test_frame_mismatch(self, projection):
        with pytest.raises(AlignmentError):
            semalign_loss(torch.zeros(4, 6), torch.zeros(5, 4), projection)

    def test_similarity_columns(self, projection):
        a_s = torch.randn(9, 6, dtype=torch.float64)
        tau = torch.randn(3, 4, dtype=torch.float64)
        logp = similarity_logits(a_s, tau, projection, omega=None)
        assert logp.shape == (3, 9)
        assert torch.allclose(torch.logsumexp(logp, dim=0), torch.zeros(9, dtype=torch.float64))
        with_prior = similarity_logits(a_s, tau, projection, omega=1.0)
        diff = (with_prior - logp).detach().numpy()
        assert np.allclose(diff, beta_binomial_prior(3, 9))

    def test_batch_matches_single(self, projection):
        rng = torch.Generator().manual_seed(4)
        a_s = torch.randn(2, 9, 6, dtype=torch.float64, generator=rng)
        tau = torch.randn(2, 4, 4, dtype=torch.float64, generator=rng)
        text_lens, frame_lens = torch.tensor([3, 4]), torch.tensor([7, 9])
        with torch.no_grad():
            batch = similarity_logits_batch(a_s, projection(tau), text_lens, frame_lens)
            for b in range(2):
                lb, tb = int(text_lens[b]), int(frame_lens[b])
                single = similarity_logits(a_s[b, :tb], tau[b, :lb], projection)
                assert torch.allclose(batch[b, :lb, :tb], single, atol=1e-8)
        assert float(batch[0, 3:].max()) < -1e20
        assert float(batch[0, :, 7:].max()) < -1e20

    def test_dump_alignment(self, logp):
        pytest.importorskip('matplotlib')
        path = mas(logp)
        with temporary_file('align') as dirname:
            base = os.path.join(dirname, 'utt1')
            dump_alignment(base, logp, path, title='utt1')
            assert os.path.isfile(base + '.png')
            data = np.load(base + '.npz')
            assert data['durations'].tolist() == path.durations.tolist()
