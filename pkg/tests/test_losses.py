import math

import numpy as np
import pytest
import torch

from lipsync_tse.losses import (
    LossWeights,
    bce_sync_loss,
    si_sdr,
    si_sdr_loss,
    speaker_ce_loss,
    total_loss,
)


def direct_si_sdr(est, ref):
    est, ref = np.asarray(est, np.float64), np.asarray(ref, np.float64)
    target = (est @ ref) / (ref @ ref) * ref
    return 10 * math.log10((target @ target) / ((est - target) @ (est - target)))


def test_si_sdr_hand_values():
    ref = torch.tensor([3.0, 4.0], dtype=torch.float64)
    est = torch.tensor([4.0, 3.0], dtype=torch.float64)
    # alpha = 24/25, |a s|^2 = 23.04, residual = (1.12, -0.84) -> 1.96
    assert float(si_sdr(est, ref)) == pytest.approx(10 * math.log10(23.04 / 1.96), abs=1e-6)


def test_si_sdr_cap_and_zero_estimate():
    s = torch.randn(1000, dtype=torch.float64)
    for c in (1e-3, 1.0, 1e3):
        assert float(si_sdr(c * s, s)) == pytest.approx(80.0, abs=1e-9)
    assert float(si_sdr(torch.zeros(1000, dtype=torch.float64), s)) == 0.0


def test_si_sdr_matches_direct(rng):
    for _ in range(20):
        s, e = rng.standard_normal(500), rng.standard_normal(500)
        assert float(si_sdr(torch.tensor(e), torch.tensor(s))) == pytest.approx(direct_si_sdr(e, s), abs=1e-6)


def test_si_sdr_batched_and_errors():
    s = torch.randn(3, 64)
    assert si_sdr(s + 0.1 * torch.randn(3, 64), s).shape == (3,)
    with pytest.raises(ValueError):
        si_sdr(torch.randn(4), torch.zeros(4))
    with pytest.raises(ValueError):
        si_sdr(torch.randn(4), torch.randn(5))


def test_si_sdr_loss_sign():
    s = torch.randn(2, 100)
    e = s + 0.3 * torch.randn(2, 100)
    assert float(si_sdr_loss(e, s)) == pytest.approx(-float(si_sdr(e, s).mean()))


def test_speaker_ce_uniform_logits():
    assert float(speaker_ce_loss(torch.zeros(8), 3)) == pytest.approx(math.log(8))
    batch = speaker_ce_loss(torch.zeros(2, 5), torch.tensor([0, 4]))
    assert float(batch) == pytest.approx(math.log(5))
    with pytest.raises(ValueError):
        speaker_ce_loss(torch.zeros(4), 4)


def test_total_loss_weights():
    w = LossWeights(gamma=0.005, num_stages=4)
    assert total_loss(-10.0, [1.0, 2.0, 3.0], w) == pytest.approx(-10.0 + 0.005 * 6.0)
    assert total_loss(-10.0, [1.0, 2.0, 3.0], LossWeights(0.0, 4)) == -10.0
    with pytest.raises(ValueError):
        total_loss(0.0, [1.0], w)
    with pytest.raises(ValueError):
        LossWeights(gamma=-1.0)
    with pytest.raises(ValueError):
        LossWeights(num_stages=1)


def test_bce_balanced_half_is_ln2():
    y_hat = torch.full((6,), 0.5)
    y = torch.tensor([0, 1, 0, 1, 1, 0.0])
    assert float(bce_sync_loss(y_hat, y)) == pytest.approx(math.log(2), abs=1e-7)


def test_bce_clamped_finite():
    loss = bce_sync_loss(torch.tensor([0.0, 1.0], dtype=torch.float64), torch.tensor([1.0, 0.0]))
    assert math.isfinite(float(loss))
    assert float(loss) == pytest.approx(-math.log(1e-7), rel=1e-4)
