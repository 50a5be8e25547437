import math

import numpy as np
import pytest
import torch

from lipsync_tse import io, losses, metrics


def test_metric_matches_loss_function(rng):
    for _ in range(10):
        s, e = rng.standard_normal(300), rng.standard_normal(300)
        a = metrics.si_sdr(e, s)
        b = float(losses.si_sdr(torch.tensor(e), torch.tensor(s)))
        assert a == pytest.approx(b, abs=1e-9)


def test_hand_values():
    assert metrics.si_sdr([4.0, 3.0], [3.0, 4.0]) == pytest.approx(10.70226, abs=1e-5)
    assert metrics.si_sdr([1.0, 1.0], [1.0, 0.0]) == pytest.approx(0.0, abs=1e-6)
    assert metrics.sdr([1.0, 1.0], [1.0, 0.0]) == pytest.approx(0.0, abs=1e-6)
    assert metrics.sdr([2.0, 0.0], [1.0, 0.0]) == pytest.approx(0.0, abs=1e-6)


def test_sdr_is_not_scale_invariant(rng):
    s = rng.standard_normal(100)
    assert metrics.sdr(s, s) == pytest.approx(80.0)
    assert metrics.sdr(0.5 * s, s) == pytest.approx(10 * math.log10(4), abs=1e-6)


def test_improvement_and_utterance_scores(rng):
    s, n = rng.standard_normal(1000), rng.standard_normal(1000)
    mix = s + n
    rec = metrics.utterance_scores(mix, s, mix)
    assert rec["si_sdri"] == 0.0 and rec["sdri"] == 0.0
    rec = metrics.utterance_scores(s, s, mix)
    assert rec["si_sdr"] == pytest.approx(80.0)
    assert rec["si_sdri"] == pytest.approx(80.0 - metrics.si_sdr(mix, s))
    with pytest.raises(ValueError):
        metrics.improvement(float("nan"), 0.0)


def test_errors():
    with pytest.raises(ValueError):
        metrics.si_sdr([1.0, 2.0], [1.0])
    with pytest.raises(ValueError):
        metrics.si_sdr([1.0, 2.0], [0.0, 0.0])


def test_score_triples(tmp_path, rng):
    s = 0.3 * rng.standard_normal(800)
    mix = s + 0.3 * rng.standard_normal(800)
    io.write_wav(tmp_path / "ref.wav", s)
    io.write_wav(tmp_path / "mix.wav", mix)
    io.write_wav(tmp_path / "est.wav", s)
    recs = metrics.score_triples(
        [{"sample_id": "u1", "estimate_path": "est.wav", "reference_path": "ref.wav", "mixture_path": "mix.wav"}],
        tmp_path,
    )
    assert recs[0]["sample_id"] == "u1"
    assert recs[0]["si_sdri"] > 20
