import pytest
import torch

from lipsync_tse.reentry import (
    ReentryConfig,
    ReentryModel,
    SpeechDecoder,
    SpeechEncoder,
    count_params,
)
from lipsync_tse.slsyn import SLSyn


def inputs(seconds=1.0, batch=1, size=32):
    return torch.randn(batch, int(seconds * 16000)) * 0.1, torch.rand(batch, int(seconds * 25), size, size)


@pytest.fixture(scope="module")
def desk():
    torch.manual_seed(0)
    return ReentryModel(ReentryConfig.desk())


@pytest.mark.parametrize("kw", [dict(L=41), dict(R=1), dict(N=0), dict(tap="sync9"), dict(L=30)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        ReentryConfig(**kw)


def test_config_round_trip_and_factor():
    cfg = ReentryConfig.desk()
    assert ReentryConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.upsample_factor == 32


def test_encoder_decoder_shapes():
    enc, dec = SpeechEncoder(16, 40), SpeechDecoder(16, 40)
    x = torch.randn(2, 64000)
    X = enc(x)
    assert X.shape == (2, 16, 3200) and (X >= 0).all()
    assert dec(X, 64000).shape == (2, 64000)
    assert enc(torch.randn(1, 65)).shape[-1] == 4
    with pytest.raises(ValueError):
        dec(torch.randn(1, 8, 10), 100)


def test_decoder_is_overlap_add():
    dec = SpeechDecoder(2, 4)
    with torch.no_grad():
        dec.linear.weight.copy_(torch.tensor([[1.0, 0], [0, 1], [1, 1], [0, 0]]))
    feats = torch.tensor([[[1.0, 2.0], [10.0, 20.0]]])  # frames (1,10) and (2,20)
    # frame 0 -> [1, 10, 11, 0]; frame 1 -> [2, 20, 22, 0]
    out = dec(feats, 6)
    assert out.tolist() == [[1.0, 10.0, 13.0, 20.0, 22.0, 0.0]]


def test_desk_forward_outputs(desk):
    x, v = inputs(1.0, batch=2)
    s_hat, out = desk(x, v)
    cfg = desk.cfg
    assert s_hat.shape == x.shape
    assert len(out.masks) == cfg.R and out.masks[0].shape == (2, cfg.N, 800)
    assert all((m >= 0).all() for m in out.masks)
    assert len(out.embeddings) == cfg.R - 1 and out.embeddings[0].shape == (2, cfg.embed_dim)
    assert out.logits[0].shape == (2, cfg.num_classes)
    assert torch.allclose(out.features, out.stage_features[-1])


def test_output_length_matches_input_for_odd_lengths(desk):
    x = torch.randn(1, 16000 + 13) * 0.1
    v = torch.rand(1, 25, 32, 32)
    s_hat, _ = desk(x, v)
    assert s_hat.shape[-1] == x.shape[-1]


def test_forward_errors(desk):
    x, v = inputs()
    with pytest.raises(ValueError):
        desk(x, None)
    with pytest.raises(ValueError):
        desk(torch.randn(1, 32000), v)


def test_freeze_requires_pretrained(desk):
    with pytest.raises(RuntimeError):
        desk.attractor.set_frozen(True)
    cfg = ReentryConfig.desk()
    m = ReentryModel(cfg, SLSyn(cfg.slsyn), pretrained=True)
    m.attractor.set_frozen(True)
    assert m.attractor.frozen
    assert all(p.requires_grad for p in m.attractor.adapt.parameters())


def test_attractor_copies_pretrained_weights():
    cfg = ReentryConfig.desk(tap="sync2")
    sync = SLSyn(cfg.slsyn)
    m = ReentryModel(cfg, sync, pretrained=True)
    assert m.attractor.sync.backend is None
    assert torch.equal(m.attractor.sync.fuse.weight, sync.trunk.fuse.weight)
    assert m.attractor.sync.fuse.weight is not sync.trunk.fuse.weight


def test_mismatched_sync_config():
    cfg = ReentryConfig.desk()
    other = ReentryConfig.desk(image_size=48)
    with pytest.raises(ValueError):
        ReentryModel(cfg, SLSyn(other.slsyn))


@pytest.mark.parametrize("tap", ["sync1", "sync2", "sync3"])
def test_taps_as_attractor(tap):
    m = ReentryModel(ReentryConfig.desk(tap=tap))
    x, v = inputs()
    assert m.attractor_encode(x, v).shape == (1, m.cfg.attractor_dim, 25)


def test_speaker_encode_range(desk):
    x, v = inputs()
    feats = desk.speech_encode(x)
    assert desk.speaker_encode(feats, 1, x.shape[-1]).shape == (1, desk.cfg.embed_dim)
    with pytest.raises(ValueError):
        desk.speaker_encode(feats, 2, x.shape[-1])


def test_ablation_switches():
    x, v = inputs()
    m = ReentryModel(ReentryConfig.desk(use_speaker_encoders=False))
    assert m.speaker_encoders is None
    _, out = m(x, v)
    assert out.embeddings == [] and out.logits == []
    with pytest.raises(RuntimeError):
        m.speaker_encode(m.speech_encode(x), 1, x.shape[-1])
    m = ReentryModel(ReentryConfig.desk(concat_embeddings=False))
    assert m.stacks[1].in_channels == m.cfg.N + m.cfg.attractor_dim
    _, out = m(x, v)
    assert len(out.embeddings) == 1
    m = ReentryModel(ReentryConfig.desk(R=3, share_speaker_encoders=True))
    assert len(m.speaker_encoders) == 1 and len(m.heads) == 2


def test_count_params(desk):
    assert count_params(None) == 0
    assert count_params(desk) == sum(p.numel() for p in desk.parameters())
