import pytest
import torch

from accent_tts.acoustic_model import AMConfig, TextEncoder
from accent_tts.lapm import LAPM, LAPMConfig, lapm_loss, module_fingerprint

AM = AMConfig(n_symbols=12, embedding_dim=8, text_dim=8)
CFG = LAPMConfig(text_dim=8, global_dim=4, channels=6, rnn_dim=6, output_dim=3)


def make(cfg=CFG):
    torch.manual_seed(0)
    return LAPM(TextEncoder(AM), cfg).eval()


def test_predict_shape():
    m = make()
    out = m(torch.randint(2, 12, (12,)), torch.randn(4))
    assert out.shape == (12, 3)


def test_predict_deterministic():
    m = make()
    phon, hg = torch.randint(2, 12, (7,)), torch.randn(4)
    assert torch.equal(m(phon, hg), m(phon, hg))


def test_zero_predictor_gives_zero():
    m = make()
    with torch.no_grad():
        for p in m.predictor.parameters():
            p.zero_()
    out = m(torch.randint(2, 12, (2, 6)), torch.randn(2, 4))
    assert torch.count_nonzero(out) == 0


def test_global_dim_mismatch():
    with pytest.raises(ValueError, match="global accent vector"):
        make()(torch.randint(2, 12, (5,)), torch.randn(5))


def test_fingerprint_mismatch_rejected():
    torch.manual_seed(0)
    enc = TextEncoder(AM)
    with pytest.raises(ValueError, match="fingerprint"):
        LAPM(enc, LAPMConfig(**{**CFG.__dict__, "text_encoder_fingerprint": "0" * 64}))
    LAPM(enc, LAPMConfig(**{**CFG.__dict__, "text_encoder_fingerprint": module_fingerprint(enc)}))


def test_text_encoder_frozen_through_training():
    m = make()
    before = module_fingerprint(m.text_encoder)
    opt = torch.optim.Adam([p for p in m.parameters() if p.requires_grad], lr=1e-2)
    m.train()
    assert not m.text_encoder.training
    phon = torch.randint(2, 12, (3, 5))
    tgt = torch.nn.functional.normalize(torch.randn(3, 5, 3), dim=-1)
    for _ in range(5):
        opt.zero_grad()
        lapm_loss(m(phon, torch.randn(3, 4)), tgt).backward()
        opt.step()
    assert module_fingerprint(m.text_encoder) == before
    assert m.verify_text_encoder() == before
    assert all(p.grad is None for p in m.text_encoder.parameters())


def test_tampered_encoder_detected():
    m = make()
    with torch.no_grad():
        next(m.text_encoder.parameters()).add_(1.0)
    with pytest.raises(ValueError):
        m.verify_text_encoder()


def test_zero_global_vector_injects_nothing():
    m = make()
    phon = torch.randint(2, 12, (1, 5))
    lens = torch.tensor([5])
    hidden = m.text_encoder(phon, lens)
    x = hidden + m.predictor.text_lift(torch.zeros(1, 4)).unsqueeze(1)
    torch.testing.assert_close(x, hidden, rtol=0, atol=0)


def test_padding_rows_are_zero_and_do_not_leak():
    m = make()
    phon = torch.tensor([[3, 4, 5, 0], [3, 4, 5, 6]])
    hg = torch.randn(2, 4)
    out = m(phon, hg, torch.tensor([3, 4]))
    assert torch.all(out[0, 3] == 0)
    alone = m(phon[0, :3], hg[0])
    torch.testing.assert_close(out[0, :3], alone, atol=1e-6, rtol=0)


# --- loss -------------------------------------------------------------------


def test_loss_examples():
    t = torch.randn(4, 3)
    assert float(lapm_loss(t, t)) == 0.0
    assert abs(float(lapm_loss(t + 1, t)) - 1.0) < 1e-6
    assert float(lapm_loss(torch.tensor([[0.0, 2.0]]), torch.tensor([[1.0, 0.0]]))) == 2.5


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        lapm_loss(torch.zeros(3, 2), torch.zeros(3, 3))


def test_loss_masks_padding():
    pred = torch.zeros(1, 3, 2)
    pred[0, 2] = 50.0
    assert float(lapm_loss(pred, torch.zeros(1, 3, 2), torch.tensor([2]))) == 0.0
