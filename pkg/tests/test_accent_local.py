import math
from dataclasses import replace

import pytest
import torch
from hypothesis import given, settings, strategies as st

from accent_tts.accent_local import SILAM, LocalAccentConfig, pool_by_boundaries

TINY = LocalAccentConfig(channels=6, rnn_dim=6, embedding_dim=3, classifier_dim=5,
                         n_accents=6, n_speakers=24)


def tiny(**kw):
    torch.manual_seed(0)
    return SILAM(replace(TINY, **kw)).eval()


def tile(durations):
    bounds, s = [], 0
    for d in durations:
        bounds.append((s, s + d))
        s += d
    return bounds


# --- pooling ----------------------------------------------------------------


def test_pool_example():
    frames = torch.tensor([[1.0, 1], [3, 3], [5, 5], [7, 7]])
    assert pool_by_boundaries(frames, [(0, 2), (2, 4)]).tolist() == [[2, 2], [6, 6]]


def test_pool_single_segment_is_mean():
    frames = torch.randn(6, 3)
    torch.testing.assert_close(pool_by_boundaries(frames, [(0, 6)])[0], frames.mean(0))


def test_pool_empty_segment():
    with pytest.raises(ValueError, match="empty"):
        pool_by_boundaries(torch.zeros(5, 2), [(0, 3), (3, 3), (3, 5)])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.integers(1, 4), min_size=1, max_size=3), min_size=1, max_size=5),
       st.integers(0, 1000))
def test_pool_refinement_consistency(groups, seed):
    """Pool fine segments, re-average with length weights: equals pooling coarse segments."""
    fine = [d for g in groups for d in g]
    T = sum(fine)
    frames = torch.randn(T, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    fine_rows = pool_by_boundaries(frames, tile(fine))
    coarse = pool_by_boundaries(frames, tile([sum(g) for g in groups]))
    k = 0
    for row, g in zip(coarse, groups):
        w = torch.tensor(g, dtype=torch.float64)
        merged = (fine_rows[k:k + len(g)] * w[:, None]).sum(0) / w.sum()
        torch.testing.assert_close(merged, row, atol=1e-6, rtol=0)
        k += len(g)


# --- encoder ----------------------------------------------------------------


def test_encode_nine_phonemes_unit_rows():
    m = tiny()
    bounds = tile([2, 3, 1, 4, 2, 2, 3, 1, 2])
    h = m.encode(torch.randn(20, 80), bounds)
    assert h.shape == (9, 3)
    torch.testing.assert_close(h.norm(dim=-1), torch.ones(9), atol=1e-5, rtol=0)


def test_encode_deterministic():
    m = tiny()
    mel, bounds = torch.randn(10, 80), tile([3, 3, 4])
    assert torch.equal(m.encode(mel, bounds), m.encode(mel, bounds))


def test_encode_boundary_mismatch():
    with pytest.raises(ValueError):
        tiny().encode(torch.randn(10, 80), tile([3, 3]))


def test_identity_recurrence_isolates_pooling():
    """With no recurrence and pointwise convs, a phoneme's row only sees its own frames."""
    m = tiny(identity_recurrence=True, kernel_size=1)
    mel = torch.randn(12, 80)
    bounds = tile([4, 5, 3])
    full = m.encode(mel, bounds)
    first = m.encode(mel[:4], [(0, 4)])
    torch.testing.assert_close(full[0], first[0], atol=1e-6, rtol=0)


def test_recurrence_breaks_isolation():
    # the control case: the GRU carries context, so truncation changes later rows
    m = tiny(kernel_size=1)
    mel = torch.randn(12, 80)
    full = m.encode(mel, tile([4, 5, 3]))
    tail = m.encode(mel[4:], tile([5, 3]))
    assert not torch.allclose(full[1], tail[0], atol=1e-4)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=8))
def test_row_count_equals_phonemes(durations):
    m = tiny()
    h = m.encode(torch.randn(sum(durations), 80), tile(durations))
    assert h.shape[0] == len(durations)


def test_batched_matches_single():
    m = tiny()
    a, b = torch.randn(7, 80), torch.randn(5, 80)
    ba, bb = tile([3, 4]), tile([1, 2, 2])
    mel = torch.zeros(2, 7, 80)
    mel[0], mel[1, :5] = a, b
    out = m.encode(mel, [ba, bb], torch.tensor([7, 5]))
    torch.testing.assert_close(out[0, :2], m.encode(a, ba), atol=1e-6, rtol=0)
    torch.testing.assert_close(out[1, :3], m.encode(b, bb), atol=1e-6, rtol=0)
    assert torch.all(out[0, 2:] == 0)


# --- classifiers ------------------------------------------------------------


def test_sequence_classifier_distribution():
    m = tiny()
    h = m.encode(torch.randn(9, 80), tile([3, 3, 3]))
    assert abs(float(m.classify_accent_sequence(h).sum()) - 1) < 1e-6
    p1 = m.classify_accent_sequence(h[:1])
    assert p1.shape == (1, 6)


def test_sequence_classifier_zero_weights_uniform():
    m = tiny()
    with torch.no_grad():
        for p in m.accent_classifier.parameters():
            p.zero_()
    p = m.classify_accent_sequence(torch.randn(4, 3))
    torch.testing.assert_close(p, torch.full_like(p, 1 / 6))


def test_sequence_classifier_empty():
    with pytest.raises(ValueError):
        tiny().classify_accent_sequence(torch.zeros(0, 3))


@pytest.mark.parametrize("P", [1, 4, 9])
def test_adversarial_uniform_ln24(P):
    m = tiny()
    with torch.no_grad():
        m.speaker_classifier.weight.zero_()
        m.speaker_classifier.bias.zero_()
    loss = m.adversarial_speaker_loss(torch.randn(P, 3), 5)
    assert abs(float(loss) - math.log(24)) < 1e-5


def test_adversarial_identical_rows_equal_single():
    m = tiny()
    row = torch.randn(1, 3)
    one = m.adversarial_speaker_loss(row, 2)
    many = m.adversarial_speaker_loss(row.repeat(6, 1), 2)
    assert abs(float(one) - float(many)) < 1e-6


def test_adversarial_padding_ignored():
    m = tiny()
    h = torch.randn(1, 4, 3)
    padded = torch.cat([h, 100 * torch.randn(1, 2, 3)], 1)
    a = m.adversarial_speaker_loss(h, torch.tensor([3]))
    b = m.adversarial_speaker_loss(padded, torch.tensor([3]), torch.tensor([4]))
    assert abs(float(a) - float(b)) < 1e-6


def test_reversal_identity_into_encoder():
    m = tiny().double()
    mel = torch.randn(10, 80, dtype=torch.float64)
    bounds = tile([4, 3, 3])

    def grads(reverse):
        m.zero_grad()
        m.adversarial_speaker_loss(m.encode(mel, bounds), 7, reverse=reverse).backward()
        return [p.grad.clone() for p in m.encoder.parameters()]

    for a, p in zip(grads(True), grads(False)):
        torch.testing.assert_close(a, -p, rtol=1e-5, atol=1e-12)
