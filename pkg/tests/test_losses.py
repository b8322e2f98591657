"""Loss-value oracles (closed forms frozen at 1e-9), reductions, invariances,
bounds, and gradient checks for the composite objective."""

import numpy as np
import pytest

from compolab.gradcheck import grad_check
from compolab.losses import (
    BatchTensors,
    LossComponents,
    LossWeights,
    SimilarityMatrix,
    composite_loss,
    contrastive_loss,
    hard_negative_contrastive_loss,
    phi,
    sentence_alignment_loss,
    similarity_matrix,
    token_reconstruction_loss,
)
from compolab.tensor import Tensor

E = np.e
TOL = 1e-9


class StubDecoder:
    """Returns a fixed per-sequence log-likelihood, ignoring the memory."""

    def __init__(self, seq_log_probs):
        self.seq_log_probs = np.asarray(seq_log_probs, dtype=float)
        self.frozen = True

    def sequence_log_prob(self, memory, targets, lengths):
        return Tensor(self.seq_log_probs)


def diag_pairs(b, d=None):
    d = d or b
    m = np.zeros((b, d))
    m[np.arange(b), np.arange(b)] = 1.0
    return Tensor(m)


# --- phi ---------------------------------------------------------------------


def test_phi_values():
    a, b = Tensor([1.0, 0.0]), Tensor([1.0, 0.0])
    assert phi(a, b, 1.0).item() == pytest.approx(E, abs=TOL)
    assert phi(a, Tensor([0.0, 1.0]), 0.07).item() == pytest.approx(1.0, abs=TOL)
    got = phi(Tensor([1.0, 1.0]), Tensor([2.0, 2.0]), 0.07).item()
    assert got == pytest.approx(np.exp(1.0 / 0.07), rel=TOL)
    # cos = 0.5 at tau = 0.07 evaluates the documented sharpening
    x, y = Tensor([1.0, 0.0]), Tensor([0.5, np.sqrt(3) / 2.0])
    assert phi(x, y, 0.07).item() == pytest.approx(np.exp(0.5 / 0.07), rel=1e-12)


def test_phi_rejects_nonpositive_tau():
    a = Tensor([1.0, 0.0])
    for tau in (0.0, -1.0):
        with pytest.raises(ValueError, match="positive"):
            phi(a, a, tau)
    with pytest.raises(ValueError, match="positive"):
        contrastive_loss(diag_pairs(2), diag_pairs(2), Tensor(-0.5))


# --- contrastive -------------------------------------------------------------


def test_contrastive_single_element_batch_is_zero():
    u = Tensor([[1.0, 0.0]])
    assert contrastive_loss(u, u, 1.0).item() == pytest.approx(0.0, abs=TOL)


def test_contrastive_uniform_similarities_ln4():
    e = Tensor(np.tile([1.0, 0.0, 0.0], (4, 1)))
    assert contrastive_loss(e, e, 1.0).item() == pytest.approx(np.log(4.0), abs=TOL)


def test_contrastive_diagonal_pairs_hand_value():
    u = diag_pairs(2)
    got = contrastive_loss(u, u, 1.0).item()
    assert got == pytest.approx(np.log(1.0 + E) - 1.0, abs=TOL)  # 0.31326...


def test_hard_negative_diagonal_plus_orthogonal_hand_value():
    u = diag_pairs(2, 3)
    v = diag_pairs(2, 3)
    v_neg = Tensor(np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]]))
    got = hard_negative_contrastive_loss(u, v, v_neg, 1.0).item()
    i2t = np.log(E + 3.0) - 1.0  # 0.74367...
    t2i = np.log(1.0 + E) - 1.0
    assert got == pytest.approx(0.5 * (i2t + t2i), abs=TOL)  # 0.52847...


def test_hard_negative_m0_reduces_bit_exactly():
    rng = np.random.default_rng(0)
    for trial in range(100):
        b, d = int(rng.integers(2, 7)), int(rng.integers(2, 6))
        u = Tensor(rng.normal(size=(b, d)))
        v = Tensor(rng.normal(size=(b, d)))
        tau = float(rng.uniform(0.05, 1.0))
        a = hard_negative_contrastive_loss(u, v, None, tau).item()
        b2 = hard_negative_contrastive_loss(u, v, Tensor(np.zeros((0, d))), tau).item()
        c = contrastive_loss(u, v, tau).item()
        assert a == c and b2 == c, f"trial {trial}"


def test_hard_negative_loss_monotone_in_negative_similarity():
    u = diag_pairs(2, 3)
    v = diag_pairs(2, 3)
    base = None
    # rotate one negative toward the first image; loss must strictly increase
    for t in np.linspace(0.0, 0.9, 7):
        vn = np.array([[np.sin(t), 0.0, np.cos(t)], [0.0, 0.0, 1.0]])
        cur = hard_negative_contrastive_loss(u, v, Tensor(vn), 0.5).item()
        if base is not None:
            assert cur > base
        base = cur


def test_symmetric_flag_changes_value_but_default_matches_asymmetric():
    rng = np.random.default_rng(5)
    u = Tensor(rng.normal(size=(3, 4)))
    v = Tensor(rng.normal(size=(3, 4)))
    vn = Tensor(rng.normal(size=(6, 4)))
    asym = hard_negative_contrastive_loss(u, v, vn, 0.3)
    sym = hard_negative_contrastive_loss(u, v, vn, 0.3, symmetric=True)
    assert asym.item() != sym.item()
    assert sym.item() > asym.item()  # extra denominator terms only add mass


# --- reconstruction -----------------------------------------------------------


def test_reconstruction_uniform_decoder_value():
    # L = 5 predicted tokens under a uniform 32-way head: 5 ln 32 per sample
    b, k, vsize, L = 3, 2, 32, 5
    stub = StubDecoder(np.full(b * k, -L * np.log(vsize)))
    h = Tensor(np.zeros((b, 4)))
    targets = np.zeros((b * k, L + 1), dtype=int)
    lengths = np.full(b * k, L + 1)
    got = token_reconstruction_loss(h, targets, lengths, stub, k_targets=k).item()
    assert got == pytest.approx(5 * np.log(32.0), abs=TOL)  # 17.3287...


def test_reconstruction_perfect_decoder_is_zero():
    stub = StubDecoder(np.zeros(4))
    got = token_reconstruction_loss(
        Tensor(np.zeros((4, 2))), np.zeros((4, 3), dtype=int), np.full(4, 3), stub
    ).item()
    assert got == 0.0


def test_reconstruction_hand_sum():
    stub = StubDecoder([np.log(0.5) + np.log(0.25)])
    got = token_reconstruction_loss(
        Tensor(np.zeros((1, 2))), np.zeros((1, 3), dtype=int), np.array([3]), stub
    ).item()
    assert got == pytest.approx(2.0794415416798357, abs=TOL)


def test_reconstruction_through_real_decoder_uniform_head():
    from compolab.models import ModelConfig, init_bundle, pad_batch
    from compolab.world import Vocabulary, caption_set, generate_scenes

    vocab = Vocabulary()
    cfg = ModelConfig.from_vocab(vocab)
    bundle = init_bundle(cfg, seed=0)
    bundle.decoder.params["head.w"].data[:] = 0.0
    bundle.decoder.params["head.b"].data[:] = 0.0
    caps = [caption_set(s, vocab)[0] for s in generate_scenes(3, 1, vocab)]
    targets, lengths = pad_batch([c.token_ids for c in caps])
    h = Tensor(np.random.default_rng(1).normal(size=(3, cfg.d_dec)))
    got = token_reconstruction_loss(h, targets, lengths, bundle.decoder).item()
    assert got == pytest.approx(9 * np.log(vocab.text_size), abs=TOL)


def test_reconstruction_loss_nonnegative_random_stub():
    rng = np.random.default_rng(2)
    stub = StubDecoder(-np.abs(rng.normal(size=6)))
    got = token_reconstruction_loss(
        Tensor(np.zeros((6, 2))), np.zeros((6, 4), dtype=int), np.full(6, 4), stub
    ).item()
    assert got >= 0.0


# --- alignment ----------------------------------------------------------------


def test_alignment_single_element_zero_and_uniform_ln4():
    v = Tensor([[1.0, 0.0]])
    assert sentence_alignment_loss(v, v, 1.0).item() == pytest.approx(0.0, abs=TOL)
    e = Tensor(np.tile([0.0, 1.0, 0.0], (4, 1)))
    assert sentence_alignment_loss(e, e, 1.0).item() == pytest.approx(np.log(4.0), abs=TOL)


def test_alignment_diagonal_hand_value():
    v = diag_pairs(2)
    got = sentence_alignment_loss(v, v, 1.0).item()
    assert got == pytest.approx(np.log(1.0 + E) - 1.0, abs=TOL)


def test_alignment_is_one_directional():
    rng = np.random.default_rng(3)
    v = Tensor(rng.normal(size=(4, 5)))
    vp = Tensor(rng.normal(size=(4, 5)))
    assert sentence_alignment_loss(v, vp, 0.5).item() != pytest.approx(
        sentence_alignment_loss(vp, v, 0.5).item(), abs=1e-12
    )


# --- composite ------------------------------------------------------------------


def test_composite_weighted_sum_hand_value():
    comp = LossComponents(Tensor(0.5), Tensor(2.0), Tensor(1.0))
    got = composite_loss(comp, LossWeights(0.1, 0.5)).item()
    assert got == pytest.approx(1.2, abs=TOL)


def test_composite_zero_weights_equals_contrastive_bitwise():
    rng = np.random.default_rng(4)
    for _ in range(100):
        c = Tensor(float(abs(rng.normal())))
        comp = LossComponents(c, Tensor(abs(rng.normal())), Tensor(abs(rng.normal())))
        assert composite_loss(comp, LossWeights(0.0, 0.0)).item() == c.item()


def test_negative_weights_rejected():
    with pytest.raises(ValueError, match=">= 0"):
        LossWeights(-0.1, 0.5)
    with pytest.raises(ValueError, match=">= 0"):
        LossWeights(0.1, -0.5)


def test_composite_missing_component_rejected():
    with pytest.raises(ValueError, match="reconstruction"):
        composite_loss(LossComponents(Tensor(1.0)), LossWeights(0.1, 0.0))


def test_composite_gradient_is_weighted_sum():
    rng = np.random.default_rng(6)
    u = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    v = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    vp = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    weights = LossWeights(0.3, 0.7)

    def total():
        c = contrastive_loss(u, v, 0.5)
        a = sentence_alignment_loss(v, vp, 0.5)
        return composite_loss(LossComponents(c, Tensor(0.0), a), weights)

    report = grad_check(total, {"u": u, "v": v, "vp": vp})
    assert report.passed, report
    # gradient decomposes: d(total) = d(contrastive) + beta * d(alignment)
    for p in (u, v, vp):
        p.zero_grad()
    contrastive_loss(u, v, 0.5).backward()
    g_c = {id(p): (p.grad.copy() if p.grad is not None else 0.0) for p in (u, v, vp)}
    for p in (u, v, vp):
        p.zero_grad()
    sentence_alignment_loss(v, vp, 0.5).backward()
    g_a = {id(p): (p.grad.copy() if p.grad is not None else 0.0) for p in (u, v, vp)}
    for p in (u, v, vp):
        p.zero_grad()
    total().backward()
    for p in (u, v, vp):
        want = g_c[id(p)] + weights.beta * g_a[id(p)]
        assert np.allclose(p.grad, want, atol=1e-12)


# --- invariances and bounds -------------------------------------------------------


def _random_batch(rng, b=4, m=2, d=5):
    return (
        Tensor(rng.normal(size=(b, d))),
        Tensor(rng.normal(size=(b, d))),
        Tensor(rng.normal(size=(b * m, d))),
        Tensor(rng.normal(size=(b, d))),
    )


def test_permutation_invariance_bit_level():
    rng = np.random.default_rng(7)
    for trial in range(10):
        b, m = 5, 2
        u, v, vn, vp = _random_batch(rng, b=b, m=m)
        tau = float(rng.uniform(0.05, 0.8))
        base = (
            hard_negative_contrastive_loss(u, v, vn, tau).item(),
            sentence_alignment_loss(v, vp, tau).item(),
            contrastive_loss(u, v, tau).item(),
        )
        perm = np.random.default_rng(trial).permutation(b)
        vn3 = vn.data.reshape(b, m, -1)[perm].reshape(b * m, -1)
        permuted = (
            hard_negative_contrastive_loss(
                Tensor(u.data[perm]), Tensor(v.data[perm]), Tensor(vn3), tau
            ).item(),
            sentence_alignment_loss(Tensor(v.data[perm]), Tensor(vp.data[perm]), tau).item(),
            contrastive_loss(Tensor(u.data[perm]), Tensor(v.data[perm]), tau).item(),
        )
        assert permuted == base, f"trial {trial}"


def test_reconstruction_permutation_invariance_bit_level():
    rng = np.random.default_rng(8)
    lp = -np.abs(rng.normal(size=6))
    h = Tensor(np.zeros((6, 2)))
    targets = np.zeros((6, 4), dtype=int)
    lengths = np.full(6, 4)
    base = token_reconstruction_loss(h, targets, lengths, StubDecoder(lp)).item()
    perm = rng.permutation(6)
    got = token_reconstruction_loss(h, targets, lengths, StubDecoder(lp[perm])).item()
    assert got == base


def test_scale_invariance():
    rng = np.random.default_rng(9)
    u, v, vn, vp = _random_batch(rng)
    tau = 0.2
    base = (
        hard_negative_contrastive_loss(u, v, vn, tau).item(),
        sentence_alignment_loss(v, vp, tau).item(),
    )
    for c in (0.25, 4.0, 1024.0):  # powers of two scale bit-exactly
        got = (
            hard_negative_contrastive_loss(
                Tensor(c * u.data), Tensor(c * v.data), Tensor(c * vn.data), tau
            ).item(),
            sentence_alignment_loss(Tensor(c * v.data), Tensor(c * vp.data), tau).item(),
        )
        assert got == base
    for c in (3.0, 0.7):  # arbitrary positive scales within float tolerance
        got = hard_negative_contrastive_loss(
            Tensor(c * u.data), Tensor(c * v.data), Tensor(c * vn.data), tau
        ).item()
        assert got == pytest.approx(base[0], abs=1e-12)


def test_loss_bounds():
    rng = np.random.default_rng(10)
    for _ in range(20):
        b, m = int(rng.integers(2, 6)), int(rng.integers(0, 3))
        u = Tensor(rng.normal(size=(b, 4)))
        v = Tensor(rng.normal(size=(b, 4)))
        vn = Tensor(rng.normal(size=(b * m, 4))) if m else None
        tau = float(rng.uniform(0.05, 1.0))
        loss = hard_negative_contrastive_loss(u, v, vn, tau).item()
        bound = 2.0 / tau + np.log(b * (1 + m))
        assert 0.0 <= loss <= bound
        align = sentence_alignment_loss(u, v, tau).item()
        assert 0.0 <= align <= 2.0 / tau + np.log(b)


def test_similarity_matrix_invariants():
    rng = np.random.default_rng(11)
    u = Tensor(rng.normal(size=(4, 6)))
    v = Tensor(rng.normal(size=(5, 6)))
    sm = similarity_matrix(u, v, 0.07)
    assert isinstance(sm, SimilarityMatrix)
    assert sm.phi.shape == (4, 5)
    assert np.all(sm.phi > 0.0)
    assert np.all(sm.phi <= np.exp(1.0 / sm.tau) * (1 + 1e-12))


def test_batch_tensors_holds_fields():
    rng = np.random.default_rng(12)
    bt = BatchTensors(
        u=Tensor(rng.normal(size=(2, 3))),
        v=Tensor(rng.normal(size=(2, 3))),
        k_targets=1,
    )
    assert bt.v_neg is None and bt.h is None


def test_full_composite_gradient_vs_finite_differences_through_models():
    # end-to-end: encoders + projector + frozen decoder + all three terms
    from compolab.models import ModelConfig, init_bundle, pad_batch
    from compolab.world import Vocabulary, caption_set, generate_scenes, render_image

    vocab = Vocabulary()
    cfg = ModelConfig.from_vocab(vocab, d=4, d_text=4, d_visual=4, d_dec=6)
    scenes = generate_scenes(2, 3, vocab)
    caps = [caption_set(s, vocab) for s in scenes]
    cap_ids, cap_len = pad_batch([c[0].token_ids for c in caps])
    alt_ids, alt_len = pad_batch([c[1].token_ids for c in caps])
    par_ids, par_len = pad_batch([c[2].token_ids for c in caps])
    neg_ids, neg_len = pad_batch([c[3].token_ids for c in caps])  # stand-in negatives
    img_ids = np.array([render_image(s, 0, vocab).token_ids for s in scenes])

    bundle = init_bundle(cfg, seed=7)
    bundle.decoder.freeze()
    weights = LossWeights(0.1, 0.5)

    def f():
        u = bundle.image_encoder.encode_batch(img_ids)
        v = bundle.text_encoder.encode_batch(cap_ids, cap_len)
        vn = bundle.text_encoder.encode_batch(neg_ids, neg_len)
        vp = bundle.text_encoder.encode_batch(par_ids, par_len)
        tau = bundle.temperature.tau_tensor()
        c = hard_negative_contrastive_loss(u, v, vn, tau)
        h = bundle.projector.project_batch(v)
        r = token_reconstruction_loss(h, alt_ids, alt_len, bundle.decoder)
        a = sentence_alignment_loss(v, vp, tau)
        return composite_loss(LossComponents(c, r, a), weights)

    report = grad_check(
        f, bundle.trainable_params(), max_coords_per_param=6,
        rng=np.random.default_rng(0),
    )
    assert report.passed, report
    assert report.max_rel_error < 1e-4
