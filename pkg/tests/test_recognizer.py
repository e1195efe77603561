import numpy as np
import pytest
import torch

from audioadapt.losses import base_loss
from audioadapt.recognizer import (Recognizer, RecognizerError, SoundVectorBank,
                                   build_class_token, build_sequence,
                                   recognizer_forward)


def make_bank(seed=0, k=4, dim=8, audio_dim=6, visual_dim=6, low=2):
    torch.manual_seed(seed)
    return SoundVectorBank(k, dim, audio_dim, visual_dim, low)


def make_rec(seed=0, k=4, dim=8, visual_dim=6, audio_dim=6, depth=2, n=3):
    torch.manual_seed(seed)
    return Recognizer(visual_dim, audio_dim, k, dim=dim, depth=depth, heads=2, max_clips=n)


class TestClassToken:
    def test_forced_weights_convex_combination(self):
        bank = make_bank(k=2)
        g0, g1 = bank.vectors[0], bank.vectors[1]
        h_prime = torch.tensor([[0.3, 0.7]])
        z = h_prime @ bank.vectors
        assert torch.allclose(z[0], 0.3 * g0 + 0.7 * g1, atol=1e-7)

    def test_one_hot_returns_bank_vector(self):
        bank = make_bank(k=3)
        # drive the mix head so hard that h' is effectively one-hot at class 1
        with torch.no_grad():
            bank.mix_head.weight.zero_()
            bank.mix_head.bias.copy_(torch.tensor([-60.0, 60.0, -60.0]))
        z, _, h_prime = bank(torch.randn(2, 6), torch.randn(2, 6))
        assert torch.allclose(h_prime[0], torch.tensor([0.0, 1.0, 0.0]), atol=1e-12)
        assert torch.allclose(z[0], bank.vectors[1], atol=1e-6)

    def test_hull_bound_over_random_draws(self, rng):
        bank = make_bank(k=5, dim=8)
        max_norm = float(bank.vectors.norm(dim=1).max())
        audio = torch.randn(1000, 6)
        visual = torch.randn(1000, 6)
        z, h, hp = build_class_token(bank, audio, visual)
        assert torch.allclose(h.sum(dim=1), torch.ones(1000), atol=1e-6)
        assert torch.allclose(hp.sum(dim=1), torch.ones(1000), atol=1e-6)
        assert float(z.norm(dim=1).max()) <= max_norm + 1e-6

    def test_dim_mismatch(self):
        bank = make_bank()
        with pytest.raises(RecognizerError):
            bank(torch.randn(2, 9), torch.randn(2, 6))


class TestBuildSequence:
    def test_audio_token_length(self):
        rec, bank = make_rec(), make_bank()
        v = torch.randn(2, 4, 6)
        a = torch.randn(2, 4, 6)
        rec_long = make_rec(n=4)
        tokens, h, hp = build_sequence("audio_token", v, a, 1, rec_long, bank=bank,
                                       pooled_audio=torch.randn(2, 6),
                                       pooled_visual=torch.randn(2, 6))
        assert tokens.shape == (2, 5, 8)
        assert h is not None and hp is not None

    def test_vanilla_length(self):
        rec = make_rec(n=4)
        tokens, h, hp = build_sequence("vanilla", torch.randn(2, 4, 6),
                                       torch.randn(2, 4, 6), 0, rec)
        assert tokens.shape == (2, 9, 8)
        assert h is None and hp is None

    def test_zero_domain_embedding_equals_vanilla(self):
        rec = make_rec(n=3)
        with torch.no_grad():
            rec.domain_emb.zero_()
        v, a = torch.randn(2, 3, 6), torch.randn(2, 3, 6)
        t1, _, _ = build_sequence("vanilla", v, a, 0, rec)
        t2, _, _ = build_sequence("domain_embed", v, a, 0, rec)
        assert torch.allclose(t1, t2, atol=1e-12)

    def test_domains_differ_only_in_visual_tokens(self):
        rec = make_rec(n=3)
        v, a = torch.randn(2, 3, 6), torch.randn(2, 3, 6)
        src, _, _ = build_sequence("domain_embed", v, a, 0, rec)
        tgt, _, _ = build_sequence("domain_embed", v, a, 1, rec)
        assert torch.equal(src[:, 0], tgt[:, 0])            # class token identical
        assert torch.equal(src[:, 4:], tgt[:, 4:])          # audio tokens bit-identical
        diff = tgt[:, 1:4] - src[:, 1:4]
        expect = (rec.domain_emb[1] - rec.domain_emb[0]).expand(2, 3, -1)
        assert torch.allclose(diff, expect, atol=1e-6)

    def test_audio_token_mode_contains_no_audio_tokens(self):
        rec, bank = make_rec(n=3), make_bank()
        v = torch.randn(2, 3, 6)
        a = torch.randn(2, 3, 6)
        pooled_a = torch.zeros(2, 6)  # silenced audio pathway
        tokens, h, _ = build_sequence("audio_token", v, a, 1, rec, bank=bank,
                                      pooled_audio=pooled_a,
                                      pooled_visual=torch.randn(2, 6))
        assert tokens.shape[1] == 4  # cls + 3 visual tokens only
        # with zeroed audio, h collapses to a constant (bias-driven) distribution
        expect = torch.softmax(bank.audio_head.bias, dim=-1)
        assert torch.allclose(h[0], expect, atol=1e-6)
        assert torch.allclose(h[1], expect, atol=1e-6)

    def test_unknown_mode(self):
        rec = make_rec()
        with pytest.raises(RecognizerError):
            build_sequence("cross_attention", torch.randn(1, 2, 6),
                           torch.randn(1, 2, 6), 0, rec)

    def test_token_source_alternatives(self):
        rec, bank = make_rec(n=2), make_bank()
        v, a = torch.randn(2, 2, 6), torch.randn(2, 2, 6)
        pooled_a, pooled_v = torch.randn(2, 6), torch.randn(2, 6)
        p_a = torch.softmax(torch.randn(2, 4), dim=1)
        for source in ("sound_vectors", "audio_prediction", "audio_feature"):
            tokens, h, hp = build_sequence("audio_token", v, a, 0, rec,
                                           bank=bank, pooled_audio=pooled_a,
                                           pooled_visual=pooled_v, p_a=p_a,
                                           token_source=source)
            assert tokens.shape == (2, 3, 8)
            if source == "sound_vectors":
                assert h is not None
            else:
                assert h is None and hp is None
        pred_token, _, _ = build_sequence("audio_token", v, a, 0, rec, bank=bank,
                                          pooled_audio=pooled_a, pooled_visual=pooled_v,
                                          p_a=p_a, token_source="audio_prediction")
        assert torch.allclose(pred_token[:, 0], rec.pred_proj(p_a), atol=1e-7)


class TestRecognizerForward:
    def test_zeroed_head_uniform(self):
        rec = make_rec(n=3)
        with torch.no_grad():
            rec.head.weight.zero_()
            rec.head.bias.zero_()
        p, _ = recognizer_forward(rec, torch.randn(2, 4, 8))
        assert torch.allclose(p, torch.full((2, 4), 0.25), atol=1e-9)

    def test_probs_sum_to_one(self):
        rec = make_rec(n=3)
        p, _ = recognizer_forward(rec, torch.randn(5, 4, 8))
        assert torch.allclose(p.sum(dim=1), torch.ones(5), atol=1e-9)

    def test_head_reads_position_zero_only(self):
        rec = make_rec(n=3)
        seq = torch.randn(2, 4, 8)
        p1, state1 = recognizer_forward(rec, seq)
        expect = torch.softmax(rec.head(state1), dim=-1)
        assert torch.allclose(p1, expect, atol=1e-9)

    def test_empty_sequence_rejected(self):
        rec = make_rec()
        with pytest.raises(RecognizerError):
            recognizer_forward(rec, torch.randn(2, 0, 8))

    def test_domain_embedding_locality(self):
        rec, bank = make_rec(n=3), make_bank()
        v, a = torch.randn(2, 3, 6), torch.randn(2, 3, 6)
        pooled_a, pooled_v = torch.randn(2, 6), torch.randn(2, 6)

        def predict(domain):
            tokens, _, _ = build_sequence("audio_token", v, a, domain, rec, bank=bank,
                                          pooled_audio=pooled_a, pooled_visual=pooled_v)
            return recognizer_forward(rec, tokens)[0]

        before_src, before_tgt = predict(0), predict(1)
        with torch.no_grad():
            # non-uniform bump: a constant vector is a LayerNorm null direction
            rec.domain_emb[1] += torch.linspace(-0.5, 0.5, rec.dim)
        after_src, after_tgt = predict(0), predict(1)
        assert torch.equal(before_src, after_src)
        assert not torch.allclose(before_tgt, after_tgt)

    def test_gradients_match_finite_differences(self, rng):
        rec = make_rec(n=2, depth=1).double()
        bank = make_bank().double()
        v = torch.randn(2, 2, 6, dtype=torch.float64)
        pooled_a = torch.randn(2, 6, dtype=torch.float64)
        pooled_v = torch.randn(2, 6, dtype=torch.float64)
        y = np.array([1, 3])

        def full_loss():
            tokens, h, hp = build_sequence("audio_token", v, None, 1, rec, bank=bank,
                                           pooled_audio=pooled_a, pooled_visual=pooled_v)
            p, _ = recognizer_forward(rec, tokens)
            return base_loss(p, y)

        params = [p for p in list(rec.parameters()) + list(bank.parameters())
                  if p.requires_grad]
        checked = 0
        for param in params:
            for q in params:
                q.grad = None
            full_loss().backward()
            grad = (param.grad if param.grad is not None
                    else torch.zeros_like(param)).view(-1)
            flat = param.detach().clone().view(-1)
            idx = rng.choice(flat.numel(), size=min(2, flat.numel()), replace=False)
            for i in idx:
                i = int(i)
                step = 1e-5
                backup = flat[i].item()
                with torch.no_grad():
                    param.view(-1)[i] = backup + step
                up = float(full_loss())
                with torch.no_grad():
                    param.view(-1)[i] = backup - step
                down = float(full_loss())
                with torch.no_grad():
                    param.view(-1)[i] = backup
                fd = (up - down) / (2 * step)
                a = float(grad[i])
                err = abs(a - fd)
                assert err <= 1e-7 or err / max(abs(a), abs(fd)) <= 1e-4, \
                    f"{a} vs {fd}"
                checked += 1
        assert checked >= 40

    def test_class_token_convexity_after_training_step(self):
        # h' stays a softmax output after an update, so z_cls stays in the hull
        rec, bank = make_rec(n=2), make_bank()
        opt = torch.optim.SGD(list(rec.parameters()) + list(bank.parameters()),
                              lr=0.1, momentum=0.9)
        for _ in range(5):
            opt.zero_grad()
            tokens, h, hp = build_sequence(
                "audio_token", torch.randn(3, 2, 6), None, 0, rec, bank=bank,
                pooled_audio=torch.randn(3, 6), pooled_visual=torch.randn(3, 6))
            p, _ = recognizer_forward(rec, tokens)
            base_loss(p, np.array([0, 1, 2])).backward()
            opt.step()
        z, h, hp = bank(torch.randn(4, 6), torch.randn(4, 6))
        assert torch.allclose(hp.sum(dim=1), torch.ones(4), atol=1e-6)
        assert (hp >= 0).all()
        assert float(z.norm(dim=1).max()) <= float(bank.vectors.norm(dim=1).max()) + 1e-6
