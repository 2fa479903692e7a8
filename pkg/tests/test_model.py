import math

import pytest
import torch

from cad.model import (CrossAttention, ModelConfig, Projector, ablation_forward, alignment_kl_loss, build_model,
                       check_flags, cross_attention, negative_cosine, simsiam_distillation_loss, total_loss)

from conftest import toy_batch, toy_model_config


# alignment KL ------------------------------------------------------------


def test_kl_worked_example():
    p, q = torch.tensor([1.0, 0.0], dtype=torch.float64), torch.tensor([0.0, 1.0], dtype=torch.float64)
    assert alignment_kl_loss(p, q).item() == pytest.approx(0.4621, abs=1e-4)
    assert alignment_kl_loss(p, p).item() == 0.0


def test_kl_properties_on_random_inputs():
    g = torch.Generator().manual_seed(0)
    for _ in range(200):
        a = torch.randn(3, 5, 7, generator=g, dtype=torch.float64) * 3
        b = torch.randn(3, 5, 7, generator=g, dtype=torch.float64) * 3
        c = torch.randn((), generator=g, dtype=torch.float64) * 10
        kl = alignment_kl_loss(a, b).item()
        assert kl >= 0.0
        assert alignment_kl_loss(a, a).item() == 0.0
        assert abs(alignment_kl_loss(a + c, b + c).item() - kl) <= 1e-9


def test_kl_variants():
    g = torch.Generator().manual_seed(1)
    a, b = torch.randn(2, 4, 6, generator=g), torch.randn(2, 4, 6, generator=g)
    for axis in ("feature", "token"):
        for gran in ("pooled", "token"):
            assert alignment_kl_loss(a, b, axis, gran).item() >= 0
    sym = alignment_kl_loss(a, b, symmetric=True)
    assert sym == pytest.approx(0.5 * (alignment_kl_loss(a, b) + alignment_kl_loss(b, a)).item())
    with pytest.raises(ValueError, match="shape"):
        alignment_kl_loss(a, b[:, :3])


# distillation -------------------------------------------------------------


def _t(*v):
    return torch.tensor(v, dtype=torch.float64)


def test_simsiam_worked_examples():
    ident = lambda x: x  # noqa: E731
    x_v, x_a = _t(1.0, 2.0), _t(3.0, -1.0)
    # z_a == x_v and z_v == x_a
    swap = simsiam_distillation_loss(x_v, x_a, lambda _: 2 * x_a, lambda _: 0.5 * x_v)
    assert swap.item() == pytest.approx(-1.0)
    # with identity projectors z_a = x_a and z_v = x_v
    assert simsiam_distillation_loss(_t(1.0, 0.0), _t(0.0, 1.0), ident, ident).item() == pytest.approx(0.0)
    fixed = {"v": _t(1.0, 0.0), "a": _t(1.0, 1.0)}
    proj_a = lambda x: fixed["a"]  # noqa: E731
    proj_v = lambda x: fixed["v"]  # noqa: E731
    val = simsiam_distillation_loss(_t(1.0, 0.0), _t(0.0, 1.0), proj_v, proj_a).item()
    assert round(val, 4) == -0.3536


def test_negative_cosine_bounds_and_zero_vector():
    g = torch.Generator().manual_seed(2)
    for _ in range(50):
        a, b = torch.randn(4, 8, generator=g), torch.randn(4, 8, generator=g)
        d = negative_cosine(a, b)
        assert ((d >= -1 - 1e-6) & (d <= 1 + 1e-6)).all()
    with pytest.raises(ZeroDivisionError, match="target"):
        negative_cosine(torch.ones(3), torch.zeros(3), "online", "target")


def test_stopgrad_blocks_target_side():
    torch.manual_seed(0)
    pv, pa = Projector(8, batch_norm=False), Projector(8, batch_norm=False)
    x_v = torch.randn(4, 8, requires_grad=True)
    x_a = torch.randn(4, 8, requires_grad=True)
    # Dist1 alone: video embedding is the target, audio projection the online side
    d1 = negative_cosine(pa(x_a), x_v.detach()).mean()
    d1.backward()
    assert x_v.grad is None
    assert all(p.grad is None for p in pv.parameters())
    assert x_a.grad.norm() > 0
    loss = simsiam_distillation_loss(x_v, x_a, pv, pa, stopgrad="projection")
    x_v.grad = x_a.grad = None
    for p in list(pv.parameters()) + list(pa.parameters()):
        p.grad = None
    loss.backward()
    assert all(p.grad is None for p in list(pv.parameters()) + list(pa.parameters()))


def test_kd_is_symmetric_in_roles():
    ident = lambda x: 2 * x  # noqa: E731
    g = torch.Generator().manual_seed(3)
    a, b = torch.randn(5, 6, generator=g), torch.randn(5, 6, generator=g)
    assert simsiam_distillation_loss(a, b, ident, ident).item() == pytest.approx(
        simsiam_distillation_loss(b, a, ident, ident).item(), abs=1e-6)


# attention -----------------------------------------------------------------


def test_attention_single_token():
    q, kv = torch.randn(1, 4), torch.randn(1, 4)
    eye = torch.eye(4)
    out, w = cross_attention(q, kv, eye, eye, eye)
    assert w.tolist() == [[1.0]]
    assert torch.allclose(out, kv)


def test_attention_identical_keys_gives_uniform_rows():
    q = torch.randn(5, 3)
    kv = torch.ones(5, 3)
    _, w = cross_attention(q, kv, torch.eye(3), torch.eye(3), torch.eye(3))
    assert torch.allclose(w, torch.full((5, 5), 0.2))


def test_attention_hand_example():
    q = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    kv = torch.tensor([[1.0, 1.0], [2.0, 0.0]], dtype=torch.float64)
    eye = torch.eye(2, dtype=torch.float64)
    out, w = cross_attention(q, kv, eye, eye, eye)
    r = 1 / math.sqrt(2)
    rows = [[1 * r, 2 * r], [1 * r, 0.0]]
    expect_w = [[math.exp(a) / (math.exp(rows[i][0]) + math.exp(rows[i][1])) for a in rows[i]] for i in range(2)]
    expect_out = [[ew[0] * 1 + ew[1] * 2, ew[0] * 1 + ew[1] * 0] for ew in expect_w]
    assert torch.allclose(w, torch.tensor(expect_w, dtype=torch.float64), atol=1e-12)
    assert torch.allclose(out, torch.tensor(expect_out, dtype=torch.float64), atol=1e-12)


def test_attention_scale_matters():
    g = torch.Generator().manual_seed(4)
    q, kv = torch.randn(4, 9, generator=g), torch.randn(4, 9, generator=g)
    eye = torch.eye(9)
    a, _ = cross_attention(q, kv, eye, eye, eye, scaled=True)
    b, _ = cross_attention(q, kv, eye, eye, eye, scaled=False)
    assert not torch.allclose(a, b)


def test_attention_dim_mismatch():
    with pytest.raises(ValueError):
        cross_attention(torch.randn(2, 3), torch.randn(2, 4), torch.eye(3), torch.eye(3), torch.eye(3))


def test_module_rows_are_stochastic():
    torch.manual_seed(0)
    attn = CrossAttention(8, 6)
    _, w = attn(torch.randn(3, 6, 8), torch.randn(3, 6, 8))
    assert torch.allclose(w.sum(-1), torch.ones(3, 6), atol=1e-6)
    with torch.no_grad():
        attn.slope.zero_()
    _, w = attn(torch.randn(6, 8), torch.ones(6, 8))
    assert torch.allclose(w, torch.full((6, 6), 1 / 6), atol=1e-6)


# full model -------------------------------------------------------------


def test_forward_shapes(toy_model):
    frames, wave, _ = toy_batch(3)
    out = toy_model(frames, wave)
    assert out.logit.shape == (3,) and out.embedding.shape == (3, 64)
    assert out.shared.attention_v2a.shape == (3, 4, 4)
    assert torch.allclose(out.shared.attention_a2v.sum(-1), torch.ones(3, 4), atol=1e-6)
    toy_model.eval()
    again = toy_model(frames, wave)
    assert torch.equal(again.logit, toy_model(frames, wave).logit)


def test_default_embedding_is_4d():
    model = build_model(ModelConfig())
    assert model.head[1].in_features == 4 * 64


def test_loss_bundle_total(toy_model):
    frames, wave, labels = toy_batch(4)
    total, b = toy_model.loss(toy_model(frames, wave), labels)
    assert abs(b.total - (b.l_cls + b.lambda_kl * b.l_kl + b.lambda_kd * b.l_kd)) <= 1e-6
    assert b.l_cls >= 0 and b.l_kl >= 0 and -1 <= b.l_kd <= 1
    with pytest.raises(ValueError, match="empty"):
        toy_model.loss(toy_model(frames, wave), labels[:0])


def test_zero_weights_leave_classification_only():
    model = build_model(toy_model_config(lambda_kl=0.0, lambda_kd=0.0))
    frames, wave, labels = toy_batch(4)
    total, b = total_loss(model, frames, wave, labels)
    assert total.item() == pytest.approx(b.l_cls, abs=1e-7)


def test_flags():
    with pytest.raises(ValueError, match="unknown"):
        check_flags(["no_everything"])
    with pytest.raises(ValueError, match="video_only"):
        check_flags(["video_only", "no_alignment"])
    with pytest.raises(ValueError):
        check_flags(["no_distillation", "kd_as_kl"])
    with pytest.raises(ValueError):
        ModelConfig(path_dropout=1.0)
    with pytest.raises(ValueError, match="head_dropout"):
        ModelConfig(head_dropout=-0.1)
    with pytest.raises(ValueError, match="shared_grid"):
        ModelConfig(shared_grid=0)


@pytest.mark.parametrize("grid", [1, 2, 4])
def test_shared_grid_sets_token_input_width(grid):
    model = build_model(toy_model_config(shared_grid=grid))
    assert model.encoders.shared_video.proj.in_features == 4 * grid * grid
    assert model(*toy_batch(2)[:2]).video_tokens.shape == (2, 4, 16)


def test_ablation_forward_matches_flags(toy_model):
    toy_model.eval()
    frames, wave, labels = toy_batch(4)
    base, b0 = total_loss(toy_model, frames, wave, labels)
    same, b1 = ablation_forward(toy_model, frames, wave, labels, [])
    assert base.item() == same.item()
    _, b = ablation_forward(toy_model, frames, wave, labels, ["no_alignment"])
    assert b.l_kl == 0.0
    _, b = ablation_forward(toy_model, frames, wave, labels, ["no_distillation"])
    assert b.l_kd == 0.0
    _, b = ablation_forward(toy_model, frames, wave, labels, ["video_only"])
    assert b.l_kl == 0.0 and b.l_kd == 0.0
    _, b = ablation_forward(toy_model, frames, wave, labels, ["kd_as_kl"])
    assert b.l_kd >= 0.0
    assert toy_model.flags == frozenset() and toy_model.shared_frozen


def test_no_cross_attention_uses_identity(toy_model):
    model = build_model(toy_model_config(flags=["no_cross_attention"]))
    out = model(*toy_batch(2)[:2])
    assert torch.equal(out.shared.attention_v2a[0], torch.eye(4))


def test_video_only_ignores_audio():
    model = build_model(toy_model_config(flags=["video_only"]))
    model.eval()
    frames, wave, _ = toy_batch(2)
    a = model(frames, wave).logit
    b = model(frames, torch.zeros_like(wave)).logit
    assert torch.equal(a, b)


def test_no_frozen_trains_shared():
    model = build_model(toy_model_config(flags=["no_frozen"]))
    assert not model.parameter_groups()["frozen"]
    frames, wave, labels = toy_batch(2)
    total, _ = total_loss(model, frames, wave, labels)
    total.backward()
    assert model.encoders.shared_video.proj.weight.grad.norm() > 0


def test_frozen_params_get_no_gradient(toy_model):
    frames, wave, labels = toy_batch(2)
    total, _ = total_loss(toy_model, frames, wave, labels)
    total.backward()
    for name, p in toy_model.encoders.shared_parameters():
        assert p.grad is None, name
    assert all(p.grad is not None for p in toy_model.trainable_parameters())


def test_path_dropout_only_in_training():
    model = build_model(toy_model_config(path_dropout=0.5))
    frames, wave, _ = toy_batch(4)
    model.eval()
    e1 = model(frames, wave).logit
    assert torch.equal(e1, model(frames, wave).logit)
    model.train()
    torch.manual_seed(0)
    a = model(frames, wave).logit
    torch.manual_seed(1)
    b = model(frames, wave).logit
    assert not torch.equal(a, b)


def _fd_model():
    cfg = toy_model_config(dim=8, video_channels=2, audio_hidden=8, n_bins=16, n_bands=4)
    model = build_model(cfg, seed=0).double()
    model.eval()
    g = torch.Generator().manual_seed(7)
    with torch.no_grad():
        for m in model.encoders.shared_audio.lora_modules():
            m.lora_B.copy_(0.3 * torch.randn(m.lora_B.shape, generator=g, dtype=torch.float64))
    return model


def test_total_loss_gradient_matches_finite_differences():
    model = _fd_model()
    frames, wave, labels = toy_batch(2, seed=3, dtype=torch.float64)
    frames = frames[:, :, :8, :8]
    out = model(frames, wave)
    targets = model.stopgrad_targets(out)

    def f():
        total, _ = model.loss(model(frames, wave), labels, targets)
        return total

    model.zero_grad(set_to_none=True)
    f().backward()
    h = 1e-4
    worst = 0.0
    n = 0
    with torch.no_grad():
        for p in model.trainable_parameters():
            flat, grad = p.view(-1), p.grad.reshape(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = f().item()
                flat[i] = old - h
                down = f().item()
                flat[i] = old
                fd = (up - down) / (2 * h)
                an = grad[i].item()
                rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
                worst = max(worst, rel)
                n += 1
    assert n > 1000
    assert worst <= 1e-3, worst
