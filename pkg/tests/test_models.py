import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from alpt.models import (
    PAPER_SCALE,
    DecisionTransformer,
    InverseDynamicsTransformer,
    MaskKind,
    TransformerConfig,
    build_attention_mask,
    dt_loss,
    gradient,
    idm_loss,
    load_checkpoint,
    save_checkpoint,
)

SMALL = TransformerConfig(layers=2, heads=2, hidden=16, context_tokens=20, n_cells=25, grid_width=5)


def randomize(model, seed=0, std=0.3):
    """Give every parameter (including the zeroed heads) non-trivial values."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * std)
    return model


def dt_batch(B=3, C=5, seed=0, n_states=625, A=4):
    rng = np.random.default_rng(seed)
    return (
        torch.as_tensor(rng.integers(n_states, size=(B, C))),
        torch.as_tensor(rng.integers(2, size=(B, C))),
        torch.as_tensor(rng.integers(A, size=(B, C))),
        torch.as_tensor(rng.integers(2, size=(B, C))),
    )


def test_masks():
    assert build_attention_mask("causal", 3).int().tolist() == [[1, 0, 0], [1, 1, 0], [1, 1, 1]]
    assert build_attention_mask(MaskKind.FULL, 3).all() and build_attention_mask("full", 3).numel() == 9
    assert build_attention_mask("causal", 1).int().tolist() == [[1]]
    with pytest.raises(ValueError):
        build_attention_mask("causal", 0)


def test_config_validation_and_presets():
    with pytest.raises(ValueError):
        TransformerConfig(hidden=30, heads=4)
    assert (PAPER_SCALE.layers, PAPER_SCALE.heads, PAPER_SCALE.hidden) == (6, 8, 512)
    assert TransformerConfig().to_dict()["mask_kind"] == "causal"


def test_models_force_their_masks():
    assert InverseDynamicsTransformer(SMALL).config.mask_kind is MaskKind.FULL
    assert DecisionTransformer(replace_kind(SMALL, "full")).config.mask_kind is MaskKind.CAUSAL


def replace_kind(cfg, kind):
    from dataclasses import replace

    return replace(cfg, mask_kind=kind)


def test_idm_forward_shape_and_uniform_at_init():
    idm = InverseDynamicsTransformer(SMALL)
    obs = torch.randint(625, (4, 6))
    logits = idm(obs)
    assert logits.shape == (4, 5, 4)
    probs = logits.softmax(-1)
    torch.testing.assert_close(probs, torch.full_like(probs, 0.25), rtol=0, atol=1e-7)
    with pytest.raises(ValueError):
        idm(torch.randint(625, (6,)))
    with pytest.raises(ValueError):
        idm(torch.randint(625, (2, 21)))


def test_idm_bidirectional_witness():
    idm = randomize(InverseDynamicsTransformer(SMALL))
    obs = torch.randint(625, (1, 6))
    changed = obs.clone()
    changed[0, -1] = (obs[0, -1] + 7) % 625
    assert not torch.equal(idm(obs)[:, 0], idm(changed)[:, 0])


def test_uniform_losses_at_init():
    idm = InverseDynamicsTransformer(SMALL)
    obs = torch.randint(625, (8, 6))
    act = torch.randint(4, (8, 5))
    assert float(idm_loss(idm, obs, act).total.detach()) == pytest.approx(math.log(4), abs=1e-6)
    dt = DecisionTransformer(SMALL)
    r = dt_loss(dt, *dt_batch())
    assert float(r.total) == pytest.approx(math.log(4) + math.log(2), abs=1e-6)
    assert torch.equal(r.total, r.action + r.ret)


def test_idm_loss_large_margin_goes_to_zero():
    idm = InverseDynamicsTransformer(SMALL)
    obs = torch.randint(625, (2, 6))
    act = torch.randint(4, (2, 5))
    with torch.no_grad():
        idm.action_head.bias.zero_()
    # force logits via a huge bias on the true class (same label everywhere)
    act[:] = 2
    with torch.no_grad():
        idm.action_head.bias[2] = 50.0
    assert float(idm_loss(idm, obs, act).total) < 1e-6


def test_idm_loss_matches_log_softmax_oracle():
    idm = randomize(InverseDynamicsTransformer(SMALL), seed=1, std=0.1)
    obs = torch.randint(625, (5, 6))
    act = torch.randint(4, (5, 5))
    logits = idm(obs).double()
    oracle = -(logits - logits.logsumexp(-1, keepdim=True)).gather(-1, act[..., None]).mean()
    assert float(idm_loss(idm, obs, act).total) == pytest.approx(float(oracle), abs=1e-6)


def test_idm_loss_rejects_unlabelled():
    idm = InverseDynamicsTransformer(SMALL)
    act = torch.randint(4, (2, 5))
    act[0, 1] = -1
    with pytest.raises(ValueError):
        idm_loss(idm, torch.randint(625, (2, 6)), act)


def test_dt_loss_matches_cross_entropy_oracle():
    dt = randomize(DecisionTransformer(SMALL), seed=2, std=0.1)
    s, g, a, r = dt_batch(B=4, C=5, seed=3)
    out = dt(s, g, a, r)
    lr = out.return_logits.double().log_softmax(-1)
    la = out.action_logits.double().log_softmax(-1)
    n = s.numel()
    ret = -lr.gather(-1, g[..., None]).sum() / n
    act = -la.gather(-1, a[..., None]).sum() / n
    rep = dt_loss(dt, s, g, a, r)
    assert float(rep.ret) == pytest.approx(float(ret), abs=1e-6)
    assert float(rep.action) == pytest.approx(float(act), abs=1e-6)
    assert float(rep.total) == float(rep.ret + rep.action)


def test_dt_loss_errors_and_masking():
    dt = DecisionTransformer(SMALL)
    s, g, a, r = dt_batch()
    with pytest.raises(ValueError):
        dt_loss(dt, s[:0], g[:0], a[:0], r[:0])
    a2 = a.clone()
    a2[0, 0] = -1
    with pytest.raises(ValueError):
        dt_loss(dt, s, g, a2, r)
    w = torch.ones(a.shape)
    w[0, 0] = 0
    assert torch.isfinite(dt_loss(dt, s, g, a2, r, action_weight=w).total)
    zero = dt_loss(dt, s, g, a2, r, action_weight=torch.zeros(a.shape))
    assert float(zero.action) == 0.0


def test_dt_single_timestep():
    dt = DecisionTransformer(SMALL)
    out = dt(*dt_batch(B=2, C=1))
    assert out.return_logits.shape == (2, 1, 2) and out.action_logits.shape == (2, 1, 4)
    with pytest.raises(ValueError):
        dt(*[t[:, :2] if i else t for i, t in enumerate(dt_batch(B=2, C=3))])


def test_dt_causality_bitwise():
    dt = randomize(DecisionTransformer(SMALL), seed=4).eval()
    base = dt_batch(B=1, C=5, seed=5)
    ref = dt(*base).hidden
    rng = np.random.default_rng(0)
    limits = (625, 2, 4, 2)
    for _ in range(1000):
        p = int(rng.integers(0, 19))  # last position kept fixed
        toks = [t.clone() for t in base]
        for pos in range(p + 1, 20):
            if rng.random() < 0.5:
                t, kind = divmod(pos, 4)
                toks[kind][0, t] = int(rng.integers(limits[kind]))
        out = dt(*toks).hidden
        assert torch.equal(out[:, : p + 1], ref[:, : p + 1])


def test_dt_action_token_influences_only_later_predictions():
    dt = randomize(DecisionTransformer(SMALL), seed=6).eval()
    s, g, a, r = dt_batch(B=1, C=5, seed=7)
    out = dt(s, g, a, r)
    t = 2
    a2 = a.clone()
    a2[0, t] = (a[0, t] + 1) % 4
    out2 = dt(s, g, a2, r)
    assert torch.equal(out.return_logits[:, : t + 1], out2.return_logits[:, : t + 1])
    assert torch.equal(out.action_logits[:, : t + 1], out2.action_logits[:, : t + 1])
    assert not torch.equal(out.action_logits[:, t + 1 :], out2.action_logits[:, t + 1 :])


@given(seed=st.integers(0, 1000))
@settings(max_examples=10, deadline=None)
def test_softmax_rows_normalized(seed):
    dt = randomize(DecisionTransformer(SMALL), seed=seed, std=0.5)
    out = dt(*dt_batch(seed=seed))
    for logits in (out.return_logits, out.action_logits):
        sums = logits.double().softmax(-1).sum(-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)


def test_same_seed_same_parameters():
    a, b = DecisionTransformer(SMALL), DecisionTransformer(SMALL)
    for (n1, p1), (n2, p2) in zip(a.named_parameters(), b.named_parameters()):
        assert n1 == n2 and torch.equal(p1, p2)
    batch = dt_batch()
    assert float(dt_loss(a, *batch).total) == float(dt_loss(b, *batch).total)
    from dataclasses import replace

    c = DecisionTransformer(replace(SMALL, seed=1))
    assert not torch.equal(a.embed_return.weight, c.embed_return.weight)


def test_init_weights_are_truncated_and_heads_zero():
    dt = DecisionTransformer(SMALL)
    assert dt.embed_return.weight.abs().max() <= 0.04
    assert not dt.action_head.weight.any() and not dt.return_head.weight.any()
    assert not dt.backbone.blocks[0].qkv.bias.any()


def _fd_check(model, loss_of, n_coords, seed):
    model = model.double()
    grads = gradient(model, loss_of)
    params = dict(model.named_parameters())
    rng = np.random.default_rng(seed)
    names = list(params)
    checked = set()
    errors = []
    # round-robin over parameter groups so every tensor is sampled
    for j in range(n_coords):
        name = names[j % len(names)]
        p = params[name]
        g = grads[name]
        # relative error is only meaningful away from zero: draw among
        # coordinates with |g| >= 1e-3, where O(h^2) truncation stays small
        nz = torch.nonzero(g.reshape(-1).abs() >= 1e-3).reshape(-1)
        pool = nz if nz.numel() else torch.arange(p.numel())
        idx = int(pool[rng.integers(pool.numel())])
        flat = p.data.view(-1)
        orig = float(flat[idx])
        with torch.no_grad():
            flat[idx] = orig + 1e-3
            up = float(loss_of(model).total)
            flat[idx] = orig - 1e-3
            down = float(loss_of(model).total)
            flat[idx] = orig
        fd = (up - down) / 2e-3
        an = float(g.reshape(-1)[idx])
        errors.append(abs(an - fd) / max(abs(an), abs(fd), 1e-12) if (an or fd) else 0.0)
        checked.add(name)
    return max(errors), checked, names


def test_gradients_match_finite_differences():
    cfg = TransformerConfig(layers=1, heads=2, hidden=8, context_tokens=12, n_cells=25, grid_width=5)
    dt = randomize(DecisionTransformer(cfg), seed=8, std=0.5)
    batch = dt_batch(B=2, C=3, seed=9)
    worst, checked, names = _fd_check(dt, lambda m: dt_loss(m, *batch), 120, seed=0)
    assert checked == set(names)
    assert worst <= 1e-4


def test_gradient_edge_cases():
    idm = randomize(InverseDynamicsTransformer(SMALL), seed=3)
    obs = torch.randint(625, (2, 6))
    act = torch.full((2, 5), -1)
    zero = gradient(idm, lambda m: idm_loss(m, obs, act, weight=torch.zeros(2, 5)))
    assert all(not g.any() for g in zero.values())
    act = torch.randint(4, (2, 5))
    g1 = gradient(idm, lambda m: idm_loss(m, obs, act))
    g2 = gradient(idm, lambda m: idm_loss(m, obs, act).total + 3.0)
    for k in g1:
        assert torch.equal(g1[k], g2[k])
    with pytest.raises(FloatingPointError):
        gradient(idm, lambda m: idm_loss(m, obs, act).total * float("nan"))


def test_gradient_is_deterministic():
    dt = randomize(DecisionTransformer(SMALL), seed=10)
    batch = dt_batch()
    g1 = gradient(dt, lambda m: dt_loss(m, *batch))
    g2 = gradient(dt, lambda m: dt_loss(m, *batch))
    assert all(torch.equal(g1[k], g2[k]) for k in g1)


@pytest.mark.parametrize("cls", [DecisionTransformer, InverseDynamicsTransformer])
def test_checkpoint_round_trip(tmp_path, cls):
    model = randomize(cls(SMALL), seed=11)
    path = save_checkpoint(model, tmp_path / "m.ckpt", step=42, extra={"vocab": ["Up"]})
    loaded, header = load_checkpoint(path)
    assert type(loaded) is cls and header["step"] == 42 and header["extra"]["vocab"] == ["Up"]
    for (n1, p1), (n2, p2) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert n1 == n2 and torch.equal(p1, p2)
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXXXXXX" + path.read_bytes()[8:])
    with pytest.raises(ValueError):
        load_checkpoint(bad)


def test_coordinate_table_options():
    with pytest.raises(ValueError):
        TransformerConfig(coordinates="polar")
    shared = InverseDynamicsTransformer(TransformerConfig(hidden=16, heads=2, layers=1, n_cells=25, grid_width=5))
    names = {n for n, _ in shared.named_parameters()}
    assert "embed.coord.weight" in names and "embed.agent_row.weight" not in names
    assert shared.embed.coord.num_embeddings == 5
    separate = InverseDynamicsTransformer(
        TransformerConfig(hidden=16, heads=2, layers=1, n_cells=25, grid_width=5, coordinates="separate")
    )
    assert "embed.agent_row.weight" in {n for n, _ in separate.named_parameters()}
    # the same coordinate read along different axes gives different features
    shared = randomize(shared)
    coord = shared.embed.coord(torch.tensor([2]))
    assert not torch.allclose(shared.embed.axes["agent_row"](coord), shared.embed.axes["agent_col"](coord))
