import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from graph2graph.tensorcore import (
    MAGIC,
    Attention,
    Dense,
    NumericError,
    ParamStore,
    Schedule,
    TreeGRU,
    check_finite,
    float64_mode,
    glorot,
    masked_softmax,
    read_checkpoint,
    set_debug,
)


def sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def gru_oracle(gru: TreeGRU, f, msgs):
    """Per-node loop over the real inbound messages only."""
    P = {k: v.detach().numpy().astype(np.float64) for k, v in gru.named_parameters()}
    out = []
    for fi, mi in zip(f, msgs):
        s = sum(mi, np.zeros(gru.hidden))
        z = sig(P["Wz"] @ fi + P["Uz"] @ s + P["bz"])
        gated = np.zeros(gru.hidden)
        for m in mi:
            r = sig(P["Wr"] @ fi + P["Ur"] @ m + P["br"])
            gated += r * m
        h = np.tanh(P["W"] @ fi + P["U"] @ gated + P["b"])
        out.append((1 - z) * s + z * h)
    return np.array(out)


def pad(msgs, K, H):
    out = np.zeros((len(msgs), K, H))
    for i, m in enumerate(msgs):
        for k, v in enumerate(m):
            out[i, k] = v
    return out


# -- elementary ops ------------------------------------------------------------


def test_relu_gradient():
    x = torch.tensor([-2.0, 0.5, 3.0], requires_grad=True)
    torch.relu(x).sum().backward()
    assert x.grad.tolist() == [0.0, 1.0, 1.0]


def test_softmax_of_equal_scores_is_uniform():
    p = masked_softmax(torch.zeros(1, 4), None)
    assert torch.allclose(p, torch.full((1, 4), 0.25))


def test_masked_softmax_ignores_masked():
    s = torch.tensor([[1.0, 2.0, 100.0]])
    p = masked_softmax(s, torch.tensor([[True, True, False]]))
    e = np.exp([1.0, 2.0])
    assert p[0, 2] == 0
    assert np.allclose(p[0, :2].numpy(), e / e.sum())


def test_glorot_bounds():
    torch.manual_seed(0)
    w = glorot(30, 50)
    bound = math.sqrt(6 / 80)
    assert w.abs().max() <= bound and w.shape == (30, 50)


def test_dense_has_no_bias_by_default():
    d = Dense(3, 2)
    assert d.b is None
    assert torch.equal(d(torch.zeros(1, 3)), torch.zeros(1, 2))
    assert torch.equal(Dense(3, 2, bias=True).b, torch.zeros(2))


def test_finite_differences_three_layer_net():
    with float64_mode():
        torch.manual_seed(1)
        net = torch.nn.Sequential(Dense(4, 5, bias=True), torch.nn.Tanh(), Dense(5, 5, bias=True), torch.nn.Tanh(), Dense(5, 1))
        x = torch.randn(3, 4)

        def f():
            return net(x).pow(2).sum()

        f().backward()
        for p in net.parameters():
            flat = p.data.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + 1e-6
                up = f().item()
                flat[i] = old - 1e-6
                dn = f().item()
                flat[i] = old
                fd = (up - dn) / 2e-6
                assert abs(fd - p.grad.view(-1)[i].item()) <= 1e-6 * max(1.0, abs(fd))


def test_debug_mode_raises_on_nan():
    set_debug(True)
    try:
        with pytest.raises(NumericError):
            check_finite(torch.tensor([float("nan")]), "x")
    finally:
        set_debug(False)
    check_finite(torch.tensor([float("nan")]))


# -- tree GRU ----------------------------------------------------------------------


def test_gru_no_messages_oracle():
    torch.manual_seed(0)
    gru = TreeGRU(3, 4)
    f = torch.randn(2, 3)
    out = gru(f, torch.zeros(2, 1, 4))
    P = {k: v.detach().numpy() for k, v in gru.named_parameters()}
    fn = f.numpy()
    expect = sig(fn @ P["Wz"].T) * np.tanh(fn @ P["W"].T)
    assert np.allclose(out.detach().numpy(), expect, atol=1e-6)


def test_gru_matches_loop_oracle():
    with float64_mode():
        torch.manual_seed(2)
        gru = TreeGRU(3, 4)
        rng = np.random.default_rng(0)
        msgs = [[rng.normal(size=4) for _ in range(k)] for k in (0, 1, 3)]
        f = rng.normal(size=(3, 3))
        got = gru(torch.tensor(f), torch.tensor(pad(msgs, 4, 4))).detach().numpy()
        assert np.allclose(got, gru_oracle(gru, f, msgs), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(perm=st.permutations(range(4)), extra=st.integers(0, 3))
def test_gru_set_function(perm, extra):
    """Order of inbound messages and extra zero padding do not matter."""
    with float64_mode():
        torch.manual_seed(3)
        gru = TreeGRU(2, 3)
        f = torch.randn(1, 2)
        h = torch.randn(1, 4, 3)
        base = gru(f, h)
        shuffled = h[:, list(perm)]
        padded = torch.cat([shuffled, torch.zeros(1, extra, 3)], dim=1)
        assert torch.allclose(gru(f, padded), base, atol=1e-12)


def test_gru_width_mismatch():
    with pytest.raises(ValueError):
        TreeGRU(2, 3)(torch.zeros(1, 2), torch.zeros(1, 1, 4))


# -- attention ------------------------------------------------------------------------


def test_attention_oracle():
    with float64_mode():
        torch.manual_seed(4)
        att = Attention(3, 2)
        h = torch.randn(1, 3)
        xt = torch.randn(1, 4, 2)
        xg = torch.randn(1, 5, 2)
        mt = torch.tensor([[True, True, True, False]])
        mg = torch.ones(1, 5, dtype=torch.bool)
        ctx, at, ag = att(h, xt, xg, mt, mg)
        A_T, A_G = att.A_T.detach().numpy(), att.A_G.detach().numpy()
        hn, xtn, xgn = h[0].numpy(), xt[0].numpy(), xg[0].numpy()

        def soft(xs, A):
            s = np.array([hn @ A @ x for x in xs])
            e = np.exp(s - s.max())
            return e / e.sum()

        wt = soft(xtn[:3], A_T)
        wg = soft(xgn, A_G)
        expect = np.concatenate([wt @ xtn[:3], wg @ xgn])
        assert np.allclose(ctx[0].detach().numpy(), expect, atol=1e-12)
        assert at[0, 3] == 0 and abs(at.sum().item() - 1) < 1e-12


def test_attention_single_source_is_identity():
    att = Attention(2, 3)
    x = torch.randn(1, 1, 3)
    ctx, _, _ = att(torch.randn(1, 2), x, x)
    assert torch.allclose(ctx, torch.cat([x[0], x[0]], dim=-1))


def test_attention_empty_source_rejected():
    att = Attention(2, 3)
    with pytest.raises(ValueError):
        att(torch.randn(1, 2), torch.zeros(1, 0, 3), torch.zeros(1, 1, 3))


# -- optimizer and checkpoints ------------------------------------------------------------


class Tiny(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.a = Dense(3, 2, bias=True)
        self.gru = TreeGRU(2, 2)


def test_schedule():
    assert Schedule(1e-3, 0.9).at(0) == 1e-3
    assert abs(Schedule(1e-3, 0.9).at(3) - 0.000729) < 1e-15


def test_adam_first_step():
    """First Adam step moves each weight by lr * g / (|g| + eps)."""
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0]))
    mod = torch.nn.Module()
    mod.p = p
    store = ParamStore(mod, lr=0.1)
    p.grad = torch.tensor([0.5, -4.0])
    store.step()
    g = np.array([0.5, -4.0])
    expect = np.array([1.0, -2.0]) - 0.1 * g / (np.abs(g) + 1e-8)
    assert np.allclose(p.detach().numpy(), expect, atol=1e-7)


def test_lr_decays_each_epoch():
    store = ParamStore(Tiny(), lr=1e-3, decay=0.9)
    for _ in range(3):
        store.end_epoch()
    assert abs(store.lr - 0.000729) < 1e-12 and store.epoch == 3


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    a = Tiny()
    store = ParamStore(a)
    loss = a.gru(a.a(torch.randn(2, 3)), torch.randn(2, 2, 2)).sum()
    loss.backward()
    store.step()
    store.end_epoch()
    path = tmp_path / "x.vjtnn"
    store.save(path)
    assert path.read_bytes().startswith(MAGIC)
    tensors, epoch, lr = read_checkpoint(path)
    assert epoch == 1 and abs(lr - 9e-4) < 1e-15
    assert {"a.W", "a.b", "gru.Wz", "a.W@m", "a.W@v", "a.W@step"} <= set(tensors)

    torch.manual_seed(9)
    b = Tiny()
    other = ParamStore(b)
    other.load(path)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), n
    assert other.to_bytes() == store.to_bytes()
    assert other.epoch == 1 and other.lr == store.lr


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"nope")
    with pytest.raises(ValueError):
        read_checkpoint(p)


def test_checkpoint_shape_mismatch(tmp_path):
    store = ParamStore(Tiny())
    store.save(tmp_path / "c")
    other = torch.nn.Module()
    other.a = Dense(4, 2, bias=True)
    other.gru = TreeGRU(2, 2)
    with pytest.raises(ValueError):
        ParamStore(other).load(tmp_path / "c")
