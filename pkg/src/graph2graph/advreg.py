"""Adversarial scaffold regularization: soft tree decoding, tree representations, WGAN-GP."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .tensorcore import Dense, NumericError, ParamStore
from .treedec import Mode, Plan, TreeDecoder, Unroll, straight_through

__all__ = [
    "Discriminator",
    "straight_through",
    "soft_decode",
    "real_tree_repr",
    "gradient_penalty",
    "wgan_gp_round",
]


class Discriminator(nn.Module):
    """Three dense layers with LeakyReLU(0.2) between them and a scalar output."""

    def __init__(self, n_in: int, hidden: int = 300, slope: float = 0.2):
        super().__init__()
        self.slope = slope
        self.l1 = Dense(n_in, hidden, bias=True)
        self.l2 = Dense(hidden, hidden, bias=True)
        self.l3 = Dense(hidden, 1, bias=True)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        h = F.leaky_relu(self.l1(h), self.slope)
        h = F.leaky_relu(self.l2(h), self.slope)
        return self.l3(h).squeeze(-1)


def _reprs(run: Unroll) -> torch.Tensor:
    return torch.stack([run.tree_repr(b) for b in range(len(run.trees))])


def soft_decode(decoder: TreeDecoder, source, max_nodes: int, plans: list[Plan] | None = None) -> tuple[torch.Tensor, Unroll]:
    """Unroll with label distributions as inputs and gated messages; returns h_T per item.

    With ``plans`` the labels and decisions follow the plans (as one-hot rows),
    which reduces the gated messages to the teacher-forced ones.
    """
    run = decoder.unroll(source, Mode.SOFT, plans, max_nodes=max_nodes)
    return _reprs(run), run


def _dummy_source(decoder: TreeDecoder, batch: int, dtype):
    h = decoder.hidden
    x = torch.zeros(batch, 1, h, dtype=dtype)
    m = torch.ones(batch, 1, dtype=torch.bool)
    return x, m, x, m


def real_tree_repr(decoder: TreeDecoder, plans: list[Plan], source=None) -> tuple[torch.Tensor, Unroll]:
    """Teacher-forced h_T = [one-hot root label, sum of messages into the root].

    Messages never read the source; it only feeds the (unused) predictions, so a
    zero placeholder is used when none is given.
    """
    if source is None:
        source = _dummy_source(decoder, len(plans), torch.get_default_dtype())
    run = decoder.unroll(source, Mode.TEACHER, plans)
    return _reprs(run), run


def gradient_penalty(disc: nn.Module, real: torch.Tensor, fake: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """mean over the batch of (||grad D(eps*real + (1-eps)*fake)|| - 1)^2."""
    mix = (eps.unsqueeze(-1) * real + (1.0 - eps.unsqueeze(-1)) * fake).detach().requires_grad_(True)
    out = disc(mix)
    (grad,) = torch.autograd.grad(out.sum(), mix, create_graph=True)
    return ((grad.norm(dim=-1) - 1.0) ** 2).mean()


def _fake_source(model, batch, gen: torch.Generator):
    from .vjtnn import encode_batch, perturb_source

    enc = encode_batch(model, [p.x for p in batch])
    xt, mt, xg, mg = enc.padded()
    z = model.cfg.latent_dim
    zt = torch.randn(len(batch), z, generator=gen, dtype=xt.dtype)
    zg = torch.randn(len(batch), z, generator=gen, dtype=xt.dtype)
    return perturb_source(model, xt, mt, xg, mg, zt, zg)


def wgan_gp_round(model, disc: nn.Module, disc_store: ParamStore, batch, cfg, gen: torch.Generator) -> dict:
    """``disc_iters`` critic updates, then the generator's adversarial loss (not yet stepped).

    The critic minimises mean(-D(h) + D(h^)) + beta * GP. The returned
    ``gen_loss`` is mean(D(h) - D(h^)) with the real side held fixed; the
    caller adds it to the reconstruction objective and steps the generator.
    """
    decoder = model.decoder.tree
    plans = [p.y.plan() for p in batch]
    with torch.no_grad():
        real, _ = real_tree_repr(decoder, plans)
    gap = gp = d_loss = None
    for _ in range(cfg.disc_iters):
        with torch.no_grad():
            fake, _ = soft_decode(decoder, _fake_source(model, batch, gen), cfg.max_nodes)
        eps = torch.rand(len(batch), generator=gen, dtype=real.dtype)
        d_real = disc(real)
        d_fake = disc(fake)
        gp = gradient_penalty(disc, real, fake, eps)
        d_loss = (-d_real + d_fake).mean() + cfg.gp_weight * gp
        if not torch.isfinite(d_loss):
            raise NumericError(f"non-finite critic loss (penalty {float(gp)})")
        disc_store.zero_grad()
        d_loss.backward()
        disc_store.step()
        gap = (d_real - d_fake).mean().item()
    fake, run = soft_decode(decoder, _fake_source(model, batch, gen), cfg.max_nodes)
    for p in disc.parameters():
        p.requires_grad_(False)
    try:
        gen_loss = (disc(real) - disc(fake)).mean()
    finally:
        for p in disc.parameters():
            p.requires_grad_(True)
    return {
        "gen_loss": gen_loss,
        "disc_loss": d_loss.item(),
        "gp": gp.item(),
        "gap": gap,
        "fake_nodes": sum(len(t.labels) for t in run.trees) / len(run.trees),
    }
