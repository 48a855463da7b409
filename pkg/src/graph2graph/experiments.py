"""Desk-scale experiments shared by the scripts and the acceptance suite."""

from __future__ import annotations

import logging
import math
import random
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .config import RunConfig
from .evalkit import (
    EvalReport,
    ImprovementRule,
    PropertyOracle,
    ReportEntry,
    build_entry,
    curate_pairs,
    evaluate,
    score_report,
)
from .junctree import build_vocab
from .molgraph import check_valence, parse_smiles
from .toydata import generate_families
from .tensorcore import ParamStore
from .vjtnn import Preparer, compatibility, train, translate

log = logging.getLogger(__name__)

TOY_CONFIG = RunConfig(
    hidden_dim=300,
    latent_dim=8,
    epochs=20,
    batch_size=32,
    lr=1e-3,
    max_nodes=20,
    K=20,
    delta=0.3,
)


@dataclass
class ToySplit:
    corpus: list[str]
    train_pairs: list[tuple[str, str]]
    test: list[str]


def toy_split(n_families: int = 120, seed: int = 1, n_test: int = 40, delta: float = 0.3) -> ToySplit:
    """Generated corpus, held-out test sources, and ring-adding training pairs without them."""
    corpus = generate_families(n_families, seed=seed)
    oracle = PropertyOracle("ring_count")
    rule = ImprovementRule(1.0)
    candidates = sorted({x for x, _ in curate_pairs(corpus, oracle, delta, rule)})
    rng = random.Random(seed)
    test = sorted(rng.sample(candidates, min(n_test, len(candidates))))
    pairs = curate_pairs(corpus, oracle, delta, rule, exclude=test)
    return ToySplit(corpus, pairs, test)


@dataclass
class ToyResult:
    metrics: EvalReport
    entries: list[ReportEntry]
    invalid: int
    seconds: float
    n_pairs: int
    history: list[dict] = field(default_factory=list)


def run_toy(cfg: RunConfig = TOY_CONFIG, split: ToySplit | None = None, out_dir: str | Path | None = None, verbose: bool = False) -> ToyResult:
    """Train on the toy ring-adding task and evaluate success at K samples per test source."""
    t0 = time.time()
    torch.set_num_threads(1)
    split = split or toy_split(delta=cfg.delta)
    vocab = build_vocab(parse_smiles(s) for s in split.corpus)
    prep = Preparer(vocab)
    pairs = prep.pairs(split.train_pairs)

    def report(epoch, step, stats):
        if verbose and step % 20 == 0:
            print(f"epoch {epoch} step {step} " + " ".join(f"{k}={v:.3f}" for k, v in stats.items() if isinstance(v, float)), flush=True)

    result = train(pairs, vocab, cfg, out_dir=out_dir, callback=report)
    model = result.model
    allowed = compatibility(vocab)
    gen = torch.Generator().manual_seed(cfg.seed)
    entries = []
    invalid = 0
    for src in split.test:
        cands = translate(model, vocab, src, cfg.K, gen, allowed)
        for c in cands:
            if c is not None and check_valence(parse_smiles(c)):
                invalid += 1
        entries.append(build_entry(src, cands))
    score_report(entries, PropertyOracle("ring_count"))
    metrics = evaluate(entries, cfg.delta, ImprovementRule(1.0), [y for _, y in split.train_pairs])
    return ToyResult(metrics, entries, invalid, time.time() - t0, len(pairs), result.history)


# -- gradient check --------------------------------------------------------------


@dataclass
class GradCheck:
    n_scalars: int
    worst: float
    worst_param: str
    failures: list[tuple[str, int, float, float]]
    seconds: float


def gradient_check(
    pairs: list[tuple[str, str]],
    hidden: int = 3,
    latent: int = 2,
    step: float = 1e-5,
    tol: float = 1e-3,
    floor: float = 1e-6,
    seed: int = 0,
) -> GradCheck:
    """Central differences against autograd for every scalar of every parameter.

    Runs in 64-bit. The noise draw is replayed from ``seed`` at each evaluation
    so the loss is a deterministic function of the weights. Relative error uses
    ``max(|analytic|, |numeric|, floor)`` as the denominator.
    """
    from .tensorcore import float64_mode
    from .vjtnn import build_model, vae_loss

    t0 = time.time()
    torch.set_num_threads(1)
    with float64_mode():
        vocab = build_vocab(parse_smiles(s) for p in pairs for s in p)
        cfg = RunConfig(hidden_dim=hidden, latent_dim=latent, tree_iters=2, graph_iters=2, assm_iters=2, seed=seed)
        model = build_model(len(vocab), cfg)
        batch = Preparer(vocab).pairs(pairs)

        def loss() -> torch.Tensor:
            return vae_loss(model, batch, vocab, torch.Generator().manual_seed(seed))["loss"]

        model.zero_grad()
        loss().backward()
        worst, worst_param, failures, n = 0.0, "", [], 0
        with torch.no_grad():
            for name, p in model.named_parameters():
                flat = p.data.view(-1)
                grad = p.grad.view(-1)
                for i in range(flat.numel()):
                    old = flat[i].item()
                    flat[i] = old + step
                    up = loss().item()
                    flat[i] = old - step
                    down = loss().item()
                    flat[i] = old
                    numeric = (up - down) / (2 * step)
                    analytic = grad[i].item()
                    err = abs(numeric - analytic) / max(abs(numeric), abs(analytic), floor)
                    n += 1
                    if err > worst:
                        worst, worst_param = err, f"{name}[{i}]"
                    if err > tol:
                        failures.append((name, i, analytic, numeric))
    return GradCheck(n, worst, worst_param, failures, time.time() - t0)


# -- adversarial rounds ----------------------------------------------------------


@dataclass
class AdversarialResult:
    gaps: list[float]
    disc_losses: list[float]
    gen_losses: list[float]
    finite: bool
    seconds: float

    @property
    def shrink(self) -> float:
        """Relative reduction of the real/fake gap: round 1 against the mean of the last ten rounds."""
        tail = self.gaps[-10:]
        return 1.0 - (sum(tail) / len(tail)) / self.gaps[0]


def adversarial_rounds(
    cfg: RunConfig,
    split: ToySplit | None = None,
    rounds: int = 100,
    pretrain_epochs: int = 2,
    critic_warmup: int = 0,
) -> AdversarialResult:
    """Pretrain the translation model briefly, then run ``rounds`` critic/generator rounds.

    ``critic_warmup`` batches train only the critic first, so that round 1
    measures a converged critic rather than a random one.
    """
    from .advreg import Discriminator, wgan_gp_round

    t0 = time.time()
    torch.set_num_threads(1)
    split = split or toy_split(delta=cfg.delta)
    vocab = build_vocab(parse_smiles(s) for s in split.corpus)
    pairs = Preparer(vocab).pairs(split.train_pairs)
    model = None
    if pretrain_epochs > 0:
        model = train(pairs, vocab, cfg.replace(epochs=pretrain_epochs, gan_start_epoch=-1)).model
    torch.manual_seed(cfg.seed + 1)
    disc = Discriminator(len(vocab) + cfg.hidden_dim, cfg.disc_hidden)
    disc_store = ParamStore(disc, lr=cfg.disc_lr, decay=1.0, betas=(0.5, 0.9))
    if critic_warmup and model is not None:
        rng = random.Random(cfg.seed)
        gen = torch.Generator().manual_seed(cfg.seed + 2)
        for _ in range(critic_warmup):
            batch = rng.sample(pairs, min(cfg.batch_size, len(pairs)))
            wgan_gp_round(model, disc, disc_store, batch, cfg, gen)
    adv_cfg = cfg.replace(epochs=rounds, gan_start_epoch=0)
    res = train(pairs, vocab, adv_cfg, model=model, max_steps=rounds, critic=(disc, disc_store))
    hist = res.history
    gaps = [h["gap"] for h in hist]
    disc_losses = [h["disc_loss"] for h in hist]
    gen = [h["loss"] for h in hist]
    finite = all(math.isfinite(v) for v in gaps + disc_losses + gen)
    return AdversarialResult(gaps, disc_losses, gen, finite, time.time() - t0)


# -- overfit ----------------------------------------------------------------------


@dataclass
class OverfitResult:
    steps: int
    loss: float
    exact: int
    seconds: float


def overfit(pairs: list[tuple[str, str]], cfg: RunConfig, max_steps: int = 2000, check_every: int = 10) -> OverfitResult:
    """Full-batch training on a handful of pairs until the loss and exact-match targets are met.

    Every ``check_every`` steps the model is scored with the posterior mean:
    total loss and the number of targets whose teacher-forced tree decoding
    (topology and labels) is entirely correct.
    """
    from .tensorcore import ParamStore
    from .vjtnn import build_model, vae_loss

    t0 = time.time()
    torch.set_num_threads(1)
    vocab = build_vocab(parse_smiles(s) for p in pairs for s in p)
    batch = Preparer(vocab).pairs(pairs)
    model = build_model(len(vocab), cfg)
    store = ParamStore(model, lr=cfg.lr, decay=cfg.lr_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    loss, exact, step = math.inf, 0, 0
    while step < max_steps:
        out = vae_loss(model, batch, vocab, gen)
        store.zero_grad()
        out["loss"].backward()
        store.step()
        step += 1
        if step % check_every == 0:
            with torch.no_grad():
                ev = vae_loss(model, batch, vocab, None, use_mean=True)
            loss, exact = ev["loss"].item(), int(ev["exact"].sum())
            if loss < 0.5 and exact >= len(pairs) - 1:
                break
    return OverfitResult(step, loss, exact, time.time() - t0)
