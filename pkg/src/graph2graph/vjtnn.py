"""Variational junction-tree translation: posterior over difference vectors, training, decoding."""

from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import torch
from torch import nn

from .config import RunConfig
from .encoder import Encoder, GraphSpec, TreeSpec, collate_graphs, collate_trees, pad_segments
from .graphdec import GraphDecoder, ScoringStep, assemble_greedy, assembly_loss, candidate_spec
from .junctree import ClusterVocab, JunctionTree, decompose, ground_truth_steps
from .molgraph import Molecule, parse_smiles, write_smiles
from .tensorcore import Dense, NumericError, ParamStore
from .treedec import Mode, Plan, TreeDecoder, stand_in_tree, teacher_terms

log = logging.getLogger(__name__)


class Posterior(nn.Module):
    """Affine mean and log-variance heads shared by the tree and graph codes."""

    def __init__(self, hidden: int, latent: int):
        super().__init__()
        self.mu = Dense(hidden, latent, bias=True)
        self.logvar = Dense(hidden, latent, bias=True)

    def forward(self, delta: torch.Tensor):
        return self.mu(delta), self.logvar(delta)


class Perturb(nn.Module):
    def __init__(self, hidden: int, latent: int):
        super().__init__()
        self.W1 = Dense(hidden, hidden)
        self.W2 = Dense(latent, hidden)
        self.W3 = Dense(hidden, hidden)
        self.W4 = Dense(latent, hidden)


class Decoder(nn.Module):
    def __init__(self, vocab_size: int, hidden: int, assm_depth: int):
        super().__init__()
        self.tree = TreeDecoder(vocab_size, hidden)
        self.graph = GraphDecoder(hidden, assm_depth)


class Model(nn.Module):
    def __init__(self, vocab_size: int, cfg: RunConfig):
        super().__init__()
        h, z = cfg.hidden_dim, cfg.latent_dim
        self.vocab_size = vocab_size
        self.cfg = cfg
        self.encoder = Encoder(vocab_size, h, cfg.tree_iters, cfg.graph_iters)
        self.decoder = Decoder(vocab_size, h, cfg.assm_iters)
        self.posterior = Posterior(h, z)
        self.perturb = Perturb(h, z)


# -- latent operations ---------------------------------------------------------


def diff_vectors(x_tree_sum, x_graph_sum, y_tree_sum, y_graph_sum):
    """delta = sum(y) - sum(x) for the tree and graph sets."""
    return y_tree_sum - x_tree_sum, y_graph_sum - x_graph_sum


def kl_normal(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over the last axis."""
    return 0.5 * (mu * mu + logvar.exp() - logvar - 1.0).sum(dim=-1)


@dataclass
class LatentPosterior:
    mu_tree: torch.Tensor
    logvar_tree: torch.Tensor
    mu_graph: torch.Tensor
    logvar_graph: torch.Tensor
    z_tree: torch.Tensor
    z_graph: torch.Tensor

    @property
    def kl(self) -> torch.Tensor:
        return kl_normal(self.mu_tree, self.logvar_tree) + kl_normal(self.mu_graph, self.logvar_graph)


def sample_posterior(model: Model, d_tree, d_graph, gen: torch.Generator | None, use_mean: bool = False) -> LatentPosterior:
    mt, lt = model.posterior(d_tree)
    mg, lg = model.posterior(d_graph)
    if use_mean:
        zt, zg = mt, mg
    else:
        zt = mt + torch.exp(0.5 * lt) * torch.randn(mt.shape, generator=gen, dtype=mt.dtype)
        zg = mg + torch.exp(0.5 * lg) * torch.randn(mg.shape, generator=gen, dtype=mg.dtype)
    return LatentPosterior(mt, lt, mg, lg, zt, zg)


def perturb_source(model: Model, xt, mt, xg, mg, z_tree, z_graph):
    """x~ = relu(W1 x + W2 z) per tree node and atom; padded rows are zeroed."""
    p = model.perturb
    pt = torch.relu(p.W1(xt) + p.W2(z_tree).unsqueeze(1)) * mt.unsqueeze(-1)
    pg = torch.relu(p.W3(xg) + p.W4(z_graph).unsqueeze(1)) * mg.unsqueeze(-1)
    return pt, mt, pg, mg


# -- data preparation ----------------------------------------------------------


@dataclass
class PreparedMol:
    smiles: str
    mol: Molecule
    tree: JunctionTree
    tree_spec: TreeSpec
    graph_spec: GraphSpec
    _plan: Plan | None = None
    _steps: list[ScoringStep] | None = None

    def plan(self) -> Plan:
        if self._plan is None:
            self._plan = Plan.from_tree(self.tree)
        return self._plan

    def steps(self, vocab: ClusterVocab) -> list[ScoringStep]:
        if self._steps is None:
            self._steps = [
                ScoringStep([candidate_spec(c) for c in s.candidates], s.truth)
                for s in ground_truth_steps(self.tree, vocab)
                if len(s.candidates) >= 2
            ]
        return self._steps


@dataclass
class TrainingPair:
    x: PreparedMol
    y: PreparedMol


class Preparer:
    """Parses, decomposes and featurises molecules once, keyed by input SMILES."""

    def __init__(self, vocab: ClusterVocab):
        self.vocab = vocab
        self.cache: dict[str, PreparedMol] = {}

    def mol(self, smiles: str) -> PreparedMol:
        pm = self.cache.get(smiles)
        if pm is None:
            m = parse_smiles(smiles)
            tree = decompose(m).with_labels(self.vocab)
            pm = PreparedMol(write_smiles(m), m, tree, TreeSpec.from_tree(tree), GraphSpec.from_molecule(m))
            self.cache[smiles] = pm
        return pm

    def pair(self, x: str, y: str) -> TrainingPair:
        tp = TrainingPair(self.mol(x), self.mol(y))
        tp.y.plan()
        tp.y.steps(self.vocab)
        return tp

    def pairs(self, rows: Iterable[tuple[str, str]]) -> list[TrainingPair]:
        return [self.pair(x, y) for x, y in rows]


def read_pairs(path: str | Path) -> list[tuple[str, str]]:
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) < 2:
            raise ValueError(f"{path}:{n}: expected two tab-separated SMILES")
        out.append((parts[0].strip(), parts[1].strip()))
    return out


# -- objective -----------------------------------------------------------------


def encode_batch(model: Model, mols: list[PreparedMol]):
    tb = collate_trees([m.tree_spec for m in mols], model.vocab_size)
    gb = collate_graphs([m.graph_spec for m in mols])
    return model.encoder(tb, gb)


def vae_loss(model: Model, batch: list[TrainingPair], vocab: ClusterVocab, gen: torch.Generator | None, use_mean: bool = False) -> dict:
    """Teacher-forced reconstruction plus weighted KL, averaged over the batch."""
    enc_x = encode_batch(model, [p.x for p in batch])
    enc_y = encode_batch(model, [p.y for p in batch])
    d_tree, d_graph = diff_vectors(enc_x.tree_sum(), enc_x.graph_sum(), enc_y.tree_sum(), enc_y.graph_sum())
    post = sample_posterior(model, d_tree, d_graph, gen, use_mean)
    source = perturb_source(model, *enc_x.padded(), post.z_tree, post.z_graph)
    run = model.decoder.tree.unroll(source, Mode.TEACHER, [p.y.plan() for p in batch])
    terms = teacher_terms(run, len(batch))
    graph_sum = source[2].sum(dim=1)
    assm = assembly_loss(model.decoder.graph, [p.y.steps(vocab) for p in batch], enc_y.tree_msgs, enc_y.tree_edge_rows, graph_sum)
    kl = post.kl.sum()
    B = len(batch)
    beta = model.cfg.effective_kl_weight
    recon = terms["topo"] + terms["label"] + assm["assm"]
    total = (recon + beta * kl) / B
    return {
        "loss": total,
        "topo": terms["topo"] / B,
        "label": terms["label"] / B,
        "assm": assm["assm"] / B,
        "kl": kl / B,
        "topo_acc": terms["topo_acc"],
        "label_acc": terms["label_acc"],
        "assm_acc": assm["assm_acc"],
        "exact": terms["exact"],
        "posterior": post,
    }


# -- training ------------------------------------------------------------------


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


@dataclass
class TrainResult:
    model: Model
    store: ParamStore
    checkpoints: list[Path]
    history: list[dict]
    disc: nn.Module | None = None


def build_model(vocab_size: int, cfg: RunConfig) -> Model:
    torch.manual_seed(cfg.seed)
    return Model(vocab_size, cfg)


def train(
    pairs: list[TrainingPair],
    vocab: ClusterVocab,
    cfg: RunConfig,
    out_dir: str | Path | None = None,
    callback: Callable[[int, int, dict], None] | None = None,
    model: Model | None = None,
    max_steps: int | None = None,
    critic: tuple[nn.Module, ParamStore] | None = None,
) -> TrainResult:
    """Shuffled mini-batch Adam with per-epoch lr decay; one checkpoint per epoch.

    ``critic`` resumes an existing discriminator and its optimizer instead of a fresh one.
    """
    from .advreg import Discriminator, wgan_gp_round

    if not pairs:
        raise ValueError("no training pairs")
    torch.set_num_threads(1)
    model = model if model is not None else build_model(len(vocab), cfg)
    store = ParamStore(model, lr=cfg.lr, decay=cfg.lr_decay)
    disc = disc_store = None
    if critic is not None:
        disc, disc_store = critic
    elif cfg.adversarial:
        torch.manual_seed(cfg.seed + 1)
        disc = Discriminator(len(vocab) + cfg.hidden_dim, cfg.disc_hidden)
        disc_store = ParamStore(disc, lr=cfg.disc_lr, decay=1.0, betas=(0.5, 0.9))
    shuffler = random.Random(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    checkpoints: list[Path] = []
    history: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = list(range(len(pairs)))
        shuffler.shuffle(order)
        for start in range(0, len(order), cfg.batch_size):
            batch = [pairs[i] for i in order[start : start + cfg.batch_size]]
            res = vae_loss(model, batch, vocab, gen)
            loss = res["loss"]
            stats = {k: v.item() for k, v in res.items() if k in ("loss", "topo", "label", "assm", "kl", "topo_acc", "label_acc", "assm_acc")}
            if disc is not None and epoch >= cfg.gan_start_epoch:
                adv = wgan_gp_round(model, disc, disc_store, batch, cfg, gen)
                loss = loss + cfg.gan_weight * adv["gen_loss"]
                stats.update({k: float(v) for k, v in adv.items() if k != "gen_loss"})
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch} step {step}: {stats}")
            store.zero_grad()
            loss.backward()
            store.step()
            stats.update(epoch=epoch, step=step)
            history.append(stats)
            if callback is not None:
                callback(epoch, step, stats)
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        store.end_epoch()
        if out is not None:
            path = out / f"epoch{epoch + 1:03d}.vjtnn"
            store.save(path)
            checkpoints.append(path)
            if disc_store is not None:
                disc_store.save(out / f"epoch{epoch + 1:03d}.disc.vjtnn")
        if max_steps is not None and step >= max_steps:
            break
    return TrainResult(model, store, checkpoints, history, disc)


# -- translation ---------------------------------------------------------------


def decode_from_source(model: Model, vocab: ClusterVocab, source, allowed=None) -> list[Molecule | None]:
    """Greedy tree decoding followed by greedy assembly for each item of a padded source."""
    cfg = model.cfg
    with torch.no_grad():
        run = model.decoder.tree.unroll(source, Mode.GREEDY, max_nodes=cfg.max_nodes, allowed=allowed)
        trees = [stand_in_tree(t.labels, t.parents, vocab) for t in run.trees]
        tb = collate_trees([TreeSpec.from_tree(t) for t in trees], model.vocab_size)
        _, msgs = model.encoder.tree(tb)
        graph_sum = source[2].sum(dim=1)
        out = []
        for k, t in enumerate(trees):
            if run.trees[k].truncated:
                out.append(None)
                continue
            out.append(assemble_greedy(model.decoder.graph, t, vocab, msgs, tb.edge_rows[k], graph_sum[k]))
    return out


def compatibility(vocab: ClusterVocab) -> torch.Tensor:
    return torch.tensor(vocab.compatible, dtype=torch.bool)


def translate(
    model: Model,
    vocab: ClusterVocab,
    x: str | Molecule,
    K: int,
    gen: torch.Generator,
    allowed: torch.Tensor | None = None,
) -> list[str | None]:
    """K prior samples z ~ N(0, I), each decoded greedily; failures are ``None``."""
    m = parse_smiles(x) if isinstance(x, str) else x
    tree = decompose(m).with_labels(vocab)
    with torch.no_grad():
        tb = collate_trees([TreeSpec.from_tree(tree)], model.vocab_size)
        gb = collate_graphs([GraphSpec.from_molecule(m)])
        enc = model.encoder(tb, gb)
        xt, mt, xg, mg = enc.padded()
        z = model.cfg.latent_dim
        zt = torch.randn(K, z, generator=gen, dtype=xt.dtype)
        zg = torch.randn(K, z, generator=gen, dtype=xt.dtype)
        source = perturb_source(model, xt.expand(K, -1, -1), mt.expand(K, -1), xg.expand(K, -1, -1), mg.expand(K, -1), zt, zg)
    mols = decode_from_source(model, vocab, source, allowed)
    return [write_smiles(mm) if mm is not None else None for mm in mols]


def reconstruct(model: Model, vocab: ClusterVocab, pair: TrainingPair, allowed=None) -> str | None:
    """Decode the target of a pair with the posterior mean code."""
    with torch.no_grad():
        enc_x = encode_batch(model, [pair.x])
        enc_y = encode_batch(model, [pair.y])
        d_tree, d_graph = diff_vectors(enc_x.tree_sum(), enc_x.graph_sum(), enc_y.tree_sum(), enc_y.graph_sum())
        post = sample_posterior(model, d_tree, d_graph, None, use_mean=True)
        source = perturb_source(model, *enc_x.padded(), post.z_tree, post.z_graph)
    mol = decode_from_source(model, vocab, source, allowed)[0]
    return write_smiles(mol) if mol is not None else None


def load_model(path: str | Path, vocab: ClusterVocab, cfg: RunConfig) -> Model:
    model = Model(len(vocab), cfg)
    ParamStore(model).load(path)
    return model


__all__ = [
    "Model",
    "Preparer",
    "TrainingPair",
    "PreparedMol",
    "LatentPosterior",
    "diff_vectors",
    "sample_posterior",
    "perturb_source",
    "kl_normal",
    "vae_loss",
    "train",
    "translate",
    "reconstruct",
    "read_pairs",
    "pad_segments",
]
