"""Property oracles, pair curation, translation reports and evaluation metrics."""

from __future__ import annotations

import itertools
import logging
import math
import shlex
import statistics
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .molgraph import Molecule, morgan_fingerprint, parse_smiles, tanimoto, write_smiles

log = logging.getLogger(__name__)

ATOMIC_WEIGHTS = {
    "H": 1.008,
    "C": 12.011,
    "N": 14.007,
    "O": 15.999,
    "S": 32.06,
    "P": 30.974,
    "F": 18.998,
    "Cl": 35.45,
    "Br": 79.904,
    "I": 126.904,
}
HALOGENS = frozenset({"F", "Cl", "Br", "I"})


# -- oracles -------------------------------------------------------------------


def molecular_weight(m: Molecule) -> float:
    heavy = sum(ATOMIC_WEIGHTS[a.element] for a in m.atoms)
    hs = sum(m.total_hs(i) for i in range(len(m.atoms)))
    return heavy + hs * ATOMIC_WEIGHTS["H"]


def ring_count(m: Molecule) -> float:
    """Independent rings (cycle rank) of a connected molecule."""
    return float(len(m.bonds) - len(m.atoms) + 1)


def heavy_atom_count(m: Molecule) -> float:
    return float(len(m.atoms))


def halogen_count(m: Molecule) -> float:
    return float(sum(a.element in HALOGENS for a in m.atoms))


BUILTIN = {
    "molecular_weight": molecular_weight,
    "ring_count": ring_count,
    "heavy_atom_count": heavy_atom_count,
    "halogen_count": halogen_count,
}


class OracleError(RuntimeError):
    pass


@dataclass
class PropertyOracle:
    """Scores SMILES strings; builtin oracles run in-process, external ones as a child process.

    External protocol: one SMILES per line on stdin, one decimal per line on
    stdout, line-aligned. Unparseable or non-finite outputs count as failures.
    """

    name: str
    kind: str = "builtin"
    command: Sequence[str] = ()
    timeout: float = 600.0

    @classmethod
    def parse(cls, spec: str) -> PropertyOracle:
        """``ring_count`` (builtin) or ``external:<command line>``."""
        if spec.startswith("external:"):
            cmd = shlex.split(spec[len("external:") :])
            if not cmd:
                raise ValueError("external oracle needs a command")
            return cls(name=spec, kind="external", command=cmd)
        if spec not in BUILTIN:
            raise ValueError(f"unknown oracle {spec!r}; builtins: {', '.join(sorted(BUILTIN))}")
        return cls(name=spec)

    def score(self, smiles: Sequence[str]) -> list[float | None]:
        if self.kind == "builtin":
            fn = BUILTIN[self.name]
            out: list[float | None] = []
            for s in smiles:
                try:
                    out.append(float(fn(parse_smiles(s))))
                except ValueError as e:
                    log.warning("oracle %s failed on %r: %s", self.name, s, e)
                    out.append(None)
            return out
        return self._external(smiles)

    def _external(self, smiles: Sequence[str]) -> list[float | None]:
        if not smiles:
            return []
        proc = subprocess.run(
            list(self.command),
            input="".join(s + "\n" for s in smiles),
            capture_output=True,
            text=True,
            timeout=self.timeout,
        )
        if proc.returncode != 0:
            raise OracleError(f"external oracle exited with {proc.returncode}: {proc.stderr.strip()[:200]}")
        lines = proc.stdout.splitlines()
        if len(lines) != len(smiles):
            raise OracleError(f"external oracle returned {len(lines)} lines for {len(smiles)} molecules")
        out: list[float | None] = []
        for s, line in zip(smiles, lines):
            try:
                v = float(line.strip())
            except ValueError:
                v = math.nan
            if not math.isfinite(v):
                log.warning("oracle %s gave no score for %r", self.name, s)
                out.append(None)
            else:
                out.append(v)
        return out


# -- curation ------------------------------------------------------------------


@dataclass(frozen=True)
class ImprovementRule:
    theta: float

    def __call__(self, sx: float, sy: float) -> bool:
        return sy - sx >= self.theta


@dataclass(frozen=True)
class RangeRule:
    source: tuple[float, float]
    target: tuple[float, float]

    def __call__(self, sx: float, sy: float) -> bool:
        return self.source[0] <= sx <= self.source[1] and self.target[0] <= sy <= self.target[1]


def curate_pairs(
    corpus: Iterable[str],
    oracle: PropertyOracle,
    delta: float,
    rule: Callable[[float, float], bool],
    exclude: Iterable[str] = (),
) -> list[tuple[str, str]]:
    """Ordered pairs (X, Y), X != Y, with sim(X, Y) >= delta and ``rule(score X, score Y)``.

    Molecules in ``exclude`` (compared canonically) never appear in a pair.
    """
    banned = {write_smiles(parse_smiles(s)) for s in exclude}
    mols: list[tuple[str, object]] = []
    seen = set()
    for s in corpus:
        try:
            m = parse_smiles(s)
        except ValueError as e:
            log.warning("skipping %r: %s", s, e)
            continue
        can = write_smiles(m)
        if can in banned or can in seen:
            continue
        seen.add(can)
        mols.append((can, morgan_fingerprint(m)))
    scores = oracle.score([c for c, _ in mols])
    kept = [(c, fp, sc) for (c, fp), sc in zip(mols, scores) if sc is not None]
    out = []
    for (cx, fx, sx), (cy, fy, sy) in itertools.permutations(kept, 2):
        if rule(sx, sy) and tanimoto(fx, fy) >= delta:
            out.append((cx, cy))
    return out


def write_pairs(pairs: Iterable[tuple[str, str]], path: str | Path) -> None:
    _atomic_write(path, "".join(f"{x}\t{y}\n" for x, y in pairs))


# -- reports -------------------------------------------------------------------


@dataclass
class ReportEntry:
    source: str
    candidates: list[str | None]
    sims: list[float | None] = field(default_factory=list)
    scores: list[float | None] | None = None
    source_score: float | None = None

    def valid(self, delta: float | None = None) -> list[int]:
        """Indices of decoded candidates, optionally also meeting the similarity bound."""
        return [
            k
            for k, c in enumerate(self.candidates)
            if c is not None and (delta is None or (self.sims[k] is not None and self.sims[k] >= delta))
        ]


def build_entry(source: str, candidates: Sequence[str | None]) -> ReportEntry:
    fx = morgan_fingerprint(parse_smiles(source))
    sims = [None if c is None else tanimoto(fx, morgan_fingerprint(parse_smiles(c))) for c in candidates]
    return ReportEntry(source, list(candidates), sims)


def score_report(entries: list[ReportEntry], oracle: PropertyOracle) -> None:
    """Fill in source and candidate scores in place (one oracle call for everything)."""
    todo = [e.source for e in entries] + [c for e in entries for c in e.candidates if c is not None]
    got = dict(zip(todo, oracle.score(todo)))
    for e in entries:
        e.source_score = got[e.source]
        e.scores = [None if c is None else got[c] for c in e.candidates]


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report(entries: list[ReportEntry], path: str | Path) -> None:
    K = max([len(e.candidates) for e in entries] + [0])
    head = ["source", "source_score"] + [f"{col}_{k + 1}" for k in range(K) for col in ("candidate", "sim", "score")]
    lines = ["\t".join(head)]
    for e in entries:
        row = [e.source, _fmt(e.source_score)]
        for k in range(K):
            if k < len(e.candidates):
                sc = e.scores[k] if e.scores is not None else None
                row += [_fmt(e.candidates[k]), _fmt(e.sims[k]), _fmt(sc)]
            else:
                row += ["-", "-", "-"]
        lines.append("\t".join(row))
    _atomic_write(path, "\n".join(lines) + "\n")


def read_report(path: str | Path) -> list[ReportEntry]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("source\t"):
        raise ValueError(f"{path}: missing report header")

    def num(x: str) -> float | None:
        return None if x == "-" else float(x)

    out = []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cols = line.split("\t")
        if (len(cols) - 2) % 3:
            raise ValueError(f"{path}:{n}: malformed record")
        cands, sims, scores = [], [], []
        for k in range(2, len(cols), 3):
            cands.append(None if cols[k] == "-" else cols[k])
            sims.append(num(cols[k + 1]))
            scores.append(num(cols[k + 2]))
        has_scores = any(s is not None for s in scores) or cols[1] != "-"
        out.append(ReportEntry(cols[0], cands, sims, scores if has_scores else None, num(cols[1])))
    return out


def _atomic_write(path: str | Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


# -- metrics -------------------------------------------------------------------


def success_rate(entries: Sequence[ReportEntry], delta: float, predicate: Callable[[float, float], bool]) -> float:
    """Fraction of sources with a candidate meeting sim >= delta and ``predicate(score X, score Y)``."""
    if not entries:
        return 0.0
    hits = 0
    for e in entries:
        for k in e.valid(delta):
            sc = e.scores[k] if e.scores is not None else None
            if sc is not None and e.source_score is not None and predicate(e.source_score, sc):
                hits += 1
                break
    return hits / len(entries)


def improvement(entries: Sequence[ReportEntry], delta: float) -> tuple[float, float]:
    """Mean and population std of the best improvement under the similarity bound (failures give 0)."""
    if not entries:
        return 0.0, 0.0
    vals = []
    for e in entries:
        gains = [
            e.scores[k] - e.source_score
            for k in e.valid(delta)
            if e.scores is not None and e.scores[k] is not None and e.source_score is not None
        ]
        vals.append(max(gains) if gains else 0.0)
    return statistics.fmean(vals), statistics.pstdev(vals)


def diversity(entries: Sequence[ReportEntry], delta: float | None = None) -> float:
    """Mean pairwise Tanimoto distance among valid candidates, averaged over sources with >= 2."""
    per_source = []
    for e in entries:
        idx = e.valid(delta)
        if len(idx) < 2:
            continue
        fps = [morgan_fingerprint(parse_smiles(e.candidates[k])) for k in idx]
        dists = [1.0 - tanimoto(a, b) for a, b in itertools.combinations(fps, 2)]
        per_source.append(statistics.fmean(dists))
    return statistics.fmean(per_source) if per_source else 0.0


@dataclass(frozen=True)
class Novelty:
    paper: float  # 1 - |M & S| / |S|
    conventional: float  # 1 - |M & S| / |M|


def novelty(generated: Iterable[str], training: Iterable[str]) -> Novelty:
    M = {write_smiles(parse_smiles(s)) for s in generated}
    S = {write_smiles(parse_smiles(s)) for s in training}
    if not S:
        raise ValueError("novelty is undefined for an empty training set")
    common = len(M & S)
    conventional = 1.0 - common / len(M) if M else 1.0
    return Novelty(1.0 - common / len(S), conventional)


def parse_predicate(spec: str) -> Callable[[float, float], bool]:
    """``always``, ``improve:<theta>`` or ``range:<lo>:<hi>`` (on the candidate score)."""
    if spec == "always":
        return lambda sx, sy: True
    kind, _, rest = spec.partition(":")
    if kind == "improve":
        return ImprovementRule(float(rest))
    if kind == "range":
        lo, _, hi = rest.partition(":")
        lo_f, hi_f = float(lo), float(hi)
        return lambda sx, sy: lo_f <= sy <= hi_f
    raise ValueError(f"unknown predicate {spec!r}")


@dataclass
class EvalReport:
    n_sources: int
    success: float
    improvement_mean: float
    improvement_std: float
    diversity: float
    novelty_paper: float | None
    novelty_conventional: float | None
    validity: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def evaluate(
    entries: list[ReportEntry],
    delta: float,
    predicate: Callable[[float, float], bool],
    training_targets: Sequence[str] | None = None,
) -> EvalReport:
    decoded = [c for e in entries for c in e.candidates if c is not None]
    total = sum(len(e.candidates) for e in entries)
    nov = novelty(decoded, training_targets) if training_targets else None
    mean, std = improvement(entries, delta)
    return EvalReport(
        n_sources=len(entries),
        success=success_rate(entries, delta, predicate),
        improvement_mean=mean,
        improvement_std=std,
        diversity=diversity(entries, delta),
        novelty_paper=nov.paper if nov else None,
        novelty_conventional=nov.conventional if nov else None,
        validity=len(decoded) / total if total else 0.0,
    )
