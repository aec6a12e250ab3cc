#!/usr/bin/env python3
"""
Metrics and analyses
MSE / concordance index, pooled-feature similarity grid, binding-site
top-k% hit rate with its chance baseline, and mutation rank shift.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Set, Tuple

import numpy as np

from gca_dti.encoders import TokenSequence
from gca_dti.exceptions import DataError, DimensionError, SequenceIndexError
from gca_dti.model import DtiModel, extract_attention, ranks_from_gate

logger = logging.getLogger(__name__)

POPULATIONS = ('d', 'd_prime', 'p', 'p_prime')
C_INDEX_CHUNK = 2048
SITE_K_PERCENTS = tuple(range(1, 21))
SITE_NEIGHBORHOODS = (0, 1)


@dataclass
class EvalReport:
    mse: float
    c_index: float
    n_pairs_evaluated: int


@dataclass
class SimilarityGrid:
    grid: np.ndarray
    step: int = 0

    @property
    def mixing(self) -> bool:
        """True when p' sits closer to d than to p"""
        return bool(self.grid[3, 0] > self.grid[3, 2])


@dataclass
class SiteHitReport:
    hit_rate: float
    n_evaluated: int
    n_skipped: int


@dataclass
class RankShift:
    head: str
    position: int
    old_rank: int
    new_rank: int

    @property
    def delta(self) -> int:
        return self.new_rank - self.old_rank


# ---------------------------------------------------------------- task metrics

def c_index(pred: Sequence[float], truth: Sequence[float]) -> float:
    """Share of pairs with truth_i > truth_j ordered the same way by pred; ties in pred earn 0.5"""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise DimensionError(f'c_index: pred {pred.shape} and truth {truth.shape} must be equal-length vectors')
    if pred.size < 2:
        raise DataError('c_index needs at least 2 examples')
    credit = 0.0
    pairs = 0
    for start in range(0, pred.size, C_INDEX_CHUNK):
        stop = start + C_INDEX_CHUNK
        ordered = truth[start:stop, None] > truth[None, :]
        dp = pred[start:stop, None] - pred[None, :]
        pairs += int(ordered.sum())
        credit += float(np.sum(ordered & (dp > 0))) + 0.5 * float(np.sum(ordered & (dp == 0)))
    if pairs == 0:
        raise DataError('c_index undefined: all truth values are equal (no orderable pairs)')
    return credit / pairs


def evaluate_predictions(pred: Sequence[float], truth: Sequence[float]) -> EvalReport:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.size == 0:
        raise DataError(f'cannot evaluate {pred.size} predictions against {truth.size} targets')
    return EvalReport(mse=float(np.mean((pred - truth) ** 2)), c_index=c_index(pred, truth), n_pairs_evaluated=pred.size)


# ---------------------------------------------------------------- feature similarity

def _unit_rows(x: np.ndarray, name: str) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    keep = norms > 0
    if not keep.all():
        logger.warning(f'similarity grid: {int((~keep).sum())} zero-norm {name} vector(s) excluded')
    return x[keep] / norms[keep, None]


def _mean_cosine(a: np.ndarray, b: np.ndarray, same: bool) -> float:
    if same:
        n = len(a)
        if n < 2:
            return float('nan')
        sims = a @ a.T
        return float(sims[np.triu_indices(n, k=1)].mean())
    if len(a) == 0 or len(b) == 0:
        return float('nan')
    return float((a @ b.T).mean())


def similarity_grid(d: np.ndarray, d_prime: np.ndarray, p: np.ndarray, p_prime: np.ndarray,
                    step: int = 0) -> SimilarityGrid:
    """Mean pairwise cosine similarity among the four pooled populations, ordered d, d', p, p'.
    Diagonal entries average over distinct pairs within one population."""
    populations = [np.asarray(x, dtype=np.float64) for x in (d, d_prime, p, p_prime)]
    sizes = {x.shape[0] for x in populations}
    if len(sizes) != 1 or any(x.ndim != 2 for x in populations):
        raise DimensionError(f'similarity grid: populations must be [n x f] of one size, got {[x.shape for x in populations]}')
    if sizes.pop() < 2:
        raise DataError('similarity grid needs a batch of at least 2')
    units = [_unit_rows(x, name) for x, name in zip(populations, POPULATIONS)]
    grid = np.empty((4, 4))
    for i in range(4):
        for j in range(i, 4):
            grid[i, j] = grid[j, i] = _mean_cosine(units[i], units[j], same=(i == j))
    return SimilarityGrid(grid=grid, step=step)


# ---------------------------------------------------------------- binding sites

def top_k_count(valid_len: int, k_percent: float) -> int:
    return max(1, math.ceil(k_percent * valid_len / 100.0 - 1e-9))


def site_hit_rate(rankings: Sequence[Sequence[int]], true_sites: Sequence[Set[int]],
                  k_percent: float, neighborhood: int = 0) -> SiteHitReport:
    """Per example: top ceil(k% * valid_len) ranked positions, each widened by +-neighborhood,
    score 1 if any true site is covered. Mean over examples with at least one true site."""
    if not 0 < k_percent <= 100:
        raise DataError(f'k_percent must be in (0, 100], got {k_percent}')
    if neighborhood < 0:
        raise DataError(f'neighborhood must be >= 0, got {neighborhood}')
    if len(rankings) != len(true_sites):
        raise DimensionError(f'{len(rankings)} rankings for {len(true_sites)} site sets')
    hits = evaluated = skipped = 0
    for ranking, sites in zip(rankings, true_sites):
        if not sites:
            skipped += 1
            continue
        top = list(ranking)[:top_k_count(len(ranking), k_percent)]
        covered = {q for pos in top for q in range(pos - neighborhood, pos + neighborhood + 1)}
        hits += bool(covered & set(sites))
        evaluated += 1
    if skipped:
        logger.warning(f'site hit rate: skipped {skipped} example(s) without true sites')
    rate = hits / evaluated if evaluated else float('nan')
    return SiteHitReport(hit_rate=rate, n_evaluated=evaluated, n_skipped=skipped)


def chance_site_hit_rate(valid_lens: Sequence[int], true_sites: Sequence[Set[int]], k_percent: float,
                         neighborhood: int = 0, trials: int = 1000, seed: int = 0) -> float:
    """Monte-Carlo hit rate of uniformly random rankings"""
    rng = np.random.default_rng(seed)
    kept = [(n, sites) for n, sites in zip(valid_lens, true_sites) if sites]
    if not kept:
        raise DataError('chance baseline needs at least one example with true sites')
    lens, true_sites = [n for n, _ in kept], [s for _, s in kept]
    rates = []
    for _ in range(trials):
        rankings = [rng.permutation(n) for n in lens]
        report = site_hit_rate(rankings, true_sites, k_percent, neighborhood)
        rates.append(report.hit_rate)
    return float(np.mean(rates))


def protein_site_rankings(model: DtiModel, pairs: Sequence, sites_by_pair: Dict[tuple, Set[int]]
                          ) -> Tuple[Dict[str, List[List[int]]], List[Set[int]], List[int]]:
    """Per-head protein rankings of each pair, its true sites inside the valid length,
    and the valid lengths"""
    per_head: Dict[str, List[List[int]]] = {}
    true_sites: List[Set[int]] = []
    valid_lens: List[int] = []
    for pair in pairs:
        limit = pair.protein.valid_len
        true_sites.append({s for s in sites_by_pair.get((pair.drug_id, pair.target_id), set()) if s < limit})
        valid_lens.append(limit)
        for r in extract_attention(model, pair.drug, pair.protein)['protein']:
            per_head.setdefault(f'head{r.head}', []).append(list(r.positions))
    if not per_head:
        raise DataError('model has no protein-side attention (attend_protein=false)')
    return per_head, true_sites, valid_lens


def best_site_head(per_head: Dict[str, List[List[int]]], true_sites: Sequence[Set[int]],
                   k_percents: Sequence[float] = SITE_K_PERCENTS,
                   neighborhoods: Sequence[int] = SITE_NEIGHBORHOODS) -> str:
    """Head with the highest mean hit rate over the k and neighbourhood grid"""
    means = {
        head: np.mean([site_hit_rate(rankings, true_sites, k, nb).hit_rate for nb in neighborhoods for k in k_percents])
        for head, rankings in per_head.items()
    }
    return max(means, key=means.get)


def analytic_chance_rate(valid_len: int, n_sites: int, k_percent: float) -> float:
    """Exact hit probability for one example at neighborhood 0: 1 - C(L - s, k) / C(L, k)"""
    k = top_k_count(valid_len, k_percent)
    if n_sites <= 0:
        return 0.0
    return 1.0 - math.comb(valid_len - n_sites, k) / math.comb(valid_len, k)


# ---------------------------------------------------------------- mutation

def rank_table(positions: np.ndarray) -> np.ndarray:
    """rank[position] = 1-based place in the ranking"""
    ranks = np.empty(len(positions), dtype=np.int64)
    ranks[np.asarray(positions)] = np.arange(1, len(positions) + 1)
    return ranks


def mutation_rank_shift(model: DtiModel, drug_seq: TokenSequence, prot_seq: TokenSequence,
                        position: int, new_residue: str, window: int = 2) -> List[RankShift]:
    """Protein gate ranks of position and its +-window neighbours before and after a
    single-residue substitution, per head and for the head-averaged gate"""
    if not 0 <= position < prot_seq.valid_len:
        raise SequenceIndexError(f'position {position} outside valid length {prot_seq.valid_len}')
    if new_residue not in model.protein_vocab:
        raise SequenceIndexError(f'residue {new_residue!r} not in the protein vocabulary')
    mutated = prot_seq.substitute(position, model.protein_vocab.id_of(new_residue))
    before = extract_attention(model, drug_seq, prot_seq)['protein']
    after = extract_attention(model, drug_seq, mutated)['protein']
    if not before:
        raise DataError('mutation rank shift needs protein-side attention (attend_protein=true)')

    n = prot_seq.valid_len
    tables: Dict[str, tuple] = {}
    for old, new in zip(before, after):
        tables[f'head{old.head}'] = (rank_table(old.positions), rank_table(new.positions))
    tables['mean'] = tuple(rank_table(ranks_from_gate(_mean_gate(r, n), n)) for r in (before, after))

    neighbourhood = [q for q in range(position - window, position + window + 1) if 0 <= q < n]
    return [
        RankShift(head=head, position=q, old_rank=int(old[q]), new_rank=int(new[q]))
        for head, (old, new) in tables.items() for q in neighbourhood
    ]


def _mean_gate(rankings, n: int) -> np.ndarray:
    gate = np.zeros(n)
    for r in rankings:
        gate[r.positions] += r.weights
    return gate / len(rankings)


__all__ = [
    'EvalReport', 'SimilarityGrid', 'SiteHitReport', 'RankShift',
    'c_index', 'evaluate_predictions', 'similarity_grid', 'top_k_count',
    'SITE_K_PERCENTS', 'SITE_NEIGHBORHOODS',
    'site_hit_rate', 'chance_site_hit_rate', 'protein_site_rankings', 'best_site_head', 'analytic_chance_rate',
    'rank_table', 'mutation_rank_shift',
]
