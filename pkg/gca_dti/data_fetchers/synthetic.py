#!/usr/bin/env python3
"""
Synthetic planted-motif data
Random SMILES-like and FASTA-like strings with planted motif pairs. A pair's
affinity is base + bonus per co-present motif pair + N(0, sigma); the sites
file lists the protein positions covered by each co-present protein motif.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Set, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from gca_dti.config import build_model, read_flat_file
from gca_dti.data_fetchers.dataset_loader import AffinityRecord, PairKey, write_records, write_sites
from gca_dti.exceptions import ConfigError

logger = logging.getLogger(__name__)

AMINO_ACIDS = 'ACDEFGHIKLMNPQRSTVWY'


class SyntheticSpec(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    n_drugs: int = Field(200, gt=0)
    n_targets: int = Field(50, gt=0)
    drug_alphabet: str = Field('CNOSFclnos()=123', min_length=2)
    protein_alphabet: str = Field(AMINO_ACIDS, min_length=2)
    drug_len_min: int = Field(45, gt=0)
    drug_len_max: int = Field(70, gt=0)
    protein_len_min: int = Field(600, gt=0)
    protein_len_max: int = Field(760, gt=0)
    n_motifs: int = Field(2, ge=0)
    drug_motif_len: int = Field(4, gt=0)
    protein_motif_len: int = Field(6, gt=0)
    motif_rate: float = Field(0.5, ge=0.0, le=1.0)
    base: float = 5.0
    bonus: float = 2.0
    sigma: float = Field(0.3, ge=0.0)
    pair_fraction: float = Field(1.0, gt=0.0, le=1.0)
    seed: int = Field(0, ge=0)

    @model_validator(mode='after')
    def _check_ranges(self) -> 'SyntheticSpec':
        if self.drug_len_min > self.drug_len_max or self.protein_len_min > self.protein_len_max:
            raise ValueError('length ranges must have min <= max')
        if len(set(self.drug_alphabet)) != len(self.drug_alphabet) or len(set(self.protein_alphabet)) != len(self.protein_alphabet):
            raise ValueError('alphabets must not repeat characters')
        return self


@dataclass
class MotifPair:
    drug: str
    protein: str


@dataclass
class SyntheticDataset:
    records: List[AffinityRecord]
    sites: Dict[PairKey, Set[int]]
    motifs: List[MotifPair] = field(default_factory=list)


def load_synthetic_spec(path: Optional[Union[str, Path]] = None, overrides: Optional[Dict[str, str]] = None) -> SyntheticSpec:
    values: Dict[str, str] = dict(read_flat_file(path)) if path is not None else {}
    values.update(overrides or {})
    return build_model(SyntheticSpec, values, 'synthetic spec')


def _random_string(rng: np.random.Generator, alphabet: str, length: int) -> str:
    return ''.join(rng.choice(list(alphabet), size=length))


def _check_placement(spec: SyntheticSpec):
    for side, alphabet, motif_len, min_len in (
            ('drug', spec.drug_alphabet, spec.drug_motif_len, spec.drug_len_min),
            ('protein', spec.protein_alphabet, spec.protein_motif_len, spec.protein_len_min)):
        if spec.n_motifs and spec.n_motifs * motif_len > min_len:
            raise ConfigError(
                f'cannot place {spec.n_motifs} {side} motif(s) of length {motif_len} '
                f'in sequences as short as {min_len}'
            )
        if len(alphabet) ** motif_len < spec.n_motifs:
            raise ConfigError(
                f'{side} alphabet of {len(alphabet)} symbol(s) has fewer than {spec.n_motifs} '
                f'distinct motifs of length {motif_len}'
            )


def _make_motifs(spec: SyntheticSpec, rng: np.random.Generator) -> List[MotifPair]:
    motifs: List[MotifPair] = []
    seen_drug: Set[str] = set()
    seen_protein: Set[str] = set()
    while len(motifs) < spec.n_motifs:
        pair = MotifPair(
            drug=_random_string(rng, spec.drug_alphabet, spec.drug_motif_len),
            protein=_random_string(rng, spec.protein_alphabet, spec.protein_motif_len),
        )
        if pair.drug in seen_drug or pair.protein in seen_protein:
            continue
        seen_drug.add(pair.drug)
        seen_protein.add(pair.protein)
        motifs.append(pair)
    return motifs


def _planted_sequence(rng: np.random.Generator, alphabet: str, length: int,
                      motifs: List[str], rate: float) -> str:
    """Random string; motif i, when drawn, lands inside the i-th of len(motifs) equal segments"""
    chars = list(_random_string(rng, alphabet, length))
    if motifs:
        segment = length // len(motifs)
        for i, motif in enumerate(motifs):
            if rng.random() >= rate:
                continue
            start = i * segment + int(rng.integers(0, segment - len(motif) + 1))
            chars[start:start + len(motif)] = motif
    return ''.join(chars)


def motif_positions(sequence: str, motif: str) -> Set[int]:
    """Every index covered by any (possibly overlapping) occurrence of motif"""
    covered: Set[int] = set()
    start = sequence.find(motif)
    while start != -1:
        covered.update(range(start, start + len(motif)))
        start = sequence.find(motif, start + 1)
    return covered


def gen_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    """Fully determined by spec.seed"""
    _check_placement(spec)
    rng = np.random.default_rng(spec.seed)
    motifs = _make_motifs(spec, rng)
    drugs = [
        (f'D{i:04d}', _planted_sequence(
            rng, spec.drug_alphabet, int(rng.integers(spec.drug_len_min, spec.drug_len_max + 1)),
            [m.drug for m in motifs], spec.motif_rate))
        for i in range(spec.n_drugs)
    ]
    targets = [
        (f'T{i:04d}', _planted_sequence(
            rng, spec.protein_alphabet, int(rng.integers(spec.protein_len_min, spec.protein_len_max + 1)),
            [m.protein for m in motifs], spec.motif_rate))
        for i in range(spec.n_targets)
    ]

    pairs = [(d, t) for d in range(spec.n_drugs) for t in range(spec.n_targets)]
    if spec.pair_fraction < 1.0:
        keep = max(1, int(round(len(pairs) * spec.pair_fraction)))
        pairs = [pairs[i] for i in sorted(rng.choice(len(pairs), size=keep, replace=False))]

    records: List[AffinityRecord] = []
    sites: Dict[PairKey, Set[int]] = {}
    for d, t in pairs:
        drug_id, smiles = drugs[d]
        target_id, fasta = targets[t]
        present = [m for m in motifs if m.drug in smiles and m.protein in fasta]
        noise = rng.normal(0.0, spec.sigma) if spec.sigma > 0 else 0.0
        affinity = spec.base + spec.bonus * len(present) + noise
        records.append(AffinityRecord(drug_id, target_id, smiles, fasta, float(affinity)))
        positions: Set[int] = set()
        for m in present:
            positions |= motif_positions(fasta, m.protein)
        sites[(drug_id, target_id)] = positions
    logger.info(f'generated {len(records)} synthetic pairs with {len(motifs)} planted motif pair(s)')
    return SyntheticDataset(records=records, sites=sites, motifs=motifs)


def write_synthetic(spec: SyntheticSpec, out_dir: Union[str, Path]) -> Tuple[Path, Path]:
    """dataset.tsv and sites.tsv under out_dir"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = gen_synthetic(spec)
    dataset_path, sites_path = out_dir / 'dataset.tsv', out_dir / 'sites.tsv'
    write_records(data.records, dataset_path)
    write_sites(data.sites, sites_path)
    return dataset_path, sites_path


__all__ = [
    'SyntheticSpec', 'MotifPair', 'SyntheticDataset', 'AMINO_ACIDS',
    'load_synthetic_spec', 'gen_synthetic', 'write_synthetic', 'motif_positions',
]
