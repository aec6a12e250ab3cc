#!/usr/bin/env python3
"""
Affinity dataset ingestion
TSV with header drug_id, target_id, smiles, fasta, affinity; optional sites
file drug_id, target_id, positions (comma-separated 0-based indices).
"""

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Set, Tuple, Union

import numpy as np
import pandas as pd

from gca_dti.exceptions import ConfigError, DataError

logger = logging.getLogger(__name__)

DATASET_COLUMNS = ['drug_id', 'target_id', 'smiles', 'fasta', 'affinity']
SITES_COLUMNS = ['drug_id', 'target_id', 'positions']

PairKey = Tuple[str, str]


@dataclass(frozen=True)
class AffinityRecord:
    drug_id: str
    target_id: str
    smiles: str
    fasta: str
    affinity: float

    @property
    def key(self) -> PairKey:
        return self.drug_id, self.target_id


@dataclass
class DatasetSplit:
    train: List[AffinityRecord]
    test: List[AffinityRecord]

    @property
    def records(self) -> List[AffinityRecord]:
        return self.train + self.test


def _read_table(path: Union[str, Path], columns: Sequence[str], what: str) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise DataError(f'{what} file not found: {path}')
    try:
        frame = pd.read_csv(
            path, sep='\t', dtype=str, keep_default_na=False, skip_blank_lines=False,
            quoting=csv.QUOTE_NONE, encoding='utf-8',
        )
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise DataError(f'{path}: cannot parse {what} file: {e}')
    except pd.errors.EmptyDataError:
        raise DataError(f'{path}: {what} file is empty')
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: header is missing column(s) {', '.join(missing)}; expected {' '.join(columns)}")
    return frame[list(columns)]


def _cell(row: pd.Series, column: str) -> str:
    value = row[column]
    return value.strip() if isinstance(value, str) else ''


def read_records(path: Union[str, Path]) -> List[AffinityRecord]:
    """Parse and validate every row; errors cite the file line number"""
    frame = _read_table(path, DATASET_COLUMNS, 'dataset')
    if frame.empty:
        raise DataError(f'{path}: dataset has no rows')
    records: List[AffinityRecord] = []
    seen: Dict[PairKey, int] = {}
    for index, row in frame.iterrows():
        line = int(index) + 2
        for column in DATASET_COLUMNS:
            if not _cell(row, column):
                raise DataError(f'{path}:{line}: empty {column}')
        try:
            affinity = float(_cell(row, 'affinity'))
        except ValueError:
            raise DataError(f"{path}:{line}: affinity {row['affinity']!r} is not a number")
        if not math.isfinite(affinity):
            raise DataError(f'{path}:{line}: affinity must be finite, got {affinity}')
        record = AffinityRecord(
            drug_id=_cell(row, 'drug_id'), target_id=_cell(row, 'target_id'),
            smiles=_cell(row, 'smiles'), fasta=_cell(row, 'fasta'), affinity=affinity,
        )
        if record.key in seen:
            raise DataError(f'{path}:{line}: duplicate pair {record.key} (first on line {seen[record.key]})')
        seen[record.key] = line
        records.append(record)
    logger.info(f'loaded {len(records)} records from {path}')
    return records


def split_records(records: Sequence[AffinityRecord], test_fraction: float = 1.0 / 6.0,
                  seed: int = 0) -> DatasetSplit:
    """Seeded shuffle, then the first round(n * test_fraction) records become the test split"""
    if not 0.0 <= test_fraction < 1.0:
        raise ConfigError(f'test_fraction must be in [0, 1), got {test_fraction}')
    order = np.random.default_rng(seed).permutation(len(records))
    n_test = int(round(len(records) * test_fraction))
    if n_test >= len(records):
        raise DataError(f'{len(records)} records leave nothing to train on with test_fraction {test_fraction}')
    test = [records[i] for i in order[:n_test]]
    train = [records[i] for i in order[n_test:]]
    return DatasetSplit(train=train, test=test)


def load_dataset(path: Union[str, Path], test_fraction: float = 1.0 / 6.0, seed: int = 0) -> DatasetSplit:
    return split_records(read_records(path), test_fraction, seed)


def parse_positions(text: str) -> Set[int]:
    if not text.strip():
        return set()
    return {int(part) for part in text.split(',') if part.strip()}


def load_sites(path: Union[str, Path]) -> Dict[PairKey, Set[int]]:
    frame = _read_table(path, SITES_COLUMNS, 'sites')
    sites: Dict[PairKey, Set[int]] = {}
    for index, row in frame.iterrows():
        try:
            positions = parse_positions(_cell(row, 'positions'))
        except ValueError:
            raise DataError(f"{path}:{int(index) + 2}: positions {row['positions']!r} are not integers")
        if any(p < 0 for p in positions):
            raise DataError(f'{path}:{int(index) + 2}: positions must be 0-based non-negative indices')
        sites[(_cell(row, 'drug_id'), _cell(row, 'target_id'))] = positions
    return sites


def write_records(records: Sequence[AffinityRecord], path: Union[str, Path]):
    frame = pd.DataFrame(
        [[r.drug_id, r.target_id, r.smiles, r.fasta, repr(float(r.affinity))] for r in records],
        columns=DATASET_COLUMNS,
    )
    frame.to_csv(path, sep='\t', index=False, lineterminator='\n')


def write_sites(sites: Dict[PairKey, Set[int]], path: Union[str, Path]):
    rows = [[drug, target, ','.join(str(p) for p in sorted(positions))] for (drug, target), positions in sites.items()]
    pd.DataFrame(rows, columns=SITES_COLUMNS).to_csv(path, sep='\t', index=False, lineterminator='\n')


__all__ = [
    'AffinityRecord', 'DatasetSplit', 'DATASET_COLUMNS', 'SITES_COLUMNS',
    'read_records', 'split_records', 'load_dataset', 'load_sites', 'parse_positions',
    'write_records', 'write_sites',
]
