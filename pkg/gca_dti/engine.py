#!/usr/bin/env python3
"""
Training Engine
Mini-batch Adam training on MSE, evaluation, the interaction-mode
comparison runner and per-epoch feature-similarity tracking.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from gca_dti.autodiff import AdamState, adam_step, backward, zero_grad
from gca_dti.config import GcaConfig, TrainConfig
from gca_dti.exceptions import ConfigError, DataError, NumericError
from gca_dti.metrics import EvalReport, SimilarityGrid, evaluate_predictions, similarity_grid
from gca_dti.model import (
    DtiModel, EncodedPair, batch_loss, create_model, encode_records, fair_baseline_config,
    parameter_count, pooled_features, predict,
)

logger = logging.getLogger(__name__)

EpochCallback = Callable[[int, DtiModel], None]

# variant name -> config changes on top of the gca base config
COMPARISON_VARIANTS: Dict[str, Dict[str, object]] = {
    'none': {'interaction': 'none'},
    'gca': {'interaction': 'gca'},
    'gca-no-drug': {'interaction': 'gca', 'attend_drug': False},
    'gca-no-target': {'interaction': 'gca', 'attend_protein': False},
    'ap': {'interaction': 'ap'},
    'decoder': {'interaction': 'decoder'},
    'gca-sparse': {'interaction': 'gca', 'inner_normalizer': 'sparsemax'},
}


@dataclass
class EpochLog:
    epoch: int
    train_mse: float
    valid_mse: float = float('nan')
    valid_c_index: float = float('nan')


@dataclass
class TrainingLog:
    epochs: List[EpochLog] = field(default_factory=list)
    best_epoch: int = 0
    best: Optional[DtiModel] = None

    @property
    def train_curve(self) -> List[float]:
        return [e.train_mse for e in self.epochs]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(e) for e in self.epochs], columns=['epoch', 'train_mse', 'valid_mse', 'valid_c_index'])


@dataclass
class ComparisonRow:
    variant: str
    mse: float
    c_index: float
    interaction_params: int
    total_params: int


def _check_modes(model: DtiModel, config: TrainConfig):
    mc = model.config
    if (config.interaction, config.attend_drug, config.attend_protein) != (mc.interaction, mc.attend_drug, mc.attend_protein):
        raise ConfigError(
            f'training config asks for interaction={config.interaction} '
            f'(attend_drug={config.attend_drug}, attend_protein={config.attend_protein}) '
            f'but the model was built with interaction={mc.interaction} '
            f'(attend_drug={mc.attend_drug}, attend_protein={mc.attend_protein})'
        )


def train(model: DtiModel, dataset: Sequence[EncodedPair], config: TrainConfig,
          valid: Optional[Sequence[EncodedPair]] = None,
          on_epoch_end: Optional[EpochCallback] = None) -> TrainingLog:
    """Adam on per-batch MSE with a seeded shuffle each epoch.
    Keeps a snapshot of the epoch with the lowest validation MSE (train MSE without validation)."""
    if not dataset:
        raise DataError('cannot train on an empty dataset')
    _check_modes(model, config)
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    state = AdamState()
    log = TrainingLog()
    best_score = np.inf
    n = len(dataset)

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        squared_error = 0.0
        for start in range(0, n, config.batch_size):
            batch = [dataset[i] for i in order[start:start + config.batch_size]]
            zero_grad(params)
            loss = batch_loss(model, batch)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(
                    f'loss became {value} at epoch {epoch}; lower learning_rate '
                    f'(now {config.learning_rate}) or check for exploding gradients'
                )
            backward(loss)
            adam_step(params, state, config.learning_rate)
            squared_error += value * len(batch)

        entry = EpochLog(epoch=epoch, train_mse=squared_error / n)
        if valid:
            report = evaluate(model, valid)
            entry.valid_mse, entry.valid_c_index = report.mse, report.c_index
        log.epochs.append(entry)
        logger.info(
            f'epoch {epoch}/{config.epochs} train_mse={entry.train_mse:.4f} '
            f'valid_mse={entry.valid_mse:.4f} valid_c_index={entry.valid_c_index:.4f}'
        )

        score = entry.valid_mse if valid else entry.train_mse
        if score < best_score:
            best_score = score
            log.best_epoch = epoch
            log.best = model.snapshot()
        if on_epoch_end is not None:
            on_epoch_end(epoch, model)
    return log


def evaluate(model: DtiModel, pairs: Sequence[EncodedPair]) -> EvalReport:
    """MSE and C-index; C-index is NaN when every target is equal"""
    if not pairs:
        raise DataError('cannot evaluate an empty dataset')
    pred = predict(model, pairs)
    truth = np.array([pair.affinity for pair in pairs])
    try:
        return evaluate_predictions(pred, truth)
    except DataError:
        mse = float(np.mean((pred - truth) ** 2))
        return EvalReport(mse=mse, c_index=float('nan'), n_pairs_evaluated=len(pairs))


class SimilarityTracker:
    """Epoch callback recording the pooled-feature similarity grid on a fixed probe set"""

    def __init__(self, probe: Sequence[EncodedPair]):
        if len(probe) < 2:
            raise DataError('similarity tracking needs at least 2 probe pairs')
        self.probe = list(probe)
        self.grids: List[SimilarityGrid] = []

    def __call__(self, epoch: int, model: DtiModel):
        feats = pooled_features(model.snapshot(), self.probe)
        grid = similarity_grid(feats['d'], feats['d_prime'], feats['p'], feats['p_prime'], step=epoch)
        self.grids.append(grid)
        if grid.mixing:
            logger.info(f"epoch {epoch}: p' closer to d ({grid.grid[3, 0]:.3f}) than to p ({grid.grid[3, 2]:.3f})")

    @property
    def mixing_epochs(self) -> List[int]:
        return [g.step for g in self.grids if g.mixing]


def variant_config(base: GcaConfig, variant: str) -> GcaConfig:
    """Config for one comparison variant; 'none' gets the parameter-matched head"""
    try:
        changes = COMPARISON_VARIANTS[variant]
    except KeyError:
        raise ConfigError(f"unknown variant {variant!r}; choose from {', '.join(COMPARISON_VARIANTS)}")
    gca_base = base.updated(interaction='gca', attend_drug=True, attend_protein=True)
    if variant == 'none':
        return fair_baseline_config(gca_base)
    return gca_base.updated(**changes)


def run_comparison(base: GcaConfig, train_records: Sequence, test_records: Sequence,
                   drug_vocab, protein_vocab, variants: Sequence[str]) -> List[ComparisonRow]:
    """Train and evaluate each variant on one split with the same seed"""
    if not test_records:
        raise DataError('comparison needs a non-empty test split')
    target_mean = float(np.mean([r.affinity for r in train_records]))
    rows = []
    for variant in variants:
        config = variant_config(base, variant)
        model = create_model(config, drug_vocab, protein_vocab, target_mean=target_mean)
        train_pairs = encode_records(model, train_records)
        test_pairs = encode_records(model, test_records)
        logger.info(f'training variant {variant} ({parameter_count(model, "interaction")} interaction params)')
        train(model, train_pairs, config.train_config())
        report = evaluate(model, test_pairs)
        rows.append(ComparisonRow(
            variant=variant, mse=report.mse, c_index=report.c_index,
            interaction_params=parameter_count(model, 'interaction'),
            total_params=parameter_count(model, 'total'),
        ))
    return rows


def comparison_frame(rows: Sequence[ComparisonRow]) -> pd.DataFrame:
    return pd.DataFrame([asdict(r) for r in rows], columns=['variant', 'mse', 'c_index', 'interaction_params', 'total_params'])


# Export for use
__all__ = [
    'EpochLog', 'TrainingLog', 'ComparisonRow', 'SimilarityTracker', 'COMPARISON_VARIANTS',
    'train', 'evaluate', 'variant_config', 'run_comparison', 'comparison_frame',
]
