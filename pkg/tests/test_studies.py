import math

import pytest

from gca_dti.config import GcaConfig
from gca_dti.data_fetchers.synthetic import load_synthetic_spec
from gca_dti.studies import (
    motif_mutation,
    planted_site_hit,
    relative_improvement,
    synthetic_split,
    train_planted_model,
)

SEEDS = range(5)


def _spec(**changes):
    values = dict(n_drugs=6, n_targets=4, drug_len_min=10, drug_len_max=14, protein_len_min=20,
                  protein_len_max=30, drug_motif_len=3, protein_motif_len=4, motif_rate=1.0)
    values.update(changes)
    return load_synthetic_spec(overrides={k: str(v) for k, v in values.items()})


@pytest.fixture
def tiny_config():
    return GcaConfig(embed_dim=8, num_heads=2, head_hidden=8, max_len_drug=16, max_len_protein=32,
                     epochs=2, batch_size=8, seed=0)


def test_synthetic_split_follows_seed():
    data, split = synthetic_split(_spec(), 3, 0.25)
    again, split_again = synthetic_split(_spec(), 3, 0.25)
    assert data.records == again.records
    assert [r.key for r in split.test] == [r.key for r in split_again.test]
    assert len(split.test) == 6
    other, _ = synthetic_split(_spec(), 4, 0.25)
    assert other.records != data.records


def test_relative_improvement_rows(tiny_config):
    rows = relative_improvement(tiny_config, _spec(), [0, 1])
    assert [r.seed for r in rows] == [0, 1]
    for row in rows:
        assert row.params_matched
        assert math.isfinite(row.gca_mse) and math.isfinite(row.none_mse)
        assert row.gca_wins == (row.gca_mse < row.none_mse and row.gca_c_index > row.none_c_index)


def test_planted_site_hit_summary(tiny_config):
    model, data, split = train_planted_model(tiny_config, _spec(), 0)
    assert model.config.interaction == 'gca'
    summary = planted_site_hit(model, data, split, trials=20)
    assert summary.best_head in {'head0', 'head1'}
    assert summary.n_evaluated == len(split.test)
    assert 0.0 <= summary.hit_rate <= 1.0 and 0.0 <= summary.chance <= 1.0
    assert summary.margin == summary.hit_rate - summary.chance


def test_motif_mutation_targets_a_planted_site(tiny_config):
    model, data, split = train_planted_model(tiny_config, _spec(), 0)
    result = motif_mutation(model, data, split)
    assert result.position in data.sites[(result.drug_id, result.target_id)]
    fasta = next(r.fasta for r in data.records if r.key == (result.drug_id, result.target_id))
    assert result.residue != fasta[result.position]
    assert result.shifted == (result.max_abs_delta > 0)


# ---------------------------------------------------------------- desk-scale runs

DESK_SPEC = dict(n_drugs=40, n_targets=12, drug_len_min=20, drug_len_max=30, protein_len_min=60,
                 protein_len_max=80, drug_motif_len=4, protein_motif_len=6, n_motifs=2, motif_rate=0.5, sigma=0.3)


@pytest.fixture(scope='module')
def desk_config():
    return GcaConfig(embed_dim=16, num_heads=2, head_hidden=32, max_len_drug=32, max_len_protein=80,
                     learning_rate=0.005, batch_size=16, epochs=30)


@pytest.fixture(scope='module')
def planted_models(desk_config):
    return [train_planted_model(desk_config, _spec(**DESK_SPEC), seed) for seed in SEEDS]


@pytest.mark.slow
def test_gca_beats_matched_baseline(desk_config):
    rows = relative_improvement(desk_config, _spec(**DESK_SPEC), SEEDS)
    assert all(r.params_matched for r in rows)
    assert sum(r.gca_wins for r in rows) >= 3


@pytest.mark.slow
def test_planted_sites_beat_chance(planted_models):
    margins = [planted_site_hit(*trained).margin for trained in planted_models]
    assert sum(margins) / len(margins) >= 0.15


@pytest.mark.slow
def test_motif_mutation_shifts_ranks(planted_models):
    assert sum(motif_mutation(*trained).shifted for trained in planted_models) >= 3
