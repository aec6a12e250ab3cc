import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from gca_dti.config import GcaConfig
from gca_dti.encoders import build_vocab
from gca_dti.exceptions import CapabilityError, CheckpointError, ConfigError, DimensionError
from gca_dti.model import (
    check_compatible,
    create_model,
    encode_pair,
    encode_records,
    extract_attention,
    fair_baseline_config,
    forward,
    forward_batch,
    interaction_count_for,
    load_checkpoint,
    parameter_count,
    parameter_shapes,
    predict,
    ranks_from_gate,
    save_checkpoint,
)


def test_parameter_count_small_example():
    drug_vocab = build_vocab(['ABCDEFGH'], 'drug')
    protein_vocab = build_vocab(['IJKLMNOP'], 'protein')
    assert len(drug_vocab) == len(protein_vocab) == 10
    config = GcaConfig(embed_dim=4, head_hidden=8, interaction='none', max_len_drug=5, max_len_protein=5)
    model = create_model(config, drug_vocab, protein_vocab)
    assert parameter_count(model) == 2 * 10 * 4 + (8 * 8 + 8 + 8 + 1)
    assert parameter_count(model, 'interaction') == 8 * 8 + 8 + 8 + 1


def test_parameter_count_unknown_scope(make_model, small_config):
    with pytest.raises(ConfigError, match='heads'):
        parameter_count(make_model(small_config), 'heads')


def test_head_count_does_not_change_parameters(small_config):
    one = parameter_shapes(small_config.updated(num_heads=1), 10, 12)
    two = parameter_shapes(small_config.updated(num_heads=2), 10, 12)
    assert one == two


@pytest.mark.parametrize('interaction', ['none', 'gca', 'decoder', 'ap'])
def test_interaction_count_within_total(make_model, small_config, interaction):
    model = make_model(small_config.updated(interaction=interaction))
    assert 0 < parameter_count(model, 'interaction') <= parameter_count(model)
    assert parameter_count(model, 'interaction') == interaction_count_for(model.config)


def test_output_bias_starts_at_target_mean(make_model, small_config):
    model = make_model(small_config, target_mean=12.5)
    assert_array_equal(model.params['head.b2'].values, [12.5])


def test_zero_head_predicts_zero(make_model, small_config, toy_pairs):
    model = make_model(small_config)
    for name in ('head.w1', 'head.b1', 'head.w2', 'head.b2'):
        model.params[name].values[...] = 0.0
    assert_array_equal(predict(model, toy_pairs), np.zeros(len(toy_pairs)))


@pytest.mark.parametrize('interaction', ['none', 'gca', 'decoder', 'ap'])
def test_batch_matches_single_forward(make_model, small_config, toy_pairs, interaction):
    model = make_model(small_config.updated(interaction=interaction))
    batch = forward_batch(model, toy_pairs[:3])
    single, _ = forward(model, toy_pairs[1].drug, toy_pairs[1].protein)
    assert batch.shape == (3,)
    assert batch.values[1] == single.item()


def test_gca_with_both_directions_off_equals_none(make_model, small_config, toy_pairs):
    none = make_model(small_config.updated(interaction='none'))
    gated = make_model(small_config.updated(attend_drug=False, attend_protein=False))
    assert set(gated.params) == set(none.params)
    for name, t in none.params.items():
        gated.params[name].values[...] = t.values
    assert_allclose(predict(gated, toy_pairs), predict(none, toy_pairs), atol=1e-9)


@pytest.mark.parametrize('interaction', ['none', 'gca', 'decoder', 'ap'])
def test_extra_padding_leaves_predictions_unchanged(make_model, small_config, toy_records, interaction):
    config = small_config.updated(interaction=interaction)
    model = make_model(config)
    padded = make_model(config.updated(max_len_drug=31, max_len_protein=40))
    for name, t in model.params.items():
        padded.params[name].values[...] = t.values
    assert_allclose(
        predict(padded, encode_records(padded, toy_records)),
        predict(model, encode_records(model, toy_records)),
        atol=1e-9,
    )


def test_unknown_tokens_predict_finite(make_model, small_config):
    model = make_model(small_config)
    pair = encode_pair(model, 'XYZ', 'BJOU')
    pred, _ = forward(model, pair.drug, pair.protein)
    assert np.isfinite(pred.item())


def test_trace_pooled_features(make_model, small_config, toy_pairs):
    model = make_model(small_config)
    _, trace = forward(model, toy_pairs[0].drug, toy_pairs[0].protein)
    assert set(trace.pooled) == {'d', 'p', 'd_prime', 'p_prime'}
    assert trace.pooled['d'].shape == (8,)


def test_extract_attention_requires_gca(make_model, small_config, toy_pairs):
    model = make_model(small_config.updated(interaction='none'))
    with pytest.raises(CapabilityError):
        extract_attention(model, toy_pairs[0].drug, toy_pairs[0].protein)


def test_extract_attention_rankings(make_model, small_config, toy_pairs):
    model = make_model(small_config)
    pair = toy_pairs[2]
    rankings = extract_attention(model, pair.drug, pair.protein)
    assert len(rankings['drug']) == len(rankings['protein']) == 2
    for ranking in rankings['protein']:
        assert sorted(ranking.positions) == list(range(pair.protein.valid_len))
        assert abs(ranking.weights.sum() - 1.0) < 1e-12
        assert np.all(np.diff(ranking.weights) <= 0)


def test_extract_attention_disabled_direction_is_empty(make_model, small_config, toy_pairs):
    model = make_model(small_config.updated(attend_drug=False))
    rankings = extract_attention(model, toy_pairs[0].drug, toy_pairs[0].protein)
    assert rankings['drug'] == []
    assert len(rankings['protein']) == 2


def test_uniform_gates_keep_position_order(make_model, small_config, toy_pairs):
    model = make_model(small_config)
    for name in model.params:
        if name.endswith(('W_Q', 'W_K')):
            model.params[name].values[...] = 0.0
    pair = toy_pairs[0]
    for ranking in extract_attention(model, pair.drug, pair.protein)['drug']:
        assert_array_equal(ranking.positions, np.arange(pair.drug.valid_len))


def test_ranks_from_gate():
    assert_array_equal(ranks_from_gate(np.array([0.2, 0.5, 0.2, 0.1, 0.0]), 4), [1, 0, 2, 3])
    assert_array_equal(ranks_from_gate(np.array([1.0, 0.0]), 1), [0])


@pytest.mark.parametrize('interaction', ['none', 'gca', 'decoder', 'ap'])
def test_checkpoint_round_trip_is_bit_exact(tmp_path, make_model, small_config, toy_pairs, interaction):
    model = make_model(small_config.updated(interaction=interaction))
    path = tmp_path / 'model.ckpt'
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.config == model.config
    assert loaded.drug_vocab == model.drug_vocab
    assert list(loaded.params) == list(model.params)
    assert_array_equal(predict(loaded, toy_pairs), predict(model, toy_pairs))


def test_checkpoint_errors(tmp_path, make_model, small_config):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / 'missing.ckpt')
    bad = tmp_path / 'bad.ckpt'
    bad.write_bytes(b'NOPE' + b'\x00' * 16)
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    path = tmp_path / 'model.ckpt'
    save_checkpoint(make_model(small_config), path)
    data = path.read_bytes()
    (tmp_path / 'short.ckpt').write_bytes(data[:-5])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / 'short.ckpt')
    (tmp_path / 'long.ckpt').write_bytes(data + b'\x00')
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / 'long.ckpt')


def test_check_compatible(make_model, small_config):
    model = make_model(small_config)
    check_compatible(small_config.updated(learning_rate=0.1, epochs=9), model)
    with pytest.raises(DimensionError, match='embed_dim'):
        check_compatible(small_config.updated(embed_dim=16), model)


def test_snapshot_is_independent(make_model, small_config):
    model = make_model(small_config)
    snap = model.snapshot()
    before = snap.params['head.w1'].values.copy()
    model.params['head.w1'].values += 1.0
    assert_array_equal(snap.params['head.w1'].values, before)
    assert not snap.params['head.w1'].values.flags.writeable
    model.load_values(snap)
    assert_array_equal(model.params['head.w1'].values, before)


def test_fair_baseline_matches_gca_parameter_count(small_config):
    baseline = fair_baseline_config(small_config)
    assert baseline.interaction == 'none'
    target = interaction_count_for(small_config)
    assert abs(interaction_count_for(baseline) - target) <= 0.05 * target
