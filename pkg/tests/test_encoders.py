import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from gca_dti.autodiff import Tensor
from gca_dti.config import EncoderConfig
from gca_dti.encoders import (
    PAD_ID,
    UNK_ID,
    TokenSequence,
    Vocabulary,
    build_vocab,
    encode,
    encoder_param_shapes,
    init_encoder_params,
    tokenize,
)
from gca_dti.exceptions import ConfigError, DataError, DimensionError, SequenceIndexError

AMINO_ACIDS = 'ACDEFGHIKLMNPQRSTVWY'


def test_build_vocab_reserved_ids():
    vocab = build_vocab(['CC'], 'drug')
    assert vocab.symbols == ('<pad>', '<unk>', 'C')
    assert vocab.id_of('C') == 2
    assert vocab.id_of('X') == UNK_ID
    assert 'C' in vocab and '<pad>' not in vocab


def test_build_vocab_is_order_independent():
    assert build_vocab(['CCO', 'N'], 'drug') == build_vocab(['N', 'OCC'], 'drug')


def test_amino_acid_vocab_size():
    assert len(build_vocab([AMINO_ACIDS], 'protein')) == 22


def test_build_vocab_empty_corpus():
    with pytest.raises(DataError):
        build_vocab([], 'drug')


def test_tokenize_pads_and_maps_unknown():
    vocab = build_vocab(['CC'], 'drug')
    seq = tokenize('CC', vocab, 4)
    assert_array_equal(seq.ids, [2, 2, PAD_ID, PAD_ID])
    assert seq.valid_len == 2
    assert_array_equal(tokenize('CX', vocab, 4).ids, [2, UNK_ID, 0, 0])


def test_tokenize_truncates():
    vocab = build_vocab([AMINO_ACIDS], 'protein')
    seq = tokenize('A' * 120, vocab, 100)
    assert len(seq) == 100
    assert seq.valid_len == 100


def test_tokenize_rejects_empty_and_bad_length():
    vocab = build_vocab(['CC'], 'drug')
    with pytest.raises(DataError):
        tokenize('', vocab, 4)
    with pytest.raises(ConfigError):
        tokenize('CC', vocab, 0)


def test_vocab_text_round_trip(tmp_path):
    vocab = build_vocab(['CC(=O)N', 'c1ccccc1'], 'drug')
    assert Vocabulary.from_text(vocab.to_text(), 'drug') == vocab
    vocab.save(tmp_path / 'drug.vocab')
    assert Vocabulary.load(tmp_path / 'drug.vocab', 'drug') == vocab


def test_decode_skips_padding():
    vocab = build_vocab(['CCO'], 'drug')
    seq = tokenize('OCC', vocab, 6)
    assert vocab.decode(seq.ids) == 'OCC'
    with pytest.raises(SequenceIndexError):
        vocab.decode([99])


def test_substitute_checks_position():
    vocab = build_vocab(['CCO'], 'drug')
    seq = tokenize('CCO', vocab, 5)
    mutated = seq.substitute(0, vocab.id_of('O'))
    assert vocab.decode(mutated.ids) == 'OCO'
    assert vocab.decode(seq.ids) == 'CCO'
    with pytest.raises(SequenceIndexError):
        seq.substitute(3, 2)


def test_token_sequence_rejects_bad_valid_len():
    with pytest.raises(DataError):
        TokenSequence(ids=np.zeros(3, dtype=np.int64), valid_len=4, kind='drug')


def test_embed_encoder_is_table_rows():
    vocab = build_vocab(['CNO'], 'drug')
    config = EncoderConfig(kind='embed', embed_dim=5, max_len_drug=6)
    params = init_encoder_params(config, len(vocab), 'drug', np.random.default_rng(0))
    seq = tokenize('NOC', vocab, 6)
    out = encode(seq, config, params)
    assert out.shape == (6, 5)
    assert_array_equal(out.values, params['embedding'].values[seq.ids])


def test_cnn_identity_kernels_reproduce_embedding():
    vocab = build_vocab(['CNO'], 'drug')
    config = EncoderConfig(kind='cnn', embed_dim=3, channels=(3, 3), drug_kernels=(1, 3),
                           protein_kernels=(1, 3), max_len_drug=5)
    table = np.random.default_rng(1).uniform(0.1, 1.0, size=(len(vocab), 3))
    identity_wide = np.zeros((3, 3, 3))
    identity_wide[1] = np.eye(3)
    params = {
        'embedding': Tensor(table),
        'conv0.kernel': Tensor(np.eye(3)[None]),
        'conv0.bias': Tensor(np.zeros(3)),
        'conv1.kernel': Tensor(identity_wide),
        'conv1.bias': Tensor(np.zeros(3)),
    }
    seq = tokenize('CONC', vocab, 5)
    assert_allclose(encode(seq, config, params).values, table[seq.ids])


def test_cnn_param_shapes_chain_channels():
    config = EncoderConfig(kind='cnn', embed_dim=4, channels=(6, 8), drug_kernels=(3, 5), protein_kernels=(5, 7))
    shapes = encoder_param_shapes(config, 10, 'protein')
    assert shapes == {
        'embedding': (10, 4),
        'conv0.kernel': (5, 4, 6), 'conv0.bias': (6,),
        'conv1.kernel': (7, 6, 8), 'conv1.bias': (8,),
    }


def test_conv_layer_count_follows_channels():
    config = EncoderConfig(kind='cnn', embed_dim=3, channels=(5,), drug_kernels=(3,), protein_kernels=(7,),
                           max_len_drug=6)
    assert config.conv_layers == 1
    vocab = build_vocab(['CNO'], 'drug')
    params = init_encoder_params(config, len(vocab), 'drug', np.random.default_rng(0))
    assert sorted(params) == ['conv0.bias', 'conv0.kernel', 'embedding']
    assert encode(tokenize('CNOC', vocab, 6), config, params).shape == (6, 5)
    deeper = config.model_copy(update={'channels': (5, 4), 'drug_kernels': (3, 3), 'protein_kernels': (7, 7)})
    with pytest.raises(ConfigError):
        encode(tokenize('CNOC', vocab, 6), deeper, params)


def test_encode_rejects_wrong_length():
    vocab = build_vocab(['CC'], 'drug')
    config = EncoderConfig(kind='embed', embed_dim=2, max_len_drug=4)
    params = init_encoder_params(config, len(vocab), 'drug', np.random.default_rng(0))
    with pytest.raises(DimensionError):
        encode(tokenize('CC', vocab, 3), config, params)
