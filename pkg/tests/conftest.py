import numpy as np
import pytest

from gca_dti.config import GcaConfig
from gca_dti.data_fetchers.dataset_loader import AffinityRecord
from gca_dti.engine import train
from gca_dti.model import build_vocabularies, create_model, encode_records

TOY_RECORDS = [
    AffinityRecord('D1', 'T1', 'CC(=O)Oc1ccccc1', 'MKTAYIAKQRQISFVKSH', 11.1),
    AffinityRecord('D1', 'T2', 'CC(=O)Oc1ccccc1', 'MSEQNNTEMTFQIQRIYT', 12.4),
    AffinityRecord('D2', 'T1', 'CN1CCCC1c2cccnc2', 'MKTAYIAKQRQISFVKSH', 13.0),
    AffinityRecord('D2', 'T2', 'CN1CCCC1c2cccnc2', 'MSEQNNTEMTFQIQRIYT', 10.7),
    AffinityRecord('D3', 'T1', 'OC(=O)CCc1ccccc1N', 'MKTAYIAKQRQISFVKSH', 11.8),
    AffinityRecord('D3', 'T3', 'OC(=O)CCc1ccccc1N', 'MGLSDGEWQQVLNVWGKV', 12.9),
    AffinityRecord('D4', 'T2', 'c1ccc2nccc2c1', 'MSEQNNTEMTFQIQRIYT', 14.2),
    AffinityRecord('D4', 'T3', 'c1ccc2nccc2c1', 'MGLSDGEWQQVLNVWGKV', 11.5),
]


@pytest.fixture
def toy_records():
    return list(TOY_RECORDS)


@pytest.fixture
def vocabs():
    return build_vocabularies([r.smiles for r in TOY_RECORDS], [r.fasta for r in TOY_RECORDS])


@pytest.fixture
def small_config():
    return GcaConfig(
        encoder='embed', embed_dim=8, num_heads=2, head_hidden=12,
        max_len_drug=20, max_len_protein=24, learning_rate=0.005, batch_size=4, epochs=3, seed=0,
    )


@pytest.fixture
def make_model(vocabs):
    def _make(config, target_mean=None):
        mean = float(np.mean([r.affinity for r in TOY_RECORDS])) if target_mean is None else target_mean
        return create_model(config, *vocabs, target_mean=mean)
    return _make


@pytest.fixture
def toy_pairs(make_model, small_config):
    model = make_model(small_config)
    return encode_records(model, TOY_RECORDS)


@pytest.fixture(scope='session')
def overfit_log():
    """500 full-batch epochs of the default gca model on the toy records"""
    config = GcaConfig(
        embed_dim=16, num_heads=2, head_hidden=32, max_len_drug=20, max_len_protein=24,
        learning_rate=0.005, batch_size=8, epochs=500, seed=0,
    )
    drug_vocab, protein_vocab = build_vocabularies([r.smiles for r in TOY_RECORDS], [r.fasta for r in TOY_RECORDS])
    model = create_model(config, drug_vocab, protein_vocab,
                         target_mean=float(np.mean([r.affinity for r in TOY_RECORDS])))
    return train(model, encode_records(model, TOY_RECORDS), config.train_config())
