#!/usr/bin/env python3
"""
Affinity Model
Two sequence encoders, an interaction block (none | gca | decoder | ap),
valid-position pooling and a two-layer feed-forward head on [r_d; r_p].
Also parameter accounting, gate extraction and the binary checkpoint format.
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from gca_dti.attention import (
    AttentionOutput, attentive_pooling, decoder_attention, decoder_param_shapes, gca_block,
    gated_param_shapes, init_attention_value, pooling_param_shapes, subparams,
    DRUG_DIRECTION, PROTEIN_DIRECTION,
)
from gca_dti.autodiff import Tensor, add, concat, matmul, mse_loss, pool, relu, reshape
from gca_dti.config import GcaConfig, config_from_text
from gca_dti.encoders import (
    TokenSequence, Vocabulary, build_vocab, encode, encoder_param_shapes, init_encoder_value, tokenize,
)
from gca_dti.exceptions import CapabilityError, CheckpointError, ConfigError, DataError, DimensionError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'GCA1'
INTERACTION_PREFIXES = ('gca.', 'dec.', 'ap.', 'head.')
# keys that change parameter shapes or the forward pass
STRUCTURAL_KEYS = (
    'encoder', 'embed_dim', 'channels', 'drug_kernels', 'protein_kernels', 'max_len_drug', 'max_len_protein',
    'interaction', 'num_heads', 'inner_normalizer', 'outer_normalizer', 'use_residual', 'use_prenorm',
    'attend_drug', 'attend_protein', 'pooling', 'head_hidden',
)


@dataclass
class DtiModel:
    config: GcaConfig
    drug_vocab: Vocabulary
    protein_vocab: Vocabulary
    params: Dict[str, Tensor] = field(default_factory=dict)

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    @property
    def feature_dim(self) -> int:
        return self.config.encoder_config().feature_dim

    def snapshot(self) -> 'DtiModel':
        """Immutable value copy; safe to evaluate while training mutates self"""
        frozen = {}
        for name, t in self.params.items():
            copy = Tensor(t.values)
            copy.values.setflags(write=False)
            frozen[name] = copy
        return DtiModel(self.config, self.drug_vocab, self.protein_vocab, frozen)

    def load_values(self, other: 'DtiModel'):
        """Copy parameter values from a snapshot of the same model, in place"""
        for name, t in self.params.items():
            t.values[...] = other.params[name].values


@dataclass(frozen=True, eq=False)
class EncodedPair:
    drug: TokenSequence
    protein: TokenSequence
    affinity: float
    drug_id: str = ''
    target_id: str = ''


@dataclass
class ForwardTrace:
    drug_attention: Optional[AttentionOutput] = None
    protein_attention: Optional[AttentionOutput] = None
    # pooled features before (d, p) and after (d_prime, p_prime) the interaction block
    pooled: Dict[str, np.ndarray] = field(default_factory=dict)
    pooling_weights: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class HeadRanking:
    head: int
    positions: np.ndarray
    weights: np.ndarray


# ---------------------------------------------------------------- construction

def parameter_shapes(config: GcaConfig, drug_vocab_size: int, protein_vocab_size: int) -> Dict[str, Tuple[int, ...]]:
    """Every parameter name and shape in declaration order"""
    enc = config.encoder_config()
    att = config.attention_config()
    f = enc.feature_dim
    shapes: Dict[str, Tuple[int, ...]] = {}
    for prefix, size, kind in (('drug.', drug_vocab_size, 'drug'), ('protein.', protein_vocab_size, 'protein')):
        shapes.update({prefix + name: s for name, s in encoder_param_shapes(enc, size, kind).items()})
    if config.interaction == 'gca':
        shapes.update({'gca.' + name: s for name, s in gated_param_shapes(att).items()})
    elif config.interaction == 'decoder':
        shapes.update({'dec.' + name: s for name, s in decoder_param_shapes(att).items()})
    elif config.interaction == 'ap':
        shapes.update({'ap.' + name: s for name, s in pooling_param_shapes(f).items()})
    h = config.head_hidden
    shapes.update({'head.w1': (2 * f, h), 'head.b1': (h,), 'head.w2': (h, 1), 'head.b2': (1,)})
    return shapes


def _init_value(name: str, shape: Tuple[int, ...], rng: np.random.Generator, target_mean: float) -> np.ndarray:
    scope, _, local = name.partition('.')
    if scope in ('drug', 'protein'):
        return init_encoder_value(local, shape, rng)
    if scope == 'head':
        if local == 'b2':
            return np.full(shape, float(target_mean))
        if local.startswith('b'):
            return np.zeros(shape)
        gain = 2.0 if local == 'w1' else 1.0
        return rng.normal(0.0, np.sqrt(gain / shape[0]), size=shape)
    return init_attention_value(local, shape, rng)


def create_model(config: GcaConfig, drug_vocab: Vocabulary, protein_vocab: Vocabulary,
                 target_mean: float = 0.0) -> DtiModel:
    """Fresh parameters drawn from config.seed; the output bias starts at target_mean"""
    rng = np.random.default_rng(config.seed)
    params = {
        name: Tensor(_init_value(name, shape, rng, target_mean), requires_grad=True)
        for name, shape in parameter_shapes(config, len(drug_vocab), len(protein_vocab)).items()
    }
    logger.debug(f'created {config.interaction} model with {sum(t.values.size for t in params.values())} parameters')
    return DtiModel(config, drug_vocab, protein_vocab, params)


def build_vocabularies(smiles: Iterable[str], fastas: Iterable[str]) -> Tuple[Vocabulary, Vocabulary]:
    return build_vocab(list(smiles), 'drug'), build_vocab(list(fastas), 'protein')


def parameter_count(model: DtiModel, scope: str = 'total') -> int:
    """Exact scalar count; 'interaction' covers the interaction block and the head"""
    if scope == 'total':
        return sum(t.values.size for t in model.params.values())
    if scope == 'interaction':
        return sum(t.values.size for name, t in model.params.items() if name.startswith(INTERACTION_PREFIXES))
    raise ConfigError(f"unknown parameter scope {scope!r}; choose from total, interaction")


def interaction_count_for(config: GcaConfig) -> int:
    shapes = parameter_shapes(config, 2, 2)
    return sum(int(np.prod(s)) for name, s in shapes.items() if name.startswith(INTERACTION_PREFIXES))


def fair_baseline_config(config: GcaConfig, reference: Optional[GcaConfig] = None) -> GcaConfig:
    """mode=none config whose head is widened until its interaction-scope count matches
    the reference (default: config in gca mode)"""
    reference = reference or config.updated(interaction='gca')
    target = interaction_count_for(reference)
    f = config.encoder_config().feature_dim
    # head count is h * (2f + 2) + 1
    hidden = max(1, int(round((target - 1) / (2 * f + 2))))
    baseline = config.updated(interaction='none', head_hidden=hidden)
    got = interaction_count_for(baseline)
    if abs(got - target) > 0.05 * target:
        logger.warning(f'baseline interaction params {got} not within 5% of {target}')
    return baseline


def check_compatible(config: GcaConfig, model: DtiModel):
    """Raise DimensionError if config disagrees with the checkpoint's structure"""
    ours, theirs = config.model_dump(), model.config.model_dump()
    differing = [key for key in STRUCTURAL_KEYS if ours[key] != theirs[key]]
    if differing:
        details = ', '.join(f'{key}: config {ours[key]!r} vs checkpoint {theirs[key]!r}' for key in differing)
        raise DimensionError(f'config does not match checkpoint ({details})')


# ---------------------------------------------------------------- forward

def encode_pair(model: DtiModel, smiles: str, fasta: str, affinity: float = 0.0,
                drug_id: str = '', target_id: str = '') -> EncodedPair:
    cfg = model.config
    return EncodedPair(
        drug=tokenize(smiles, model.drug_vocab, cfg.max_len_drug),
        protein=tokenize(fasta, model.protein_vocab, cfg.max_len_protein),
        affinity=float(affinity), drug_id=drug_id, target_id=target_id,
    )


def encode_records(model: DtiModel, records: Iterable) -> List[EncodedPair]:
    """AffinityRecords -> EncodedPairs under the model's vocabularies and lengths"""
    return [encode_pair(model, r.smiles, r.fasta, r.affinity, r.drug_id, r.target_id) for r in records]


def _head(model: DtiModel, r_d: Tensor, r_p: Tensor) -> Tensor:
    p = model.params
    joined = reshape(concat([r_d, r_p], axis=0), (1, 2 * r_d.shape[0]))
    hidden = relu(add(matmul(joined, p['head.w1']), p['head.b1']))
    return reshape(add(matmul(hidden, p['head.w2']), p['head.b2']), (1,))


def forward(model: DtiModel, drug_seq: TokenSequence, prot_seq: TokenSequence) -> Tuple[Tensor, ForwardTrace]:
    """Scalar prediction [1] plus the attention / pooling trace"""
    cfg = model.config
    if drug_seq.valid_len < 1 or prot_seq.valid_len < 1:
        raise DataError('drug and protein inputs need at least one non-padding token')
    enc = cfg.encoder_config()
    att = cfg.attention_config()
    d = encode(drug_seq, enc, subparams(model.params, 'drug.'))
    p = encode(prot_seq, enc, subparams(model.params, 'protein.'))
    nd, np_ = drug_seq.valid_len, prot_seq.valid_len
    trace = ForwardTrace()

    r_d0 = pool(d, cfg.pooling, nd)
    r_p0 = pool(p, cfg.pooling, np_)
    trace.pooled['d'], trace.pooled['p'] = r_d0.numpy(), r_p0.numpy()

    if cfg.interaction == 'ap':
        r_d, r_p, w_d, w_p = attentive_pooling(d, p, subparams(model.params, 'ap.'), nd, np_)
        trace.pooling_weights = {'drug': w_d, 'protein': w_p}
    else:
        d_out, p_out = d, p
        if cfg.interaction == 'gca':
            d_out, p_out, trace.drug_attention, trace.protein_attention = gca_block(
                d, p, subparams(model.params, 'gca.'), att, nd, np_,
            )
        elif cfg.interaction == 'decoder':
            if att.attend_drug:
                trace.drug_attention = decoder_attention(
                    d, p, subparams(model.params, 'dec.p2d.'), att, nd, np_, direction=DRUG_DIRECTION)
                d_out = trace.drug_attention.attended
            if att.attend_protein:
                trace.protein_attention = decoder_attention(
                    p, d, subparams(model.params, 'dec.d2p.'), att, np_, nd, direction=PROTEIN_DIRECTION)
                p_out = trace.protein_attention.attended
        r_d = pool(d_out, cfg.pooling, nd) if d_out is not d else r_d0
        r_p = pool(p_out, cfg.pooling, np_) if p_out is not p else r_p0
    trace.pooled['d_prime'], trace.pooled['p_prime'] = r_d.numpy(), r_p.numpy()
    return _head(model, r_d, r_p), trace


def forward_batch(model: DtiModel, pairs: Sequence[EncodedPair]) -> Tensor:
    """Predictions [B]; each example runs through forward() on its own"""
    if not pairs:
        raise DataError('empty batch')
    preds = [forward(model, pair.drug, pair.protein)[0] for pair in pairs]
    return preds[0] if len(preds) == 1 else concat(preds, axis=0)


def batch_loss(model: DtiModel, pairs: Sequence[EncodedPair]) -> Tensor:
    return mse_loss(forward_batch(model, pairs), np.array([pair.affinity for pair in pairs]))


def predict(model: DtiModel, pairs: Sequence[EncodedPair]) -> np.ndarray:
    return np.array([forward(model, pair.drug, pair.protein)[0].item() for pair in pairs])


def pooled_features(model: DtiModel, pairs: Sequence[EncodedPair]) -> Dict[str, np.ndarray]:
    """Stacked pooled d, d_prime, p, p_prime, each [n x f]"""
    traces = [forward(model, pair.drug, pair.protein)[1] for pair in pairs]
    return {key: np.stack([t.pooled[key] for t in traces]) for key in ('d', 'd_prime', 'p', 'p_prime')}


# ---------------------------------------------------------------- interpretability

def ranks_from_gate(gate: np.ndarray, valid_len: int) -> np.ndarray:
    """Valid positions by descending weight; ties keep position order"""
    return np.argsort(-np.asarray(gate[:valid_len]), kind='stable')


def _rankings(output: Optional[AttentionOutput]) -> List[HeadRanking]:
    if output is None:
        return []
    rankings = []
    for head, gate in enumerate(output.head_gates):
        order = ranks_from_gate(gate, output.valid_len)
        rankings.append(HeadRanking(head=head, positions=order, weights=gate[order]))
    return rankings


def extract_attention(model: DtiModel, drug_seq: TokenSequence, prot_seq: TokenSequence) -> Dict[str, List[HeadRanking]]:
    """Per side and head, valid positions ranked by post-normalization gate weight.
    A disabled direction yields an empty list."""
    if model.config.interaction != 'gca':
        raise CapabilityError(f'attention extraction needs interaction=gca, model uses {model.config.interaction}')
    _, trace = forward(model, drug_seq, prot_seq)
    return {'drug': _rankings(trace.drug_attention), 'protein': _rankings(trace.protein_attention)}


# ---------------------------------------------------------------- checkpoints

def _pack_text(text: str) -> bytes:
    raw = text.encode('utf-8')
    return struct.pack('<I', len(raw)) + raw


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data, self.offset, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise CheckpointError(f'{self.path}: truncated checkpoint')
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self) -> str:
        (n,) = self.unpack('<I')
        try:
            return self.take(n).decode('utf-8')
        except UnicodeDecodeError:
            raise CheckpointError(f'{self.path}: corrupt text block')


def save_checkpoint(model: DtiModel, path: Union[str, Path]):
    """magic, config text, vocab texts, then each parameter as name, shape, <f8 values"""
    out = [CHECKPOINT_MAGIC, _pack_text(model.config.to_text()),
           _pack_text(model.drug_vocab.to_text()), _pack_text(model.protein_vocab.to_text()),
           struct.pack('<I', len(model.params))]
    for name, t in model.params.items():
        out.append(_pack_text(name))
        out.append(struct.pack('<I', t.values.ndim))
        out.append(struct.pack(f'<{t.values.ndim}Q', *t.values.shape))
        out.append(np.ascontiguousarray(t.values, dtype='<f8').tobytes())
    Path(path).write_bytes(b''.join(out))
    logger.info(f'checkpoint written: {path}')


def load_checkpoint(path: Union[str, Path]) -> DtiModel:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f'checkpoint not found: {path}')
    reader = _Reader(path.read_bytes(), str(path))
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f'{path}: not a GCA1 checkpoint')
    config = config_from_text(reader.text())
    try:
        drug_vocab = Vocabulary.from_text(reader.text(), 'drug')
        protein_vocab = Vocabulary.from_text(reader.text(), 'protein')
    except DataError as e:
        raise CheckpointError(f'{path}: bad vocabulary block: {e.message}')
    expected = parameter_shapes(config, len(drug_vocab), len(protein_vocab))
    (count,) = reader.unpack('<I')
    if count != len(expected):
        raise CheckpointError(f'{path}: {count} parameters stored, config implies {len(expected)}')
    params: Dict[str, Tensor] = {}
    for _ in range(count):
        name = reader.text()
        (ndim,) = reader.unpack('<I')
        shape = tuple(int(s) for s in reader.unpack(f'<{ndim}Q'))
        if expected.get(name) != shape:
            raise CheckpointError(f'{path}: parameter {name} has shape {shape}, config implies {expected.get(name)}')
        size = int(np.prod(shape))
        values = np.frombuffer(reader.take(8 * size), dtype='<f8').astype(np.float64).reshape(shape)
        params[name] = Tensor(values, requires_grad=True)
    if reader.offset != len(reader.data):
        raise CheckpointError(f'{path}: trailing bytes after parameters')
    return DtiModel(config, drug_vocab, protein_vocab, params)


__all__ = [
    'DtiModel', 'EncodedPair', 'ForwardTrace', 'HeadRanking',
    'parameter_shapes', 'create_model', 'build_vocabularies', 'parameter_count', 'fair_baseline_config',
    'check_compatible', 'encode_pair', 'encode_records', 'forward', 'forward_batch', 'batch_loss',
    'predict', 'pooled_features', 'ranks_from_gate', 'extract_attention', 'save_checkpoint', 'load_checkpoint',
]
