#!/usr/bin/env python3
"""
Gradient check suite
Every differentiable op, each composite block and the end-to-end model on
random float64 instances, compared against central finite differences.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Sequence, Tuple

import numpy as np

from gca_dti import autodiff as ad
from gca_dti.attention import (
    attentive_pooling, decoder_attention, gated_attention_apply, gated_attention_vector, gca_block,
    project_qkv, self_attention,
)
from gca_dti.autodiff import Tensor, finite_diff_check
from gca_dti.config import AttentionConfig, EncoderConfig, GcaConfig
from gca_dti.encoders import build_vocab, encode, init_encoder_params, tokenize
from gca_dti.exceptions import ConfigError, NumericError
from gca_dti.model import batch_loss, create_model, encode_pair

logger = logging.getLogger(__name__)

Case = Tuple[Callable[..., Tensor], List[Tensor]]
CaseBuilder = Callable[[np.random.Generator], Case]


@dataclass
class GradCheckRow:
    name: str
    seeds: int
    max_rel_error: float
    passed: bool


def _param(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _readout(rng: np.random.Generator, shape: Tuple[int, ...]) -> Callable[[Tensor], Tensor]:
    """Random linear functional, so every output coordinate reaches the loss"""
    weights = Tensor(rng.normal(size=shape))
    return lambda out: ad.sum_all(ad.mul(out, weights))


def _att_config(dim: int = 4, **changes) -> AttentionConfig:
    return AttentionConfig(dim=dim, num_heads=2, **changes)


def _gated_params(rng: np.random.Generator, dim: int, prenorm: bool = True) -> Dict[str, Tensor]:
    params = {}
    for prefix in ('p2d.', 'd2p.'):
        for name in ('W_Q', 'W_K', 'W_V', 'W_O'):
            params[prefix + name] = Tensor(rng.normal(scale=0.7, size=(dim, dim)), requires_grad=True)
        params[prefix + 'b_O'] = _param(rng, dim)
        if prenorm:
            for ln in ('ln_x', 'ln_c'):
                params[f'{prefix}{ln}.gain'] = Tensor(1.0 + 0.1 * rng.normal(size=dim), requires_grad=True)
                params[f'{prefix}{ln}.bias'] = Tensor(0.1 * rng.normal(size=dim), requires_grad=True)
    return params


# ---------------------------------------------------------------- single ops

def _matmul(rng):
    a, b = _param(rng, 4, 3), _param(rng, 3, 5)
    read = _readout(rng, (4, 5))
    return lambda a, b: read(ad.matmul(a, b)), [a, b]


def _add_broadcast(rng):
    a, b = _param(rng, 3, 4), _param(rng, 4)
    read = _readout(rng, (3, 4))
    return lambda a, b: read(ad.add(a, b)), [a, b]


def _mul_broadcast(rng):
    a, b = _param(rng, 3, 4), _param(rng, 3, 1)
    read = _readout(rng, (3, 4))
    return lambda a, b: read(ad.mul(a, b)), [a, b]


def _sub(rng):
    a, b = _param(rng, 2, 3), _param(rng, 2, 3)
    read = _readout(rng, (2, 3))
    return lambda a, b: read(ad.sub(a, b)), [a, b]


def _relu(rng):
    x = Tensor(rng.choice([-1.0, 1.0], size=(3, 4)) * rng.uniform(0.1, 1.0, size=(3, 4)), requires_grad=True)
    read = _readout(rng, (3, 4))
    return lambda x: read(ad.relu(x)), [x]


def _tanh_scale(rng):
    x = _param(rng, 3, 4)
    read = _readout(rng, (3, 4))
    return lambda x: read(ad.scale(ad.tanh(x), 0.7)), [x]


def _shape_ops(rng):
    x, y = _param(rng, 4, 3), _param(rng, 2, 3)
    read = _readout(rng, (2, 10))

    def f(x, y):
        stacked = ad.concat([ad.slice_rows(x, 1, 3), y], axis=0)
        wide = ad.concat([stacked, ad.slice_cols(x, 0, 2)], axis=1)
        return read(ad.reshape(ad.transpose(wide), (2, 10)))

    return f, [x, y]


def _softmax(rng):
    x = _param(rng, 3, 5)
    mask = np.ones((1, 5), dtype=bool)
    mask[0, 4] = False
    read = _readout(rng, (3, 5))
    return lambda x: read(ad.softmax_rows(x, mask)), [x]


def _sparsemax(rng):
    x = Tensor(rng.normal(scale=2.0, size=(3, 6)), requires_grad=True)
    read = _readout(rng, (3, 6))
    return lambda x: read(ad.sparsemax_rows(x)), [x]


def _conv1d(rng):
    x, k, b = _param(rng, 6, 2), _param(rng, 3, 2, 3), _param(rng, 3)
    read = _readout(rng, (6, 3))
    return lambda x, k, b: read(ad.conv1d(x, k, b)), [x, k, b]


def _pool_max(rng):
    x = _param(rng, 5, 3)
    read = _readout(rng, (3,))
    return lambda x: read(ad.pool(x, 'max', 4)), [x]


def _pool_mean(rng):
    x = _param(rng, 5, 3)
    read = _readout(rng, (3,))
    return lambda x: read(ad.pool(x, 'mean', 4)), [x]


def _layer_norm(rng):
    x, g, b = _param(rng, 3, 4), _param(rng, 4), _param(rng, 4)
    read = _readout(rng, (3, 4))
    return lambda x, g, b: read(ad.layer_norm(x, g, b)), [x, g, b]


def _embedding(rng):
    table = _param(rng, 5, 3)
    ids = np.array([2, 4, 2, 0])
    read = _readout(rng, (4, 3))
    return lambda table: read(ad.embedding_lookup(table, ids)), [table]


def _mse(rng):
    pred, target = _param(rng, 4), _param(rng, 4)
    return lambda pred, target: ad.mse_loss(pred, target), [pred, target]


# ---------------------------------------------------------------- composite blocks

def _encoder_cnn(rng):
    config = EncoderConfig(kind='cnn', embed_dim=3, channels=(4, 2), drug_kernels=(3, 5),
                           protein_kernels=(3, 3), max_len_drug=10, max_len_protein=10)
    vocab = build_vocab(['CNOS'], 'drug')
    seq = tokenize('CCNOSCN', vocab, 10)
    params = init_encoder_params(config, len(vocab), 'drug', rng)
    names = list(params)
    read = _readout(rng, (10, 2))
    return lambda *ts: read(encode(seq, config, dict(zip(names, ts)))), [params[n] for n in names]


def _project_qkv(rng):
    x, wq, wk, wv = _param(rng, 3, 4), _param(rng, 4, 4), _param(rng, 4, 4), _param(rng, 4, 4)
    reads = [_readout(rng, (3, 4)) for _ in range(3)]

    def f(x, wq, wk, wv):
        q, k, v = project_qkv(x, wq, wk, wv)
        return ad.add(ad.add(reads[0](q), reads[1](k)), reads[2](v))

    return f, [x, wq, wk, wv]


def _self_attention(rng):
    config = _att_config()
    x = _param(rng, 5, 4)
    weights = {n: _param(rng, 4, 4) for n in ('W_Q', 'W_K', 'W_V')}
    read = _readout(rng, (5, 4))
    return (lambda x, q, k, v: read(self_attention(x, {'W_Q': q, 'W_K': k, 'W_V': v}, config, 4).attended),
            [x, *weights.values()])


def _decoder_attention(rng):
    config = _att_config()
    x, c = _param(rng, 4, 4), _param(rng, 6, 4)
    weights = [_param(rng, 4, 4) for _ in range(3)]
    read = _readout(rng, (4, 4))
    return (lambda x, c, q, k, v: read(decoder_attention(x, c, {'W_Q': q, 'W_K': k, 'W_V': v}, config, 3, 5).attended),
            [x, c, *weights])


def _gated_vector_apply(rng, inner: str = 'softmax'):
    config = _att_config(inner_normalizer=inner)
    x, c, v = _param(rng, 5, 4), _param(rng, 3, 4), _param(rng, 5, 2)
    wq, wk = _param(rng, 4, 4), _param(rng, 4, 4)
    read = _readout(rng, (5, 2))

    def f(x, c, v, wq, wk):
        gates = gated_attention_vector(x, c, {'W_Q': wq, 'W_K': wk}, config, 4, 2)
        out, _ = gated_attention_apply(ad.add(gates[0], gates[1]), v, config, 4)
        return read(out)

    return f, [x, c, v, wq, wk]


def _gca_block(rng):
    config = _att_config(dim=8)
    d, p = _param(rng, 6, 8), _param(rng, 6, 8)
    params = _gated_params(rng, 8)
    names = list(params)
    read_d, read_p = _readout(rng, (6, 8)), _readout(rng, (6, 8))

    def f(d, p, *ts):
        d_out, p_out, _, _ = gca_block(d, p, dict(zip(names, ts)), config, 5, 4)
        return ad.add(read_d(d_out), read_p(p_out))

    return f, [d, p, *[params[n] for n in names]]


def _attentive_pooling(rng):
    d, p, u = _param(rng, 4, 3), _param(rng, 5, 3), _param(rng, 3, 3)
    read_d, read_p = _readout(rng, (3,)), _readout(rng, (3,))

    def f(d, p, u):
        r_d, r_p, _, _ = attentive_pooling(d, p, {'U': u}, 3, 4)
        return ad.add(read_d(r_d), read_p(r_p))

    return f, [d, p, u]


def tiny_model_config(**changes) -> GcaConfig:
    values = dict(encoder='embed', embed_dim=4, num_heads=2, head_hidden=6,
                  max_len_drug=5, max_len_protein=7, interaction='gca', seed=0)
    values.update(changes)
    return GcaConfig(**values)


def _model_case(interaction: str) -> CaseBuilder:
    def build(rng):
        config = tiny_model_config(interaction=interaction, seed=int(rng.integers(0, 2 ** 31)))
        drug_vocab = build_vocab(['CNO'], 'drug')
        protein_vocab = build_vocab(['ACDE'], 'protein')
        model = create_model(config, drug_vocab, protein_vocab, target_mean=1.0)
        for t in model.parameters():
            # non-zero output projections so every path carries gradient
            if not t.values.any():
                t.values[...] = 0.3 * rng.normal(size=t.shape)
        pairs = [encode_pair(model, 'CNOC', 'ACDEAC', 2.0), encode_pair(model, 'ONCCN', 'DEA', -1.0)]
        names = list(model.params)

        def f(*ts):
            model.params = dict(zip(names, ts))
            return batch_loss(model, pairs)

        return f, model.parameters()

    return build


CASES: Dict[str, CaseBuilder] = {
    'matmul': _matmul,
    'add_broadcast': _add_broadcast,
    'sub': _sub,
    'mul_broadcast': _mul_broadcast,
    'relu': _relu,
    'tanh_scale': _tanh_scale,
    'shape_ops': _shape_ops,
    'softmax_rows': _softmax,
    'sparsemax_rows': _sparsemax,
    'conv1d': _conv1d,
    'pool_max': _pool_max,
    'pool_mean': _pool_mean,
    'layer_norm': _layer_norm,
    'embedding_lookup': _embedding,
    'mse_loss': _mse,
    'encoder_cnn': _encoder_cnn,
    'project_qkv': _project_qkv,
    'self_attention': _self_attention,
    'decoder_attention': _decoder_attention,
    'gated_attention': _gated_vector_apply,
    'gated_attention_sparse': lambda rng: _gated_vector_apply(rng, 'sparsemax'),
    'gca_block': _gca_block,
    'attentive_pooling': _attentive_pooling,
    'model_gca': _model_case('gca'),
    'model_decoder': _model_case('decoder'),
    'model_ap': _model_case('ap'),
    'model_none': _model_case('none'),
}


# draws closer than this to a relu or max-pool kink are redrawn
KINK_MARGIN = 1e-3
MAX_DRAWS = 20
# smaller gaps come from identical rows, which move together
TIE_FLOOR = 1e-9


def kink_margin(out: Tensor) -> float:
    """Smallest distance in the graph of out from a relu input to 0, or from a
    max-pool winner to another row of its column"""
    margin = np.inf
    for node in ad.Graph.trace(out).nodes:
        if not node.parents:
            continue
        if node.op == 'relu':
            gaps = np.abs(node.parents[0].values)
        elif node.op == 'pool_max':
            gaps = np.abs(node.parents[0].values - node.values)
        else:
            continue
        gaps = gaps[gaps > TIE_FLOOR]
        if gaps.size:
            margin = min(margin, float(gaps.min()))
    return margin


def draw_case(name: str, seed: int, margin: float = KINK_MARGIN) -> Case:
    """Builds the named case from seed, redrawing until every kink is at least margin away"""
    try:
        builder = CASES[name]
    except KeyError:
        raise ConfigError(f"unknown gradient check case {name!r}; choose from {', '.join(CASES)}")
    rng = np.random.default_rng(seed)
    for _ in range(MAX_DRAWS):
        f, inputs = builder(rng)
        if kink_margin(f(*inputs)) >= margin:
            return f, inputs
        logger.debug(f'gradcheck {name}[seed={seed}]: draw within {margin:.0e} of a kink, redrawing')
    raise NumericError(f'{name}[seed={seed}]: no draw clear of relu / max-pool kinks in {MAX_DRAWS} tries')


def run_case(name: str, seed: int, h: float = 1e-5, tol: float = 1e-4) -> ad.GradCheckReport:
    f, inputs = draw_case(name, seed)
    return finite_diff_check(f, inputs, h=h, tol=tol, name=f'{name}[seed={seed}]')


def run_gradcheck(seeds: Iterable[int] = range(50), names: Sequence[str] = (), h: float = 1e-5,
                  tol: float = 1e-4) -> List[GradCheckRow]:
    """One row per case: worst relative error over all seeds"""
    seeds = list(seeds)
    rows = []
    for name in names or CASES:
        worst = max(run_case(name, seed, h, tol).max_rel_error for seed in seeds)
        rows.append(GradCheckRow(name=name, seeds=len(seeds), max_rel_error=worst, passed=worst < tol))
        logger.debug(f'gradcheck {name}: {worst:.2e}')
    return rows


__all__ = [
    'GradCheckRow', 'CASES', 'KINK_MARGIN', 'tiny_model_config', 'kink_margin', 'draw_case', 'run_case', 'run_gradcheck',
]
