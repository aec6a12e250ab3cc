#!/usr/bin/env python3
"""
Attention Mechanisms
Encoder self-attention, decoder attention, multi-head gated cross attention
(context-level gate vectors, residual + pre-norm) and attentive pooling.

Direction names follow the attended side: 'p->d' gates drug positions using
protein queries, 'd->p' gates protein positions using drug queries.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from gca_dti.autodiff import (
    Tensor, add, concat, layer_norm, matmul, mul, normalize_rows, pool, reshape,
    scale, slice_cols, slice_rows, softmax_rows, tanh, transpose,
)
from gca_dti.config import AttentionConfig
from gca_dti.exceptions import ConfigError, DataError, DimensionError

logger = logging.getLogger(__name__)

DRUG_DIRECTION = 'p->d'
PROTEIN_DIRECTION = 'd->p'

GATED_PARAM_NAMES = ('ln_x.gain', 'ln_x.bias', 'ln_c.gain', 'ln_c.bias', 'W_Q', 'W_K', 'W_V', 'W_O', 'b_O')
DECODER_PARAM_NAMES = ('W_Q', 'W_K', 'W_V')


@dataclass
class AttentionOutput:
    attended: Tensor
    direction: str
    valid_len: int
    # per head, over the attended side's positions; zero at padding
    raw_gates: List[np.ndarray] = field(default_factory=list)
    head_gates: List[np.ndarray] = field(default_factory=list)
    # token-level maps for self / decoder attention
    head_maps: List[np.ndarray] = field(default_factory=list)


def subparams(params: Mapping[str, Tensor], prefix: str) -> Dict[str, Tensor]:
    """View of params under prefix with the prefix stripped (same Tensor objects)"""
    return {name[len(prefix):]: t for name, t in params.items() if name.startswith(prefix)}


def _param(params: Mapping[str, Tensor], name: str) -> Tensor:
    try:
        return params[name]
    except KeyError:
        raise ConfigError(f'attention parameter {name!r} missing')


def _valid(valid_len: Optional[int], length: int, side: str) -> int:
    n = length if valid_len is None else int(valid_len)
    if n < 1:
        raise DataError(f'{side} input is all padding')
    if n > length:
        raise DimensionError(f'{side} valid length {n} exceeds sequence length {length}')
    return n


def _key_mask(valid_len: int, length: int) -> np.ndarray:
    mask = np.zeros((1, length), dtype=bool)
    mask[0, :valid_len] = True
    return mask


def _check_dim(x: Tensor, config: AttentionConfig, side: str):
    if x.values.ndim != 2 or x.shape[1] != config.dim:
        raise DimensionError(f'{side} features have shape {x.shape}, attention expects [L x {config.dim}]')


def _heads(x: Tensor, config: AttentionConfig) -> List[Tensor]:
    if config.num_heads == 1:
        return [x]
    d = config.head_dim
    return [slice_cols(x, h * d, (h + 1) * d) for h in range(config.num_heads)]


def _scores(q: Tensor, k: Tensor, head_dim: int) -> Tensor:
    return scale(matmul(q, transpose(k)), 1.0 / np.sqrt(head_dim))


def _merge(heads: List[Tensor]) -> Tensor:
    return heads[0] if len(heads) == 1 else concat(heads, axis=1)


def project_qkv(x: Tensor, W_Q: Tensor, W_K: Tensor, W_V: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    f = x.shape[1]
    for name, w in (('W_Q', W_Q), ('W_K', W_K), ('W_V', W_V)):
        if w.shape != (f, f):
            raise DimensionError(f'{name} has shape {w.shape}, expected {(f, f)}')
    return matmul(x, W_Q), matmul(x, W_K), matmul(x, W_V)


def self_attention(x: Tensor, params: Mapping[str, Tensor], config: AttentionConfig,
                   valid_len: Optional[int] = None) -> AttentionOutput:
    """softmax(Q K^T / sqrt(b)) V per head over one modality, heads concatenated"""
    _check_dim(x, config, 'self-attention')
    n = _valid(valid_len, x.shape[0], 'self-attention')
    q, k, v = project_qkv(x, _param(params, 'W_Q'), _param(params, 'W_K'), _param(params, 'W_V'))
    mask = _key_mask(n, x.shape[0])
    outputs, maps = [], []
    for q_h, k_h, v_h in zip(_heads(q, config), _heads(k, config), _heads(v, config)):
        a = normalize_rows(_scores(q_h, k_h, config.head_dim), config.inner_normalizer, mask)
        outputs.append(matmul(a, v_h))
        maps.append(a.values)
    return AttentionOutput(attended=_merge(outputs), direction='self', valid_len=n, head_maps=maps)


def decoder_attention(x: Tensor, counterpart: Tensor, params: Mapping[str, Tensor], config: AttentionConfig,
                      valid_len: Optional[int] = None, counterpart_valid_len: Optional[int] = None,
                      direction: str = 'decoder') -> AttentionOutput:
    """Queries from x, keys and values from the counterpart: x' = softmax(Q_x K_c^T / sqrt(b)) V_c"""
    if x.values.ndim != 2 or counterpart.values.ndim != 2 or x.shape[1] != counterpart.shape[1]:
        raise DimensionError(f'decoder attention: feature dims differ, {x.shape} vs {counterpart.shape}')
    _check_dim(x, config, 'decoder attention')
    n = _valid(valid_len, x.shape[0], 'decoder query')
    m = _valid(counterpart_valid_len, counterpart.shape[0], 'decoder counterpart')
    w_q, w_k, w_v = (_param(params, name) for name in DECODER_PARAM_NAMES)
    f = config.dim
    for name, w in zip(DECODER_PARAM_NAMES, (w_q, w_k, w_v)):
        if w.shape != (f, f):
            raise DimensionError(f'{name} has shape {w.shape}, expected {(f, f)}')
    q = matmul(x, w_q)
    k = matmul(counterpart, w_k)
    v = matmul(counterpart, w_v)
    mask = _key_mask(m, counterpart.shape[0])
    outputs, maps = [], []
    for q_h, k_h, v_h in zip(_heads(q, config), _heads(k, config), _heads(v, config)):
        a = normalize_rows(_scores(q_h, k_h, config.head_dim), config.inner_normalizer, mask)
        outputs.append(matmul(a, v_h))
        maps.append(a.values)
    return AttentionOutput(attended=_merge(outputs), direction=direction, valid_len=n, head_maps=maps)


def gated_attention_vector(x_keys: Tensor, counterpart_queries: Tensor, params: Mapping[str, Tensor],
                           config: AttentionConfig, valid_len: Optional[int] = None,
                           counterpart_valid_len: Optional[int] = None) -> List[Tensor]:
    """Per head, the context-level gate a [1 x L_x]: each counterpart query's normalized
    distribution over x's positions, averaged over the valid counterpart queries."""
    _check_dim(x_keys, config, 'gated attention keys')
    _check_dim(counterpart_queries, config, 'gated attention queries')
    length, c_length = x_keys.shape[0], counterpart_queries.shape[0]
    n = _valid(valid_len, length, 'attended')
    m = _valid(counterpart_valid_len, c_length, 'counterpart')
    w_q, w_k = _param(params, 'W_Q'), _param(params, 'W_K')
    f = config.dim
    if w_q.shape != (f, f) or w_k.shape != (f, f):
        raise DimensionError(f'W_Q {w_q.shape} / W_K {w_k.shape} must both be {(f, f)}')
    q = matmul(counterpart_queries, w_q)
    k = matmul(x_keys, w_k)
    key_mask = _key_mask(n, length)
    query_weights = np.zeros((1, c_length))
    query_weights[0, :m] = 1.0 / m
    averager = Tensor(query_weights)
    gates = []
    for q_h, k_h in zip(_heads(q, config), _heads(k, config)):
        distributions = normalize_rows(_scores(q_h, k_h, config.head_dim), config.inner_normalizer, key_mask)
        gates.append(matmul(averager, distributions))
    return gates


def gated_attention_apply(a: Tensor, values: Tensor, config: AttentionConfig,
                          valid_len: Optional[int] = None) -> Tuple[Tensor, Tensor]:
    """V' = outer_normalizer(a) (.) V, broadcast over features; returns (V', normalized gate).
    Each position is only rescaled, never mixed with others."""
    length = values.shape[0]
    if a.values.ndim == 1:
        a = reshape(a, (1, a.shape[0]))
    if a.shape != (1, length):
        raise DimensionError(f'gate of shape {a.shape} does not match {length} value rows')
    n = _valid(valid_len, length, 'gated values')
    gate = normalize_rows(a, config.outer_normalizer, _key_mask(n, length))
    return mul(values, transpose(gate)), gate


def _gated_direction(x: Tensor, c: Tensor, params: Mapping[str, Tensor], config: AttentionConfig,
                     x_valid: int, c_valid: int, direction: str) -> Tuple[Tensor, AttentionOutput]:
    if config.use_prenorm:
        x_in = layer_norm(x, _param(params, 'ln_x.gain'), _param(params, 'ln_x.bias'))
        c_in = layer_norm(c, _param(params, 'ln_c.gain'), _param(params, 'ln_c.bias'))
    else:
        x_in, c_in = x, c
    raw = gated_attention_vector(x_in, c_in, params, config, x_valid, c_valid)
    v = matmul(x_in, _param(params, 'W_V'))
    heads, gates = [], []
    for a, v_h in zip(raw, _heads(v, config)):
        out_h, gate = gated_attention_apply(a, v_h, config, x_valid)
        heads.append(out_h)
        gates.append(gate.values[0].copy())
    out = add(matmul(_merge(heads), _param(params, 'W_O')), _param(params, 'b_O'))
    if config.use_residual:
        out = add(out, x)
    return out, AttentionOutput(
        attended=out, direction=direction, valid_len=x_valid,
        raw_gates=[a.values[0].copy() for a in raw], head_gates=gates,
    )


def gca_block(d: Tensor, p: Tensor, params: Mapping[str, Tensor], config: AttentionConfig,
              d_valid: Optional[int] = None, p_valid: Optional[int] = None
              ) -> Tuple[Tensor, Tensor, Optional[AttentionOutput], Optional[AttentionOutput]]:
    """Both gated directions with separate parameters ('p2d.*', 'd2p.*').
    A disabled direction passes its side through and reports None."""
    _check_dim(d, config, 'drug')
    _check_dim(p, config, 'protein')
    nd = _valid(d_valid, d.shape[0], 'drug')
    np_ = _valid(p_valid, p.shape[0], 'protein')
    d_out, p_out = d, p
    drug_att = protein_att = None
    if config.attend_drug:
        d_out, drug_att = _gated_direction(d, p, subparams(params, 'p2d.'), config, nd, np_, DRUG_DIRECTION)
    if config.attend_protein:
        p_out, protein_att = _gated_direction(p, d, subparams(params, 'd2p.'), config, np_, nd, PROTEIN_DIRECTION)
    return d_out, p_out, drug_att, protein_att


def attentive_pooling(d: Tensor, p: Tensor, params: Mapping[str, Tensor],
                      d_valid: Optional[int] = None, p_valid: Optional[int] = None
                      ) -> Tuple[Tensor, Tensor, np.ndarray, np.ndarray]:
    """G = tanh(d U p^T); row-max / column-max softmaxed into weights over d / p.
    Returns (r_d, r_p, drug weights, protein weights)."""
    u = _param(params, 'U')
    f = d.shape[1]
    if p.shape[1] != f or u.shape != (f, f):
        raise DimensionError(f'attentive pooling: d {d.shape}, p {p.shape}, U {u.shape} do not agree')
    nd = _valid(d_valid, d.shape[0], 'drug')
    np_ = _valid(p_valid, p.shape[0], 'protein')
    d_in = d if nd == d.shape[0] else slice_rows(d, 0, nd)
    p_in = p if np_ == p.shape[0] else slice_rows(p, 0, np_)
    g = tanh(matmul(matmul(d_in, u), transpose(p_in)))
    w_d = softmax_rows(reshape(pool(transpose(g), 'max'), (1, nd)))
    w_p = softmax_rows(reshape(pool(g, 'max'), (1, np_)))
    r_d = reshape(matmul(w_d, d_in), (f,))
    r_p = reshape(matmul(w_p, p_in), (f,))
    return r_d, r_p, w_d.values[0].copy(), w_p.values[0].copy()


# ---------------------------------------------------------------- initialization

def active_directions(config: AttentionConfig) -> Tuple[str, ...]:
    """Parameter prefixes of the enabled directions, p2d before d2p"""
    return tuple(prefix for prefix, on in (('p2d', config.attend_drug), ('d2p', config.attend_protein)) if on)


def gated_param_shapes(config: AttentionConfig) -> Dict[str, Tuple[int, ...]]:
    dim = config.dim
    shapes: Dict[str, Tuple[int, ...]] = {}
    for direction in active_directions(config):
        for name in GATED_PARAM_NAMES:
            if name.startswith('ln_') and not config.use_prenorm:
                continue
            shapes[f'{direction}.{name}'] = (dim,) if name.startswith('ln_') or name == 'b_O' else (dim, dim)
    return shapes


def decoder_param_shapes(config: AttentionConfig) -> Dict[str, Tuple[int, ...]]:
    return {
        f'{direction}.{name}': (config.dim, config.dim)
        for direction in active_directions(config) for name in DECODER_PARAM_NAMES
    }


def pooling_param_shapes(dim: int) -> Dict[str, Tuple[int, ...]]:
    return {'U': (dim, dim)}


def init_attention_value(name: str, shape: Tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """Gains start at 1; output projection and biases at 0 so the gated block starts as identity"""
    leaf = name.rsplit('.', 1)[-1]
    if leaf == 'gain':
        return np.ones(shape)
    if leaf in ('bias', 'b_O', 'W_O'):
        return np.zeros(shape)
    return rng.normal(0.0, np.sqrt(1.0 / shape[0]), size=shape)


__all__ = [
    'AttentionOutput', 'DRUG_DIRECTION', 'PROTEIN_DIRECTION', 'subparams',
    'project_qkv', 'self_attention', 'decoder_attention',
    'gated_attention_vector', 'gated_attention_apply', 'gca_block', 'attentive_pooling',
    'active_directions', 'gated_param_shapes', 'decoder_param_shapes', 'pooling_param_shapes', 'init_attention_value',
]
