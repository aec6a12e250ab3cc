#!/usr/bin/env python3
"""
Sequence Encoders
Character vocabularies for SMILES / FASTA, fixed-length tokenization, and the
embedding-only or convolutional feature extractors.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple, Union

import numpy as np

from gca_dti.autodiff import Tensor, conv1d, embedding_lookup, relu
from gca_dti.config import EncoderConfig, SequenceKind
from gca_dti.exceptions import ConfigError, DataError, DimensionError, SequenceIndexError

PAD_SYMBOL = '<pad>'
UNK_SYMBOL = '<unk>'
PAD_ID = 0
UNK_ID = 1


@dataclass(frozen=True)
class Vocabulary:
    """symbols[i] is the symbol with id i; ids 0 and 1 are padding and unknown"""
    kind: SequenceKind
    symbols: Tuple[str, ...]
    index: Dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.symbols[:2] != (PAD_SYMBOL, UNK_SYMBOL):
            raise DataError(f'{self.kind} vocabulary must start with {PAD_SYMBOL}, {UNK_SYMBOL}')
        object.__setattr__(self, 'index', {s: i for i, s in enumerate(self.symbols)})
        if len(self.index) != len(self.symbols):
            raise DataError(f'{self.kind} vocabulary has duplicate symbols')

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self.index and self.index[symbol] > UNK_ID

    def id_of(self, symbol: str) -> int:
        return self.index.get(symbol, UNK_ID)

    def encode(self, text: str) -> List[int]:
        return [self.id_of(ch) for ch in text]

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == PAD_ID:
                continue
            if not 0 <= i < len(self.symbols):
                raise SequenceIndexError(f'id {i} outside {self.kind} vocabulary of {len(self.symbols)}')
            out.append(UNK_SYMBOL if i == UNK_ID else self.symbols[i])
        return ''.join(out)

    def to_text(self) -> str:
        """One 'symbol<TAB>id' line per symbol, reserved ids first"""
        return ''.join(f'{symbol}\t{i}\n' for i, symbol in enumerate(self.symbols))

    @classmethod
    def from_text(cls, text: str, kind: SequenceKind) -> 'Vocabulary':
        pairs = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line:
                continue
            symbol, sep, raw_id = line.rpartition('\t')
            if not sep:
                raise DataError(f'vocabulary line {lineno}: expected symbol<TAB>id')
            try:
                pairs.append((int(raw_id), symbol))
            except ValueError:
                raise DataError(f'vocabulary line {lineno}: id {raw_id!r} is not an integer')
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise DataError('vocabulary ids must be contiguous from 0')
        return cls(kind=kind, symbols=tuple(s for _, s in pairs))

    def save(self, path: Union[str, Path]):
        Path(path).write_text(self.to_text(), encoding='utf-8')

    @classmethod
    def load(cls, path: Union[str, Path], kind: SequenceKind) -> 'Vocabulary':
        return cls.from_text(Path(path).read_text(encoding='utf-8'), kind)


@dataclass(frozen=True, eq=False)
class TokenSequence:
    ids: np.ndarray
    valid_len: int
    kind: SequenceKind

    def __post_init__(self):
        if not 0 <= self.valid_len <= len(self.ids):
            raise DataError(f'valid_len {self.valid_len} outside sequence of length {len(self.ids)}')
        self.ids.setflags(write=False)

    def __len__(self) -> int:
        return len(self.ids)

    def substitute(self, position: int, new_id: int) -> 'TokenSequence':
        """Single-token point mutation within the valid region"""
        if not 0 <= position < self.valid_len:
            raise SequenceIndexError(f'position {position} outside valid length {self.valid_len}')
        ids = self.ids.copy()
        ids[position] = new_id
        return TokenSequence(ids=ids, valid_len=self.valid_len, kind=self.kind)


def build_vocab(corpus: Sequence[str], kind: SequenceKind) -> Vocabulary:
    """One id per distinct character, sorted, after the two reserved ids"""
    if not corpus or not any(corpus):
        raise DataError(f'cannot build a {kind} vocabulary from an empty corpus')
    chars = sorted(set(''.join(corpus)))
    return Vocabulary(kind=kind, symbols=(PAD_SYMBOL, UNK_SYMBOL, *chars))


def tokenize(text: str, vocab: Vocabulary, max_len: int) -> TokenSequence:
    """Character ids, unknown -> 1, truncated to max_len, right-padded with 0"""
    if max_len < 1:
        raise ConfigError(f'max_len must be >= 1, got {max_len}')
    if not text:
        raise DataError(f'cannot tokenize an empty {vocab.kind} string')
    ids = np.zeros(max_len, dtype=np.int64)
    encoded = vocab.encode(text[:max_len])
    ids[:len(encoded)] = encoded
    return TokenSequence(ids=ids, valid_len=len(encoded), kind=vocab.kind)


def init_encoder_params(config: EncoderConfig, vocab_size: int, kind: SequenceKind,
                        rng: np.random.Generator) -> Dict[str, Tensor]:
    return {
        name: Tensor(init_encoder_value(name, shape, rng), requires_grad=True)
        for name, shape in encoder_param_shapes(config, vocab_size, kind).items()
    }


def encoder_param_shapes(config: EncoderConfig, vocab_size: int, kind: SequenceKind) -> Dict[str, Tuple[int, ...]]:
    shapes: Dict[str, Tuple[int, ...]] = {'embedding': (vocab_size, config.embed_dim)}
    if config.kind == 'cnn':
        c_in = config.embed_dim
        widths = config.kernels_for(kind)
        for i in range(config.conv_layers):
            width, c_out = widths[i], config.channels[i]
            shapes[f'conv{i}.kernel'] = (width, c_in, c_out)
            shapes[f'conv{i}.bias'] = (c_out,)
            c_in = c_out
    return shapes


def init_encoder_value(name: str, shape: Tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    if name == 'embedding':
        return rng.normal(0.0, 1.0, size=shape)
    if name.endswith('.kernel'):
        fan_in = shape[0] * shape[1]
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return np.zeros(shape)


def encode(seq: TokenSequence, config: EncoderConfig, params: Mapping[str, Tensor]) -> Tensor:
    """[L x f] features for one tokenized sequence; padding rows are carried through"""
    expected_len = config.max_len_for(seq.kind)
    if len(seq) != expected_len:
        raise DimensionError(f'{seq.kind} sequence has length {len(seq)}, config expects {expected_len}')
    table = _param(params, 'embedding')
    if table.shape[1] != config.embed_dim:
        raise DimensionError(f'embedding width {table.shape[1]} does not match embed_dim {config.embed_dim}')
    x = embedding_lookup(table, seq)
    if config.kind == 'embed':
        return x
    widths = config.kernels_for(seq.kind)
    for i in range(config.conv_layers):
        width, c_out = widths[i], config.channels[i]
        kernel = _param(params, f'conv{i}.kernel')
        if kernel.shape != (width, x.shape[1], c_out):
            raise DimensionError(f'conv{i} kernel {kernel.shape} does not match config {(width, x.shape[1], c_out)}')
        x = relu(conv1d(x, kernel, _param(params, f'conv{i}.bias')))
    return x


def _param(params: Mapping[str, Tensor], name: str) -> Tensor:
    try:
        return params[name]
    except KeyError:
        raise ConfigError(f'encoder parameter {name!r} missing')


__all__ = [
    'PAD_ID', 'UNK_ID', 'Vocabulary', 'TokenSequence', 'build_vocab', 'tokenize',
    'encode', 'init_encoder_params', 'init_encoder_value', 'encoder_param_shapes',
]
