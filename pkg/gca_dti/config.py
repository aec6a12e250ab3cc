#!/usr/bin/env python3
"""
Configuration
Flat key=value files (python-dotenv syntax) validated by pydantic models.
Every key has a default; unknown keys are rejected.
"""

import hashlib
import io
from pathlib import Path
from typing import Dict, Iterable, Literal, Mapping, Optional, Tuple, Type, TypeVar, Union

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from gca_dti.exceptions import ConfigError

Normalizer = Literal['softmax', 'sparsemax']
InteractionMode = Literal['none', 'gca', 'decoder', 'ap']
PoolingMode = Literal['max', 'mean']
SequenceKind = Literal['drug', 'protein']

ModelT = TypeVar('ModelT', bound=BaseModel)


def _split_ints(value):
    """'32,64,96' -> (32, 64, 96); tuples and lists pass through"""
    if isinstance(value, str):
        return tuple(int(part) for part in value.split(',') if part.strip())
    return value


class EncoderConfig(BaseModel):
    """Sequence encoder settings shared by both modalities"""
    model_config = ConfigDict(extra='forbid', frozen=True)

    kind: Literal['embed', 'cnn'] = 'embed'
    embed_dim: int = Field(128, gt=0)
    channels: Tuple[int, ...] = (32, 64, 96)
    drug_kernels: Tuple[int, ...] = (5, 7, 9)
    protein_kernels: Tuple[int, ...] = (7, 9, 11)
    max_len_drug: int = Field(100, gt=0)
    max_len_protein: int = Field(1000, gt=0)

    @field_validator('channels', 'drug_kernels', 'protein_kernels', mode='before')
    @classmethod
    def _parse_list(cls, value):
        return _split_ints(value)

    @model_validator(mode='after')
    def _check_layers(self) -> 'EncoderConfig':
        if not self.channels:
            raise ValueError('channels must list at least one conv layer')
        if any(c <= 0 for c in self.channels):
            raise ValueError(f'channel counts must be positive, got {self.channels}')
        for name in ('drug_kernels', 'protein_kernels'):
            widths = getattr(self, name)
            if len(widths) != len(self.channels):
                raise ValueError(f'{name} has {len(widths)} entries, channels has {len(self.channels)}')
            if any(w <= 0 or w % 2 == 0 for w in widths):
                raise ValueError(f'{name} must be positive odd widths, got {widths}')
        return self

    @property
    def conv_layers(self) -> int:
        return len(self.channels)

    @property
    def feature_dim(self) -> int:
        return self.channels[-1] if self.kind == 'cnn' else self.embed_dim

    def kernels_for(self, kind: SequenceKind) -> Tuple[int, ...]:
        return self.drug_kernels if kind == 'drug' else self.protein_kernels

    def max_len_for(self, kind: SequenceKind) -> int:
        return self.max_len_drug if kind == 'drug' else self.max_len_protein


class AttentionConfig(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    dim: int = Field(128, gt=0)
    num_heads: int = Field(2, gt=0)
    inner_normalizer: Normalizer = 'softmax'
    outer_normalizer: Normalizer = 'softmax'
    use_residual: bool = True
    use_prenorm: bool = True
    # directionality ablation: p->d gates the drug side, d->p gates the protein side
    attend_drug: bool = True
    attend_protein: bool = True

    @model_validator(mode='after')
    def _check_heads(self) -> 'AttentionConfig':
        if self.dim % self.num_heads != 0:
            raise ValueError(f'feature dim {self.dim} is not divisible by num_heads {self.num_heads}')
        return self

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    learning_rate: float = Field(5e-4, ge=0.0)
    batch_size: int = Field(32, gt=0)
    epochs: int = Field(100, gt=0)
    seed: int = Field(0, ge=0)
    interaction: InteractionMode = 'gca'
    attend_drug: bool = True
    attend_protein: bool = True


class GcaConfig(BaseModel):
    """The flat configuration file; one field per key"""
    model_config = ConfigDict(extra='forbid', frozen=True)

    seed: int = Field(0, ge=0)
    # encoders
    encoder: Literal['embed', 'cnn'] = 'embed'
    embed_dim: int = Field(128, gt=0)
    channels: Tuple[int, ...] = (32, 64, 96)
    drug_kernels: Tuple[int, ...] = (5, 7, 9)
    protein_kernels: Tuple[int, ...] = (7, 9, 11)
    max_len_drug: int = Field(100, gt=0)
    max_len_protein: int = Field(1000, gt=0)
    # interaction
    interaction: InteractionMode = 'gca'
    num_heads: int = Field(2, gt=0)
    inner_normalizer: Normalizer = 'softmax'
    outer_normalizer: Normalizer = 'softmax'
    use_residual: bool = True
    use_prenorm: bool = True
    attend_drug: bool = True
    attend_protein: bool = True
    # head
    pooling: PoolingMode = 'max'
    head_hidden: int = Field(256, gt=0)
    # training
    learning_rate: float = Field(5e-4, ge=0.0)
    batch_size: int = Field(32, gt=0)
    epochs: int = Field(100, gt=0)
    test_fraction: float = Field(1.0 / 6.0, ge=0.0, lt=1.0)

    @field_validator('channels', 'drug_kernels', 'protein_kernels', mode='before')
    @classmethod
    def _parse_list(cls, value):
        return _split_ints(value)

    @model_validator(mode='after')
    def _check_consistency(self) -> 'GcaConfig':
        try:
            self.encoder_config()
            self.attention_config()
        except ValidationError as e:
            raise ValueError(str(e)) from e
        return self

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            kind=self.encoder,
            embed_dim=self.embed_dim,
            channels=self.channels,
            drug_kernels=self.drug_kernels,
            protein_kernels=self.protein_kernels,
            max_len_drug=self.max_len_drug,
            max_len_protein=self.max_len_protein,
        )

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(
            dim=self.encoder_config().feature_dim,
            num_heads=self.num_heads,
            inner_normalizer=self.inner_normalizer,
            outer_normalizer=self.outer_normalizer,
            use_residual=self.use_residual,
            use_prenorm=self.use_prenorm,
            attend_drug=self.attend_drug,
            attend_protein=self.attend_protein,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            interaction=self.interaction,
            attend_drug=self.attend_drug,
            attend_protein=self.attend_protein,
        )

    def updated(self, **changes) -> 'GcaConfig':
        """Validated copy with some keys replaced"""
        return build_model(GcaConfig, {**self.model_dump(), **changes})

    def to_text(self) -> str:
        return canonical_text(self)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode('utf-8')).hexdigest()[:12]


def _format_value(value) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (tuple, list)):
        return ','.join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def canonical_text(config: BaseModel) -> str:
    """Sorted key=value lines, one per field"""
    dumped = config.model_dump()
    return ''.join(f'{key}={_format_value(dumped[key])}\n' for key in sorted(dumped))


def build_model(model_cls: Type[ModelT], values: Mapping[str, object], what: str = 'config') -> ModelT:
    """Validate values into model_cls, reporting problems as ConfigError"""
    unknown = sorted(set(values) - set(model_cls.model_fields))
    if unknown:
        raise ConfigError(f"unknown {what} key(s): {', '.join(unknown)}")
    try:
        return model_cls(**values)
    except ValidationError as e:
        problems = '; '.join(
            f"{'.'.join(str(p) for p in err['loc']) or what}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f'invalid {what}: {problems}') from e


def read_flat_file(path: Union[str, Path]) -> Dict[str, str]:
    """Parse a key=value file; a key without a value is an error"""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f'config file not found: {path}')
    return _check_values(dotenv_values(path, encoding='utf-8'), str(path))


def read_flat_text(text: str) -> Dict[str, str]:
    return _check_values(dotenv_values(stream=io.StringIO(text)), 'config text')


def _check_values(values: Mapping[str, Optional[str]], source: str) -> Dict[str, str]:
    missing = [key for key, value in values.items() if value is None]
    if missing:
        raise ConfigError(f"{source}: key(s) without a value: {', '.join(missing)}")
    return dict(values)


def parse_overrides(pairs: Optional[Iterable[str]]) -> Dict[str, str]:
    """['lr=0.1', ...] from repeated --set flags"""
    overrides: Dict[str, str] = {}
    for pair in pairs or []:
        if '=' not in pair:
            raise ConfigError(f"override '{pair}' is not key=value")
        key, value = pair.split('=', 1)
        overrides[key.strip()] = value.strip()
    return overrides


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Mapping[str, str]] = None) -> GcaConfig:
    """Defaults <- config file <- flag overrides"""
    values: Dict[str, str] = {}
    if path is not None:
        values.update(read_flat_file(path))
    values.update(overrides or {})
    return build_model(GcaConfig, values)


def config_from_text(text: str) -> GcaConfig:
    return build_model(GcaConfig, read_flat_text(text))


__all__ = [
    'EncoderConfig', 'AttentionConfig', 'TrainConfig', 'GcaConfig',
    'load_config', 'config_from_text', 'parse_overrides', 'read_flat_file',
    'build_model', 'canonical_text',
]
