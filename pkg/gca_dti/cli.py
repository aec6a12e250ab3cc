#!/usr/bin/env python3
"""
Command-line surface
train | eval | explain | simgrid | sitehit | mutate | gradcheck | compare | gen-synthetic

Every command reads the flat key=value config (--config) with --set overrides.
Failures exit 2 (data), 3 (config / checkpoint / capability) or 4 (numeric).
"""

import argparse
import json
import logging
import os
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from dotenv import load_dotenv
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from gca_dti.config import GcaConfig, load_config, parse_overrides
from gca_dti.data_fetchers.dataset_loader import AffinityRecord, load_dataset, load_sites
from gca_dti.data_fetchers.synthetic import load_synthetic_spec, write_synthetic
from gca_dti.engine import (
    COMPARISON_VARIANTS, SimilarityTracker, comparison_frame, evaluate, run_comparison, train,
)
from gca_dti.exceptions import DataError, GcaError, NumericError
from gca_dti.gradcheck import CASES, run_gradcheck
from gca_dti.metrics import (
    SITE_K_PERCENTS, SITE_NEIGHBORHOODS, best_site_head, chance_site_hit_rate, mutation_rank_shift,
    protein_site_rankings, site_hit_rate,
)
from gca_dti.model import (
    DtiModel, build_vocabularies, check_compatible, create_model, encode_pair, encode_records,
    extract_attention, load_checkpoint, parameter_count, save_checkpoint,
)

logger = logging.getLogger('gca_dti')
console = Console(highlight=False)


# ---------------------------------------------------------------- helpers

def setup_logging(level: Optional[str] = None):
    level = (level or os.getenv('GCA_LOG_LEVEL') or 'INFO').upper()
    logging.basicConfig(
        level=level, format='%(message)s', datefmt='[%X]',
        handlers=[RichHandler(console=console, show_path=False)], force=True,
    )


def write_csv(frame: pd.DataFrame, path, config: GcaConfig):
    """Comment line with config hash and seed, then header and rows"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', encoding='utf-8', newline='') as f:
        f.write(f'# config_hash={config.config_hash()} seed={config.seed}\n')
        frame.to_csv(f, index=False, lineterminator='\n')
    console.print(f'💾 wrote {path}')


def _config(args) -> GcaConfig:
    return load_config(args.config, parse_overrides(args.set))


def _checkpoint_model(args) -> DtiModel:
    model = load_checkpoint(args.checkpoint)
    if args.config or args.set:
        check_compatible(_config(args), model)
    return model


def _split_records(config: GcaConfig, path, split: str) -> List[AffinityRecord]:
    data = load_dataset(path, config.test_fraction, config.seed)
    records = {'train': data.train, 'test': data.test, 'all': data.records}[split]
    if not records:
        raise DataError(f'{split} split of {path} is empty')
    return records


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    config = _config(args)
    data = load_dataset(args.data, config.test_fraction, config.seed)
    drug_vocab, protein_vocab = build_vocabularies(
        [r.smiles for r in data.records], [r.fasta for r in data.records])
    target_mean = float(np.mean([r.affinity for r in data.train]))
    model = create_model(config, drug_vocab, protein_vocab, target_mean=target_mean)
    console.print(
        f'🧪 training {config.interaction} model: {parameter_count(model)} params '
        f'({parameter_count(model, "interaction")} interaction), '
        f'{len(data.train)} train / {len(data.test)} test pairs'
    )
    train_pairs = encode_records(model, data.train)
    valid_pairs = encode_records(model, data.test) if data.test else None
    log = train(model, train_pairs, config.train_config(), valid=valid_pairs)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / 'last.ckpt')
    if log.best is not None:
        save_checkpoint(log.best, out / 'best.ckpt')
    write_csv(log.to_frame(), out / 'train_log.csv', config)
    console.print(f'✅ done; best epoch {log.best_epoch}, final train MSE {log.epochs[-1].train_mse:.4f}')
    return 0


def cmd_eval(args) -> int:
    model = _checkpoint_model(args)
    records = _split_records(model.config, args.data, args.split)
    report = evaluate(model, encode_records(model, records))
    frame = pd.DataFrame([[args.split, report.mse, report.c_index, report.n_pairs_evaluated]],
                         columns=['split', 'mse', 'c_index', 'n_pairs'])
    write_csv(frame, args.out, model.config)
    console.print(f'📊 {args.split}: MSE {report.mse:.4f}  C-index {report.c_index:.4f}  ({report.n_pairs_evaluated} pairs)')
    return 0


def _ranking_json(rankings) -> List[Dict]:
    return [
        {'head': r.head, 'positions': [int(p) for p in r.positions], 'weights': [float(w) for w in r.weights]}
        for r in rankings
    ]


def cmd_explain(args) -> int:
    model = _checkpoint_model(args)
    records = _split_records(model.config, args.data, args.split)[:args.limit]
    examples = []
    for pair in encode_records(model, records):
        ranked = extract_attention(model, pair.drug, pair.protein)
        examples.append({
            'drug_id': pair.drug_id, 'target_id': pair.target_id,
            'drug': _ranking_json(ranked['drug']), 'protein': _ranking_json(ranked['protein']),
        })
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    payload = {'config_hash': model.config.config_hash(), 'seed': model.config.seed, 'examples': examples}
    out.write_text(json.dumps(payload, indent=2), encoding='utf-8')
    console.print(f'🔍 explained {len(examples)} pair(s) -> {out}')
    return 0


def cmd_simgrid(args) -> int:
    config = _config(args)
    if args.interaction:
        config = config.updated(interaction=args.interaction)
    data = load_dataset(args.data, config.test_fraction, config.seed)
    drug_vocab, protein_vocab = build_vocabularies(
        [r.smiles for r in data.records], [r.fasta for r in data.records])
    model = create_model(config, drug_vocab, protein_vocab,
                         target_mean=float(np.mean([r.affinity for r in data.train])))
    train_pairs = encode_records(model, data.train)
    probe = (encode_records(model, data.test) or train_pairs)[:args.probe]
    tracker = SimilarityTracker(probe)
    try:
        train(model, train_pairs, config.train_config(), on_epoch_end=tracker)
    except NumericError as e:
        # report-only: keep the grids recorded before divergence
        logger.warning(f'training diverged after {len(tracker.grids)} epoch(s): {e.message}')

    rows = []
    names = ['d', 'd_prime', 'p', 'p_prime']
    for grid in tracker.grids:
        for i, name in enumerate(names):
            rows.append([grid.step, name, *grid.grid[i].tolist(), grid.mixing])
    write_csv(pd.DataFrame(rows, columns=['epoch', 'population', *names, 'mixing']), args.out, config)
    console.print(f"🧭 {config.interaction}: p' closer to d than to p in {len(tracker.mixing_epochs)} epoch(s)")
    return 0


def cmd_sitehit(args) -> int:
    model = _checkpoint_model(args)
    records = _split_records(model.config, args.data, args.split)
    pairs = encode_records(model, records)
    per_head, true_sites, valid_lens = protein_site_rankings(model, pairs, load_sites(args.sites))

    rows = []
    for head, rankings in per_head.items():
        for nb in SITE_NEIGHBORHOODS:
            for k in SITE_K_PERCENTS:
                rep = site_hit_rate(rankings, true_sites, k, nb)
                rows.append([head, k, nb, rep.hit_rate, rep.n_evaluated, rep.n_skipped])
    frame = pd.DataFrame(rows, columns=['head', 'k_percent', 'neighborhood', 'hit_rate', 'n_evaluated', 'n_skipped'])
    best = best_site_head(per_head, true_sites)
    best_rows = frame[frame['head'] == best].assign(head='best')
    chance = [
        ['chance', k, nb, chance_site_hit_rate(valid_lens, true_sites, k, nb, trials=args.trials, seed=model.config.seed),
         int(best_rows['n_evaluated'].iloc[0]), int(best_rows['n_skipped'].iloc[0])]
        for nb in SITE_NEIGHBORHOODS for k in SITE_K_PERCENTS
    ]
    frame = pd.concat([frame, best_rows, pd.DataFrame(chance, columns=frame.columns)], ignore_index=True)
    write_csv(frame, args.out, model.config)
    at10 = frame[(frame['k_percent'] == 10) & (frame['neighborhood'] == 1)].set_index('head')['hit_rate']
    console.print(f"🎯 best head {best}: top-10% hit rate {at10['best']:.3f} vs chance {at10['chance']:.3f}")
    return 0


def cmd_mutate(args) -> int:
    model = _checkpoint_model(args)
    pair = encode_pair(model, args.smiles, args.fasta)
    shifts = mutation_rank_shift(model, pair.drug, pair.protein, args.position, args.residue)
    frame = pd.DataFrame(
        [[s.head, s.position, s.old_rank, s.new_rank, s.delta] for s in shifts],
        columns=['head', 'position', 'old_rank', 'new_rank', 'delta'],
    )
    write_csv(frame, args.out, model.config)
    console.print(f'🧬 {len(shifts)} rank shift row(s) for position {args.position} -> {args.residue}')
    return 0


def cmd_gradcheck(args) -> int:
    rows = run_gradcheck(range(args.seeds), args.case or (), h=args.h, tol=args.tol)
    table = Table(title=f'gradient check ({args.seeds} seed(s), tol {args.tol:.0e})')
    table.add_column('op')
    table.add_column('max rel. error', justify='right')
    table.add_column('status')
    for row in rows:
        table.add_row(row.name, f'{row.max_rel_error:.2e}', '✅ pass' if row.passed else '❌ FAIL')
    console.print(table)
    failed = [row.name for row in rows if not row.passed]
    if failed:
        raise NumericError(f"gradient check failed for: {', '.join(failed)}")
    return 0


def cmd_compare(args) -> int:
    config = _config(args)
    data = load_dataset(args.data, config.test_fraction, config.seed)
    drug_vocab, protein_vocab = build_vocabularies(
        [r.smiles for r in data.records], [r.fasta for r in data.records])
    variants = [v.strip() for v in args.variants.split(',') if v.strip()]
    rows = run_comparison(config, data.train, data.test, drug_vocab, protein_vocab, variants)
    write_csv(comparison_frame(rows), args.out, config)
    for row in rows:
        console.print(f'📈 {row.variant:>14}: MSE {row.mse:.4f}  C-index {row.c_index:.4f}  ({row.interaction_params} interaction params)')
    return 0


def cmd_gen_synthetic(args) -> int:
    spec = load_synthetic_spec(args.spec, parse_overrides(args.set))
    dataset_path, sites_path = write_synthetic(spec, args.out)
    console.print(f'🧫 wrote {dataset_path} and {sites_path}')
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='flat key=value config file')
    common.add_argument('--set', action='append', default=[], metavar='KEY=VALUE', help='override one config key')
    common.add_argument('--log-level', help='logging level (default GCA_LOG_LEVEL or INFO)')

    parser = argparse.ArgumentParser(prog='gca-dti', description='Gated cross-attention drug-target affinity models')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('train', parents=[common], help='train a model, write last/best checkpoints and a log')
    p.add_argument('--data', required=True)
    p.add_argument('--out', required=True, help='output directory')
    p.set_defaults(func=cmd_train)

    for name, func, help_text in (('eval', cmd_eval, 'MSE and C-index on a split'),
                                  ('explain', cmd_explain, 'per-head ranked positions as JSON')):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument('--checkpoint', required=True)
        p.add_argument('--data', required=True)
        p.add_argument('--split', choices=['train', 'test', 'all'], default='test')
        p.add_argument('--out', required=True)
        if name == 'explain':
            p.add_argument('--limit', type=int, default=10)
        p.set_defaults(func=func)

    p = sub.add_parser('simgrid', parents=[common], help="per-epoch similarity of pooled d, d', p, p'")
    p.add_argument('--data', required=True)
    p.add_argument('--interaction', choices=['none', 'gca', 'decoder', 'ap'])
    p.add_argument('--probe', type=int, default=64, help='number of probe pairs')
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_simgrid)

    p = sub.add_parser('sitehit', parents=[common], help='top-k%% binding-site hit-rate curve')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--sites', required=True)
    p.add_argument('--split', choices=['train', 'test', 'all'], default='test')
    p.add_argument('--trials', type=int, default=1000, help='Monte-Carlo trials for the chance baseline')
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_sitehit)

    p = sub.add_parser('mutate', parents=[common], help='rank shift around a point mutation')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--smiles', required=True)
    p.add_argument('--fasta', required=True)
    p.add_argument('--position', type=int, required=True, help='0-based residue index')
    p.add_argument('--residue', required=True)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_mutate)

    p = sub.add_parser('gradcheck', parents=[common], help='finite-difference check of every op')
    p.add_argument('--seeds', type=int, default=50)
    p.add_argument('--tol', type=float, default=1e-4)
    p.add_argument('--h', type=float, default=1e-5)
    p.add_argument('--case', action='append', choices=sorted(CASES))
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser('compare', parents=[common], help='train interaction variants on one split')
    p.add_argument('--data', required=True)
    p.add_argument('--variants', default=','.join(COMPARISON_VARIANTS))
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser('gen-synthetic', parents=[common], help='planted-motif dataset and sites file')
    p.add_argument('--spec', help='flat key=value synthetic spec file')
    p.add_argument('--out', required=True, help='output directory')
    p.set_defaults(func=cmd_gen_synthetic)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.func(args)
    except GcaError as e:
        console.print(f'❌ {type(e).__name__}: {e.message}')
        return e.exit_code
    except OSError as e:
        console.print(f'❌ {e}')
        return DataError.exit_code


__all__ = ['main', 'build_parser', 'write_csv']
