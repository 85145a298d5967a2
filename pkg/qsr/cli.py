"""
Command line entry point: ``python -m qsr <command>``.

Commands: train-dict, sr, capture, bench, synth. Every command writes a JSON
run manifest next to its main output. Settings come from flags, then the
command's table in an optional TOML file (``--config``), then model defaults.
"""

import argparse
import hashlib
import logging
import os
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd
from pydantic import BaseModel, Field, ValidationError

from . import __version__
from .dictionary import TrainConfig, load_dictionary, sample_training_patches, save_dictionary, train_dictionary_pair
from .errors import ArtifactIOError, EmptyInputError, InvalidGridError, QsrError
from .imagecore import SUPPORTED_SUFFIXES, Image, bicubic_upscale, crop, downscale, load_image, mod_crop, psnr_y, save_image
from .solvers import RecordingSampler, make_sampler
from .sr import PHASES, SrConfig, export_entropy_map, sr_classical_anneal, sr_ensemble_anneal, sr_lasso
from .synthbench import SOLVERS, SweepConfig, default_grid, run_sweep, write_sweep_csv, write_sweep_svg

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

logger = logging.getLogger(__name__)

METHODS = ('lasso', 'anneal', 'ensemble')
THREADS_ENV = 'QSR_THREADS'


class RunManifest(BaseModel):
    command: str
    argv: List[str] = Field(default_factory=list)
    config: Dict = Field(default_factory=dict)
    seed: int = 0
    threads: int = 1
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: List[str] = Field(default_factory=list)
    timings: Dict[str, float] = Field(default_factory=dict)
    version: str = __version__


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as fh:
        for block in iter(lambda: fh.read(1 << 20), b''):
            digest.update(block)
    return digest.hexdigest()


def resolve_threads(flag: Optional[int]) -> int:
    if flag is not None:
        return max(1, flag)
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            logger.warning(f"Ignoring non-integer {THREADS_ENV}={env!r}")
    return os.cpu_count() or 1


def load_config_table(path: Optional[str], table: str) -> Dict:
    if path is None:
        return {}
    try:
        with open(path, 'rb') as fh:
            data = tomllib.load(fh)
    except OSError as e:
        raise ArtifactIOError(f"Cannot read config file {path}: {e}")
    except tomllib.TOMLDecodeError as e:
        raise InvalidGridError(f"Config file {path} is not valid TOML: {e}")
    return dict(data.get(table, {}))


def merge_settings(table: Dict, overrides: Dict) -> Dict:
    """Flags win over the config table; None means the flag was not given"""
    merged = dict(table)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_settings(merged[key], value)
        else:
            merged[key] = value
    return merged


def write_manifest(manifest: RunManifest, output) -> Path:
    path = Path(f"{output}.manifest.json")
    try:
        path.write_text(manifest.model_dump_json(indent=2))
    except OSError as e:
        raise ArtifactIOError(f"Cannot write manifest {path}: {e}")
    return path


def list_images(directory: Path) -> List[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in SUPPORTED_SUFFIXES)


def parse_floats(text: str, what: str) -> List[float]:
    try:
        values = [float(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise InvalidGridError(f"Cannot parse {what} '{text}' as comma separated numbers")
    if not values:
        raise InvalidGridError(f"Empty {what} '{text}'")
    return values


def parse_crop(text: Optional[str]):
    if text is None:
        return None
    values = parse_floats(text, 'crop')
    if len(values) != 4:
        raise InvalidGridError(f"--crop expects x,y,w,h, got '{text}'")
    return tuple(int(v) for v in values)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train_dict(args, parser) -> int:
    corpus_dir = Path(args.corpus)
    if not corpus_dir.is_dir():
        parser.error(f"corpus directory {corpus_dir} does not exist")
    threads = resolve_threads(args.threads)
    settings = merge_settings(load_config_table(args.config, 'train-dict'), {
        'n_atoms': args.atoms, 'n_patches': args.patches, 'iterations': args.epochs,
        'sparsity_lambda': args.sparsity, 'variance_floor': args.variance_floor,
        'batch_size': args.batch_size, 'seed': args.seed,
    })
    settings['n_jobs'] = threads
    cfg = TrainConfig(**settings)

    paths = list_images(corpus_dir)
    if not paths:
        raise EmptyInputError(f"No PNG/PGM/PPM images in {corpus_dir}")
    started = time.time()
    corpus = [load_image(p) for p in paths]
    lr, hr = sample_training_patches(corpus, cfg)
    pair = train_dictionary_pair(lr, hr, cfg)
    save_dictionary(pair, args.out)

    manifest = RunManifest(
        command='train-dict', argv=list(args.argv), config=cfg.model_dump(exclude={'n_jobs'}), seed=cfg.seed,
        threads=threads, inputs={str(p): sha256_file(p) for p in paths}, outputs=[str(args.out)],
        timings={'total': time.time() - started},
    )
    write_manifest(manifest, args.out)
    return 0


def build_sr_config(args, table: Dict, threads: int, method: str) -> SrConfig:
    sampler = {}
    if args.sampler is not None:
        sampler['kind'] = args.sampler
    if args.replay_file is not None:
        sampler['replay_path'] = args.replay_file
    if args.sweeps is not None:
        sampler['anneal'] = {'sweeps': args.sweeps}
    overrides = {
        'scale': args.scale, 'n_reads': args.reads, 'mu': args.mu, 'beta': args.beta,
        'backproject_iters': args.backproject_iters, 'stride': args.stride,
        'warm_start': args.warm_start, 'ensemble': args.ensemble, 'seed': args.seed,
        'sampler': sampler or None,
    }
    if args.lam is not None:
        overrides['lambda_lasso' if method == 'lasso' else 'lambda_anneal'] = args.lam
    settings = merge_settings(table, overrides)
    settings['n_jobs'] = threads
    return SrConfig(**settings)


def run_method(method: str, lr: Image, pair, cfg: SrConfig, record: Optional[str] = None,
               dump_dir: Optional[str] = None):
    if method == 'lasso':
        return sr_lasso(lr, pair, cfg)
    sampler = make_sampler(cfg.sampler, n_jobs=cfg.n_jobs)
    if record is not None:
        sampler = RecordingSampler(sampler, record)
    if method == 'anneal':
        return sr_classical_anneal(lr, pair, cfg, sampler)
    return sr_ensemble_anneal(lr, pair, cfg, sampler, Path(dump_dir) if dump_dir else None)


def cmd_sr(args, parser) -> int:
    method = getattr(args, 'method', 'ensemble')
    threads = resolve_threads(args.threads)
    cfg = build_sr_config(args, load_config_table(args.config, 'sr'), threads, method)

    lr = load_image(args.input)
    pair = load_dictionary(args.dict)
    output = run_method(method, lr, pair, cfg, args.record, args.dump_qubo)
    save_image(output.image, args.out)
    outputs = [str(args.out)]

    if args.entropy_map is not None:
        if output.entropy_map is None:
            logger.warning(f"⚠️ Method '{method}' produces no entropy map; {args.entropy_map} not written")
        else:
            csv_path = args.entropy_csv or str(Path(args.entropy_map).with_suffix('.csv'))
            export_entropy_map(output, args.entropy_map, csv_path)
            outputs += [str(args.entropy_map), csv_path]
    if args.record is not None:
        outputs.append(str(args.record))

    manifest = RunManifest(
        command=args.command, argv=list(args.argv), config={'method': method, **cfg.model_dump(exclude={'n_jobs'})},
        seed=cfg.seed, threads=threads,
        inputs={str(args.input): sha256_file(args.input), str(args.dict): sha256_file(args.dict)},
        outputs=outputs, timings=output.timings,
    )
    write_manifest(manifest, args.out)
    logger.info("⏱️ " + ", ".join(f"{k}={output.timings[k]:.2f}s" for k in PHASES))
    return 0


def cmd_bench(args, parser) -> int:
    hr_dir = Path(args.hr_dir)
    if not hr_dir.is_dir():
        parser.error(f"image directory {hr_dir} does not exist")
    paths = list_images(hr_dir)
    if not paths:
        raise EmptyInputError(f"No PNG/PGM/PPM images in {hr_dir}")

    methods = [m for m in args.methods.split(',') if m]
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        parser.error(f"unknown method(s): {', '.join(unknown)}")
    threads = resolve_threads(args.threads)
    region = parse_crop(args.crop)
    table = load_config_table(args.config, 'bench')
    if methods and args.dict is None:
        parser.error("--dict is required for sparse-coding methods")
    pair = load_dictionary(args.dict) if methods else None

    rows, timing_rows = [], []
    for path in paths:
        hr = load_image(path)
        if region is not None:
            hr = crop(hr, *region)
        scale = pair.scale if pair is not None else table.get('scale', 3)
        hr = mod_crop(hr, scale)
        lr = downscale(hr, scale)
        row = {'image': path.name, 'bicubic': psnr_y(bicubic_upscale(lr, scale), hr)}
        for method in methods:
            cfg = build_sr_config(args, dict(table), threads, method)
            output = run_method(method, lr, pair, cfg)
            row[method] = psnr_y(output.image, hr)
            timing_rows.append({'image': path.name, 'method': method, **output.timings})
        logger.info(f"📊 {path.name}: " + ", ".join(f"{k}={v:.2f}dB" for k, v in row.items() if k != 'image'))
        rows.append(row)

    frame = pd.DataFrame(rows)
    mean = {'image': 'mean', **frame.drop(columns='image').mean().to_dict()}
    frame = pd.concat([frame, pd.DataFrame([mean])], ignore_index=True)
    frame.to_csv(args.out, index=False)
    outputs = [str(args.out)]
    if timing_rows:
        timings_path = f"{args.out}.timings.csv"
        pd.DataFrame(timing_rows).to_csv(timings_path, index=False)
        outputs.append(timings_path)

    manifest = RunManifest(
        command='bench', argv=list(args.argv), config={'methods': methods, 'crop': region, **table},
        seed=args.seed or 0, threads=threads, inputs={str(p): sha256_file(p) for p in paths},
        outputs=outputs,
    )
    write_manifest(manifest, args.out)
    return 0


def cmd_synth(args, parser) -> int:
    solvers = [s for s in args.solvers.split(',') if s]
    unknown = [s for s in solvers if s not in SOLVERS]
    if unknown:
        raise InvalidGridError(f"Unknown solver(s): {', '.join(unknown)}")
    threads = resolve_threads(args.threads)
    settings = merge_settings(load_config_table(args.config, 'synth'), {
        'seed': args.seed, 'n_datasets': args.datasets, 'mu': args.mu,
    })
    settings['n_jobs'] = threads
    cfg = SweepConfig(**settings)
    grid = parse_floats(args.grid, 'grid') if args.grid else None

    started = time.time()
    results = [run_sweep(s, grid if grid is not None else default_grid(s), cfg.n_datasets, cfg) for s in solvers]
    write_sweep_csv(results, args.out)
    outputs = [str(args.out)]
    if args.svg:
        write_sweep_svg(results, args.svg)
        outputs.append(str(args.svg))

    manifest = RunManifest(
        command='synth', argv=list(args.argv), config={'solvers': solvers, 'grid': grid, **cfg.model_dump(exclude={'n_jobs'})},
        seed=cfg.seed, threads=threads, outputs=outputs, timings={'total': time.time() - started},
    )
    write_manifest(manifest, args.out)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument('--seed', type=int, default=None, help='RNG seed (default 0)')
    p.add_argument('--threads', type=int, default=None, help=f'worker threads (default ${THREADS_ENV} or all cores)')
    p.add_argument('--config', default=None, help='TOML file with per-command tables')
    p.add_argument('-v', '--verbose', action='store_true')
    p.add_argument('-q', '--quiet', action='store_true')


def _add_sr_options(p: argparse.ArgumentParser, dict_required: bool = True) -> None:
    p.add_argument('--dict', required=dict_required, default=None, help='dictionary file from train-dict')
    p.add_argument('--reads', type=int, default=None, help='sampler reads per problem')
    p.add_argument('--lambda', dest='lam', type=float, default=None, help='sparsity weight for the chosen method')
    p.add_argument('--mu', type=float, default=None)
    p.add_argument('--beta', type=float, default=None, help='fixed inverse temperature (default adaptive)')
    p.add_argument('--scale', type=int, default=None)
    p.add_argument('--stride', type=int, default=None)
    p.add_argument('--sweeps', type=int, default=None, help='simulated annealing sweeps')
    p.add_argument('--backproject-iters', type=int, default=None)
    p.add_argument('--sampler', choices=['simulated_anneal', 'tabu', 'brute_force', 'replay'], default=None)
    p.add_argument('--replay-file', default=None)
    p.add_argument('--warm-start', choices=['tabu', 'random', 'zeros'], default=None)
    p.add_argument('--ensemble', choices=['boltzmann', 'best'], default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='qsr', description='Sparse-coding super-resolution with QUBO annealing')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('train-dict', help='train a coupled dictionary from HR images')
    p.add_argument('--corpus', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--atoms', type=int, default=None)
    p.add_argument('--patches', type=int, default=None)
    p.add_argument('--epochs', type=int, default=None)
    p.add_argument('--lambda', dest='sparsity', type=float, default=None)
    p.add_argument('--variance-floor', type=float, default=None)
    p.add_argument('--batch-size', type=int, default=None)
    _add_common(p)

    for name in ('sr', 'capture'):
        p = sub.add_parser(name, help='super-resolve one image' if name == 'sr'
                           else 'run the ensemble pipeline and record every sampler call')
        p.add_argument('--input', required=True)
        p.add_argument('--out', required=True)
        if name == 'sr':
            p.add_argument('--method', choices=METHODS, default='ensemble')
            p.add_argument('--record', default=None, help='append sampler calls to this replay file')
        else:
            p.add_argument('--record', required=True, help='replay file to append to')
        p.add_argument('--entropy-map', default=None, help='PNG for the per-patch entropy')
        p.add_argument('--entropy-csv', default=None)
        p.add_argument('--dump-qubo', default=None, help='directory for the batch problems as JSON')
        _add_sr_options(p)
        _add_common(p)

    p = sub.add_parser('bench', help='Y-PSNR table over a directory of HR images')
    p.add_argument('--hr-dir', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--methods', default='lasso,anneal,ensemble', help='comma list; bicubic always runs')
    p.add_argument('--crop', default=None, help='x,y,w,h region evaluated instead of the full image')
    _add_sr_options(p, dict_required=False)
    _add_common(p)

    p = sub.add_parser('synth', help='synthetic sparsity sweeps')
    p.add_argument('--out', required=True)
    p.add_argument('--solvers', default=','.join(SOLVERS))
    p.add_argument('--grid', default=None, help='comma separated lambda values (default per solver)')
    p.add_argument('--datasets', type=int, default=None)
    p.add_argument('--mu', type=float, default=None)
    p.add_argument('--svg', default=None)
    _add_common(p)
    return parser


COMMANDS = {'train-dict': cmd_train_dict, 'sr': cmd_sr, 'capture': cmd_sr, 'bench': cmd_bench, 'synth': cmd_synth}


def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    logging.getLogger().setLevel(level)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    configure_logging(args.verbose, args.quiet)

    try:
        return COMMANDS[args.command](args, parser)
    except ValidationError as e:
        logger.error(f"❌ Invalid settings: {e}")
        return 2
    except QsrError as e:
        logger.error(f"❌ {e.detail}")
        return e.exit_code
