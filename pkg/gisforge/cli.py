"""The ``gis-forge`` command line.

Every subcommand builds its configuration the same way: defaults, then
``--preset`` names, then ``--config`` files, then ``--set KEY EXPR``
overrides, then the subcommand's own flags. Exit status is 0 on success, 2
for invalid configuration or data and 1 for any other failure.

"""
from typing import Any, Callable, Dict, Optional, Sequence
import argparse
import json
import os
import sys

from PIL import Image

from .config import (
    ConfigDict,
    ConfigError,
    apply_user_config,
    apply_user_overrides,
    check_config,
    default_config,
    load_config_file,
    parse_user_factors,
    presets,
)
from .evaluate import (
    ablation_ordering,
    augment,
    emit_gallery,
    evaluate,
    format_ablation,
    run_ablation,
    run_diversity,
)
from .forge import SceneRanges, generate_dataset
from .gbuffer import (
    GBufferError,
    MaterialPalette,
    ValidationError,
    quantize,
    read_sample,
    validate_dataset,
)
from .runner import run_factors
from .trainer import (
    CheckpointError,
    Synthesizer,
    TrainTop,
    fit,
    load_checkpoint,
    resume,
)
from .util import write_json

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INVALID = 2


def build_config(args: argparse.Namespace) -> ConfigDict:
    config = default_config()
    config.update(presets.resolve(*getattr(args, 'preset', ())))
    for filename in getattr(args, 'config', ()):
        apply_user_config(config, load_config_file(filename))
    apply_user_overrides(config, getattr(args, 'set', ()))
    return config


def _echo(*lines: Any) -> None:
    print(*lines, sep='\n')


def cmd_gen_data(args: argparse.Namespace, config: ConfigDict) -> int:
    if args.seed is not None:
        config['data.seed'] = args.seed
    if args.n is not None:
        config['data.n'] = args.n
    if args.out:
        config['data.root'] = args.out
    manifest = generate_dataset(
        config['data.n'],
        config['data.seed'],
        config['data.root'],
        SceneRanges.from_config(config),
        MaterialPalette.named(config['forge.palette']),
        config['data.workers'],
    )
    _echo(f'wrote {len(manifest["samples"])} samples to {config["data.root"]}')
    return EXIT_OK


def cmd_validate(args: argparse.Namespace, config: ConfigDict) -> int:
    failures = validate_dataset(
        args.dataset, config['gen.levels'], require_target=not args.no_target
    )
    for name, report in sorted(failures.items()):
        for message in report.messages:
            _echo(f'{name}: {message}')
    if failures:
        _echo(f'{len(failures)} invalid samples')
        return EXIT_INVALID
    _echo('dataset valid')
    return EXIT_OK


def _train_config(args: argparse.Namespace, config: ConfigDict) -> None:
    if args.seed is not None:
        config['run.seed'] = args.seed
    if args.out:
        config['run.workspace'] = args.out
    if getattr(args, 'dataset', None):
        config['train.dataset'] = args.dataset
    if getattr(args, 'eval_dataset', None):
        config['eval.dataset'] = args.eval_dataset
    if args.progress:
        config['run.progress.enable'] = True


def cmd_train(args: argparse.Namespace, config: ConfigDict) -> int:
    _train_config(args, config)
    check_config(config)
    if args.factor:
        factors = parse_user_factors(config, args.factor)
        results = run_factors(config, factors, TrainTop, jobs=args.jobs)
        failed = [r for r in results if r.get('run.exception')]
        for result in results:
            _echo(
                f'{result["config"]["meta.run.index"]}: '
                f'{result.get("train.checkpoint") or result["run.exception"]}'
            )
        return EXIT_FAILURE if failed else EXIT_OK
    result = fit(config)
    _echo(f'final checkpoint: {result["train.checkpoint"]}')
    return EXIT_OK


def cmd_resume(args: argparse.Namespace, config: ConfigDict) -> int:
    overrides: Dict[str, Any] = {}
    if args.steps is not None:
        overrides['train.steps'] = args.steps
    if args.out:
        overrides['run.workspace'] = args.out
    if args.progress:
        overrides['run.progress.enable'] = True
    result = resume(args.checkpoint, overrides)
    _echo(f'final checkpoint: {result["train.checkpoint"]}')
    return EXIT_OK


def cmd_synthesize(args: argparse.Namespace, config: ConfigDict) -> int:
    synthesizer = Synthesizer(args.checkpoint)
    sample = read_sample(args.sample)
    outputs = synthesizer([sample])[0]
    out_dir = args.out or os.curdir
    os.makedirs(out_dir, exist_ok=True)
    for k, image in enumerate(outputs):
        path = os.path.join(out_dir, f'output{k}.png')
        Image.fromarray(quantize(image)).save(path, format='PNG')
    _echo(f'wrote {len(outputs)} images to {out_dir}')
    return EXIT_OK


def _eval_dataset(args: argparse.Namespace, config: ConfigDict) -> str:
    dataset = args.dataset or config['eval.dataset'] or config['train.dataset']
    return os.path.abspath(dataset)


def cmd_evaluate(args: argparse.Namespace, config: ConfigDict) -> int:
    report = evaluate(
        args.checkpoint,
        _eval_dataset(args, config),
        config['eval.batch_size'],
        config['eval.psnr_cap'],
    )
    out_dir = args.out or os.curdir
    os.makedirs(out_dir, exist_ok=True)
    report.write(os.path.join(out_dir, os.path.basename(config['eval.report.file'])))
    _echo(report.table())
    return EXIT_OK


def cmd_gallery(args: argparse.Namespace, config: ConfigDict) -> int:
    paths = emit_gallery(
        args.checkpoint,
        _eval_dataset(args, config),
        args.out or 'gallery',
        config['gallery.limit'],
    )
    _echo(f'wrote {len(paths)} gallery images')
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace, config: ConfigDict) -> int:
    _train_config(args, config)
    check_config(config)
    table = run_ablation(config, jobs=args.jobs or config['ablate.jobs'] or None)
    ordering = ablation_ordering(table) if 'normals' in table else {}
    _echo(format_ablation(table), json.dumps(ordering, sort_keys=True))
    rows = {label: {str(s): v for s, v in row.items()} for label, row in table.items()}
    write_json(
        os.path.join(config['run.workspace'], 'ablation.json'),
        {'table': rows, 'ordering': ordering},
    )
    return EXIT_OK


def cmd_diversity(args: argparse.Namespace, config: ConfigDict) -> int:
    _train_config(args, config)
    check_config(config)
    comparison = run_diversity(config, k=config['gen.k'], jobs=args.jobs)
    _echo(
        f'spread K={comparison["k"]}: {comparison["spread"]:.4f}',
        f'spread K=1: {comparison["control_spread"]:.4f}',
    )
    write_json(os.path.join(config['run.workspace'], 'diversity.json'), comparison)
    return EXIT_OK


def cmd_augment(args: argparse.Namespace, config: ConfigDict) -> int:
    if args.seed is not None:
        config['augment.seed'] = args.seed
    checkpoint = load_checkpoint(args.checkpoint)
    scene_config = dict(config)
    # Fresh G-buffers must match the resolution the model was trained at.
    scene_config['forge.size'] = checkpoint['config']['forge.size']
    index = augment(
        Synthesizer(checkpoint),
        args.n if args.n is not None else config['augment.n'],
        config['augment.seed'],
        args.out or 'augmented',
        SceneRanges.from_config(scene_config),
        MaterialPalette.named(config['forge.palette']),
        config['augment.pick'],
        config['augment.index'],
        config['augment.relabel'],
        config['augment.paste'],
    )
    _echo(f'wrote {len(index["samples"])} augmented samples')
    return EXIT_OK


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, help='seed of the command')
    common.add_argument(
        '--config',
        action='append',
        default=[],
        metavar='FILE',
        help='flat YAML config file (repeatable)',
    )
    common.add_argument('--out', metavar='DIR', help='output directory')
    common.add_argument(
        '--set',
        nargs=2,
        action='append',
        default=[],
        metavar=('KEY', 'EXPR'),
        help='override a config value (repeatable)',
    )
    common.add_argument(
        '--preset',
        action='append',
        default=[],
        choices=[nc.name for nc in presets],
        help='apply a named preset (repeatable)',
    )
    return common


def _training_flags(
    parser: argparse.ArgumentParser, experiment: bool = False
) -> None:
    parser.add_argument('--dataset', metavar='DIR', help='training dataset')
    if experiment:
        parser.add_argument(
            '--eval-dataset', metavar='DIR', help='held-out dataset for scoring'
        )
    parser.add_argument('--jobs', type=int, help='concurrent runs')
    parser.add_argument(
        '--progress', action='store_true', help='display training progress'
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='gis-forge', description='Geometric image synthesis toolkit'
    )
    sub = parser.add_subparsers(dest='command', required=True)
    common = _common_parser()

    def add(
        name: str,
        func: Callable,
        help: str,
        parent: Optional[argparse.ArgumentParser] = None,
    ) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[parent or common], help=help)
        p.set_defaults(func=func)
        return p

    p = add('gen-data', cmd_gen_data, 'generate an oracle dataset')
    p.add_argument('--n', type=int, help='number of samples')

    p = add('validate', cmd_validate, 'check every sample of a dataset')
    p.add_argument('dataset')
    p.add_argument(
        '--no-target', action='store_true', help='do not require shaded targets'
    )

    p = add('train', cmd_train, 'train a model')
    _training_flags(p)
    p.add_argument(
        '--factor',
        nargs=2,
        action='append',
        default=[],
        metavar=('KEYS', 'EXPRS'),
        help='train one model per factor value (repeatable)',
    )

    # A resumed run keeps the configuration stored in its checkpoint.
    out_only = argparse.ArgumentParser(add_help=False)
    out_only.add_argument('--out', metavar='DIR', help='output directory')
    p = add(
        'resume', cmd_resume, 'continue training from a checkpoint', out_only
    )
    p.add_argument('checkpoint')
    p.add_argument('--steps', type=int, help='new total number of steps')
    p.add_argument('--progress', action='store_true')

    p = add('synthesize', cmd_synthesize, 'synthesize the K images of a sample')
    p.add_argument('checkpoint')
    p.add_argument('sample', help='sample directory')

    p = add('evaluate', cmd_evaluate, 'evaluate a checkpoint')
    p.add_argument('checkpoint')
    p.add_argument('--dataset', metavar='DIR')

    p = add('gallery', cmd_gallery, 'write contact sheets of a checkpoint')
    p.add_argument('checkpoint')
    p.add_argument('--dataset', metavar='DIR')

    p = add('ablate', cmd_ablate, 'train and compare input ablations')
    _training_flags(p, experiment=True)

    p = add('diversity', cmd_diversity, 'compare K outputs against a K=1 control')
    _training_flags(p, experiment=True)

    p = add('augment', cmd_augment, 'create an augmented dataset')
    p.add_argument('checkpoint')
    p.add_argument('--n', type=int, help='number of samples')

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = build_config(args)
        return args.func(args, config)
    except (ConfigError, ValidationError) as e:
        print(f'gis-forge: invalid: {e}', file=sys.stderr)
        return EXIT_INVALID
    except (CheckpointError, GBufferError, OSError, RuntimeError, ValueError) as e:
        print(f'gis-forge: error: {e}', file=sys.stderr)
        return EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(main())
