"""
Subcommand pipelines.

run(subcommand, config) validates the configuration, freezes it into the
output directory and dispatches to one pipeline. Pipelines exchange artifacts
through the output directory only:

    config.resolved.yaml
    checkpoints/vanilla_q<i>.pt, attacked_q<i>.pt, hardened_q<i>.pt
    checkpoints/trigger_<objective>_q<i>.pt, trigger_<objective>_q<i>_hardened.pt
    checkpoints/segmenter_w<width>.pt, embedder.pt
    sensitivity.json
    <stage>.log.jsonl
    reports/<subcommand>.csv and .json
    report.csv, summary.json

<i> indexes codec.lambdas. Every quality in codec.attack_lambdas is backdoored
with its own triggers, and the resistance sweep averages over them.
"""

import csv
from dataclasses import dataclass, field
import io
import json
import logging
import math
from pathlib import Path

import torch

from .attacks import AttackObjective, AttackTask, stage1_train, stage2_train
from .codec import train_vanilla
from .downstream import (
    load_corpus, save_corpus, synth_identity_dataset, synth_shapes_dataset, train_toy_models,
)
from .evaluation import (
    ATTACK_METRICS, attack_metric, defense_finetune, defense_prune, poison_images, rd_point,
    resistance_sweep, stealth_stats,
)
from .exceptions import CheckpointError, ConfigError
from .experiment import ingest_dataset, load_checkpoint, save_checkpoint
from .preprocess import IDENTITY
from .sensitivity import estimate_sensitivity, trigger_sensitivity, zigzag_rank_correlation
from .trigger import BaselineTrigger, TriggerModel

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ('model', 'quality', 'attack', 'preproc', 'degree', 'metric', 'value')

SUBCOMMANDS = (
    'train-vanilla', 'attack', 'harden', 'sensitivity', 'eval', 'resist', 'defend', 'report',
    'synth-shapes', 'train-downstream',
)

STAGES = ('attacked', 'hardened')

# dataset paths each subcommand reads
REQUIRED_PATHS = {
    'train-vanilla': ('train_dir',),
    'attack': ('train_dir',),
    'harden': ('train_dir',),
    'sensitivity': ('eval_dir',),
    'eval': ('eval_dir',),
    'resist': ('eval_dir',),
    'defend': ('train_dir', 'eval_dir'),
    'report': (),
    'synth-shapes': (),
    'train-downstream': (),
}


@dataclass
class RunResult:
    subcommand: str
    out_dir: Path
    artifacts: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def normalize_subcommand(name):
    verb = str(name).strip().replace('_', '-')
    if verb == 'evaluate':
        verb = 'eval'
    if verb not in SUBCOMMANDS:
        raise ConfigError(f'Unknown subcommand {name!r}; expected one of {", ".join(SUBCOMMANDS)}')
    return verb


def _check_inputs(verb, config, out):
    if verb == 'report' and not (out / 'reports').is_dir():
        raise ConfigError(f'No reports under {out}; run eval, resist or defend first')
    if verb == 'attack' and _selects_by_sensitivity(config) and not (out / 'sensitivity.json').exists():
        raise ConfigError(
            f'trigger.score_source is sensitivity but {out / "sensitivity.json"} does not exist; '
            'run sensitivity first'
        )


def run(subcommand, config, out_dir=None):
    """
    Run one subcommand.

    Validation (including dataset paths) happens before anything is written,
    so a failing run leaves no partial outputs.
    """
    verb = normalize_subcommand(subcommand)
    config.validate(check_paths=True, required=REQUIRED_PATHS[verb])
    out = Path(out_dir or config.output_dir)
    _check_inputs(verb, config, out)
    out.mkdir(parents=True, exist_ok=True)
    config.freeze(out)
    logger.info('Running %s into %s (config %s)', verb, out, config.digest()[:12])
    return PIPELINES[verb](config, out)


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

def format_value(value):
    if value is None:
        return ''
    if isinstance(value, float):
        return repr(value)
    return str(value)


def rows_to_csv(rows):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(REPORT_COLUMNS)
    for row in rows:
        writer.writerow([format_value(row[column]) for column in REPORT_COLUMNS])
    return buffer.getvalue()


def write_report(out, name, rows, summary=None):
    reports = out / 'reports'
    reports.mkdir(parents=True, exist_ok=True)
    csv_path = reports / f'{name}.csv'
    csv_path.write_text(rows_to_csv(rows))
    json_path = reports / f'{name}.json'
    payload = {'rows': rows, 'summary': summary or {}}
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return [csv_path, json_path]


def write_jsonl(path, records):
    with open(path, 'w') as handle:
        for record in records:
            handle.write(json.dumps(record, sort_keys=True) + '\n')
    return path


def _row(model, quality, attack, preproc, degree, metric, value):
    return {'model': model, 'quality': quality, 'attack': attack, 'preproc': preproc,
            'degree': degree, 'metric': metric, 'value': value}


# ---------------------------------------------------------------------------
# Artifact lookup
# ---------------------------------------------------------------------------

def _checkpoint(out, name):
    return out / 'checkpoints' / f'{name}.pt'


def _require(out, name, hint):
    path = _checkpoint(out, name)
    if not path.exists():
        raise CheckpointError(f'{path} not found; run {hint} first')
    return path


def _attack_qualities(config):
    """Indices into codec.lambdas of the backdoored qualities, in attack_lambdas order"""
    indices = []
    for target in config.codec.attack_lambdas:
        index = next(i for i, lam in enumerate(config.codec.lambdas) if math.isclose(lam, target))
        if index not in indices:
            indices.append(index)
    return indices


def _selects_by_sensitivity(config):
    return config.trigger.score_source == 'sensitivity' and any(
        oc.trigger == 'adaptive' for oc in config.objectives
    )


def _read_sensitivity_map(out):
    return torch.tensor(json.loads((out / 'sensitivity.json').read_text())['map'])


def _train_images(config):
    data = config.data
    return ingest_dataset(data.train_dir, data.crop, config.seed, data.max_images).images


def _eval_images(config):
    data = config.data
    return ingest_dataset(data.eval_dir, data.crop, config.seed, data.max_images).images


def _shapes_corpus(config, out):
    ds = config.downstream
    if ds.shapes_dir is not None:
        return load_corpus(ds.shapes_dir)
    if (out / 'shapes' / 'manifest.json').exists():
        return load_corpus(out / 'shapes')
    return synth_shapes_dataset(ds.num_shapes, ds.image_size, config.seed)


def _identity_set(config):
    ds = config.downstream
    return synth_identity_dataset(ds.n_ids, ds.per_id, ds.image_size, config.seed)


def _new_trigger(config, objective_config, index):
    if objective_config.trigger == 'adaptive':
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed + index)
            return TriggerModel(config.trigger)
    cfg = config.trigger
    return BaselineTrigger(objective_config.trigger, epsilon=cfg.epsilon, patch_size=cfg.patch_size,
                           gamma=cfg.gamma, seed=config.seed + index)


def _objective(oc):
    return AttackObjective(
        kind=oc.kind, alpha=oc.alpha, beta=oc.beta, dynamic=oc.dynamic, transfer=oc.transfer,
        weight=oc.weight, gamma_t=oc.gamma_t, mu_range=tuple(oc.mu_range),
    )


def _downstream_context(config, out, kind):
    """(consumer model, training aux images, evaluation images) for a downstream objective"""
    if kind == 'seg_targeted':
        width = config.downstream.widths[0]
        segmenter, _ = load_checkpoint(_require(out, f'segmenter_w{width}', 'train_downstream'), kind='segmenter')
        train, held_out = _shapes_corpus(config, out).split()
        return segmenter, train.images, held_out.images
    if kind == 'face_embed':
        embedder, _ = load_checkpoint(_require(out, 'embedder', 'train_downstream'), kind='embedder')
        images = _identity_set(config).images
        return embedder, images, images
    return None, None, None


def _trigger_name(objective_name, quality):
    return f'trigger_{objective_name}_q{quality}'


def _build_tasks(config, out, stage, quality):
    """
    Attack tasks of one quality: fresh triggers for 'attack', the saved
    stage-1 triggers for 'attacked', and the hardened ones (when present) for
    'hardened'.
    """
    tasks, eval_sets = [], {}
    for index, oc in enumerate(config.objectives):
        if stage == 'attack':
            trigger = _new_trigger(config, oc, index)
        else:
            name = _trigger_name(oc.name, quality)
            if stage == 'hardened' and _checkpoint(out, f'{name}_hardened').exists():
                name = f'{name}_hardened'
            trigger, _ = load_checkpoint(_require(out, name, 'attack'), kind='trigger')
        model, aux, eval_images = _downstream_context(config, out, oc.kind)
        tasks.append(AttackTask(name=oc.name, objective=_objective(oc), trigger=trigger,
                                aux_images=aux, model=model))
        eval_sets[oc.name] = eval_images
    return tasks, eval_sets


def _task_kwargs(task):
    if task.objective.kind == 'seg_targeted':
        return {'segmenter': task.model}
    if task.objective.kind == 'face_embed':
        return {'embedder': task.model}
    return {}


def _load_stage(out, stage, quality):
    hint = 'attack' if stage == 'attacked' else 'harden'
    return load_checkpoint(_require(out, f'{stage}_q{quality}', hint), kind='codec')


def _stage_models(config, out):
    """(stage, quality) for every backdoored codec checkpoint present, stage-major"""
    return [(stage, quality) for stage in STAGES for quality in _attack_qualities(config)
            if _checkpoint(out, f'{stage}_q{quality}').exists()]


# ---------------------------------------------------------------------------
# Pipelines
# ---------------------------------------------------------------------------

def run_train_vanilla(config, out):
    images = _train_images(config)
    budget = config.budget
    artifacts, rows = [], []
    for index, lam in enumerate(config.codec.lambdas):
        model, log = train_vanilla(
            images, lam, budget.vanilla_steps, config.seed, lr=budget.lr, batch_size=budget.batch_size,
            N=config.codec.N, M=config.codec.M, hyperprior=config.codec.hyperprior,
            log_every=budget.log_every, device=config.device, distortion_scale=config.distortion_scale,
        )
        path = _checkpoint(out, f'vanilla_q{index}')
        save_checkpoint(model, path, {'lam': lam, 'seed': config.seed, 'steps': budget.vanilla_steps})
        records = [{'objective': 'vanilla', **record} for record in log]
        artifacts += [path, write_jsonl(out / f'vanilla_q{index}.log.jsonl', records)]
        if log:
            rows.append(_row(f'vanilla_q{index}', lam, 'clean', 'identity', 0.0, 'train_loss', log[-1]['loss']))
    artifacts += write_report(out, 'train-vanilla', rows)
    return RunResult('train-vanilla', out, artifacts, rows)


def run_synth_shapes(config, out):
    ds = config.downstream
    corpus = synth_shapes_dataset(ds.num_shapes, ds.image_size, config.seed)
    directory = save_corpus(corpus, out / 'shapes')
    return RunResult('synth-shapes', out, [directory], summary={'images': len(corpus)})


def run_train_downstream(config, out):
    ds = config.downstream
    corpus = _shapes_corpus(config, out)
    models = train_toy_models(corpus, config.seed, widths=tuple(ds.widths), steps=ds.steps,
                              identity_set=_identity_set(config), embed_steps=ds.embed_steps,
                              device=config.device)
    artifacts, rows = [], []
    for width, segmenter, accuracy in zip(ds.widths, models.segmenters, models.accuracies):
        path = _checkpoint(out, f'segmenter_w{width}')
        save_checkpoint(segmenter.cpu(), path, {'width': width, 'accuracy': accuracy, 'seed': config.seed})
        artifacts.append(path)
        rows.append(_row(f'segmenter_w{width}', 0.0, 'clean', 'identity', 0.0, 'pixel_accuracy', accuracy))
    if models.embedder is not None:
        path = _checkpoint(out, 'embedder')
        save_checkpoint(models.embedder, path, {'seed': config.seed})
        artifacts.append(path)
    artifacts += write_report(out, 'train-downstream', rows, {'meets_bar': models.meets_bar})
    return RunResult('train-downstream', out, artifacts, rows, {'meets_bar': models.meets_bar})


def run_attack(config, out):
    images = _train_images(config)
    budget = config.budget
    sensitivity_map = _read_sensitivity_map(out) if _selects_by_sensitivity(config) else None
    artifacts = []
    for quality in _attack_qualities(config):
        codec, _ = load_checkpoint(_require(out, f'vanilla_q{quality}', 'train_vanilla'), kind='codec')
        tasks, _ = _build_tasks(config, out, 'attack', quality)
        if sensitivity_map is not None:
            for task in tasks:
                if isinstance(task.trigger, TriggerModel):
                    task.trigger.set_sensitivity(sensitivity_map)
        result = stage1_train(
            codec, tasks, images, budget.attack_steps, config.seed, lr=budget.lr, trigger_lr=budget.trigger_lr,
            batch_size=budget.batch_size, log_every=budget.log_every, device=config.device,
            distortion_scale=config.distortion_scale,
        )
        metadata = {'stage': 1, 'lam': codec.lam, 'seed': config.seed, 'objectives': [t.name for t in tasks]}
        path = _checkpoint(out, f'attacked_q{quality}')
        save_checkpoint(result.codec.cpu(), path, metadata)
        artifacts.append(path)
        for task in tasks:
            path = _checkpoint(out, _trigger_name(task.name, quality))
            save_checkpoint(task.trigger.cpu(), path, {'objective': task.name, 'lam': codec.lam, 'seed': config.seed})
            artifacts.append(path)
        artifacts.append(write_jsonl(out / f'attack_q{quality}.log.jsonl', result.log))
    return RunResult('attack', out, artifacts, summary={'steps': budget.attack_steps,
                                                        'qualities': _attack_qualities(config)})


def run_sensitivity(config, out):
    sc = config.sensitivity
    images = _eval_images(config)[:sc.images]
    degrees = {kind: tuple(values) for kind, values in sc.degrees.items()}
    adaptive = [oc.name for oc in config.objectives if oc.trigger == 'adaptive']
    source = 'pilot'
    trigger_path = None
    if adaptive:
        trigger_path = _checkpoint(out, _trigger_name(adaptive[0], _attack_qualities(config)[0]))
    if trigger_path is not None and trigger_path.exists():
        trigger, _ = load_checkpoint(trigger_path, kind='trigger')
        estimate = trigger_sensitivity(trigger, images, degrees, sc.samples, config.seed)
        source = trigger_path.stem
    else:
        cfg = config.trigger
        estimate = estimate_sensitivity(images, degrees=degrees, samples=sc.samples, seed=config.seed,
                                        patch_size=cfg.patch_size, band=cfg.band, pilot=sc.pilot)
    correlation = zigzag_rank_correlation(estimate.map)
    payload = {**estimate.to_dict(), 'source': source, 'zigzag_spearman': correlation}
    path = out / 'sensitivity.json'
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    rows = [_row(source, 0.0, 'sensitivity', kind, 0.0, 'mean_sensitivity', value.mean().item())
            for kind, value in estimate.components.items()]
    rows.append(_row(source, 0.0, 'sensitivity', 'all', 0.0, 'zigzag_spearman', correlation))
    artifacts = [path] + write_report(out, 'sensitivity', rows)
    return RunResult('sensitivity', out, artifacts, rows, {'zigzag_spearman': correlation})


def run_harden(config, out):
    images = _train_images(config)
    sensitivity_path = out / 'sensitivity.json'
    sensitivity_map = _read_sensitivity_map(out) if sensitivity_path.exists() else None
    if sensitivity_map is None:
        logger.warning('No sensitivity map in %s; hardening keeps the learned frequency selection', out)

    budget = config.budget
    degrees = {kind: tuple(values) for kind, values in config.preprocess.harden_degrees.items()}
    artifacts = []
    for quality in _attack_qualities(config):
        codec, metadata = _load_stage(out, 'attacked', quality)
        tasks, _ = _build_tasks(config, out, 'attacked', quality)
        if sensitivity_map is not None:
            for task in tasks:
                if isinstance(task.trigger, TriggerModel):
                    task.trigger.config.score_source = 'sensitivity'
                    task.trigger.set_sensitivity(sensitivity_map)
        result = stage2_train(
            codec, tasks, images, budget.harden_steps, config.seed, degrees=degrees, lr=budget.harden_lr,
            batch_size=budget.batch_size, log_every=budget.log_every, device=config.device,
            distortion_scale=config.distortion_scale,
        )
        path = _checkpoint(out, f'hardened_q{quality}')
        save_checkpoint(result.codec.cpu(), path, {**metadata, 'stage': 2})
        artifacts.append(path)
        for task in tasks:
            path = _checkpoint(out, f'{_trigger_name(task.name, quality)}_hardened')
            save_checkpoint(task.trigger.cpu(), path, {'objective': task.name, 'lam': codec.lam, 'seed': config.seed})
            artifacts.append(path)
        artifacts.append(write_jsonl(out / f'harden_q{quality}.log.jsonl', result.log))
    return RunResult('harden', out, artifacts, summary={'steps': budget.harden_steps})


def run_eval(config, out):
    images = _eval_images(config)
    rows = []
    for index, lam in enumerate(config.codec.lambdas):
        path = _checkpoint(out, f'vanilla_q{index}')
        if not path.exists():
            continue
        codec, _ = load_checkpoint(path, kind='codec')
        point = rd_point(codec, images)
        for metric in ('bpp', 'mse', 'psnr'):
            rows.append(_row(f'vanilla_q{index}', lam, 'clean', 'identity', 0.0, metric, getattr(point, metric)))

    for stage, quality in _stage_models(config, out):
        codec, _ = _load_stage(out, stage, quality)
        model = f'{stage}_q{quality}'
        point = rd_point(codec, images)
        for metric in ('bpp', 'mse', 'psnr'):
            rows.append(_row(model, codec.lam, 'clean', 'identity', 0.0, metric, getattr(point, metric)))
        tasks, eval_sets = _build_tasks(config, out, stage, quality)
        for task in tasks:
            task_images = images if eval_sets[task.name] is None else eval_sets[task.name]
            kwargs = _task_kwargs(task)
            poisoned = poison_images(task.trigger, task_images, task.objective.kind, kwargs.get('segmenter'))
            value = attack_metric(task.objective.kind, codec, task_images, poisoned, IDENTITY, **kwargs)
            rows.append(_row(model, codec.lam, task.name, 'identity', 0.0, ATTACK_METRICS[task.objective.kind], value))
            for metric, stat in stealth_stats(task_images, poisoned).items():
                rows.append(_row(f'{model}:trigger', codec.lam, task.name, 'identity', 0.0, f'stealth_{metric}', stat))

    if not rows:
        raise CheckpointError(f'No codec checkpoints under {out}; run train_vanilla first')
    artifacts = write_report(out, 'eval', rows)
    return RunResult('eval', out, artifacts, rows)


def run_resist(config, out):
    """
    Sweep every backdoored quality of each stage together, so the mR rows
    average the attack metric over the quality set.
    """
    images = _eval_images(config)
    grid = {kind: tuple(values) for kind, values in config.preprocess.resistance_grid.items()}
    stage_models = _stage_models(config, out)
    if not stage_models:
        raise CheckpointError(f'No backdoored codec under {out}; run attack first')
    rows = []
    for stage in STAGES:
        codecs, triggers, tasks_by_name, eval_sets = {}, {}, {}, {}
        for quality in (q for s, q in stage_models if s == stage):
            model = f'{stage}_q{quality}'
            codecs[model], _ = _load_stage(out, stage, quality)
            tasks, eval_sets = _build_tasks(config, out, stage, quality)
            for task in tasks:
                triggers.setdefault(task.name, {})[model] = task.trigger
                tasks_by_name[task.name] = task
        for name, task in tasks_by_name.items():
            task_images = images if eval_sets[name] is None else eval_sets[name]
            report = resistance_sweep(
                codecs, triggers[name], task.objective.kind, task_images, grid, seed=config.seed,
                family=stage, attack_name=name, **_task_kwargs(task),
            )
            rows += report.to_rows()
    artifacts = write_report(out, 'resist', rows)
    return RunResult('resist', out, artifacts, rows)


def run_defend(config, out):
    train_images = _train_images(config)
    eval_images = _eval_images(config)
    dc = config.defense
    rows = []
    for quality in _attack_qualities(config):
        codec, _ = _load_stage(out, 'attacked', quality)
        tasks, eval_sets = _build_tasks(config, out, 'attacked', quality)
        for task in tasks:
            kind = task.objective.kind
            task_images = eval_images if eval_sets[task.name] is None else eval_sets[task.name]
            metric = ATTACK_METRICS[kind]
            kwargs = _task_kwargs(task)
            records = defense_finetune(
                codec, train_images, dc.finetune_epochs, task_images, task.trigger, kind, lr=dc.finetune_lr,
                batch_size=config.budget.batch_size, seed=config.seed, distortion_scale=config.distortion_scale,
                **kwargs,
            )
            for record in records:
                model = f'finetune_e{record.epoch}'
                rows.append(_row(model, codec.lam, task.name, 'identity', 0.0, 'clean_bpp', record.clean.bpp))
                rows.append(_row(model, codec.lam, task.name, 'identity', 0.0, 'clean_psnr', record.clean.psnr))
                rows.append(_row(model, codec.lam, task.name, 'identity', 0.0, metric, record.attack_value))
            for rate in dc.prune_rates:
                result = defense_prune(codec, rate, train_images, task_images, task.trigger, kind, **kwargs)
                model = f'prune_{rate}'
                rows.append(_row(model, codec.lam, task.name, 'identity', 0.0, 'clean_bpp', result.clean.bpp))
                rows.append(_row(model, codec.lam, task.name, 'identity', 0.0, 'clean_psnr', result.clean.psnr))
                rows.append(_row(model, codec.lam, task.name, 'identity', 0.0, metric, result.attack_value))
    artifacts = write_report(out, 'defend', rows)
    return RunResult('defend', out, artifacts, rows)


def run_report(config, out):
    """Concatenate reports/*.csv into report.csv and summary.json; safe to repeat"""
    rows, sources = [], []
    for path in sorted((out / 'reports').glob('*.json')):
        payload = json.loads(path.read_text())
        rows += payload.get('rows', [])
        sources.append(path.stem)
    report_path = out / 'report.csv'
    report_path.write_text(rows_to_csv(rows))
    summary = {'config_digest': config.digest(), 'sources': sources, 'rows': len(rows)}
    summary_path = out / 'summary.json'
    summary_path.write_text(json.dumps({'summary': summary, 'rows': rows}, indent=2, sort_keys=True))
    return RunResult('report', out, [report_path, summary_path], rows, summary)


PIPELINES = {
    'train-vanilla': run_train_vanilla,
    'attack': run_attack,
    'harden': run_harden,
    'sensitivity': run_sensitivity,
    'eval': run_eval,
    'resist': run_resist,
    'defend': run_defend,
    'report': run_report,
    'synth-shapes': run_synth_shapes,
    'train-downstream': run_train_downstream,
}
