"""
Experiment plumbing: YAML configuration, dataset ingestion and checkpoints.
"""

from dataclasses import asdict, dataclass, field, fields, is_dataclass
import hashlib
import io
import json
import logging
import math
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image, UnidentifiedImageError

from .attacks import OBJECTIVE_KINDS
from .codec import DISTORTION_SCALE, CodecModel
from .downstream import ToyEmbedder, ToySegmenter
from .exceptions import CheckpointError, ConfigError, DatasetError, InvalidArgument
from .preprocess import RESISTANCE_GRID, SENSITIVITY_DEGREES
from .trigger import BASELINE_KINDS, TriggerConfig, build_trigger

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 'licbd-checkpoint'
CHECKPOINT_VERSION = 1
CHECKPOINT_KINDS = ('codec', 'trigger', 'segmenter', 'embedder')


@dataclass
class CodecConfig:
    N: int = 64
    M: int = 96
    hyperprior: bool = True
    lambdas: list = field(default_factory=lambda: [0.0130, 0.0483])
    attack_lambdas: list = field(default_factory=lambda: [0.0130, 0.0483])


@dataclass
class ObjectiveConfig:
    name: str = 'bpp'
    kind: str = 'bpp'
    alpha: float = None
    beta: float = None
    dynamic: bool = True
    transfer: bool = False
    weight: float = 1.0
    gamma_t: float = 0.1
    mu_range: list = field(default_factory=lambda: [1 / 3, 2 / 3])
    trigger: str = 'adaptive'


@dataclass
class PreprocessConfig:
    resistance_grid: dict = field(default_factory=lambda: {k: list(v) for k, v in RESISTANCE_GRID.items()})
    harden_degrees: dict = field(default_factory=lambda: {k: list(v) for k, v in SENSITIVITY_DEGREES.items()})


@dataclass
class SensitivityConfig:
    degrees: dict = field(default_factory=lambda: {k: list(v) for k, v in SENSITIVITY_DEGREES.items()})
    samples: int = 8
    pilot: float = 0.05
    images: int = 32


@dataclass
class DownstreamConfig:
    shapes_dir: str = None
    num_shapes: int = 400
    image_size: int = 64
    widths: list = field(default_factory=lambda: [16, 24])
    steps: int = 600
    n_ids: int = 8
    per_id: int = 8
    embed_steps: int = 300


@dataclass
class DefenseConfig:
    finetune_epochs: int = 20
    finetune_lr: float = 1e-5
    prune_rates: list = field(default_factory=lambda: [0.0, 0.25, 0.5])


@dataclass
class DataConfig:
    train_dir: str = None
    eval_dir: str = None
    crop: int = 64
    max_images: int = None


@dataclass
class BudgetConfig:
    vanilla_steps: int = 2000
    attack_steps: int = 1500
    harden_steps: int = 500
    batch_size: int = 8
    lr: float = 1e-4
    trigger_lr: float = 1e-4
    harden_lr: float = 1e-5
    log_every: int = 50


@dataclass
class ExperimentConfig:
    seed: int = 0
    device: str = 'cpu'
    output_dir: str = 'desk'
    distortion_scale: float = DISTORTION_SCALE
    codec: CodecConfig = field(default_factory=CodecConfig)
    trigger: TriggerConfig = field(default_factory=TriggerConfig)
    objectives: list = field(default_factory=lambda: [ObjectiveConfig()])
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    sensitivity: SensitivityConfig = field(default_factory=SensitivityConfig)
    downstream: DownstreamConfig = field(default_factory=DownstreamConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    data: DataConfig = field(default_factory=DataConfig)
    budget: BudgetConfig = field(default_factory=BudgetConfig)

    @classmethod
    def from_dict(cls, data, base_dir=None):
        config = _build(cls, data or {}, 'config')
        if base_dir is not None:
            config.resolve_paths(base_dir)
        return config

    @classmethod
    def load(cls, path, defaults=None):
        """
        Read a YAML experiment file; relative dataset paths resolve against its directory.

        Args:
            defaults: top-level values used when the file does not set them
        """
        path = Path(path)
        if not path.exists():
            raise ConfigError(f'Config file {path} does not exist')
        try:
            data = yaml.safe_load(path.read_text())
        except yaml.YAMLError as e:
            raise ConfigError(f'Cannot parse {path}: {e}') from e
        if data is not None and not isinstance(data, dict):
            raise ConfigError(f'{path} must hold a mapping at the top level')
        return cls.from_dict({**(defaults or {}), **(data or {})}, base_dir=path.parent)

    def resolve_paths(self, base_dir):
        base_dir = Path(base_dir)
        for holder, name in ((self.data, 'train_dir'), (self.data, 'eval_dir'), (self.downstream, 'shapes_dir')):
            value = getattr(holder, name)
            if value is not None and not Path(value).is_absolute():
                setattr(holder, name, str((base_dir / value).resolve()))
        return self

    def override(self, seed=None, output_dir=None, device=None):
        if seed is not None:
            self.seed = int(seed)
        if output_dir is not None:
            self.output_dir = str(output_dir)
        if device is not None:
            self.device = device
        return self

    def validate(self, check_paths=False, required=()):
        """
        Check every hyperparameter; with check_paths also that the dataset
        paths named in `required` are set and exist.
        """
        try:
            self.trigger.validate()
        except InvalidArgument as e:
            raise ConfigError(str(e)) from e
        if not self.codec.lambdas or any(lam <= 0 for lam in self.codec.lambdas):
            raise ConfigError(f'codec.lambdas must be a nonempty list of positive values, got {self.codec.lambdas}')
        if not self.codec.attack_lambdas:
            raise ConfigError('codec.attack_lambdas must name at least one quality')
        for target in self.codec.attack_lambdas:
            if not any(math.isclose(target, lam) for lam in self.codec.lambdas):
                raise ConfigError(f'codec.attack_lambdas value {target} is not one of codec.lambdas')
        if not self.objectives:
            raise ConfigError('At least one objective is required')
        names = [objective.name for objective in self.objectives]
        if len(set(names)) != len(names):
            raise ConfigError(f'Objective names must be unique, got {names}')
        for objective in self.objectives:
            if objective.kind not in OBJECTIVE_KINDS:
                raise ConfigError(f'objective {objective.name}: unknown kind {objective.kind!r}')
            if objective.beta is not None and objective.beta <= 0:
                raise ConfigError(f'objective {objective.name}: beta must be positive')
            if objective.trigger != 'adaptive' and objective.trigger not in BASELINE_KINDS:
                raise ConfigError(f'objective {objective.name}: unknown trigger {objective.trigger!r}')
        if self.data.crop < 16:
            raise ConfigError(f'data.crop must be at least 16, got {self.data.crop}')
        for rate in self.defense.prune_rates:
            if not 0 <= rate <= 0.98:
                raise ConfigError(f'Pruning rate {rate} outside [0, 0.98]')
        if check_paths:
            for name in required:
                value = getattr(self.data, name, None) if hasattr(self.data, name) else getattr(self.downstream, name)
                if value is None:
                    raise ConfigError(f'{name} is required for this subcommand')
                if not Path(value).exists():
                    raise DatasetError(f'Dataset path {value} does not exist')
            shapes_dir = self.downstream.shapes_dir
            if shapes_dir is not None and not Path(shapes_dir).exists():
                raise DatasetError(f'Shapes corpus {shapes_dir} does not exist')
        return self

    def to_dict(self):
        # json round-trip turns tuples into lists for yaml.safe_dump
        return json.loads(json.dumps(asdict(self)))

    def digest(self):
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    def freeze(self, out_dir):
        """Write <out>/config.resolved.yaml"""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / 'config.resolved.yaml'
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f'{where} must be a mapping, got {type(data).__name__}')
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f'Unknown keys in {where}: {", ".join(unknown)}')
    values = {}
    for name, value in data.items():
        kind = known[name].type
        if name == 'objectives':
            if not isinstance(value, list):
                raise ConfigError('objectives must be a list')
            value = [_build(ObjectiveConfig, item, f'objectives[{i}]') for i, item in enumerate(value)]
        elif is_dataclass(kind) and value is not None:
            value = _build(kind, value, f'{where}.{name}')
        values[name] = value
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f'Invalid {where}: {e}') from e


# ---------------------------------------------------------------------------
# Dataset ingestion
# ---------------------------------------------------------------------------

@dataclass
class ImageSet:
    images: torch.Tensor
    files: list
    skipped: list = field(default_factory=list)

    def __len__(self):
        return self.images.shape[0]

    def __iter__(self):
        return iter(self.images)


def _crop(pixels, crop, rng):
    height, width = pixels.shape[:2]
    pad_h = max(crop - height, 0)
    pad_w = max(crop - width, 0)
    if pad_h or pad_w:
        pixels = np.pad(pixels, ((0, pad_h), (0, pad_w), (0, 0)), mode='reflect')
        height, width = pixels.shape[:2]
    top = int(rng.integers(height - crop + 1))
    left = int(rng.integers(width - crop + 1))
    return pixels[top:top + crop, left:left + crop]


def ingest_dataset(directory, crop=64, seed=0, max_images=None):
    """
    Load every decodable image in a directory as seeded random crops.

    Files are read in lexicographic order; undecodable files are skipped with
    a warning and listed in ImageSet.skipped. Images smaller than the crop
    are reflect-padded first.

    Returns:
        ImageSet with images [n, 3, crop, crop] in [0, 1]
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f'Dataset directory {directory} does not exist')
    rng = np.random.default_rng(seed)
    crops, names, skipped = [], [], []
    for path in sorted(p for p in directory.iterdir() if p.is_file()):
        if max_images is not None and len(crops) >= max_images:
            break
        try:
            with Image.open(path) as image:
                pixels = np.asarray(image.convert('RGB'), dtype=np.float32) / 255.0
        except (UnidentifiedImageError, OSError):
            skipped.append(path.name)
            continue
        crops.append(_crop(pixels, crop, rng))
        names.append(path.name)

    if skipped:
        logger.warning('Skipped %d undecodable file(s) in %s', len(skipped), directory)
    if not crops:
        raise DatasetError(f'No decodable images in {directory}')
    images = torch.from_numpy(np.stack(crops)).permute(0, 3, 1, 2).contiguous()
    logger.info('Ingested %d image(s) from %s', len(names), directory)
    return ImageSet(images=images, files=names, skipped=skipped)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _kind_of(module):
    if isinstance(module, CodecModel):
        return 'codec'
    if isinstance(module, ToySegmenter):
        return 'segmenter'
    if isinstance(module, ToyEmbedder):
        return 'embedder'
    if hasattr(module, 'describe'):
        return 'trigger'
    raise CheckpointError(f'Cannot checkpoint a {type(module).__name__}')


def _arch_of(module, kind):
    if kind == 'codec':
        return module.arch
    if kind == 'trigger':
        return module.describe()
    if kind == 'segmenter':
        return {'width': module.width}
    return {'dim': module.dim, 'width': module.width}


def content_hash(state_dict):
    """SHA-256 over parameter names, dtypes, shapes and raw bytes, in key order"""
    digest = hashlib.sha256()
    for name in sorted(state_dict):
        tensor = state_dict[name].detach().cpu().contiguous()
        digest.update(name.encode('utf-8'))
        digest.update(f'{tensor.dtype}{tuple(tensor.shape)}'.encode('utf-8'))
        digest.update(tensor.numpy().tobytes() if tensor.numel() else b'')
    return digest.hexdigest()


def save_checkpoint(module, path, metadata=None):
    """
    Save a codec, trigger or toy downstream model.

    The archive is a torch.save'd dict: format, version, kind, arch, metadata,
    state_dict and content_hash.
    """
    kind = _kind_of(module)
    state_dict = {name: tensor.detach().cpu() for name, tensor in module.state_dict().items()}
    archive = {
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'kind': kind,
        'arch': _arch_of(module, kind),
        'metadata': dict(metadata or {}),
        'state_dict': state_dict,
        'content_hash': content_hash(state_dict),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buffer = io.BytesIO()
    torch.save(archive, buffer)
    path.write_bytes(buffer.getvalue())
    return archive['content_hash']


def _build_module(kind, arch):
    if kind == 'codec':
        return CodecModel.from_arch(arch)
    if kind == 'trigger':
        return build_trigger(arch)
    if kind == 'segmenter':
        return ToySegmenter(arch['width'])
    return ToyEmbedder(arch['dim'], arch['width'])


def read_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f'Checkpoint {path} does not exist')
    try:
        archive = torch.load(path, map_location='cpu', weights_only=False)
    except Exception as e:
        raise CheckpointError(f'Cannot read checkpoint {path}: {e}') from e
    if not isinstance(archive, dict) or archive.get('format') != CHECKPOINT_FORMAT:
        raise CheckpointError(f'{path} is not a {CHECKPOINT_FORMAT} archive')
    if archive.get('version') != CHECKPOINT_VERSION:
        raise CheckpointError(
            f'{path} has checkpoint version {archive.get("version")}, this build reads version {CHECKPOINT_VERSION}'
        )
    return archive


def load_checkpoint(path, kind=None, arch=None):
    """
    Rebuild a module from its checkpoint.

    Args:
        kind: expected kind; a mismatch raises CheckpointError
        arch: expected architecture descriptor; a mismatch raises CheckpointError

    Returns:
        (module in eval mode, metadata)
    """
    archive = read_checkpoint(path)
    if kind is not None and archive['kind'] != kind:
        raise CheckpointError(f'{path} holds a {archive["kind"]} checkpoint, expected {kind}')
    if arch is not None and archive['arch'] != arch:
        raise CheckpointError(f'{path} architecture {archive["arch"]} does not match {arch}')
    if content_hash(archive['state_dict']) != archive['content_hash']:
        raise CheckpointError(f'{path} content hash mismatch; the archive is corrupted')
    module = _build_module(archive['kind'], archive['arch'])
    try:
        module.load_state_dict(archive['state_dict'])
    except RuntimeError as e:
        raise CheckpointError(f'{path} parameters do not fit {archive["arch"]}: {e}') from e
    return module.eval(), archive['metadata']
