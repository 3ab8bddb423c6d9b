"""
Metrics and evaluation harnesses.

Everything here runs the codec in eval mode (rounded latents), the way a
deployed model would see the image.
"""

import copy
from dataclasses import asdict, dataclass, field
import logging
import math

import numpy as np
import torch
import torch.nn.functional as F

from .attacks import compose_masked_poison
from .codec import DISTORTION_SCALE, PSNR_CAP, rd_loss
from .downstream import SOURCE_CLASS, TARGET_CLASS, make_mask
from .exceptions import InvalidArgument
from .preprocess import IDENTITY, apply_preprocess, grid_specs

logger = logging.getLogger(__name__)

ATTACK_METRICS = {
    'bpp': 'bpp',
    'psnr': 'psnr',
    'seg_targeted': 'asr',
    'face_embed': 'cosine',
}


@dataclass
class RdPoint:
    bpp: float
    mse: float
    psnr: float

    @classmethod
    def from_mse(cls, bpp, mse):
        return cls(bpp=bpp, mse=mse, psnr=mse_to_psnr(mse))


@dataclass
class ResistanceEntry:
    model: str
    quality: float
    attack: str
    preproc: str
    degree: float
    metric: str
    value: float


@dataclass
class ResistanceReport:
    entries: list = field(default_factory=list)
    family: str = ''

    def mean_over_qualities(self):
        """mR per (attack, preproc, degree, metric): mean of R_q over the quality set"""
        groups = {}
        for entry in self.entries:
            if entry.value is None:
                continue
            key = (entry.attack, entry.preproc, entry.degree, entry.metric)
            groups.setdefault(key, []).append(entry.value)
        return {key: float(np.mean(values)) for key, values in groups.items()}

    def value(self, preproc, degree, model=None):
        for entry in self.entries:
            if entry.preproc == preproc and entry.degree == degree and (model is None or entry.model == model):
                return entry.value
        raise KeyError((preproc, degree, model))

    def to_rows(self):
        """CSV rows (model, quality, attack, preproc, degree, metric, value), mR rows last"""
        rows = [asdict(entry) for entry in self.entries]
        for (attack, preproc, degree, metric), value in self.mean_over_qualities().items():
            model = f'{self.family}-mR' if self.family else 'mR'
            rows.append({'model': model, 'quality': 'mean', 'attack': attack, 'preproc': preproc,
                         'degree': degree, 'metric': metric, 'value': value})
        return rows


@dataclass
class DefenseRecord:
    epoch: int
    clean: RdPoint
    attack_value: float


@dataclass
class PruneResult:
    codec: object
    rate: float
    pruned_channels: list
    clean: RdPoint
    attack_value: float


def mse_to_psnr(value, cap=PSNR_CAP):
    if value <= 0:
        return cap
    return min(-10.0 * math.log10(value), cap)


def _chunks(tensor, batch_size):
    for start in range(0, tensor.shape[0], batch_size):
        yield start, tensor[start:start + batch_size]


def _require_images(images):
    if images is None or images.shape[0] == 0:
        raise InvalidArgument('Evaluation needs a nonempty image set')


def rd_point(codec, images, batch_size=16):
    """Eval-mode bpp and distortion of a codec over an image set"""
    _require_images(images)
    codec.eval()
    bits, squared, count = 0.0, 0.0, 0
    with torch.no_grad():
        for _, batch in _chunks(images, batch_size):
            out = codec(batch, mode='eval')
            bits += out.rate.bpp.sum().item()
            squared += ((batch - out.x_hat) ** 2).mean(dim=(1, 2, 3)).sum().item()
            count += batch.shape[0]
    return RdPoint.from_mse(bits / count, squared / count)


def rd_curve(codecs, images, batch_size=16):
    """(bpp, psnr) for each codec, in the given order"""
    _require_images(images)
    points = []
    for codec in codecs:
        point = rd_point(codec, images, batch_size)
        points.append((point.bpp, point.psnr))
    return points


def pixel_asr(clean_pred, poisoned_pred, source=SOURCE_CLASS, target=TARGET_CLASS):
    """
    Share of pixels predicted as source on the clean input that flip to target
    on the poisoned input. None when the clean prediction has no source pixels.
    """
    if clean_pred.shape != poisoned_pred.shape:
        raise InvalidArgument(f'Label maps differ in shape: {tuple(clean_pred.shape)} vs {tuple(poisoned_pred.shape)}')
    source_pixels = clean_pred == source
    denominator = int(source_pixels.sum().item())
    if denominator == 0:
        return None
    hits = int((source_pixels & (poisoned_pred == target)).sum().item())
    return hits / denominator


def mean_pixel_asr(clean_preds, poisoned_preds, source=SOURCE_CLASS, target=TARGET_CLASS):
    """Per-image ASR averaged over images that have source pixels"""
    values = [pixel_asr(c, p, source, target) for c, p in zip(clean_preds, poisoned_preds)]
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def cosine_accuracy(embedder, first, second, threshold=0.5, batch_size=64):
    """
    Mean cosine similarity of paired embeddings and the share of pairs above threshold.

    Args:
        first, second: paired image batches [n, 3, H, W]
    """
    if first.shape[0] == 0 or first.shape[0] != second.shape[0]:
        raise InvalidArgument('cosine_accuracy needs two nonempty batches of equal length')
    embedder.eval()
    sims = []
    with torch.no_grad():
        for start, batch in _chunks(first, batch_size):
            other = second[start:start + batch.shape[0]]
            sims.append(F.cosine_similarity(embedder(batch), embedder(other), dim=-1))
    sims = torch.cat(sims)
    return sims.mean().item(), (sims > threshold).float().mean().item()


def stealth_stats(x, x_p):
    """MSE, PSNR and RMSE of the trigger perturbation"""
    err = torch.mean((x_p - x) ** 2).item()
    return {'mse': err, 'psnr': mse_to_psnr(err), 'rmse': math.sqrt(err)}


def poison_images(trigger, images, kind='bpp', segmenter=None, source=SOURCE_CLASS, batch_size=16):
    """x_p for evaluation; segmentation attacks confine the trigger to g's source pixels"""
    out = []
    with torch.no_grad():
        for _, batch in _chunks(images, batch_size):
            if kind == 'seg_targeted':
                mask = make_mask(segmenter(batch).argmax(dim=1), source)
                out.append(compose_masked_poison(batch, trigger, mask))
            else:
                out.append(trigger.inject(batch))
    return torch.cat(out)


def attack_metric(kind, codec, images, poisoned, spec=IDENTITY, segmenter=None, embedder=None,
                  source=SOURCE_CLASS, target=TARGET_CLASS, batch_size=16):
    """
    E_X[P(x, f(t(x_p)))] for one attack kind.

    bpp: rate of the processed poisoned image; psnr: PSNR(x, f(t(x_p)));
    seg_targeted: pixel ASR of g(f(t(x_p))) against g(f(x));
    face_embed: cosine of h(f(t(x_p))) and h(f(x)).
    """
    if kind not in ATTACK_METRICS:
        raise InvalidArgument(f'Unknown attack kind {kind!r}')
    _require_images(images)
    codec.eval()
    values = []
    with torch.no_grad():
        for start, batch in _chunks(images, batch_size):
            processed = apply_preprocess(poisoned[start:start + batch.shape[0]], spec)
            out = codec(processed, mode='eval')
            if kind == 'bpp':
                values.extend(out.rate.bpp.tolist())
            elif kind == 'psnr':
                errs = ((batch - out.x_hat) ** 2).mean(dim=(1, 2, 3))
                values.extend(mse_to_psnr(err) for err in errs.tolist())
            elif kind == 'seg_targeted':
                clean_pred = segmenter(codec(batch, mode='eval').x_hat).argmax(dim=1)
                poisoned_pred = segmenter(out.x_hat).argmax(dim=1)
                values.extend(v for v in (pixel_asr(c, p, source, target)
                                          for c, p in zip(clean_pred, poisoned_pred)) if v is not None)
            else:
                clean = embedder(codec(batch, mode='eval').x_hat)
                values.extend(F.cosine_similarity(embedder(out.x_hat), clean, dim=-1).tolist())
    return float(np.mean(values)) if values else None


def resistance_sweep(codecs, trigger, kind, images, grid, seed=0, segmenter=None, embedder=None,
                     include_identity=True, batch_size=16, family='', attack_name=None):
    """
    Attack metric for every (preprocessing, degree) in grid and every codec.

    Args:
        codecs: {model name: CodecModel}, one per quality
        trigger: one trigger for every codec, or {model name: trigger} when
            each quality was backdoored with its own
        grid: {kind: degrees}; the identity row is added first
    """
    _require_images(images)
    specs = ([IDENTITY] if include_identity else []) + grid_specs(grid, seed)
    metric = ATTACK_METRICS[kind]
    report = ResistanceReport(family=family)
    poisoned_by_trigger = {}
    for name, codec in codecs.items():
        codec_trigger = trigger[name] if isinstance(trigger, dict) else trigger
        if id(codec_trigger) not in poisoned_by_trigger:
            poisoned_by_trigger[id(codec_trigger)] = poison_images(codec_trigger, images, kind, segmenter,
                                                                   batch_size=batch_size)
        poisoned = poisoned_by_trigger[id(codec_trigger)]
        for spec in specs:
            value = attack_metric(kind, codec, images, poisoned, spec, segmenter, embedder, batch_size=batch_size)
            report.entries.append(ResistanceEntry(
                model=name, quality=codec.lam, attack=attack_name or kind, preproc=spec.kind,
                degree=float(spec.degree), metric=metric, value=value,
            ))
        logger.info('resistance sweep done for %s (%d settings)', name, len(specs))
    return report


def defense_finetune(codec, clean_images, epochs, eval_images, trigger, kind, lr=1e-5, batch_size=8, seed=0,
                     segmenter=None, embedder=None, distortion_scale=DISTORTION_SCALE):
    """
    Finetune the encoder of a backdoored codec on the clean RD loss only.

    Returns:
        list of DefenseRecord, epoch 0 measured before any update (epochs + 1 rows)
    """
    _require_images(clean_images)
    codec = copy.deepcopy(codec)
    poisoned = poison_images(trigger, eval_images, kind, segmenter, batch_size=batch_size)

    def measure(epoch):
        return DefenseRecord(
            epoch=epoch,
            clean=rd_point(codec, eval_images, batch_size),
            attack_value=attack_metric(kind, codec, eval_images, poisoned, IDENTITY, segmenter, embedder,
                                       batch_size=batch_size),
        )

    records = [measure(0)]
    for param in codec.parameters():
        param.requires_grad_(False)
    encoder = codec.encoder_parameters()
    for param in encoder:
        param.requires_grad_(True)
    optimizer = torch.optim.Adam(encoder, lr=lr)
    order_gen = torch.Generator().manual_seed(seed)
    noise_gen = torch.Generator(device=clean_images.device).manual_seed(seed + 1)

    for epoch in range(1, epochs + 1):
        codec.train()
        order = torch.randperm(clean_images.shape[0], generator=order_gen)
        for start in range(0, len(order), batch_size):
            batch = clean_images[order[start:start + batch_size]]
            terms = rd_loss(codec, batch, generator=noise_gen, distortion_scale=distortion_scale)
            optimizer.zero_grad()
            terms.loss.backward()
            optimizer.step()
        records.append(measure(epoch))
        logger.info('defense finetune epoch %d: clean psnr %.2f, attack %s', epoch,
                    records[-1].clean.psnr, records[-1].attack_value)

    codec.eval()
    return records


def channel_activity(codec, images, batch_size=16):
    """Mean |y| per latent channel over a clean image set"""
    _require_images(images)
    codec.eval()
    total, count = None, 0
    with torch.no_grad():
        for _, batch in _chunks(images, batch_size):
            y = codec.encode(batch).abs().mean(dim=(2, 3)).sum(dim=0)
            total = y if total is None else total + y
            count += batch.shape[0]
    return total / count


def defense_prune(codec, rate, clean_images, eval_images, trigger, kind, segmenter=None, embedder=None,
                  batch_size=16):
    """
    Zero the floor(rate * C) latent channels of the encoder's last layer with
    the smallest mean activation on clean images, then re-measure.
    """
    if not 0 <= rate <= 0.98:
        raise InvalidArgument(f'Pruning rate must be in [0, 0.98], got {rate}')
    pruned = copy.deepcopy(codec)
    activity = channel_activity(pruned, clean_images, batch_size)
    count = int(math.floor(rate * activity.numel() + 1e-9))
    channels = torch.argsort(activity, stable=True)[:count].tolist()
    last = pruned.g_a[-1]
    with torch.no_grad():
        if channels:
            last.weight[channels] = 0
            if last.bias is not None:
                last.bias[channels] = 0

    poisoned = poison_images(trigger, eval_images, kind, segmenter, batch_size=batch_size)
    return PruneResult(
        codec=pruned,
        rate=rate,
        pruned_channels=sorted(channels),
        clean=rd_point(pruned, eval_images, batch_size),
        attack_value=attack_metric(kind, pruned, eval_images, poisoned, IDENTITY, segmenter, embedder,
                                   batch_size=batch_size),
    )
