"""
Backdoor objectives and training loops.

Each objective combines a clean-behavior term on x with an attack term on the
poisoned image x_p = T(x). The dynamic forms guard the clean terms with
max(clean, poisoned) so the attack cannot buy its effect with clean
degradation. Training finetunes only the encoder (stage 1 with the triggers,
stage 2 alone under random preprocessing) or, as a variant, only the decoder.
"""

import copy
from dataclasses import dataclass, field, replace
from functools import partial
import logging

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from .codec import DISTORTION_SCALE, mse, psnr
from .downstream import SOURCE_CLASS, TARGET_CLASS, UNWANTED_CLASS, make_mask, make_target, make_unwanted
from .exceptions import InvalidArgument, TrainingDiverged
from .preprocess import SENSITIVITY_DEGREES, apply_preprocess, sample_preprocess

logger = logging.getLogger(__name__)

OBJECTIVE_KINDS = ('bpp', 'psnr', 'seg_targeted', 'face_embed')

# (alpha, beta) per attack kind
DEFAULT_WEIGHTS = {
    'bpp': (0.0130, 0.01),
    'psnr': (0.0130, 0.01),
    'seg_targeted': (0.1, 0.2),
    'face_embed': (0.1, 0.05),
}

# bound on the unwanted-class cross-entropy that the transfer term maximizes
UNWANTED_CE_CAP = 10.0


@dataclass
class AttackObjective:
    """
    One attack o with its loss weights.

    alpha/beta default per kind; weight is the multi-trigger weight alpha^o;
    gamma_t and mu_range only matter when transfer is set.
    """
    kind: str
    alpha: float = None
    beta: float = None
    dynamic: bool = True
    transfer: bool = False
    weight: float = 1.0
    source: int = SOURCE_CLASS
    target: int = TARGET_CLASS
    unwanted: int = UNWANTED_CLASS
    gamma_t: float = 0.1
    mu_range: tuple = (1 / 3, 2 / 3)
    lam: float = None

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            raise InvalidArgument(f'Unknown attack kind {self.kind!r}; expected one of {OBJECTIVE_KINDS}')
        alpha, beta = DEFAULT_WEIGHTS[self.kind]
        self.alpha = alpha if self.alpha is None else self.alpha
        self.beta = beta if self.beta is None else self.beta
        if self.beta <= 0:
            raise InvalidArgument(f'beta must be positive, got {self.beta}')
        if self.alpha < 0:
            raise InvalidArgument(f'alpha must be >= 0, got {self.alpha}')
        low, high = self.mu_range
        if not 0 < low <= high <= 1:
            raise InvalidArgument(f'mu range must lie in (0, 1], got {self.mu_range}')
        if self.kind == 'seg_targeted' and self.source == self.target:
            raise InvalidArgument('Source and target class must differ')
        self.mu_range = (low, high)

    @property
    def is_downstream(self):
        return self.kind in ('seg_targeted', 'face_embed')


@dataclass
class AttackTask:
    """An objective, the trigger that activates it and, for downstream attacks, the consumer model"""
    name: str
    objective: AttackObjective
    trigger: object
    aux_images: torch.Tensor = None
    model: object = None

    def __post_init__(self):
        if self.objective.is_downstream and self.model is None:
            raise InvalidArgument(f'{self.objective.kind} task {self.name!r} needs a downstream model')


@dataclass
class LossTerms:
    total: torch.Tensor
    components: dict
    poisoned: torch.Tensor
    source: torch.Tensor


@dataclass
class AttackResult:
    codec: object
    tasks: list
    log: list = field(default_factory=list)


@dataclass
class _Pass:
    x_hat: torch.Tensor
    rate: torch.Tensor
    mse: torch.Tensor
    distortion: torch.Tensor


def _max(a, b):
    if isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor):
        return torch.maximum(torch.as_tensor(a), torch.as_tensor(b))
    return max(a, b)


def dynamic_bpp_objective(rate_clean, dist_clean, dist_poison, rate_poison, lam, beta):
    """R(x) + lam * max(D(x), D(x_p)) - beta * R(x_p)"""
    return rate_clean + lam * _max(dist_clean, dist_poison) - beta * rate_poison


def dynamic_psnr_objective(rate_clean, rate_poison, dist_clean, psnr_poison, lam, beta):
    """max(R(x), R(x_p)) + lam * D(x) + beta * lam * PSNR(x, f(x_p))"""
    return _max(rate_clean, rate_poison) + lam * dist_clean + beta * lam * psnr_poison


def static_bpp_objective(rd_clean, dist_poison, rate_poison, alpha, beta):
    """L(x) + alpha * D(x_p) - beta * R(x_p)"""
    return rd_clean + alpha * dist_poison - beta * rate_poison


def static_psnr_objective(rd_clean, rate_poison, psnr_poison, lam, alpha, beta):
    """L(x) + alpha * R(x_p) + beta * lam * PSNR(x, f(x_p))"""
    return rd_clean + alpha * rate_poison + beta * lam * psnr_poison


def downstream_objective(rd_main, rd_poison, ds_loss, alpha, beta):
    """L(x_main) + alpha * L(x_p) + beta * L_DS"""
    return rd_main + alpha * rd_poison + beta * ds_loss


def _forward(codec, images, generator, distortion_scale):
    out = codec(images, mode='train', generator=generator)
    err = mse(images, out.x_hat)
    return _Pass(x_hat=out.x_hat, rate=out.rate.bpp.mean(), mse=err, distortion=distortion_scale * err)


def _inject(trigger, x):
    return trigger.inject(x) if hasattr(trigger, 'inject') else trigger(x)


def _passes(codec, x, x_p, attack_transform, generator, distortion_scale):
    clean = _forward(codec, x, generator, distortion_scale)
    poisoned = _forward(codec, x_p, generator, distortion_scale)
    if attack_transform is None:
        attacked = poisoned
    else:
        attacked = _forward(codec, attack_transform(x_p), generator, distortion_scale)
    return clean, poisoned, attacked


def _components(**values):
    return {name: float(value) for name, value in values.items()}


def loss_bpp_dynamic(codec, trigger, x, lam=None, beta=0.01, attack_transform=None, generator=None,
                     distortion_scale=DISTORTION_SCALE, x_p=None):
    """Rate-inflation attack with the distortion guard max(D(x), D(x_p))"""
    lam = codec.lam if lam is None else lam
    x_p = _inject(trigger, x) if x_p is None else x_p
    clean, poisoned, attacked = _passes(codec, x, x_p, attack_transform, generator, distortion_scale)
    total = dynamic_bpp_objective(clean.rate, clean.distortion, poisoned.distortion, attacked.rate, lam, beta)
    return LossTerms(total, _components(
        rate_clean=clean.rate, dist_clean=clean.distortion, dist_poison=poisoned.distortion,
        rate_poison=attacked.rate, loss=total,
    ), x_p, x)


def loss_psnr_dynamic(codec, trigger, x, lam=None, beta=0.01, attack_transform=None, generator=None,
                      distortion_scale=DISTORTION_SCALE, x_p=None):
    """Reconstruction-quality attack with the rate guard max(R(x), R(x_p))"""
    lam = codec.lam if lam is None else lam
    x_p = _inject(trigger, x) if x_p is None else x_p
    clean, poisoned, attacked = _passes(codec, x, x_p, attack_transform, generator, distortion_scale)
    psnr_poison = psnr(x, attacked.x_hat)
    total = dynamic_psnr_objective(clean.rate, poisoned.rate, clean.distortion, psnr_poison, lam, beta)
    return LossTerms(total, _components(
        rate_clean=clean.rate, rate_poison=poisoned.rate, dist_clean=clean.distortion,
        psnr_poison=psnr_poison, loss=total,
    ), x_p, x)


def loss_bpp_static(codec, trigger, x, lam=None, alpha=0.0130, beta=0.01, attack_transform=None,
                    generator=None, distortion_scale=DISTORTION_SCALE, x_p=None):
    lam = codec.lam if lam is None else lam
    x_p = _inject(trigger, x) if x_p is None else x_p
    clean, poisoned, attacked = _passes(codec, x, x_p, attack_transform, generator, distortion_scale)
    rd_clean = clean.rate + lam * clean.distortion
    total = static_bpp_objective(rd_clean, poisoned.distortion, attacked.rate, alpha, beta)
    return LossTerms(total, _components(
        rd_clean=rd_clean, dist_poison=poisoned.distortion, rate_poison=attacked.rate, loss=total,
    ), x_p, x)


def loss_psnr_static(codec, trigger, x, lam=None, alpha=0.0130, beta=0.01, attack_transform=None,
                     generator=None, distortion_scale=DISTORTION_SCALE, x_p=None):
    lam = codec.lam if lam is None else lam
    x_p = _inject(trigger, x) if x_p is None else x_p
    clean, poisoned, attacked = _passes(codec, x, x_p, attack_transform, generator, distortion_scale)
    rd_clean = clean.rate + lam * clean.distortion
    psnr_poison = psnr(x, attacked.x_hat)
    total = static_psnr_objective(rd_clean, poisoned.rate, psnr_poison, lam, alpha, beta)
    return LossTerms(total, _components(
        rd_clean=rd_clean, rate_poison=poisoned.rate, psnr_poison=psnr_poison, loss=total,
    ), x_p, x)


def compose_masked_poison(x, trigger, mask):
    """x_p = (1 - M) * x + M * T(x); M is [..., H, W] and broadcasts over channels"""
    mask = mask.to(dtype=x.dtype).unsqueeze(-3)
    return (1 - mask) * x + mask * _inject(trigger, x)


def _check_segmentation_shapes(logits, eta):
    if logits.dim() != 4 or eta.shape != (logits.shape[0], *logits.shape[-2:]):
        raise InvalidArgument(
            f'Downstream output {tuple(logits.shape)} does not match target map {tuple(eta.shape)}'
        )


def loss_downstream(codec, trigger, x_main, x_aux, ds_model, eta, alpha=0.1, beta=0.2, lam=None,
                    attack_transform=None, generator=None, distortion_scale=DISTORTION_SCALE, x_p=None):
    """
    Joint loss of the extended scenario: clean RD on x_main, RD of the
    poisoned aux images, and cross-entropy of g(f(x_p)) toward eta.
    """
    lam = codec.lam if lam is None else lam
    x_p = _inject(trigger, x_aux) if x_p is None else x_p
    main = _forward(codec, x_main, generator, distortion_scale)
    poisoned = _forward(codec, x_p, generator, distortion_scale)
    attacked = poisoned if attack_transform is None else _forward(
        codec, attack_transform(x_p), generator, distortion_scale)
    logits = ds_model(attacked.x_hat)
    _check_segmentation_shapes(logits, eta)
    ds_loss = F.cross_entropy(logits, eta)
    rd_main = main.rate + lam * main.distortion
    rd_poison = poisoned.rate + lam * poisoned.distortion
    total = downstream_objective(rd_main, rd_poison, ds_loss, alpha, beta)
    return LossTerms(total, _components(rd_main=rd_main, rd_poison=rd_poison, ds=ds_loss, loss=total),
                     x_p, x_aux)


def loss_seg_targeted(codec, trigger, x_main, x_aux, segmenter, objective, mu=None, attack_transform=None,
                      generator=None, distortion_scale=DISTORTION_SCALE):
    """
    Masked targeted segmentation attack.

    The trigger is confined to pixels g(x) labels as the source class, and
    g(f(x_p)) is pushed toward eta, the clean prediction with source relabelled
    as target. With objective.transfer the poisoned logits are mixed with the
    (detached) clean-reconstruction logits, mu * g(f(x_p)) + (1 - mu) * g(f(x)),
    and the cross-entropy toward the unwanted map tau is maximized with weight
    gamma_t where tau differs from eta.
    """
    lam = codec.lam if objective.lam is None else objective.lam
    with torch.no_grad():
        clean_pred = segmenter(x_aux).argmax(dim=1)
    mask = make_mask(clean_pred, objective.source)
    eta = make_target(clean_pred, objective.source, objective.target)
    x_p = compose_masked_poison(x_aux, trigger, mask)

    main = _forward(codec, x_main, generator, distortion_scale)
    poisoned = _forward(codec, x_p, generator, distortion_scale)
    attacked = poisoned if attack_transform is None else _forward(
        codec, attack_transform(x_p), generator, distortion_scale)
    logits = segmenter(attacked.x_hat)
    _check_segmentation_shapes(logits, eta)

    unwanted_ce = torch.zeros((), device=logits.device)
    if objective.transfer:
        if mu is None:
            raise InvalidArgument('Transfer objective needs a mixing weight mu')
        clean_aux = _forward(codec, x_aux, generator, distortion_scale)
        logits = mu * logits + (1 - mu) * segmenter(clean_aux.x_hat).detach()
        ds_loss = F.cross_entropy(logits, eta)
        tau = make_unwanted(eta, objective.target, objective.unwanted)
        shifted = tau != eta
        if objective.gamma_t > 0 and shifted.any():
            unwanted_ce = F.cross_entropy(logits, tau, reduction='none')[shifted].mean()
            ds_loss = ds_loss - objective.gamma_t * unwanted_ce.clamp(max=UNWANTED_CE_CAP)
    else:
        ds_loss = F.cross_entropy(logits, eta)

    rd_main = main.rate + lam * main.distortion
    rd_poison = poisoned.rate + lam * poisoned.distortion
    total = downstream_objective(rd_main, rd_poison, ds_loss, objective.alpha, objective.beta)
    return LossTerms(total, _components(
        rd_main=rd_main, rd_poison=rd_poison, ds=ds_loss, unwanted_ce=unwanted_ce, loss=total,
    ), x_p, x_aux)


def loss_face(codec, trigger, x_main, x_aux, embedder, objective, mu=None, attack_transform=None,
              generator=None, distortion_scale=DISTORTION_SCALE):
    """
    Embedding attack: minimize cos(h(f(x)), h(f(x_p))). With objective.transfer
    the poisoned embedding is mixed with the detached clean one before the cosine.
    """
    lam = codec.lam if objective.lam is None else objective.lam
    x_p = _inject(trigger, x_aux)
    main = _forward(codec, x_main, generator, distortion_scale)
    poisoned = _forward(codec, x_p, generator, distortion_scale)
    attacked = poisoned if attack_transform is None else _forward(
        codec, attack_transform(x_p), generator, distortion_scale)
    clean_aux = _forward(codec, x_aux, generator, distortion_scale)
    reference = embedder(clean_aux.x_hat).detach()
    embedding = embedder(attacked.x_hat)
    if objective.transfer:
        if mu is None:
            raise InvalidArgument('Transfer objective needs a mixing weight mu')
        embedding = mu * embedding + (1 - mu) * reference
    ds_loss = F.cosine_similarity(embedding, reference, dim=-1).mean()

    rd_main = main.rate + lam * main.distortion
    rd_poison = poisoned.rate + lam * poisoned.distortion
    total = downstream_objective(rd_main, rd_poison, ds_loss, objective.alpha, objective.beta)
    return LossTerms(total, _components(rd_main=rd_main, rd_poison=rd_poison, cosine=ds_loss, loss=total),
                     x_p, x_aux)


def loss_transfer_ss(codec, trigger, x_main, x_aux, segmenter, objective, mu, **kwargs):
    """Segmentation attack with the boundary-shift mixing and unwanted-class term"""
    return loss_seg_targeted(codec, trigger, x_main, x_aux, segmenter, replace(objective, transfer=True),
                             mu=mu, **kwargs)


def loss_transfer_fr(codec, trigger, x_main, x_aux, embedder, objective, mu, **kwargs):
    """Embedding attack with mixed embeddings"""
    return loss_face(codec, trigger, x_main, x_aux, embedder, replace(objective, transfer=True), mu=mu, **kwargs)


def loss_for_task(codec, task, x, x_aux=None, mu=None, attack_transform=None, generator=None,
                  distortion_scale=DISTORTION_SCALE):
    """Dispatch to the loss builder of task.objective"""
    objective = task.objective
    lam = codec.lam if objective.lam is None else objective.lam
    common = {'attack_transform': attack_transform, 'generator': generator, 'distortion_scale': distortion_scale}
    if objective.kind == 'bpp':
        if objective.dynamic:
            return loss_bpp_dynamic(codec, task.trigger, x, lam, objective.beta, **common)
        return loss_bpp_static(codec, task.trigger, x, lam, objective.alpha, objective.beta, **common)
    if objective.kind == 'psnr':
        if objective.dynamic:
            return loss_psnr_dynamic(codec, task.trigger, x, lam, objective.beta, **common)
        return loss_psnr_static(codec, task.trigger, x, lam, objective.alpha, objective.beta, **common)
    x_aux = x if x_aux is None else x_aux
    if objective.kind == 'seg_targeted':
        return loss_seg_targeted(codec, task.trigger, x, x_aux, task.model, objective, mu=mu, **common)
    return loss_face(codec, task.trigger, x, x_aux, task.model, objective, mu=mu, **common)


def _trainable(module):
    if not isinstance(module, torch.nn.Module):
        return []
    return [p for p in module.parameters() if p.requires_grad]


def _set_requires_grad(params, flag):
    for param in params:
        param.requires_grad_(flag)


def _stack(images):
    return images if isinstance(images, torch.Tensor) else torch.stack(list(images))


def _joint_train(codec, tasks, images, steps, seed, target='encoder', lr=1e-4, trigger_lr=1e-4,
                 batch_size=8, train_triggers=True, degrees=None, log_every=50, device='cpu',
                 distortion_scale=DISTORTION_SCALE, desc='attack'):
    if not tasks:
        raise InvalidArgument('At least one attack task is required')
    images = _stack(images)
    codec = copy.deepcopy(codec).to(device)
    flags = {param: param.requires_grad for param in codec.parameters()}
    target_params = codec.encoder_parameters() if target == 'encoder' else codec.decoder_parameters()
    _set_requires_grad(codec.parameters(), False)
    _set_requires_grad(target_params, True)

    frozen_models = []
    for task in tasks:
        if isinstance(task.model, torch.nn.Module):
            task.model.to(device).eval()
            frozen_models += _trainable(task.model)
        if isinstance(task.trigger, torch.nn.Module):
            task.trigger.to(device)
    _set_requires_grad(frozen_models, False)

    trigger_params = {task.name: _trainable(task.trigger) for task in tasks}
    if not train_triggers:
        _set_requires_grad([p for params in trigger_params.values() for p in params], False)

    optimizer = torch.optim.Adam(target_params, lr=lr)
    trigger_optimizers = {
        name: torch.optim.Adam(params, lr=trigger_lr)
        for name, params in trigger_params.items() if params and train_triggers
    }

    order_gen = torch.Generator().manual_seed(seed)
    noise_gen = torch.Generator(device=device).manual_seed(seed + 1)
    rng = np.random.default_rng(seed)
    log = []
    order = torch.randperm(images.shape[0], generator=order_gen)
    cursor = 0

    try:
        for step in tqdm(range(steps), desc=desc, disable=None):
            if cursor + batch_size > len(order):
                order = torch.randperm(images.shape[0], generator=order_gen)
                cursor = 0
            batch = images[order[cursor:cursor + batch_size]].to(device)
            cursor += batch_size

            spec = sample_preprocess(rng, degrees) if degrees is not None else None
            transform = partial(apply_preprocess, spec=spec) if spec is not None and spec.kind != 'identity' else None
            draws = {}
            for task in tasks:
                aux = None
                if task.aux_images is not None:
                    index = torch.as_tensor(rng.integers(task.aux_images.shape[0], size=batch_size))
                    aux = task.aux_images[index].to(device)
                mu = float(rng.uniform(*task.objective.mu_range)) if task.objective.transfer else None
                draws[task.name] = (aux, mu)

            def task_loss(task):
                aux, mu = draws[task.name]
                return loss_for_task(codec, task, batch, aux, mu, transform, noise_gen, distortion_scale)

            total = 0.0
            records = []
            for task in tasks:
                terms = task_loss(task)
                if not torch.isfinite(terms.total):
                    raise TrainingDiverged(step, terms.components, objective=task.name)
                total = total + task.objective.weight * terms.total
                record = {'step': step, 'objective': task.name, **terms.components}
                if spec is not None:
                    record['preprocess'] = spec.label
                records.append(record)

            optimizer.zero_grad()
            total.backward(inputs=target_params)
            optimizer.step()

            for task, record in zip(tasks, records):
                trigger_optimizer = trigger_optimizers.get(task.name)
                if trigger_optimizer is None:
                    continue
                terms = task_loss(task)
                stealth = task.trigger.stealth_penalty(terms.source, terms.poisoned)
                trigger_loss = terms.total + stealth
                if not torch.isfinite(trigger_loss):
                    raise TrainingDiverged(step, {**terms.components, 'stealth': stealth.item()}, task.name)
                trigger_optimizer.zero_grad()
                trigger_loss.backward(inputs=trigger_params[task.name])
                trigger_optimizer.step()
                record['stealth'] = stealth.item()
                record['stealth_mse'] = mse(terms.source, terms.poisoned).item()

            log.extend(records)
            if step % log_every == 0:
                for record in records:
                    logger.info('%s step %d [%s]: loss=%.5f', desc, step, record['objective'], record['loss'])
    finally:
        for param, flag in flags.items():
            param.requires_grad_(flag)
        _set_requires_grad(frozen_models, True)
        if not train_triggers:
            _set_requires_grad([p for params in trigger_params.values() for p in params], True)

    return AttackResult(codec=codec.eval(), tasks=tasks, log=log)


def stage1_train(codec, tasks, images, steps, seed, lr=1e-4, trigger_lr=1e-4, batch_size=8, log_every=50,
                 device='cpu', distortion_scale=DISTORTION_SCALE):
    """
    Inject backdoors into the encoder.

    Decoder and entropy parameters stay frozen. Each step updates the encoder
    on sum_o alpha^o * L^o, then every trainable trigger on its own loss plus
    the stealth hinge.
    """
    return _joint_train(codec, tasks, images, steps, seed, target='encoder', lr=lr, trigger_lr=trigger_lr,
                        batch_size=batch_size, log_every=log_every, device=device,
                        distortion_scale=distortion_scale, desc='stage1')


def stage2_train(codec, tasks, images, steps, seed, degrees=None, lr=1e-5, batch_size=8, log_every=50,
                 device='cpu', distortion_scale=DISTORTION_SCALE):
    """
    Robust encoder finetuning with frozen triggers.

    Every step draws t from the preprocessing kinds plus the identity and
    applies it to x_p inside the attack term only.
    """
    degrees = SENSITIVITY_DEGREES if degrees is None else degrees
    return _joint_train(codec, tasks, images, steps, seed, target='encoder', lr=lr, batch_size=batch_size,
                        train_triggers=False, degrees=degrees, log_every=log_every, device=device,
                        distortion_scale=distortion_scale, desc='stage2')


def decoder_attack_train(codec, tasks, images, steps, seed, lr=1e-4, trigger_lr=1e-4, batch_size=8,
                         log_every=50, device='cpu', distortion_scale=DISTORTION_SCALE):
    """Backdoor the decoder instead of the encoder; rate attacks are impossible there"""
    tasks = list(tasks)
    for task in tasks:
        if task.objective.kind == 'bpp':
            raise InvalidArgument('Finetuning the decoder cannot change the rate: bpp objectives are rejected')
    return _joint_train(codec, tasks, images, steps, seed, target='decoder', lr=lr, trigger_lr=trigger_lr,
                        batch_size=batch_size, log_every=log_every, device=device,
                        distortion_scale=distortion_scale, desc='decoder')
