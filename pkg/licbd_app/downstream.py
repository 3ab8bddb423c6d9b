"""
Toy downstream consumers of decoded images.

A synthetic shapes corpus stands in for a street-scene segmentation dataset and
a synthetic identity set for face recognition. ToySegmenter and ToyEmbedder are
the small networks the targeted attacks aim at.
"""

from dataclasses import dataclass, field
import json
import logging
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image, ImageDraw
from tqdm import tqdm

from .exceptions import DatasetError, InvalidArgument

logger = logging.getLogger(__name__)

BACKGROUND_CLASS = 0
SOURCE_CLASS = 1      # circle
TARGET_CLASS = 2      # square
UNWANTED_CLASS = 3    # triangle
NUM_CLASSES = 4
CLASS_NAMES = ('background', 'circle', 'square', 'triangle')

ACCURACY_BAR = 0.90

_BASE_COLOURS = {
    SOURCE_CLASS: (0.85, 0.25, 0.25),
    TARGET_CLASS: (0.25, 0.80, 0.30),
    UNWANTED_CLASS: (0.25, 0.35, 0.85),
}


@dataclass
class ShapesCorpus:
    images: torch.Tensor      # [n, 3, S, S] in [0, 1]
    labels: torch.Tensor      # [n, S, S] class ids

    def __len__(self):
        return self.images.shape[0]

    def split(self, held_out=0.2):
        cut = len(self) - max(1, int(round(len(self) * held_out)))
        return (ShapesCorpus(self.images[:cut], self.labels[:cut]),
                ShapesCorpus(self.images[cut:], self.labels[cut:]))


@dataclass
class IdentitySet:
    images: torch.Tensor      # [n, 3, S, S]
    identities: torch.Tensor  # [n]

    def __len__(self):
        return self.images.shape[0]

    def pairs(self):
        """All (i, j), i < j, showing the same identity"""
        ids = self.identities.tolist()
        return [(i, j) for i in range(len(ids)) for j in range(i + 1, len(ids)) if ids[i] == ids[j]]


@dataclass
class ToyModels:
    segmenters: list
    embedder: nn.Module = None
    accuracies: list = field(default_factory=list)

    @property
    def meets_bar(self):
        return all(acc >= ACCURACY_BAR for acc in self.accuracies)


def _colour(rng, base):
    jitter = rng.uniform(-0.12, 0.12, size=3)
    return tuple(int(255 * min(max(c + j, 0.0), 1.0)) for c, j in zip(base, jitter))


def _textured_background(rng, size):
    base = rng.uniform(0.35, 0.65)
    tint = rng.uniform(-0.05, 0.05, size=3)
    yy, xx = np.mgrid[0:size, 0:size] / size
    angle = rng.uniform(0, 2 * np.pi)
    stripes = 0.04 * np.sin(2 * np.pi * rng.uniform(2, 5) * (np.cos(angle) * xx + np.sin(angle) * yy))
    grain = rng.normal(0, 0.02, size=(size, size, 3))
    background = base + tint + stripes[..., None] + grain
    return (np.clip(background, 0, 1) * 255).astype(np.uint8)


def _draw_shape(draw_rgb, draw_label, rng, size, cls):
    radius = rng.integers(size // 10, size // 5 + 1)
    cx, cy = rng.integers(radius, size - radius, size=2)
    fill = _colour(rng, _BASE_COLOURS[cls])
    box = [int(cx - radius), int(cy - radius), int(cx + radius), int(cy + radius)]
    if cls == SOURCE_CLASS:
        draw_rgb.ellipse(box, fill=fill)
        draw_label.ellipse(box, fill=cls)
    elif cls == TARGET_CLASS:
        draw_rgb.rectangle(box, fill=fill)
        draw_label.rectangle(box, fill=cls)
    else:
        points = [(int(cx), int(cy - radius)), (int(cx - radius), int(cy + radius)), (int(cx + radius), int(cy + radius))]
        draw_rgb.polygon(points, fill=fill)
        draw_label.polygon(points, fill=cls)


def synth_shapes_dataset(n, size=64, seed=0):
    """
    Circles (source), squares (target) and triangles (unwanted) on a textured
    background. Every image has a circle, drawn last so it is never occluded.
    """
    if n < 1:
        raise InvalidArgument(f'n must be >= 1, got {n}')
    rng = np.random.default_rng(seed)
    images = np.empty((n, size, size, 3), dtype=np.uint8)
    labels = np.empty((n, size, size), dtype=np.int64)
    for index in range(n):
        canvas = Image.fromarray(_textured_background(rng, size))
        label = Image.new('L', (size, size), BACKGROUND_CLASS)
        draw_rgb, draw_label = ImageDraw.Draw(canvas), ImageDraw.Draw(label)
        for cls in (TARGET_CLASS, UNWANTED_CLASS):
            if rng.random() < 0.8:
                _draw_shape(draw_rgb, draw_label, rng, size, cls)
        _draw_shape(draw_rgb, draw_label, rng, size, SOURCE_CLASS)
        images[index] = np.asarray(canvas)
        labels[index] = np.asarray(label)
    return ShapesCorpus(
        images=torch.from_numpy(images).permute(0, 3, 1, 2).float() / 255.0,
        labels=torch.from_numpy(labels),
    )


def synth_identity_dataset(n_ids=8, per_id=8, size=64, seed=0):
    """Cartoon faces: identity fixes skin tone and feature layout, samples add jitter"""
    rng = np.random.default_rng(seed)
    images, identities = [], []
    for identity in range(n_ids):
        skin = rng.uniform(0.3, 0.9, size=3)
        eye_gap = rng.integers(size // 8, size // 4)
        eye_size = rng.integers(2, size // 12 + 3)
        mouth_w = rng.integers(size // 8, size // 3)
        eye_colour = rng.uniform(0, 0.4, size=3)
        for _ in range(per_id):
            dx, dy = rng.integers(-3, 4, size=2)
            canvas = Image.fromarray(_textured_background(rng, size))
            draw = ImageDraw.Draw(canvas)
            shade = np.clip(skin + rng.uniform(-0.05, 0.05), 0, 1)
            cx, cy = size // 2 + dx, size // 2 + dy
            draw.ellipse([cx - size // 3, cy - size // 3, cx + size // 3, cy + size // 3],
                         fill=tuple(int(255 * c) for c in shade))
            for side in (-1, 1):
                ex = cx + side * eye_gap
                draw.ellipse([ex - eye_size, cy - size // 8 - eye_size, ex + eye_size, cy - size // 8 + eye_size],
                             fill=tuple(int(255 * c) for c in eye_colour))
            draw.rectangle([cx - mouth_w // 2, cy + size // 8, cx + mouth_w // 2, cy + size // 8 + 2],
                           fill=(60, 20, 20))
            images.append(np.asarray(canvas))
            identities.append(identity)
    stacked = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).float() / 255.0
    return IdentitySet(images=stacked, identities=torch.tensor(identities))


def make_mask(labels, source=SOURCE_CLASS):
    """M = 1 exactly where the label is the source class"""
    return (labels == source).float()


def make_target(labels, source=SOURCE_CLASS, target=TARGET_CLASS):
    """eta: source pixels relabelled as target"""
    if source == target:
        raise InvalidArgument('Source and target class must differ')
    return torch.where(labels == source, torch.full_like(labels, target), labels)


def make_unwanted(eta, target=TARGET_CLASS, unwanted=UNWANTED_CLASS):
    """tau: the attack target with the target class replaced by the unwanted class"""
    return torch.where(eta == target, torch.full_like(eta, unwanted), eta)


class ToySegmenter(nn.Module):
    """Two-scale encoder-decoder emitting per-pixel logits [B, C, H, W]"""

    def __init__(self, width=16, num_classes=NUM_CLASSES):
        super().__init__()
        self.width = width
        self.stem = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, padding=1), nn.ReLU(inplace=True),
        )
        self.down = nn.Sequential(
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(2 * width, 2 * width, 3, padding=2, dilation=2), nn.ReLU(inplace=True),
        )
        self.up = nn.ConvTranspose2d(2 * width, width, 4, stride=2, padding=1)
        self.head = nn.Conv2d(2 * width, num_classes, 1)

    def forward(self, x):
        skip = self.stem(x)
        up = F.relu(self.up(self.down(skip)))[..., :skip.shape[-2], :skip.shape[-1]]
        return self.head(torch.cat([skip, up], dim=1))

    def predict(self, x):
        return self(x).argmax(dim=1)


class ToyEmbedder(nn.Module):
    """Conv feature extractor with an L2-normalized embedding"""

    def __init__(self, dim=64, width=16):
        super().__init__()
        self.dim = dim
        self.width = width
        self.features = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(2 * width, 4 * width, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )
        self.head = nn.Linear(4 * width, dim)

    def forward(self, x):
        return F.normalize(self.head(self.features(x)), dim=-1)


def pixel_accuracy(segmenter, images, labels, batch_size=64):
    segmenter.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            predicted = segmenter.predict(images[start:start + batch_size])
            correct += (predicted == labels[start:start + batch_size]).sum().item()
    return correct / labels.numel()


def train_segmenter(corpus, width, steps, seed, lr=1e-3, batch_size=16, device='cpu'):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        segmenter = ToySegmenter(width)
    segmenter.to(device).train()
    generator = torch.Generator().manual_seed(seed)
    optimizer = torch.optim.Adam(segmenter.parameters(), lr=lr)
    for step in tqdm(range(steps), desc=f'segmenter width={width}', disable=None):
        index = torch.randint(len(corpus), (batch_size,), generator=generator)
        logits = segmenter(corpus.images[index].to(device))
        loss = F.cross_entropy(logits, corpus.labels[index].to(device))
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if step % 100 == 0:
            logger.info('segmenter(width=%d) step %d: CE=%.4f', width, step, loss.item())
    return segmenter.eval()


def train_embedder(identity_set, steps, seed, dim=64, width=16, lr=1e-3, batch_size=16,
                   margin=0.3, device='cpu'):
    """Triplet-margin training that separates the synthetic identities"""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        embedder = ToyEmbedder(dim, width)
    embedder.to(device).train()
    rng = np.random.default_rng(seed)
    ids = identity_set.identities.numpy()
    by_id = {identity: np.flatnonzero(ids == identity) for identity in np.unique(ids)}
    if len(by_id) < 2:
        raise InvalidArgument('Embedder training needs at least two identities')
    criterion = nn.TripletMarginLoss(margin=margin)
    optimizer = torch.optim.Adam(embedder.parameters(), lr=lr)
    keys = list(by_id)
    for step in tqdm(range(steps), desc='embedder', disable=None):
        anchors, positives, negatives = [], [], []
        for _ in range(batch_size):
            a_id, n_id = rng.choice(len(keys), size=2, replace=False)
            a, p = rng.choice(by_id[keys[a_id]], size=2)
            anchors.append(a)
            positives.append(p)
            negatives.append(rng.choice(by_id[keys[n_id]]))
        images = identity_set.images.to(device)
        loss = criterion(embedder(images[anchors]), embedder(images[positives]), embedder(images[negatives]))
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if step % 100 == 0:
            logger.info('embedder step %d: triplet=%.4f', step, loss.item())
    return embedder.eval()


def train_toy_models(corpus, seed, widths=(16, 24), steps=600, identity_set=None, embed_steps=300,
                     device='cpu'):
    """
    Train one segmenter per width (the first is attacked, the others are
    unseen transfer targets) and, given identities, the embedder.
    """
    train, held_out = corpus.split()
    segmenters, accuracies = [], []
    for offset, width in enumerate(widths):
        segmenter = train_segmenter(train, width, steps, seed + offset, device=device)
        accuracy = pixel_accuracy(segmenter.cpu(), held_out.images, held_out.labels)
        if accuracy < ACCURACY_BAR:
            logger.warning('Segmenter width=%d reached %.3f held-out pixel accuracy, below %.2f',
                           width, accuracy, ACCURACY_BAR)
        segmenters.append(segmenter)
        accuracies.append(accuracy)
    embedder = None
    if identity_set is not None:
        embedder = train_embedder(identity_set, embed_steps, seed, device=device).cpu()
    return ToyModels(segmenters=segmenters, embedder=embedder, accuracies=accuracies)


def save_corpus(corpus, directory):
    """Write images/NNNN.png, labels/NNNN.png and manifest.json"""
    directory = Path(directory)
    (directory / 'images').mkdir(parents=True, exist_ok=True)
    (directory / 'labels').mkdir(parents=True, exist_ok=True)
    names = []
    for index in range(len(corpus)):
        name = f'{index:04d}.png'
        pixels = (corpus.images[index].permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)
        Image.fromarray(pixels).save(directory / 'images' / name)
        Image.fromarray(corpus.labels[index].numpy().astype(np.uint8)).save(directory / 'labels' / name)
        names.append(name)
    manifest = {'count': len(names), 'classes': list(CLASS_NAMES), 'files': names}
    (directory / 'manifest.json').write_text(json.dumps(manifest, indent=2))
    return directory


def load_corpus(directory):
    directory = Path(directory)
    manifest_path = directory / 'manifest.json'
    if not manifest_path.exists():
        raise DatasetError(f'No corpus manifest in {directory}')
    manifest = json.loads(manifest_path.read_text())
    images, labels = [], []
    for name in manifest['files']:
        images.append(np.asarray(Image.open(directory / 'images' / name).convert('RGB')))
        labels.append(np.asarray(Image.open(directory / 'labels' / name)))
    return ShapesCorpus(
        images=torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).float() / 255.0,
        labels=torch.from_numpy(np.stack(labels).astype(np.int64)),
    )
