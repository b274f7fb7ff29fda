"""
Synthetic Image-Caption Data

Each sample is a small RGB image holding one shape in one quadrant, and a
templated caption built from latent factors (shape, color, size, row, column).
Samples are a pure function of (seed, index), so generation can run on a
thread pool and results are reassembled in index order.

Task kinds:
- retrieval: caption describes the image; latent factors never repeat within
  a block of 96 consecutive indices; MLM masking and in-batch negatives
- match: caption describes the image half of the time (label 1), otherwise a
  caption with one factor changed (label 0)
- vision_only: image and caption are independent; label = image shape
- text_only: image and caption are independent; label = caption shape
- balanced: image and caption are independent; label = (image shape - caption shape) mod 3
"""

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from itertools import product
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ..errors import ConfigError
from ..numcore.rng import Rng

logger = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
SIZES = ("small", "large")
ROWS = ("top", "bottom")
COLS = ("left", "right")
FACTORS = ("shape", "color", "size", "row", "col")

SPECIAL_TOKENS = ("[pad]", "[cls]", "[mask]", "[unk]")
PAD, CLS, MASK, UNK = range(len(SPECIAL_TOKENS))
FILLER_WORDS = ("a", "at", "the", ":")
VOCABULARY = SPECIAL_TOKENS + SHAPES + COLORS + SIZES + ROWS + COLS + FILLER_WORDS
TOKEN_IDS = {word: i for i, word in enumerate(VOCABULARY)}

TEMPLATES = (
    "a {size} {color} {shape} at the {row} {col}",
    "{row} {col} : {size} {color} {shape}",
)

COLOR_RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}

# Every latent combination, in a fixed order
COMBINATIONS: Tuple[Tuple[int, ...], ...] = tuple(
    product(range(len(SHAPES)), range(len(COLORS)), range(len(SIZES)), range(len(ROWS)), range(len(COLS)))
)

TASK_KINDS = ("retrieval", "match", "vision_only", "text_only", "balanced")
_BLOCK_STREAM = 1 << 40


@dataclass(frozen=True)
class SynthSpec:
    """
    Recipe for a synthetic dataset.

    Attributes:
        task: One of TASK_KINDS
        seed: Dataset seed
        patch_grid: Patches per image side
        patch_size: Pixels per patch side
        text_len: Caption length after padding (including [cls])
        mask_rate: Probability of masking each content token (retrieval only)
        noise: Standard deviation of pixel noise
    """

    task: str = "retrieval"
    seed: int = 0
    patch_grid: int = 4
    patch_size: int = 4
    text_len: int = 12
    mask_rate: float = 0.15
    noise: float = 0.05

    def __post_init__(self):
        if self.task not in TASK_KINDS:
            raise ConfigError(f"unknown task kind '{self.task}' (choose from {', '.join(TASK_KINDS)})")
        if self.patch_grid % 2 != 0:
            raise ConfigError(f"patch_grid must be even so shapes fill quadrants, got {self.patch_grid}")
        if self.text_len < 9:
            raise ConfigError(f"text_len {self.text_len} cannot hold the longest caption (9 tokens)")
        if not (0.0 <= self.mask_rate < 1.0):
            raise ConfigError(f"mask_rate must lie in [0, 1), got {self.mask_rate}")

    @classmethod
    def for_model(cls, config, task: str, seed: int, **overrides) -> "SynthSpec":
        """Spec whose images and captions fit a model configuration."""
        return cls(task=task, seed=seed, patch_grid=config.patch_grid,
                   patch_size=config.patch_size, text_len=config.max_text_len, **overrides)

    @property
    def image_size(self) -> int:
        return self.patch_grid * self.patch_size

    def spec_hash(self, n: int, start: int = 0) -> str:
        document = json.dumps({**asdict(self), "n": n, "start": start}, sort_keys=True)
        return hashlib.sha256(document.encode("utf-8")).hexdigest()[:16]


@dataclass
class Batch:
    """
    Aligned image-caption pairs: image i belongs with caption i.

    Attributes:
        images: (B, patches, patch_dim) pixel features
        token_ids: (B, L) caption token ids
        text_mask: (B, L) 1 for real tokens, 0 for padding
        mlm_input_ids: (B, L) token ids with masked positions replaced by [mask]
        mlm_positions: (B, L) boolean mask of MLM positions
        mlm_targets: Original ids at mlm_positions, in row-major order
        match_labels: (B,) 1 if the caption describes the image
        class_labels: (B,) class id for the classification tasks
        pair_index: (B,) dataset indices of the samples
        task: Task kind of the source dataset
        in_batch_negatives: Whether matching uses hardest in-batch negatives
    """

    images: np.ndarray
    token_ids: np.ndarray
    text_mask: np.ndarray
    mlm_input_ids: np.ndarray
    mlm_positions: np.ndarray
    mlm_targets: np.ndarray
    match_labels: np.ndarray
    class_labels: np.ndarray
    pair_index: np.ndarray
    task: str = "retrieval"
    in_batch_negatives: bool = False

    def __len__(self) -> int:
        return int(self.images.shape[0])


@dataclass
class Dataset:
    """Generated samples, stored column-wise as arrays."""

    spec: SynthSpec
    images: np.ndarray
    token_ids: np.ndarray
    text_mask: np.ndarray
    mlm_input_ids: np.ndarray
    mlm_positions: np.ndarray
    match_labels: np.ndarray
    class_labels: np.ndarray
    factors: pd.DataFrame
    start: int = 0

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def batch(self, indices: Sequence[int]) -> Batch:
        idx = np.asarray(indices, dtype=np.int64)
        positions = self.mlm_positions[idx]
        return Batch(
            images=self.images[idx],
            token_ids=self.token_ids[idx],
            text_mask=self.text_mask[idx],
            mlm_input_ids=self.mlm_input_ids[idx],
            mlm_positions=positions,
            mlm_targets=self.token_ids[idx][positions],
            match_labels=self.match_labels[idx],
            class_labels=self.class_labels[idx],
            pair_index=idx + self.start,
            task=self.spec.task,
            in_batch_negatives=self.spec.task == "retrieval",
        )

    def batches(self, batch_size: int, rng: Optional[Rng] = None) -> Iterator[Batch]:
        """
        Consecutive batches (shuffled when an Rng is given); a trailing
        partial batch is dropped unless it is the only one.
        """
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        count = max(1, len(self) // batch_size)
        for b in range(count):
            yield self.batch(order[b * batch_size:(b + 1) * batch_size])

    def full_batch(self) -> Batch:
        return self.batch(np.arange(len(self)))

    def permuted_images(self, permutation: Sequence[int]) -> "Dataset":
        """Copy with images reordered; captions and labels stay in place."""
        perm = np.asarray(permutation)
        return Dataset(self.spec, self.images[perm], self.token_ids, self.text_mask,
                       self.mlm_input_ids, self.mlm_positions, self.match_labels,
                       self.class_labels, self.factors, self.start)


# ===== RENDERING =====


def _shape_mask(shape: str, size: str, side: int) -> np.ndarray:
    """Boolean (side, side) footprint of a shape centred in a quadrant."""
    coords = (np.arange(side) + 0.5) / side * 2.0 - 1.0
    y, x = np.meshgrid(coords, coords, indexing="ij")
    r = 0.9 if size == "large" else 0.55
    if shape == "circle":
        return x * x + y * y <= r * r
    if shape == "square":
        return (np.abs(x) <= 0.8 * r) & (np.abs(y) <= 0.8 * r)
    # triangle with its apex at the top
    return (y >= -r) & (y <= r) & (np.abs(x) <= (y + r) / 2.0)


def render_image(latent: Dict[str, str], spec: SynthSpec, rng: Rng) -> np.ndarray:
    """
    Pixel grid as (patches, patch_dim) features.

    The shape is drawn in its color in one quadrant over a black background;
    Gaussian pixel noise is added from the sample's stream.
    """
    side = spec.image_size
    half = side // 2
    pixels = np.zeros((side, side, 3))
    footprint = _shape_mask(latent["shape"], latent["size"], half)
    top = 0 if latent["row"] == "top" else half
    left = 0 if latent["col"] == "left" else half
    pixels[top:top + half, left:left + half][footprint] = COLOR_RGB[latent["color"]]
    pixels = pixels + rng.normal(pixels.shape, spec.noise)

    g, p = spec.patch_grid, spec.patch_size
    patches = pixels.reshape(g, p, g, p, 3).transpose(0, 2, 1, 3, 4)
    return patches.reshape(g * g, p * p * 3)


def caption_tokens(latent: Dict[str, str], template: int, text_len: int) -> Tuple[np.ndarray, np.ndarray]:
    """Token ids and mask of a templated caption, [cls]-prefixed and right-padded."""
    words = TEMPLATES[template].format(**latent).split()
    ids = [CLS] + [TOKEN_IDS.get(word, UNK) for word in words]
    tokens = np.full(text_len, PAD, dtype=np.int64)
    tokens[:len(ids)] = ids
    mask = np.zeros(text_len)
    mask[:len(ids)] = 1.0
    return tokens, mask


def _latent(combo: Sequence[int]) -> Dict[str, str]:
    shape, color, size, row, col = combo
    return {"shape": SHAPES[shape], "color": COLORS[color], "size": SIZES[size],
            "row": ROWS[row], "col": COLS[col]}


def _random_combo(rng: Rng) -> Tuple[int, ...]:
    return COMBINATIONS[int(rng.integers(0, len(COMBINATIONS)))]


def _perturbed(combo: Tuple[int, ...], rng: Rng) -> Tuple[int, ...]:
    """Same factors except one, which changes to a different value."""
    sizes = (len(SHAPES), len(COLORS), len(SIZES), len(ROWS), len(COLS))
    factor = int(rng.integers(0, len(sizes)))
    shift = int(rng.integers(1, sizes[factor]))
    changed = list(combo)
    changed[factor] = (changed[factor] + shift) % sizes[factor]
    return tuple(changed)


def _block_order(seed: int, block: int) -> np.ndarray:
    return Rng(seed).child(_BLOCK_STREAM + block).permutation(len(COMBINATIONS))


# ===== GENERATION =====


def generate_sample(spec: SynthSpec, index: int, block_order: Optional[np.ndarray] = None) -> dict:
    """
    One sample as a dictionary of arrays and labels.

    Args:
        spec: Dataset recipe
        index: Absolute sample index (selects the random stream)
        block_order: Combination permutation of the index's block (retrieval only)
    """
    rng = Rng(spec.seed).child(index)

    if spec.task == "retrieval":
        order = block_order if block_order is not None else _block_order(spec.seed, index // len(COMBINATIONS))
        image_combo = COMBINATIONS[int(order[index % len(COMBINATIONS)])]
        caption_combo = image_combo
    elif spec.task == "match":
        image_combo = _random_combo(rng)
        caption_combo = image_combo if rng.random() < 0.5 else _perturbed(image_combo, rng)
    else:
        image_combo = _random_combo(rng)
        caption_combo = _random_combo(rng)

    image_latent, caption_latent = _latent(image_combo), _latent(caption_combo)
    image = render_image(image_latent, spec, rng)
    template = int(rng.integers(0, len(TEMPLATES)))
    tokens, mask = caption_tokens(caption_latent, template, spec.text_len)

    positions = np.zeros(spec.text_len, dtype=bool)
    if spec.task == "retrieval" and spec.mask_rate > 0:
        content = mask.astype(bool)
        content[0] = False
        positions = content & (rng.random(spec.text_len) < spec.mask_rate)
    mlm_ids = np.where(positions, MASK, tokens)

    image_shape, caption_shape = image_combo[0], caption_combo[0]
    if spec.task == "vision_only":
        label = image_shape
    elif spec.task == "text_only":
        label = caption_shape
    elif spec.task == "balanced":
        label = (image_shape - caption_shape) % len(SHAPES)
    else:
        label = 0

    return {
        "image": image,
        "token_ids": tokens,
        "text_mask": mask,
        "mlm_input_ids": mlm_ids,
        "mlm_positions": positions,
        "match_label": int(image_combo == caption_combo),
        "class_label": int(label),
        "factors": {
            "index": index,
            "template": template,
            **{f"image_{k}": v for k, v in image_latent.items()},
            **{f"caption_{k}": v for k, v in caption_latent.items()},
        },
    }


def generate(spec: SynthSpec, n: int, start: int = 0, workers: int = 1) -> Dataset:
    """
    Generate samples start .. start + n - 1.

    Args:
        spec: Dataset recipe
        n: Number of samples
        start: First absolute index (held-out sets use a disjoint range)
        workers: Threads used for rendering; output order never depends on it

    Returns:
        Dataset
    """
    if n <= 0:
        raise ConfigError(f"dataset size must be positive, got {n}")
    indices = list(range(start, start + n))
    orders = {}
    if spec.task == "retrieval":
        for block in sorted({i // len(COMBINATIONS) for i in indices}):
            orders[block] = _block_order(spec.seed, block)

    def make(index: int) -> dict:
        return generate_sample(spec, index, orders.get(index // len(COMBINATIONS)))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(make, indices))
    else:
        samples = [make(i) for i in indices]

    logger.debug(f"Generated {n} {spec.task} samples from index {start} (seed {spec.seed})")
    return _assemble(spec, samples, start)


def _assemble(spec: SynthSpec, samples: List[dict], start: int) -> Dataset:
    return Dataset(
        spec=spec,
        images=np.stack([s["image"] for s in samples]),
        token_ids=np.stack([s["token_ids"] for s in samples]),
        text_mask=np.stack([s["text_mask"] for s in samples]),
        mlm_input_ids=np.stack([s["mlm_input_ids"] for s in samples]),
        mlm_positions=np.stack([s["mlm_positions"] for s in samples]),
        match_labels=np.array([s["match_label"] for s in samples], dtype=np.int64),
        class_labels=np.array([s["class_label"] for s in samples], dtype=np.int64),
        factors=pd.DataFrame([s["factors"] for s in samples]),
        start=start,
    )


def decode_caption(token_ids: Sequence[int]) -> str:
    """Readable caption without special tokens."""
    return " ".join(VOCABULARY[int(t)] for t in token_ids if int(t) >= len(SPECIAL_TOKENS))
