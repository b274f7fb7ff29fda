"""
Dataset Caching Mechanism

Generated datasets are cached as parquet files so repeated runs skip
rendering. Each file is keyed by a hash of the SynthSpec, the sample count and
the first index, so a cache hit is always the same data bit for bit.
"""

import logging
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd

from .synth import Dataset, SynthSpec, generate

logger = logging.getLogger(__name__)

CACHE_SUBDIR = "cache"

_ARRAY_COLUMNS = ("image", "token_ids", "text_mask", "mlm_input_ids", "mlm_positions")
_ARRAY_DTYPES = {
    "image": np.float64,
    "token_ids": np.int64,
    "text_mask": np.float64,
    "mlm_input_ids": np.int64,
    "mlm_positions": bool,
}


def cache_path(cache_dir: Union[str, Path], spec: SynthSpec, n: int, start: int = 0) -> Path:
    """File a dataset with this recipe and index range is cached under."""
    return Path(cache_dir) / f"{spec.task}_{spec.spec_hash(n, start)}.parquet"


def ensure_cache_dir(cache_dir: Union[str, Path]):
    """Create cache directory if it doesn't exist."""
    Path(cache_dir).mkdir(parents=True, exist_ok=True)


def is_cache_valid(path: Path) -> bool:
    """
    Check if a cached dataset exists.

    Returns:
        True if the cache file exists and is non-empty
    """
    if not path.exists():
        logger.info(f"No cache file found at {path}")
        return False
    if path.stat().st_size == 0:
        logger.info(f"Cache file {path} is empty")
        return False
    return True


def dataset_to_frame(dataset: Dataset) -> pd.DataFrame:
    """One row per sample; array fields become flat list columns."""
    df = dataset.factors.copy()
    df["image"] = [img.reshape(-1) for img in dataset.images]
    df["token_ids"] = list(dataset.token_ids)
    df["text_mask"] = list(dataset.text_mask)
    df["mlm_input_ids"] = list(dataset.mlm_input_ids)
    df["mlm_positions"] = list(dataset.mlm_positions)
    df["match_label"] = dataset.match_labels
    df["class_label"] = dataset.class_labels
    return df


def frame_to_dataset(df: pd.DataFrame, spec: SynthSpec, start: int = 0) -> Dataset:
    n = len(df)
    arrays = {
        column: np.stack([np.asarray(v, dtype=_ARRAY_DTYPES[column]) for v in df[column]])
        for column in _ARRAY_COLUMNS
    }
    patches = spec.patch_grid * spec.patch_grid
    factor_columns = [c for c in df.columns if c not in _ARRAY_COLUMNS + ("match_label", "class_label")]
    return Dataset(
        spec=spec,
        images=arrays["image"].reshape(n, patches, -1),
        token_ids=arrays["token_ids"],
        text_mask=arrays["text_mask"],
        mlm_input_ids=arrays["mlm_input_ids"],
        mlm_positions=arrays["mlm_positions"],
        match_labels=df["match_label"].to_numpy(dtype=np.int64),
        class_labels=df["class_label"].to_numpy(dtype=np.int64),
        factors=df[factor_columns].reset_index(drop=True),
        start=start,
    )


def save_to_cache(dataset: Dataset, path: Path):
    """
    Save a dataset to cache.

    Args:
        dataset: Generated dataset
        path: Target parquet file
    """
    ensure_cache_dir(path.parent)

    try:
        dataset_to_frame(dataset).to_parquet(path, index=False)
        logger.info(f"Saved {len(dataset)} samples to cache: {path}")
    except Exception as e:
        logger.error(f"Failed to save cache: {e}")
        # Don't raise - a cache write failure must not stop the run


def load_from_cache(path: Path, spec: SynthSpec, start: int = 0) -> Dataset:
    """
    Load a dataset from cache.

    Raises:
        FileNotFoundError: If cache file doesn't exist
        Exception: If loading fails
    """
    if not path.exists():
        raise FileNotFoundError(f"Cache file not found: {path}")

    try:
        df = pd.read_parquet(path)
        logger.info(f"Loaded {len(df)} samples from cache")
        return frame_to_dataset(df, spec, start)
    except Exception as e:
        logger.error(f"Failed to load cache: {e}")
        raise


def get_cache_info(cache_dir: Union[str, Path]) -> dict:
    """
    Get information about the cached datasets.

    Returns:
        Dictionary with cache information:
            - exists: bool
            - path: str
            - files: int
            - size_mb: float
    """
    root = Path(cache_dir)
    files = sorted(root.glob("*.parquet")) if root.exists() else []
    return {
        "exists": root.exists(),
        "path": str(root),
        "files": len(files),
        "size_mb": sum(f.stat().st_size for f in files) / (1024 * 1024),
    }


def clear_cache(cache_dir: Union[str, Path]):
    """
    Delete every cached dataset file.
    """
    files = sorted(Path(cache_dir).glob("*.parquet")) if Path(cache_dir).exists() else []
    if not files:
        logger.info("No cache to clear")
        return
    for f in files:
        try:
            f.unlink()
        except Exception as e:
            logger.error(f"Failed to clear cache file {f}: {e}")
    logger.info(f"Cache cleared: {cache_dir}")


def get_cached_or_generate(
    spec: SynthSpec,
    n: int,
    start: int = 0,
    cache_dir: Optional[Union[str, Path]] = None,
    workers: int = 1,
    force_refresh: bool = False,
) -> Dataset:
    """
    Get a dataset from cache or generate it if the cache is missing or unreadable.

    This is the main function to use for loading data. Without a cache_dir it
    always generates.

    Args:
        spec: Dataset recipe
        n: Number of samples
        start: First absolute sample index
        cache_dir: Cache directory (None disables caching)
        workers: Generation threads
        force_refresh: If True, bypass cache and regenerate

    Returns:
        Dataset
    """
    if cache_dir is None:
        return generate(spec, n, start, workers)

    path = cache_path(cache_dir, spec, n, start)
    if not force_refresh and is_cache_valid(path):
        try:
            logger.info(f"Loading {spec.task} data from cache")
            return load_from_cache(path, spec, start)
        except Exception as e:
            logger.warning(f"Cache load failed, regenerating data: {e}")

    logger.info(f"Generating {n} {spec.task} samples")
    dataset = generate(spec, n, start, workers)
    save_to_cache(dataset, path)
    return dataset
