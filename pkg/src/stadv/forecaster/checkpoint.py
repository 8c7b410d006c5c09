"""
STADV1 model archive

Layout: a magic line, one JSON header line, then a numpy .npz payload of
named weight tensors.
"""

import io
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from stadv import __version__
from stadv.errors import DataError
from stadv.forecaster import ModelConfig, STModel

logger = logging.getLogger(__name__)

MAGIC = b"STADV1"
AGGREGATION_KEY = "__aggregation__"


def save_checkpoint(
    model: STModel,
    path: str,
    defense: Optional[str] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    Write a model archive

    Args:
        model: Model to store
        path: Destination file
        defense: Tag of the defense the model was trained with, if any
        extra: Additional header fields (e.g. normalizer parameters)

    Returns:
        Path written
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "version": __version__,
        "config": model.config.to_dict(),
        "defense": defense,
    }
    if extra:
        header.update(extra)

    payload = io.BytesIO()
    arrays = dict(model.params)
    arrays[AGGREGATION_KEY] = model.aggregation
    np.savez(payload, **arrays)

    with open(path, "wb") as f:
        f.write(MAGIC + b"\n")
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        f.write(payload.getvalue())
    logger.info("Saved checkpoint %s", path)
    return path


def load_checkpoint(path: str) -> Tuple[STModel, Dict[str, Any]]:
    """Read an archive written by save_checkpoint; returns (model, header)"""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.readline().rstrip(b"\n")
        if magic != MAGIC:
            raise DataError(f"{path}: not a model archive (bad magic {magic[:16]!r})")
        try:
            header = json.loads(f.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise DataError(f"{path}: unreadable header: {e}") from None
        payload = f.read()

    with np.load(io.BytesIO(payload)) as archive:
        arrays = {name: np.array(archive[name]) for name in archive.files}
    if AGGREGATION_KEY not in arrays:
        raise DataError(f"{path}: archive has no aggregation matrix")
    aggregation = arrays.pop(AGGREGATION_KEY)
    config = ModelConfig.from_dict(header["config"])
    model = STModel(config=config, aggregation=aggregation, params=arrays)
    logger.debug("Loaded checkpoint %s (%d tensors)", path, len(arrays))
    return model, header
