"""Module contains helpers for writing run outputs atomically and locating the output directory."""

import json
import os
import tempfile
from pathlib import Path
from typing import Optional, Union

import pandas as pd
import pystow

OUTPUT_DIR_ENV = "SCENLAB_OUTPUT_DIR"
PYSTOW_KEY = "scenlab"


def resolve_output_dir(configured: Optional[str] = None) -> Path:
    """
    Pick the directory run outputs go to.

    The ``SCENLAB_OUTPUT_DIR`` environment variable wins over the configured value;
    with neither set, a pystow-managed ``scenlab/runs`` directory is used.

    :param configured: ``output_dir`` from the experiment config.
    :return: an existing directory.
    """
    override = os.environ.get(OUTPUT_DIR_ENV)
    if override:
        directory = Path(override)
    elif configured:
        directory = Path(configured)
    else:
        directory = pystow.join(PYSTOW_KEY, "runs", ensure_exists=True)
    directory.mkdir(parents=True, exist_ok=True)
    return directory


def atomic_write_bytes(path: Union[str, Path], data: bytes) -> Path:
    """
    Write ``data`` to a temp file next to ``path`` and rename it into place.

    An interrupted write never leaves a partial file at ``path``.

    :return: the final path.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as tmp:
            tmp.write(data)
            tmp.flush()
            os.fsync(tmp.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def atomic_write_text(path: Union[str, Path], text: str) -> Path:
    """UTF-8 variant of :func:`atomic_write_bytes`."""
    return atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: Union[str, Path], payload) -> Path:
    """Write ``payload`` as indented JSON with sorted keys, so equal payloads give equal bytes."""
    return atomic_write_text(path, json.dumps(payload, sort_keys=True, indent=2) + "\n")


def dump_df(path: Union[str, Path], df: pd.DataFrame, index: bool = False) -> Path:
    """Write a data frame as CSV atomically."""
    return atomic_write_text(path, df.to_csv(index=index, float_format="%.6g", lineterminator="\n"))
