"""
Shared utilities for the CAM Traffic Model toolkit.

Contains:
- log_structured(): Structured logging with run/stage context
- read_text_source(): Read a path or an open text stream into a string
- ensure_parent_dir(): Create the parent directory of an output path
- new_run_id(): Short identifier used to correlate log lines of one CLI run
"""

import io
import json
import logging
import os
import uuid
from datetime import datetime, timezone
from typing import Union, TextIO

logger = logging.getLogger(__name__)

TextSource = Union[str, os.PathLike, TextIO]


def new_run_id() -> str:
    """8-hex-digit run identifier."""
    return uuid.uuid4().hex[:8]


def log_structured(level, message, run_id=None, stage=None, **kwargs):
    """
    Log structured messages with run context for filtering.

    Emits one human-readable line:
        [Run: 1a2b3c4d] [Stage: fit] Model fitted | {"rows": 1853, ...}

    Returns:
        The structured record (dict) that was logged
    """
    log_data = {
        'timestamp': datetime.now(timezone.utc).isoformat(),
        'run_id': run_id,
        'component': 'CamTrafficModel',
        'stage': stage,
        'message': message,
        **kwargs
    }

    log_message = f"[Run: {run_id}] [Stage: {stage}] {message}"
    if kwargs:
        log_message += f" | {json.dumps(kwargs, default=str)}"

    if level == 'INFO':
        logger.info(log_message)
    elif level == 'ERROR':
        logger.error(log_message)
    elif level == 'WARNING':
        logger.warning(log_message)
    elif level == 'DEBUG':
        logger.debug(log_message)

    return log_data


def read_text_source(source: TextSource) -> str:
    """
    Read a whole text input.

    Args:
        source: Filesystem path or an object with .read() returning str

    Returns:
        The decoded text (UTF-8 for paths, line endings untouched)

    Raises:
        UnicodeDecodeError: the file is not valid UTF-8
    """
    if hasattr(source, 'read'):
        return source.read()
    with io.open(os.fspath(source), 'rb') as f:
        return f.read().decode('utf-8')


def ensure_parent_dir(path: Union[str, os.PathLike]) -> None:
    """Create the directory that will hold `path`, if any."""
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)


def undecodable_line(error: UnicodeDecodeError) -> int:
    """1-based line number of the first byte a UnicodeDecodeError rejected."""
    return bytes(error.object[:error.start]).count(b'\n') + 1
