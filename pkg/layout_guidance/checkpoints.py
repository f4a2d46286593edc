"""Versioned single-file checkpoints: magic, format version, JSON header, torch payload.

Layout::

    b"LGCK" | uint16 version | uint32 header length | header JSON (utf-8) | torch.save(state_dict)
"""
import io
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Tuple

import torch

from layout_guidance.errors import CheckpointFormatError, CheckpointMissingError

logger = logging.getLogger(__name__)

MAGIC = b"LGCK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct('<4sHI')


def save_checkpoint(path, kind: str, config: Dict[str, Any], state_dict: Dict[str, torch.Tensor],
                    extra: Dict[str, Any] = None) -> Path:
    """Write one checkpoint; ``kind`` names the model family (sg2seg, diffusion, autoencoder)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps({
        'kind': kind,
        'format_version': FORMAT_VERSION,
        'config': config,
        'extra': extra or {},
    }, sort_keys=True).encode('utf-8')
    payload = io.BytesIO()
    torch.save(state_dict, payload)
    with open(path, 'wb') as f:
        f.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)))
        f.write(header)
        f.write(payload.getvalue())
    logger.info(f"Saved {kind} checkpoint to {path}")
    return path


def read_header(path) -> Dict[str, Any]:
    header, _ = _read(path, load_payload=False)
    return header


def load_checkpoint(path, expected_kind: str = None) -> Tuple[Dict[str, Any], Dict[str, torch.Tensor]]:
    """Return (header, state_dict); header['config'] holds the embedded config"""
    header, state = _read(path, load_payload=True)
    if expected_kind is not None and header.get('kind') != expected_kind:
        raise CheckpointFormatError(f"{path} holds a '{header.get('kind')}' checkpoint, "
                                    f"expected '{expected_kind}'")
    return header, state


def _read(path, load_payload: bool):
    path = Path(path)
    if not path.exists():
        raise CheckpointMissingError(f"Checkpoint not found: {path}")
    with open(path, 'rb') as f:
        raw = f.read()
    if len(raw) < _PREFIX.size:
        raise CheckpointFormatError(f"{path} is too short to be a checkpoint")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{path} is not a layout_guidance checkpoint")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path} has format version {version}, expected {FORMAT_VERSION}")
    start = _PREFIX.size
    try:
        header = json.loads(raw[start:start + header_len].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path} has a corrupt header: {e}")
    state = None
    if load_payload:
        state = torch.load(io.BytesIO(raw[start + header_len:]), map_location='cpu', weights_only=True)
    return header, state
