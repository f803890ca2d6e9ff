"""Checkpoint container: a JSON manifest followed by binary sections.

Layout (little-endian)::

    b"MIFCKPT1" | u32 manifest_len | manifest (UTF-8 JSON)
    u32 n_sections | n x (u64 len | section bytes)

Sections start with their own magic (``MIFOCT1``, ``MIFDEC1``, ``MIFOPT1``).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

from .decoder import FieldModel
from .errors import FormatError, IngestIOError
from .latent_octree import OCT_MAGIC, LatentOctree
from .optim import OPT_MAGIC, OptState

CKPT_MAGIC = b"MIFCKPT1"


def checkpoint_bytes(model: FieldModel, opt: OptState | None = None, manifest: dict | None = None) -> bytes:
    man = json.dumps(manifest or {}, sort_keys=True).encode()
    sections = [model.tree.to_bytes(), model.decoder_bytes()]
    if opt is not None:
        sections.append(opt.to_bytes())
    out = [CKPT_MAGIC, struct.pack("<I", len(man)), man, struct.pack("<I", len(sections))]
    for s in sections:
        out += [struct.pack("<Q", len(s)), s]
    return b"".join(out)


def save_checkpoint(path, model: FieldModel, opt: OptState | None = None, manifest: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, opt, manifest))


def load_checkpoint(path) -> tuple[FieldModel, OptState | None, dict]:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise IngestIOError(f"cannot read checkpoint {path}: {e}") from e
    if not data.startswith(CKPT_MAGIC):
        raise FormatError("not a checkpoint (bad magic)")
    pos = len(CKPT_MAGIC)
    (n,) = struct.unpack_from("<I", data, pos)
    manifest = json.loads(data[pos + 4:pos + 4 + n].decode())
    pos += 4 + n
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tree = dec = opt = None
    for _ in range(count):
        (size,) = struct.unpack_from("<Q", data, pos)
        sec = data[pos + 8:pos + 8 + size]
        pos += 8 + size
        if sec.startswith(OCT_MAGIC):
            tree = LatentOctree.from_bytes(sec)
        elif sec.startswith(OPT_MAGIC):
            opt = OptState.from_bytes(sec)
        else:
            dec = FieldModel.parse_decoder(sec)
    if tree is None or dec is None:
        raise FormatError("checkpoint lacks octree or decoder section")
    params, posenc, alpha, bounds = dec
    return FieldModel(params, tree, posenc, bounds, alpha), opt, manifest
