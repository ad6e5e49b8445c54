"""Binary checkpoint format.

Layout: 8-byte magic, then length-prefixed UTF-8 blocks for the run config
and the vocabulary, then a tensor count followed by named tensors. Each
tensor is: name length (u32 LE), name bytes, rank (u32), dims (u32 each),
payload as little-endian float32. Loading a saved model reproduces
inference bit-exactly because training canonicalizes parameters onto the
float32 grid before saving.
"""

from __future__ import annotations

import struct

import numpy as np

from .config import RunConfig, config_from_lines, config_to_text
from .corpus import CatalogItem, KBStore
from .errors import ValidationError
from .model import DialogueModel
from .text import RESERVED, Vocabulary

MAGIC = b"SLOTGEN1"


def _write_block(fh, payload: bytes) -> None:
    fh.write(struct.pack("<I", len(payload)))
    fh.write(payload)


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ValidationError("checkpoint file is truncated")
    return data


def _read_block(fh) -> bytes:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    return _read_exact(fh, n)


def save_checkpoint(path, model: DialogueModel) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        _write_block(fh, config_to_text(model.cfg).encode("utf-8"))
        _write_block(fh, "\n".join(model.vocab.tokens).encode("utf-8"))
        fh.write(struct.pack("<I", len(model.params)))
        for name, p in model.params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", p.data.ndim))
            for d in p.data.shape:
                fh.write(struct.pack("<I", d))
            fh.write(p.data.astype("<f4").tobytes())


def load_checkpoint(path, catalog: list[CatalogItem], kb: KBStore) -> DialogueModel:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 8)
        if magic != MAGIC:
            raise ValidationError(
                f"bad checkpoint magic {magic!r}; expected {MAGIC.decode()} format"
            )
        cfg_text = _read_block(fh).decode("utf-8")
        cfg = config_from_lines(cfg_text.splitlines(), source=str(path))
        tokens = _read_block(fh).decode("utf-8").split("\n")
        if tokens[:4] != list(RESERVED):
            raise ValidationError("checkpoint vocabulary lacks the reserved tokens")
        vocab = Vocabulary(tokens)
        model = DialogueModel(cfg, vocab, catalog, kb)
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        if count != len(model.params):
            raise ValidationError(
                f"checkpoint holds {count} tensors, model expects {len(model.params)}"
            )
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, name_len).decode("utf-8")
            if name not in model.params:
                raise ValidationError(f"unexpected tensor {name!r} in checkpoint")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
            param = model.params[name]
            if tuple(dims) != param.data.shape:
                raise ValidationError(
                    f"tensor {name!r} has shape {dims}, model expects {param.data.shape}"
                )
            n = int(np.prod(dims)) if rank else 1
            payload = np.frombuffer(_read_exact(fh, 4 * n), dtype="<f4")
            param.data = payload.astype(np.float64).reshape(dims)
        extra = fh.read(1)
        if extra:
            raise ValidationError("trailing bytes after the last checkpoint tensor")
    return model


def _derive_cfg(path) -> RunConfig:
    with open(path, "rb") as fh:
        if _read_exact(fh, 8) != MAGIC:
            raise ValidationError("not a checkpoint file")
        return config_from_lines(_read_block(fh).decode("utf-8").splitlines())
