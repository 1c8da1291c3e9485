"""Versioned binary model files.

Layout (all integers little-endian):

    magic           8 bytes  b"SEQTAG01"
    version         u32
    int header      u32 count, then per entry: name (u16 length + utf-8), i64 value
    float header    u32 count, then per entry: name (u16 length + utf-8), f64 value
    vocabularies    u32 count, then per vocabulary:
                        name (u16 length + utf-8), u32 entries,
                        each entry u32 length + utf-8, in id order
    tensors         u32 count, then per tensor:
                        name (u16 length + utf-8), u32 ndim, u32 per dim,
                        raw float64 values, row-major little-endian

The int header carries every model dimension plus the feature-column
count; the float header carries the dropout rate and the L2 coefficient
used at training time.  A human-readable JSON manifest is written next
to the binary as `<path>.manifest.json`.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import Vocabulary, VocabSet
from .errors import IngestionError
from .model import ModelDims, ModelParameters

MAGIC = b"SEQTAG01"
FORMAT_VERSION = 1


def _write_str(out, s: str, fmt: str = "<H"):
    raw = s.encode("utf-8")
    out.append(struct.pack(fmt, len(raw)))
    out.append(raw)


def _pack(params: ModelParameters, vocabs: VocabSet, meta_float: dict[str, float]) -> bytes:
    dims = params.dims
    meta_int = {
        "n_words": dims.n_words,
        "n_chars": dims.n_chars,
        "n_labels": dims.n_labels,
        "n_feat_columns": len(dims.n_feats),
        **{f"n_feat{k}": n for k, n in enumerate(dims.n_feats)},
        "word_dim": dims.word_dim,
        "char_dim": dims.char_dim,
        "char_hidden": dims.char_hidden,
        "label_dim": dims.label_dim,
        "feat_dim": dims.feat_dim,
        "hidden": dims.hidden,
        "blocks": int(dims.blocks),
    }
    out: list[bytes] = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    out.append(struct.pack("<I", len(meta_int)))
    for name, value in meta_int.items():
        _write_str(out, name)
        out.append(struct.pack("<q", value))
    out.append(struct.pack("<I", len(meta_float)))
    for name, value in meta_float.items():
        _write_str(out, name)
        out.append(struct.pack("<d", value))
    vocab_items = [("word", vocabs.word), ("char", vocabs.char), ("label", vocabs.label)]
    vocab_items += [(f"feat{k}", v) for k, v in enumerate(vocabs.feats)]
    out.append(struct.pack("<I", len(vocab_items)))
    for name, vocab in vocab_items:
        _write_str(out, name)
        out.append(struct.pack("<I", len(vocab)))
        for s in vocab.strings:
            _write_str(out, s, "<I")
    tensors = params.named_tensors()
    out.append(struct.pack("<I", len(tensors)))
    for name, tensor in tensors:
        _write_str(out, name)
        out.append(struct.pack("<I", tensor.values.ndim))
        out.append(struct.pack(f"<{tensor.values.ndim}I", *tensor.values.shape))
        out.append(np.ascontiguousarray(tensor.values, dtype="<f8").tobytes())
    return b"".join(out)


def save_model(path, params: ModelParameters, vocabs: VocabSet, meta_float: dict[str, float]):
    path = Path(path)
    path.write_bytes(_pack(params, vocabs, meta_float))
    manifest = {
        "format_version": FORMAT_VERSION,
        "dimensions": {
            "word_dim": params.dims.word_dim,
            "char_dim": params.dims.char_dim,
            "char_hidden": params.dims.char_hidden,
            "label_dim": params.dims.label_dim,
            "feat_dim": params.dims.feat_dim,
            "hidden": params.dims.hidden,
            "blocks": params.dims.blocks,
        },
        "hyper_parameters": meta_float,
        "vocabulary_sizes": {
            "word": len(vocabs.word),
            "char": len(vocabs.char),
            "label": len(vocabs.label),
            **{f"feat{k}": len(v) for k, v in enumerate(vocabs.feats)},
        },
        "tensors": [
            {"name": name, "shape": list(tensor.values.shape)}
            for name, tensor in params.named_tensors()
        ],
    }
    Path(str(path) + ".manifest.json").write_text(
        json.dumps(manifest, indent=2) + "\n", encoding="utf-8"
    )


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise IngestionError(f"{self.path}: truncated model file")
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self, fmt: str = "<H") -> str:
        (n,) = self.unpack(fmt)
        return self.take(n).decode("utf-8")


def load_model(path):
    """Read a model file back into (params, vocabs, meta) where meta holds
    both header sections."""
    reader = _Reader(Path(path).read_bytes(), path)
    if reader.take(len(MAGIC)) != MAGIC:
        raise IngestionError(f"{path}: not a model file (bad magic)")
    (version,) = reader.unpack("<I")
    if version != FORMAT_VERSION:
        raise IngestionError(f"{path}: unsupported format version {version}")
    meta_int: dict[str, int] = {}
    (n,) = reader.unpack("<I")
    for _ in range(n):
        name = reader.string()
        (meta_int[name],) = reader.unpack("<q")
    meta_float: dict[str, float] = {}
    (n,) = reader.unpack("<I")
    for _ in range(n):
        name = reader.string()
        (meta_float[name],) = reader.unpack("<d")
    vocab_map: dict[str, Vocabulary] = {}
    (n,) = reader.unpack("<I")
    for _ in range(n):
        name = reader.string()
        (count,) = reader.unpack("<I")
        vocab_map[name] = Vocabulary.from_strings([reader.string("<I") for _ in range(count)])
    n_feat_cols = meta_int["n_feat_columns"]
    vocabs = VocabSet(
        word=vocab_map["word"],
        char=vocab_map["char"],
        label=vocab_map["label"],
        feats=[vocab_map[f"feat{k}"] for k in range(n_feat_cols)],
    )
    dims = ModelDims(
        n_words=meta_int["n_words"],
        n_chars=meta_int["n_chars"],
        n_labels=meta_int["n_labels"],
        n_feats=tuple(meta_int[f"n_feat{k}"] for k in range(n_feat_cols)),
        word_dim=meta_int["word_dim"],
        char_dim=meta_int["char_dim"],
        char_hidden=meta_int["char_hidden"],
        label_dim=meta_int["label_dim"],
        feat_dim=meta_int["feat_dim"],
        hidden=meta_int["hidden"],
        blocks=bool(meta_int["blocks"]),
    )
    params = ModelParameters(dims, rng=None)
    (n,) = reader.unpack("<I")
    values: dict[str, np.ndarray] = {}
    for _ in range(n):
        name = reader.string()
        (ndim,) = reader.unpack("<I")
        shape = reader.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(reader.take(count * 8), dtype="<f8").reshape(shape)
        values[name] = arr.astype(np.float64)
    params.load_snapshot(values)
    return params, vocabs, {"int": meta_int, "float": meta_float}
