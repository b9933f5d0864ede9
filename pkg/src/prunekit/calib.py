"""Calibration corpora and the perplexity metric that scores every candidate.

Token files are binary: magic ``MPTK``, then a u32 sequence count, then for
each sequence a u32 length followed by that many u32 token ids, all
little-endian. For self-contained experiments any other file is treated as a
raw byte corpus (vocab 256) and chunked into max_seq_len windows, so plain
text works everywhere a token file does.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from . import kernels, model as model_mod
from .errors import FormatError, InputError

MAGIC = b"MPTK"


class Metric(Enum):
    PERPLEXITY = "perplexity"


@dataclass
class CalibrationSet:
    sequences: list
    max_seq_len: int

    @property
    def sample_count(self) -> int:
        return len(self.sequences)

    def sample(self, n: int, seed: int) -> "CalibrationSet":
        """Deterministic subsample of n sequences (original order preserved)."""
        if n < 1:
            raise InputError("sample size must be >= 1")
        if n > len(self.sequences):
            raise InputError(f"requested {n} sequences, only {len(self.sequences)} available")
        if n == len(self.sequences):
            return CalibrationSet(list(self.sequences), self.max_seq_len)
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(len(self.sequences), size=n, replace=False))
        return CalibrationSet([self.sequences[i] for i in idx], self.max_seq_len)


def bytes_to_ids(data: bytes) -> np.ndarray:
    """Byte-level tokenization: each byte is its own id (vocab 256)."""
    return np.frombuffer(data, dtype=np.uint8).astype(np.int32)


def write_token_file(path, sequences) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(sequences)))
        for seq in sequences:
            ids = np.asarray(seq, dtype="<u4")
            f.write(struct.pack("<I", ids.size))
            f.write(ids.tobytes())


def _read_token_file(path) -> list:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    (count,) = struct.unpack_from("<I", blob, 4)
    offset = 8
    sequences = []
    for i in range(count):
        if offset + 4 > len(blob):
            raise FormatError(f"{path}: truncated at sequence {i}")
        (length,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        if offset + 4 * length > len(blob):
            raise FormatError(f"{path}: sequence {i} extends past end of file")
        seq = np.frombuffer(blob, dtype="<u4", count=length, offset=offset).astype(np.int32)
        sequences.append(seq)
        offset += 4 * length
    return sequences


def _chunk_bytes(path, max_seq_len: int) -> list:
    ids = bytes_to_ids(Path(path).read_bytes())
    return [ids[i : i + max_seq_len] for i in range(0, len(ids), max_seq_len)]


def load_calibration(path, n_samples: int, max_seq_len: int, seed: int) -> CalibrationSet:
    """Load a token file (or raw byte corpus) and deterministically sample
    n_samples sequences, each truncated to max_seq_len.

    Sequences shorter than 2 tokens predict nothing and are skipped with a
    warning. Raises InputError when fewer than n_samples usable sequences
    remain.
    """
    if n_samples < 1:
        raise InputError("n_samples must be >= 1")
    if max_seq_len < 2:
        raise InputError("max_seq_len must be >= 2")
    p = Path(path)
    if not p.exists():
        raise InputError(f"calibration file not found: {p}")
    if p.read_bytes()[:4] == MAGIC:
        raw = _read_token_file(p)
    else:
        raw = _chunk_bytes(p, max_seq_len)
    usable = []
    skipped = 0
    for seq in raw:
        seq = np.asarray(seq, dtype=np.int32)[:max_seq_len]
        if seq.size < 2:
            skipped += 1
            continue
        usable.append(seq)
    if skipped:
        warnings.warn(f"{path}: skipped {skipped} sequence(s) shorter than 2 tokens")
    if len(usable) < n_samples:
        raise InputError(f"{path}: {len(usable)} usable sequences, need {n_samples}")
    return CalibrationSet(usable, max_seq_len).sample(n_samples, seed)


def sequence_nll(mdl, seq) -> tuple:
    """(sum of next-token negative log-likelihoods, number of predicted tokens)."""
    ids = np.asarray(seq, dtype=np.int64)
    logits = model_mod.forward(mdl, ids)
    logp = kernels.log_softmax_rows64(logits[:-1])
    nll = -logp[np.arange(ids.size - 1), ids[1:]].sum()
    return float(nll), int(ids.size - 1)


def perplexity(mdl, calib: CalibrationSet, metric: Metric = Metric.PERPLEXITY) -> float:
    """Token-weighted perplexity over the whole set: exp of the global mean
    next-token NLL, accumulated in float64 in sequence order."""
    if metric is not Metric.PERPLEXITY:
        raise InputError(f"unsupported metric {metric}")
    if calib.sample_count == 0:
        raise InputError("calibration set is empty")
    total_nll = 0.0
    total_tokens = 0
    for seq in calib.sequences:
        nll, n = sequence_nll(mdl, seq)
        total_nll += nll
        total_tokens += n
    return float(np.exp(total_nll / total_tokens))
