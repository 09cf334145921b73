"""Byte-level corpus handling and a deterministic synthetic corpus generator."""

from __future__ import annotations

import os

import numpy as np

from .errors import ContractError


def tokenize_bytes(data: bytes) -> np.ndarray:
    """Each byte maps to its own id; the inverse of ``detokenize``."""
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def detokenize(ids: np.ndarray) -> bytes:
    return np.asarray(ids, dtype=np.uint8).tobytes()


def load_corpus(path: str) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise OSError(f"cannot read corpus {path!r}: {exc}") from exc
    if not raw:
        raise ContractError(f"corpus {path!r} is empty")
    return tokenize_bytes(raw)


def batch_rng(seed: int, step: int) -> np.random.Generator:
    """Stateless per-step generator, so resumed runs sample identical batches."""
    return np.random.default_rng(np.random.SeedSequence([seed, 0xBA7C4, step]))


def sample_batch(
    ids: np.ndarray, batch_size: int, context: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Random contiguous windows: inputs ids[i:i+T], targets ids[i+1:i+T+1]."""
    if len(ids) < context + 1:
        raise ContractError(f"corpus of {len(ids)} tokens is shorter than context+1={context + 1}")
    starts = rng.integers(0, len(ids) - context, size=batch_size)
    offsets = np.arange(context)
    inputs = ids[starts[:, None] + offsets]
    targets = ids[starts[:, None] + offsets + 1]
    return inputs, targets


def eval_windows(ids: np.ndarray, context: int):
    """Non-overlapping (inputs, targets) windows covering the corpus."""
    if len(ids) < 2:
        raise ContractError("corpus has fewer than 2 tokens; nothing to evaluate")
    for start in range(0, len(ids) - 1, context):
        chunk = ids[start : start + context + 1]
        if len(chunk) >= 2:
            yield chunk[:-1], chunk[1:]


_SYLLABLES = [
    "ba", "be", "bo", "da", "de", "di", "ga", "go", "ka", "ke", "ki", "la",
    "le", "lo", "ma", "me", "mi", "na", "ne", "no", "pa", "pe", "ra", "re",
    "ri", "ro", "sa", "se", "si", "so", "ta", "te", "ti", "to", "va", "ve",
    "za", "zo", "ch", "sh", "th", "qu",
]


def synth_corpus(n_bytes: int, seed: int = 0) -> bytes:
    """Deterministic pseudo-text with a Zipfian vocabulary.

    Mixes frequent short words with rarer long ones and occasional digit
    runs, giving bytes a wide range of prediction difficulty.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0 - 1]))
    vocab = []
    for _ in range(400):
        n_syll = int(rng.integers(1, 4))
        vocab.append("".join(rng.choice(_SYLLABLES) for _ in range(n_syll)))
    ranks = np.arange(1, len(vocab) + 1, dtype=np.float64)
    weights = 1.0 / ranks
    weights /= weights.sum()

    parts: list[str] = []
    size = 0
    while size < n_bytes:
        words = rng.choice(vocab, size=int(rng.integers(4, 13)), p=weights)
        sentence = " ".join(words).capitalize() + "."
        if rng.random() < 0.05:
            sentence += " " + "".join(str(d) for d in rng.integers(0, 10, size=8))
        sentence += "\n" if rng.random() < 0.25 else " "
        parts.append(sentence)
        size += len(sentence)
    return "".join(parts).encode("ascii")[:n_bytes]


def write_synth_corpus(path: str, n_bytes: int, seed: int = 0) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as f:
        f.write(synth_corpus(n_bytes, seed))
    return path
