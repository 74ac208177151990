"""Synthetic interaction logs with planted structure, for tests and demos."""

from __future__ import annotations

import numpy as np

from .data import InteractionRecord


def transition_table(num_items: int, rng: np.random.Generator) -> np.ndarray:
    """A single random cycle over all items: ``table[x]`` follows ``x``."""
    order = rng.permutation(num_items)
    table = np.empty(num_items, dtype=np.int64)
    table[order] = np.roll(order, -1)
    return table


def markov_sequences(num_users: int, num_items: int, length: int, noise: float = 0.1, seed: int = 0):
    """First-order chains: with prob ``1 - noise`` the next item is the
    planted successor of the previous one, otherwise uniform.  Returns
    ``(sequences, table)``."""
    rng = np.random.default_rng(seed)
    table = transition_table(num_items, rng)
    seqs = np.empty((num_users, length), dtype=np.int64)
    seqs[:, 0] = rng.integers(num_items, size=num_users)
    for t in range(1, length):
        jump = rng.random(num_users) < noise
        seqs[:, t] = np.where(jump, rng.integers(num_items, size=num_users), table[seqs[:, t - 1]])
    return seqs, table


def preference_sequences(num_users: int, num_items: int, length: int, pref_size: int = 5, seed: int = 0):
    """Order-free draws from a fixed per-user item subset.  Returns
    ``(sequences, prefs)``."""
    rng = np.random.default_rng(seed)
    prefs = np.stack([rng.choice(num_items, size=pref_size, replace=False) for _ in range(num_users)])
    picks = rng.integers(pref_size, size=(num_users, length))
    return np.take_along_axis(prefs, picks, axis=1), prefs


def to_records(sequences) -> list[InteractionRecord]:
    return [
        InteractionRecord(f"u{u}", f"i{j}", 5.0, t)
        for u, seq in enumerate(np.asarray(sequences).tolist())
        for t, j in enumerate(seq)
    ]


def write_log(path, records, delimiter: str = ",") -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            rating = int(r.rating) if float(r.rating).is_integer() else r.rating
            fh.write(delimiter.join([r.user, r.item, str(rating), str(r.timestamp)]) + "\n")


def generate(kind: str, num_users: int, num_items: int, length: int, seed: int = 0, noise: float = 0.1,
             pref_size: int = 5):
    if kind == "markov":
        return markov_sequences(num_users, num_items, length, noise, seed)[0]
    if kind == "preference":
        return preference_sequences(num_users, num_items, length, pref_size, seed)[0]
    raise ValueError(f"unknown synthetic corpus {kind!r}; choose 'markov' or 'preference'")
