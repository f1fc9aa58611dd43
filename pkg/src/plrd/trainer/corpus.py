"""Seeded synthetic language for desk-scale pretraining and recovery.

Sentences come from a small probabilistic grammar with number agreement
(determiner, noun and verb agree with the subject, across an optional
prepositional phrase), verb-specific object preferences, and Zipfian word
choice.  The grammar itself is fixed by ``grammar_seed``; ``seed`` only drives
sampling, so different seeds give different corpora of the same language.
"""

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from ..errors import InputError

EOS = 0


@dataclass(frozen=True)
class Corpus:
    train: Tuple[np.ndarray, ...]
    heldout: Tuple[np.ndarray, ...]
    vocab_size: int

    def stream(self, split="train") -> np.ndarray:
        """Sentences concatenated, each followed by the EOS token."""
        sents = self.train if split == "train" else self.heldout
        if not sents:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([np.append(s, EOS) for s in sents]).astype(np.int64)

    def n_tokens(self, split="train") -> int:
        return int(sum(len(s) + 1 for s in (self.train if split == "train" else self.heldout)))


def _zipf(rng, n, a=1.1):
    """Shuffled Zipf weights, returned as a cumulative distribution."""
    w = rng.permutation(1.0 / np.arange(1, n + 1) ** a)
    return np.cumsum(w / w.sum())


def _draw(rng, cdf) -> int:
    return min(int(np.searchsorted(cdf, rng.random(), side="right")), len(cdf) - 1)


def _uniform(rng, items):
    return items[int(rng.integers(len(items)))]


class Grammar:
    def __init__(self, vocab_size=96, grammar_seed=0):
        if not 40 <= vocab_size <= 256:
            raise InputError("vocab_size must be in [40, 256]")
        rng = np.random.default_rng(grammar_seed)
        ids = rng.permutation(np.arange(1, vocab_size))
        n = len(ids)
        sizes = {
            "det": 4, "prep": 4, "adv": 4, "conj": 1, "stop": 1,
            "adj": max(3, n // 10),
        }
        rest = n - sum(sizes.values())
        n_noun = rest * 2 // 5 // 2
        n_vtr = rest * 3 // 10 // 2
        n_vin = (rest - 2 * n_noun - 2 * n_vtr) // 2
        pos = 0

        def take(k):
            nonlocal pos
            out = ids[pos:pos + k]
            pos += k
            return out

        self.det = {"sg": take(2), "pl": take(2)}
        self.noun = {"sg": take(n_noun), "pl": take(n_noun)}
        self.vtr = {"sg": take(n_vtr), "pl": take(n_vtr)}
        self.vin = {"sg": take(n_vin), "pl": take(n_vin)}
        self.adj = take(sizes["adj"])
        self.prep = take(sizes["prep"])
        self.adv = take(sizes["adv"])
        self.conj = take(1)[0]
        self.stop = take(1)[0]
        self.p_noun = _zipf(rng, n_noun)
        self.p_vtr = _zipf(rng, n_vtr)
        self.p_vin = _zipf(rng, n_vin)
        # each transitive verb prefers its own objects
        self.p_obj = np.stack([_zipf(rng, n_noun, a=1.5) for _ in range(n_vtr)])
        # each noun prefers a few adjectives
        self.p_noun_adj = np.stack([_zipf(rng, len(self.adj), a=1.6) for _ in range(n_noun)])

    def _np(self, rng, out, number, noun_p, depth):
        i = _draw(rng, noun_p)
        out.append(_uniform(rng, self.det[number]))
        while rng.random() < 0.35:
            out.append(self.adj[_draw(rng, self.p_noun_adj[i])])
        out.append(self.noun[number][i])
        if depth < 2 and rng.random() < 0.25:
            out.append(_uniform(rng, self.prep))
            self._np(rng, out, _uniform(rng, ("sg", "pl")), self.p_noun, depth + 1)

    def _clause(self, rng, out):
        number = "sg" if rng.random() < 0.55 else "pl"
        self._np(rng, out, number, self.p_noun, 0)
        if rng.random() < 0.6:
            j = _draw(rng, self.p_vtr)
            out.append(self.vtr[number][j])
            self._np(rng, out, _uniform(rng, ("sg", "pl")), self.p_obj[j], 1)
        else:
            out.append(self.vin[number][_draw(rng, self.p_vin)])
            if rng.random() < 0.4:
                out.append(_uniform(rng, self.adv))

    def sentence(self, rng) -> np.ndarray:
        out: List[int] = []
        self._clause(rng, out)
        if rng.random() < 0.2:
            out.append(self.conj)
            self._clause(rng, out)
        out.append(self.stop)
        return np.asarray(out, dtype=np.int64)


def make_corpus(seed: int, size: int, vocab_size: int = 96, heldout_fraction: float = 0.1,
                grammar_seed: int = 0) -> Corpus:
    """Sample at least ``size`` training tokens plus a held-out split of about
    ``heldout_fraction * size`` tokens that shares no sentence with training."""
    if size <= 0:
        raise InputError("corpus size must be positive")
    grammar = Grammar(vocab_size, grammar_seed)
    rng = np.random.default_rng(seed)
    train, seen, n = [], set(), 0
    while n < size:
        s = grammar.sentence(rng)
        train.append(s)
        seen.add(s.tobytes())
        n += len(s) + 1
    heldout, n, tries = [], 0, 0
    target = max(1, int(size * heldout_fraction))
    while n < target:
        tries += 1
        if tries > 100 * target:
            raise InputError("could not sample enough unseen held-out sentences")
        s = grammar.sentence(rng)
        if s.tobytes() in seen:
            continue
        heldout.append(s)
        n += len(s) + 1
    return Corpus(tuple(train), tuple(heldout), vocab_size)


def pack(stream: np.ndarray, seq_len: int) -> np.ndarray:
    """Fixed-length training windows of ``seq_len + 1`` tokens with stride
    ``seq_len`` (inputs are ``w[:-1]``, targets ``w[1:]``); the ragged tail is
    dropped."""
    n = (len(stream) - 1) // seq_len
    if n <= 0:
        return np.zeros((0, seq_len + 1), dtype=np.int64)
    idx = np.arange(n)[:, None] * seq_len + np.arange(seq_len + 1)[None, :]
    return stream[idx]
