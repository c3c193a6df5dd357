"""Seeded synthetic text corpora with nested phrase structure.

No external text ships with the package, so desk-scale runs use text drawn
from a small probabilistic grammar. Each category has its own lexicon; the
grammar (clauses containing noun phrases containing prepositional phrases)
gives the byte stream a genuine hierarchy for the model to learn.
"""

from __future__ import annotations

from pathlib import Path

from .linalg import Rng

_COMMON = {
    "det": ["the", "a", "this", "each", "every", "some", "that"],
    "prep": ["of", "in", "near", "under", "with", "across", "after", "beyond"],
    "conj": ["and", "but", "because", "while", "although", "so"],
}

LEXICONS = {
    "scientific": {
        "noun": ["sample", "protein", "cell", "molecule", "enzyme", "reaction", "gradient",
                 "spectrum", "membrane", "catalyst", "lattice", "field", "particle", "signal"],
        "adj": ["stable", "thermal", "dense", "polar", "kinetic", "faint", "linear", "acidic"],
        "verb": ["binds", "absorbs", "emits", "inhibits", "measures", "accelerates",
                 "stabilizes", "reflects", "dissolves", "predicts"],
    },
    "news": {
        "noun": ["council", "minister", "market", "report", "city", "election", "union",
                 "court", "budget", "company", "witness", "agency", "crowd", "plan"],
        "adj": ["local", "new", "public", "former", "national", "early", "annual", "senior"],
        "verb": ["announced", "rejected", "approved", "delayed", "questioned", "praised",
                 "blocked", "reviewed", "signed", "reported"],
    },
    "fiction": {
        "noun": ["girl", "stranger", "castle", "river", "wolf", "lantern", "garden", "king",
                 "door", "storm", "letter", "forest", "ship", "shadow"],
        "adj": ["old", "silent", "dark", "golden", "quiet", "broken", "wild", "little"],
        "verb": ["watched", "followed", "opened", "feared", "carried", "remembered",
                 "found", "crossed", "called", "hid"],
    },
    "technical": {
        "noun": ["server", "buffer", "thread", "module", "cache", "socket", "kernel",
                 "parser", "request", "queue", "driver", "packet", "index", "handler"],
        "adj": ["remote", "cached", "async", "default", "stale", "primary", "nested", "empty"],
        "verb": ["allocates", "flushes", "parses", "returns", "rejects", "retries",
                 "serializes", "locks", "spawns", "validates"],
    },
    "general": {
        "noun": ["friend", "house", "morning", "car", "teacher", "dog", "book", "street",
                 "family", "window", "dinner", "phone", "child", "park"],
        "adj": ["small", "happy", "busy", "warm", "long", "simple", "bright", "late"],
        "verb": ["likes", "visits", "cleans", "buys", "needs", "paints", "moves",
                 "finds", "shares", "fixes"],
    },
}


class _Grammar:
    def __init__(self, lexicon: dict, rng: Rng):
        self.lex = {**_COMMON, **lexicon}
        self.rng = rng

    def pick(self, key):
        words = self.lex[key]
        return words[self.rng.integers(len(words))]

    def noun_phrase(self, depth=0):
        words = [self.pick("det")]
        if self.rng.uniform() < 0.5:
            words.append(self.pick("adj"))
        words.append(self.pick("noun"))
        if depth < 2 and self.rng.uniform() < 0.3:
            words += [self.pick("prep"), self.noun_phrase(depth + 1)]
        return " ".join(words)

    def clause(self, depth=0):
        words = [self.noun_phrase(), self.pick("verb"), self.noun_phrase()]
        if depth < 1 and self.rng.uniform() < 0.35:
            words += [self.pick("conj"), self.clause(depth + 1)]
        return " ".join(words)

    def sentence(self):
        s = self.clause()
        return s[0].upper() + s[1:] + "."


def synth_text(category: str, n_bytes: int, seed: int) -> bytes:
    """Exactly ``n_bytes`` of ASCII text in the style of ``category``."""
    if category not in LEXICONS:
        raise KeyError(f"unknown category {category!r}; choose from {sorted(LEXICONS)}")
    g = _Grammar(LEXICONS[category], Rng(seed))
    parts, size = [], 0
    while size < n_bytes:
        n_sent = 3 + g.rng.integers(4)
        para = " ".join(g.sentence() for _ in range(n_sent)) + "\n"
        parts.append(para)
        size += len(para)
    return "".join(parts).encode("ascii")[:n_bytes]


def write_corpus(root, categories, n_bytes: int, seed: int) -> dict:
    """Write ``<root>/<category>/text.txt`` per category; returns the path map."""
    root = Path(root)
    paths = {}
    for i, cat in enumerate(categories):
        d = root / cat
        d.mkdir(parents=True, exist_ok=True)
        p = d / "text.txt"
        p.write_bytes(synth_text(cat, n_bytes, seed + i))
        paths[cat] = str(p)
    return paths
