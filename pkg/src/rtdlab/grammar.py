"""Template grammar producing captions ``a <attribute> <subject> <prep> the <context>``.

Subjects and contexts carry a scene category. Sampling prefers contexts
from the subject's own category, which gives the corpus the co-occurrence
statistics that make related words land near each other after pretraining.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

# (word, scene category)
SUBJECTS = (
    ("dog", 0), ("car", 1), ("chair", 2), ("man", 3), ("cat", 0), ("bus", 1), ("table", 2),
    ("woman", 3), ("horse", 0), ("truck", 1), ("lamp", 2), ("child", 3), ("bird", 0),
    ("bicycle", 1), ("sofa", 2), ("boy", 3), ("cow", 0), ("train", 1), ("bed", 2), ("girl", 3),
)
ATTRIBUTES = ("red", "blue", "green", "black", "white", "yellow", "brown", "small", "large", "old")
CONTEXTS = (
    ("in", "field", 0), ("on", "street", 1), ("in", "kitchen", 2), ("in", "park", 3),
    ("in", "forest", 0), ("on", "road", 1), ("in", "bedroom", 2), ("at", "office", 3),
    ("on", "farm", 0), ("at", "station", 1), ("on", "hill", 0), ("in", "garage", 1),
)

Tuple3 = tuple[int, int, int]


@dataclass(frozen=True)
class GrammarConfig:
    n_subjects: int = 20
    n_attributes: int = 5
    n_contexts: int = 10
    affinity: float = 0.8

    def __post_init__(self):
        if not (1 <= self.n_subjects <= len(SUBJECTS) and 1 <= self.n_attributes <= len(ATTRIBUTES)
                and 1 <= self.n_contexts <= len(CONTEXTS)):
            raise ValueError("grammar sizes exceed the built-in word lists")
        if not 0.0 <= self.affinity <= 1.0:
            raise ValueError("affinity must lie in [0, 1]")

    @property
    def subjects(self) -> tuple[str, ...]:
        return tuple(w for w, _ in SUBJECTS[: self.n_subjects])

    @property
    def attributes(self) -> tuple[str, ...]:
        return ATTRIBUTES[: self.n_attributes]

    @property
    def contexts(self) -> tuple[str, ...]:
        return tuple(w for _, w, _ in CONTEXTS[: self.n_contexts])

    @property
    def slots(self) -> tuple[tuple[str, ...], ...]:
        return self.subjects, self.attributes, self.contexts

    def caption(self, t: Tuple3) -> str:
        s, a, c = t
        prep, ctx, _ = CONTEXTS[c]
        return f"a {self.attributes[a]} {self.subjects[s]} {prep} the {ctx}"

    def all_tuples(self) -> list[Tuple3]:
        return list(itertools.product(range(self.n_subjects), range(self.n_attributes),
                                      range(self.n_contexts)))

    def tuple_weights(self) -> np.ndarray:
        """Sampling probability of each entry of :meth:`all_tuples`."""
        scat = [c for _, c in SUBJECTS[: self.n_subjects]]
        ccat = [c for _, _, c in CONTEXTS[: self.n_contexts]]
        w = []
        for s, _, c in self.all_tuples():
            same = [j for j in range(self.n_contexts) if ccat[j] == scat[s]]
            other = self.n_contexts - len(same)
            if not same or not other:
                p = 1.0 / self.n_contexts
            elif ccat[c] == scat[s]:
                p = self.affinity / len(same)
            else:
                p = (1.0 - self.affinity) / other
            w.append(p)
        w = np.asarray(w)
        return w / w.sum()

    def words(self) -> list[str]:
        out = ["a", "the"] + list(self.subjects) + list(self.attributes)
        for prep, ctx, _ in CONTEXTS[: self.n_contexts]:
            out += [prep, ctx]
        return out

    def sample_tuples(self, n: int, rng: np.random.Generator) -> list[Tuple3]:
        tuples = self.all_tuples()
        idx = rng.choice(len(tuples), size=n, p=self.tuple_weights())
        return [tuples[i] for i in idx]

    def sample_corpus(self, n: int, rng: np.random.Generator) -> list[str]:
        return [self.caption(t) for t in self.sample_tuples(n, rng)]
