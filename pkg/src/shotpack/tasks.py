"""Synthetic meta-training tasks and the held-out language-model probe text.

Every task owns a random, task-specific mapping, so its examples are only
predictable from in-context demonstrations. Task symbols are uppercase
letters, digits and punctuation; probe text uses lowercase words only.
"""

from __future__ import annotations

import itertools
import string
from dataclasses import dataclass, field
from math import comb
from typing import Iterator, Sequence

import numpy as np

from .packing import Example, PromptTemplate

CATEGORIES = ("classification", "nli", "qa", "generation")
FAMILIES = {
    "keyed_lookup": "classification",
    "entailment": "nli",
    "multi_choice": "qa",
    "transduction": "generation",
}

LABELS = tuple(string.ascii_uppercase)
# single-byte symbols never produced by the probe grammar or used as separators
KEYS = tuple(string.digits + "!#$%&()*+,-/:;<=>@[]^_{}~")
TASK_TEMPLATE = PromptTemplate(target_suffix="\n")


class TaskError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    family: str
    task_id: str
    seed: int
    n_classes: int = 26
    n_keys: int = 32
    input_len: int = 3  # transduction only
    n_options: int = 4  # multi_choice only


@dataclass
class SyntheticTask:
    spec: TaskSpec
    mapping: dict[str, str]
    label_set: tuple[str, ...] | None
    template: PromptTemplate = TASK_TEMPLATE
    _pools: dict = field(default_factory=dict, repr=False)

    @property
    def task_id(self) -> str:
        return self.spec.task_id

    @property
    def family(self) -> str:
        return self.spec.family

    @property
    def category(self) -> str:
        return FAMILIES[self.spec.family]

    @property
    def is_classification(self) -> bool:
        return self.family != "transduction"

    def sample(self, rng: np.random.Generator) -> Example:
        s = self.spec
        keys = list(self.mapping)
        if s.family == "keyed_lookup":
            k = keys[int(rng.integers(len(keys)))]
            return Example(k, self.mapping[k], s.task_id, self.label_set)
        if s.family == "transduction":
            idx = rng.integers(len(keys), size=s.input_len)
            x = "".join(keys[i] for i in idx)
            return Example(x, " ".join(self.mapping[c] for c in x), s.task_id, None)
        if s.family == "entailment":
            k = keys[int(rng.integers(len(keys)))]
            if rng.random() < 0.5:
                cand, y = self.mapping[k], "y"
            else:
                others = [c for c in LABELS[:s.n_classes] if c != self.mapping[k]]
                cand, y = others[int(rng.integers(len(others)))], "n"
            return Example(k + cand, y, s.task_id, self.label_set)
        # multi_choice: key, separator, then option letters; answer is the mapped label
        k = keys[int(rng.integers(len(keys)))]
        others = [c for c in LABELS[:s.n_classes] if c != self.mapping[k]]
        pick = rng.choice(len(others), size=s.n_options - 1, replace=False)
        opts = [others[i] for i in pick] + [self.mapping[k]]
        opts = [opts[i] for i in rng.permutation(len(opts))]
        return Example(k + "|" + "".join(opts), self.mapping[k], s.task_id, tuple(opts))

    def stream(self, seed: int) -> Iterator[Example]:
        rng = np.random.default_rng([self.spec.seed, seed])
        while True:
            yield self.sample(rng)

    def pool(self, size: int = 512, seed: int = 0) -> list[Example]:
        """A fixed training pool, used for stratified context selection."""
        key = (size, seed)
        if key not in self._pools:
            self._pools[key] = list(itertools.islice(self.stream(10_000 + seed), size))
        return self._pools[key]

    def bayes_posterior(self, context: Sequence[Example], query: str) -> dict[str, float]:
        """Exact posterior over the query label for a keyed-lookup task.

        The prior is uniform over surjective key->label maps (the generator's
        distribution). A seen key is decided; an unseen key favours labels no
        context example has shown yet.
        """
        if self.family != "keyed_lookup":
            raise TaskError("bayes_posterior is defined for keyed_lookup tasks")
        seen = {e.input: e.target for e in context}
        if query in seen:
            return {c: float(c == seen[query]) for c in self.label_set}
        n_labels = len(self.label_set)
        unseen = len(self.mapping) - len(seen)
        missing = set(self.label_set) - set(seen.values())
        m = len(missing)

        w_missing = _covers(unseen - 1, m - 1, n_labels) if m else 0
        w_other = _covers(unseen - 1, m, n_labels)
        total = m * w_missing + (n_labels - m) * w_other
        return {c: (w_missing if c in missing else w_other) / total for c in self.label_set}

    def bayes_predict(self, context: Sequence[Example], query: str) -> str:
        post = self.bayes_posterior(context, query)
        return max(self.label_set, key=lambda c: (post[c], -self.label_set.index(c)))


def _covers(u: int, need: int, n_labels: int) -> int:
    """Maps from u keys to n_labels labels that hit all of ``need`` given labels."""
    return sum((-1) ** j * comb(need, j) * (n_labels - j) ** u for j in range(need + 1))


def uniform_surjection(rng: np.random.Generator, n_keys: int, n_labels: int) -> list[int]:
    """A uniformly random onto map, drawn key by key with exact conditional weights."""
    covered: set[int] = set()
    out = []
    for i in range(n_keys):
        left = n_keys - i - 1
        missing = [c for c in range(n_labels) if c not in covered]
        m = len(missing)
        w_missing = m * _covers(left, m - 1, n_labels) if m else 0
        w_covered = (n_labels - m) * _covers(left, m, n_labels)
        if rng.random() < w_missing / (w_missing + w_covered):
            c = missing[int(rng.integers(m))]
        else:
            c = sorted(covered)[int(rng.integers(n_labels - m))]
        covered.add(c)
        out.append(c)
    return out


def gen_task(spec: TaskSpec) -> SyntheticTask:
    if spec.family not in FAMILIES:
        raise TaskError(f"unknown task family {spec.family!r}")
    rng = np.random.default_rng(spec.seed)
    if spec.family == "transduction":
        n_sym = min(spec.n_keys, len(KEYS))
        keys = [KEYS[i] for i in sorted(rng.choice(len(KEYS), size=n_sym, replace=False))]
        labels = rng.choice(len(LABELS[:spec.n_classes]), size=n_sym, replace=False) \
            if n_sym <= spec.n_classes else rng.integers(spec.n_classes, size=n_sym)
        mapping = {k: LABELS[int(j)] for k, j in zip(keys, labels)}
        return SyntheticTask(spec, mapping, None)
    if spec.n_keys < spec.n_classes or spec.n_keys > len(KEYS):
        raise TaskError(f"need n_classes <= n_keys <= {len(KEYS)}")
    if spec.n_classes > len(LABELS):
        raise TaskError(f"at most {len(LABELS)} classes are supported")
    keys = [KEYS[i] for i in sorted(rng.choice(len(KEYS), size=spec.n_keys, replace=False))]
    assign = uniform_surjection(rng, spec.n_keys, spec.n_classes)
    mapping = {k: LABELS[int(a)] for k, a in zip(keys, assign)}
    if spec.family == "keyed_lookup":
        label_set = LABELS[:spec.n_classes]
    elif spec.family == "entailment":
        label_set = ("y", "n")  # disjoint from the lookup labels
    else:
        label_set = None  # per-example options
    return SyntheticTask(spec, mapping, label_set)


@dataclass
class TaskSuite:
    held_in: list[SyntheticTask]
    held_out: list[SyntheticTask]

    def __post_init__(self):
        ids_in = {t.task_id for t in self.held_in}
        ids_out = {t.task_id for t in self.held_out}
        seeds_in = {t.spec.seed for t in self.held_in}
        if ids_in & ids_out or seeds_in & {t.spec.seed for t in self.held_out}:
            raise TaskError("held-in and held-out tasks overlap")

    @property
    def held_out_ids(self) -> set[str]:
        return {t.task_id for t in self.held_out}

    def by_id(self, task_id: str) -> SyntheticTask:
        for t in self.held_in + self.held_out:
            if t.task_id == task_id:
                return t
        raise KeyError(task_id)


def make_suite(train_per_family: int = 3, test_per_family: int = 1, seed: int = 0,
               families: Sequence[str] = tuple(FAMILIES), **spec_kw) -> TaskSuite:
    """Held-in and held-out tasks for each family, with disjoint seeds and ids."""
    held_in, held_out = [], []
    for fi, fam in enumerate(families):
        for j in range(train_per_family):
            s = 1_000_003 * seed + 1000 * fi + j
            held_in.append(gen_task(TaskSpec(fam, f"{fam}-train-{j}", s, **spec_kw)))
        for j in range(test_per_family):
            s = 1_000_003 * seed + 1000 * fi + 500 + j
            held_out.append(gen_task(TaskSpec(fam, f"{fam}-test-{j}", s, **spec_kw)))
    return TaskSuite(held_in, held_out)


# ---------------------------------------------------------------- probe / pretraining text

_DET = ("the", "a", "this", "every", "one")
_ADJ = ("old", "red", "quiet", "small", "bright", "cold", "slow", "green", "tall", "dark")
_NOUN = ("river", "house", "dog", "king", "stone", "garden", "ship", "road", "tree", "bird",
         "city", "door", "field", "horse", "window", "letter")
_VERB = ("sees", "finds", "keeps", "follows", "builds", "meets", "carries", "leaves", "hears")
_PREP = ("near", "under", "behind", "beside", "over")


def _name(rng: np.random.Generator) -> str:
    cons, vow = "bcdfghjklmnprstvz", "aeiou"
    n = int(rng.integers(2, 4))
    return "".join(cons[int(rng.integers(len(cons)))] + vow[int(rng.integers(len(vow)))]
                   for _ in range(n))


def lm_document(rng: np.random.Generator, n_sentences: int = 40) -> str:
    """One document of the probe grammar.

    Each document introduces a few invented names that keep recurring, so later
    tokens are more predictable given longer context.
    """
    names = [_name(rng) for _ in range(int(rng.integers(3, 6)))]
    sents = []

    def np_():
        if rng.random() < 0.4:
            return names[int(rng.integers(len(names)))]
        words = [_DET[int(rng.integers(len(_DET)))]]
        if rng.random() < 0.5:
            words.append(_ADJ[int(rng.integers(len(_ADJ)))])
        words.append(_NOUN[int(rng.integers(len(_NOUN)))])
        return " ".join(words)

    for _ in range(n_sentences):
        s = f"{np_()} {_VERB[int(rng.integers(len(_VERB)))]} {np_()}"
        if rng.random() < 0.3:
            s += f" {_PREP[int(rng.integers(len(_PREP)))]} {np_()}"
        sents.append(s + ".")
    return " ".join(sents)


def lm_documents(seed: int, count: int, n_sentences: int = 40) -> list[str]:
    rng = np.random.default_rng([7919, seed])
    return [lm_document(rng, n_sentences) for _ in range(count)]


def recall_lines(seed: int, count: int, n_keys: int = 6, pairs: int = 12) -> list[str]:
    """Associative-recall text over the task alphabet, one independent binding per line.

    Each line binds ``n_keys`` random keys to random labels and lists ``pairs``
    of them, every pair written as the key directly followed by its label,
    pairs separated by spaces. A repeated key is predictable from earlier in
    its own line only: bindings change from line to line.
    """
    rng = np.random.default_rng([15485863, seed])
    lines = []
    for _ in range(count):
        keys = rng.choice(len(KEYS), size=n_keys, replace=False)
        labels = rng.integers(len(LABELS), size=n_keys)
        picks = rng.integers(n_keys, size=pairs)
        lines.append(" ".join(KEYS[keys[i]] + LABELS[labels[i]] for i in picks) + "\n")
    return lines
