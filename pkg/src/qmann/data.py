"""bAbI-format stories, Bag-of-Words encoding and synthetic QnA tasks."""
from __future__ import annotations

import glob
import json
import os
import re
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, TextIO

import numpy as np

__all__ = [
    "Story",
    "Vocabulary",
    "Dataset",
    "BabiFormatError",
    "UnknownTokenError",
    "parse_babi",
    "serialize_babi",
    "tokenize",
    "encode_bow",
    "encode_batch",
    "gen_synthetic",
    "SYNTHETIC_TASKS",
    "split_train_val",
    "load_babi_task",
    "save_jsonl",
    "load_jsonl",
]

DEFAULT_MEMORY_SIZE = 50


class BabiFormatError(ValueError):
    pass


class UnknownTokenError(KeyError):
    pass


@dataclass
class Story:
    sentences: list
    question: list
    answer: str
    supporting_ids: list = field(default_factory=list)

    def __post_init__(self):
        if not self.sentences:
            raise ValueError("a story needs at least one sentence")


def tokenize(text: str) -> list:
    return [t for t in re.split(r"[\s.?!,]+", text.lower()) if t]


def parse_babi(stream: TextIO | Iterable[str], memory_size: int = DEFAULT_MEMORY_SIZE) -> list:
    """Parse bAbI task lines into stories, one per question.

    Each question sees the statements of its context so far (earlier
    questions excluded), truncated to the most recent ``memory_size``.
    Supporting ids are turned into 0-based indices into ``Story.sentences``;
    facts that fell out of the window are dropped from the list.
    """
    stories = []
    context: list = []  # (line id, tokens)
    n_lines = 0
    for lineno, line in enumerate(stream, 1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        n_lines += 1
        head, _, rest = line.partition(" ")
        if not head.isdigit() or not rest:
            raise BabiFormatError(f"line {lineno}: expected '<id> <text>', got {line!r}")
        lid = int(head)
        if lid == 1:
            context = []
        if "\t" in rest:
            parts = rest.split("\t")
            if len(parts) < 2 or not parts[1].strip():
                raise BabiFormatError(f"line {lineno}: question without answer")
            question = tokenize(parts[0])
            answer = parts[1].strip().lower()
            sup = [int(s) for s in parts[2].split()] if len(parts) > 2 and parts[2].strip() else []
            window = context[-memory_size:]
            if not window:
                raise BabiFormatError(f"line {lineno}: question with no preceding statements")
            pos = {i: j for j, (i, _) in enumerate(window)}
            known = {i for i, _ in context}
            for s in sup:
                if s not in known:
                    raise BabiFormatError(f"line {lineno}: supporting id {s} is not a statement")
            stories.append(
                Story(
                    [list(t) for _, t in window],
                    question,
                    answer,
                    [pos[s] for s in sup if s in pos],
                )
            )
        else:
            context.append((lid, tokenize(rest)))
    if n_lines == 0:
        raise BabiFormatError("empty input")
    return stories


def serialize_babi(stories: Iterable[Story]) -> str:
    """Write each story as its own context, ids restarting at 1."""
    out = []
    for st in stories:
        for i, sent in enumerate(st.sentences, 1):
            out.append(f"{i} {' '.join(sent)}.")
        q = " ".join(st.question) + "?"
        sup = " ".join(str(s + 1) for s in st.supporting_ids)
        out.append(f"{len(st.sentences) + 1} {q}\t{st.answer}\t{sup}")
    return "\n".join(out) + "\n"


class Vocabulary:
    def __init__(self, tokens: Iterable[str]):
        self.itos = sorted(set(tokens))
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    @classmethod
    def from_stories(cls, stories: Iterable[Story]) -> "Vocabulary":
        toks = set()
        for st in stories:
            for s in st.sentences:
                toks.update(s)
            toks.update(st.question)
            toks.add(st.answer)
        return cls(toks)

    @property
    def size(self) -> int:
        return len(self.itos)

    def __len__(self):
        return len(self.itos)

    def __contains__(self, tok):
        return tok in self.stoi

    def index(self, tok: str) -> int:
        try:
            return self.stoi[tok]
        except KeyError:
            raise UnknownTokenError(tok) from None

    def check(self, stories: Iterable[Story]) -> None:
        """Fail fast if any story uses a token outside the vocabulary."""
        for st in stories:
            for tok in [t for s in st.sentences for t in s] + list(st.question) + [st.answer]:
                self.index(tok)


def encode_bow(sentence: Iterable[str], vocab: Vocabulary) -> np.ndarray:
    v = np.zeros(vocab.size, dtype=np.int64)
    for tok in sentence:
        v[vocab.index(tok)] = 1
    return v


def encode_batch(stories: list, vocab: Vocabulary, memory_size: int = DEFAULT_MEMORY_SIZE):
    """Stack stories into arrays.

    Returns ``(V, q, a, mask)``: V is (B, I, L) with one BoW column per
    sentence, q is (B, I), a is (B,) answer indices and mask (B, L) marks
    occupied slots.
    """
    B, I = len(stories), vocab.size
    L = max(len(st.sentences) for st in stories)
    if L > memory_size:
        raise ValueError(f"story with {L} sentences exceeds {memory_size} memory slots")
    V = np.zeros((B, I, L), dtype=np.int64)
    q = np.zeros((B, I), dtype=np.int64)
    a = np.zeros(B, dtype=np.int64)
    mask = np.zeros((B, L), dtype=bool)
    for b, st in enumerate(stories):
        for j, sent in enumerate(st.sentences):
            V[b, :, j] = encode_bow(sent, vocab)
            mask[b, j] = True
        q[b] = encode_bow(st.question, vocab)
        a[b] = vocab.index(st.answer)
    return V, q, a, mask


@dataclass
class Dataset:
    train: list
    val: list
    test: list
    vocab: Vocabulary
    name: str = ""

    @classmethod
    def build(cls, train: list, test: list, val_fraction: float = 0.1, seed: int = 0, name: str = ""):
        tr, va = split_train_val(train, val_fraction, seed)
        vocab = Vocabulary.from_stories(tr)
        vocab.check(va)
        vocab.check(test)
        return cls(tr, va, test, vocab, name)


def split_train_val(stories: list, val_fraction: float = 0.1, seed: int = 0):
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(stories))
    n_val = int(round(len(stories) * val_fraction))
    val = [stories[i] for i in sorted(idx[:n_val])]
    train = [stories[i] for i in sorted(idx[n_val:])]
    return train, val


# ---------------------------------------------------------------------------
# synthetic tasks

_PEOPLE = ["mary", "john", "sandra", "daniel", "fred", "bill", "julie", "emma", "jeff", "lily", "greg", "brian"]
_PLACES = ["kitchen", "garden", "office", "hallway", "bathroom", "bedroom", "park", "school", "cinema", "cellar"]
_OBJECTS = ["apple", "football", "milk", "key", "book", "box"]
_MOVES = ["went", "moved", "journeyed", "travelled"]


def _single_fact(rng, n_sent: int = 4):
    people = rng.choice(len(_PEOPLE[:8]), n_sent, replace=False)
    sents, locs = [], {}
    for p in people:
        loc = _PLACES[rng.integers(8)]
        locs[p] = loc
        sents.append([_PEOPLE[p], _MOVES[rng.integers(len(_MOVES))], "to", "the", loc])
    j = int(rng.integers(n_sent))
    who = people[j]
    return Story(sents, ["where", "is", _PEOPLE[who]], locs[who], [j])


def _two_fact(rng, n_pairs: int = 3):
    people = rng.choice(8, n_pairs, replace=False)
    objs = rng.choice(len(_OBJECTS), n_pairs, replace=False)
    facts = []
    for p, o in zip(people, objs):
        loc = _PLACES[rng.integers(8)]
        facts.append(([_PEOPLE[p], "took", "the", _OBJECTS[o]], ("hold", o, p)))
        facts.append(([_PEOPLE[p], _MOVES[rng.integers(len(_MOVES))], "to", "the", loc], ("at", p, loc)))
    order = rng.permutation(len(facts))
    sents = [facts[i][0] for i in order]
    j = int(rng.integers(n_pairs))
    o, p = objs[j], people[j]
    sup, answer = [], None
    for pos, i in enumerate(order):
        kind, x, y = facts[i][1]
        if kind == "hold" and x == o:
            sup.append(pos)
        if kind == "at" and x == p:
            sup.append(pos)
            answer = y
    return Story(sents, ["where", "is", "the", _OBJECTS[o]], answer, sorted(sup))


_CROWD = _PEOPLE + ["anna", "tom", "kate", "paul", "sara", "mike", "nina", "oscar"]
_FILLER = ["then", "later", "quickly", "slowly", "again", "finally"]


def _wide_similarity(rng, n_sent: int = 20, n_people: int = 6):
    # people move several times and the question asks for the latest place.
    # A Bag-of-Words memory cannot order the moves, so the training set can
    # only be fitted by memorization, which keeps pushing the key/memory
    # similarities outwards (the same pressure bAbI location tasks exert)
    people = rng.choice(len(_CROWD), n_people, replace=False)
    sents, last = [], {}
    for j in range(n_sent):
        p = int(people[rng.integers(n_people)])
        loc = _PLACES[rng.integers(len(_PLACES))]
        last[p] = (loc, j)
        sents.append(
            [_CROWD[p], _MOVES[rng.integers(len(_MOVES))], _FILLER[rng.integers(len(_FILLER))], "to", "the", loc]
        )
    who = sorted(last)[int(rng.integers(len(last)))]
    loc, j = last[who]
    return Story(sents, ["where", "is", _CROWD[who]], loc, [j])


SYNTHETIC_TASKS = {
    "single-fact": _single_fact,
    "two-fact": _two_fact,
    "wide-similarity": _wide_similarity,
}


def gen_synthetic(kind: str, n_stories: int, seed: int) -> list:
    try:
        make = SYNTHETIC_TASKS[kind]
    except KeyError:
        raise ValueError(f"unknown synthetic task {kind!r}; choose from {sorted(SYNTHETIC_TASKS)}") from None
    rng = np.random.default_rng(seed)
    return [make(rng) for _ in range(n_stories)]


def synthetic_dataset(kind: str, n_train: int = 1000, n_test: int = 1000, seed: int = 0, val_fraction: float = 0.1):
    train = gen_synthetic(kind, n_train, seed)
    # test stream derived from the seed but disjoint from the train stream
    test = gen_synthetic(kind, n_test, seed + 1_000_003)
    return Dataset.build(train, test, val_fraction, seed, name=f"synthetic:{kind}")


# ---------------------------------------------------------------------------
# files


def load_babi_task(babi_dir: str, task: int, memory_size: int = DEFAULT_MEMORY_SIZE, val_fraction: float = 0.1, seed: int = 0):
    """Load ``qa<task>_*_{train,test}.txt`` from ``babi_dir`` (or its en/ subdir)."""
    def find(split):
        for sub in ("", "en", "en-10k"):
            hits = sorted(glob.glob(os.path.join(babi_dir, sub, f"qa{task}_*_{split}.txt")))
            if hits:
                return hits[0]
        raise FileNotFoundError(f"no bAbI task {task} {split} file under {babi_dir}")

    with open(find("train")) as f:
        train = parse_babi(f, memory_size)
    with open(find("test")) as f:
        test = parse_babi(f, memory_size)
    return Dataset.build(train, test, val_fraction, seed, name=f"babi:{task}")


def save_jsonl(stories: Iterable[Story], path: str) -> None:
    with open(path, "w") as f:
        for st in stories:
            f.write(json.dumps(asdict(st)) + "\n")


def load_jsonl(path: str) -> list:
    with open(path) as f:
        return [Story(**json.loads(line)) for line in f if line.strip()]
