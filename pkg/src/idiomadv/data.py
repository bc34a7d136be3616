"""Example records, split validation, tokenisation and batching.

Labels follow the task convention: 0 means the MWE is used idiomatically,
1 means it is literal (proper nouns included). Inputs are laid out as
``[CLS] context [SEP] mwe [SEP]``, where the context is previous, target and
next sentences joined by single spaces.
"""

import csv
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataValueError, EncodingError, SchemaError

LANGUAGES = ("EN", "PT", "GL")
SPLIT_NAMES = ("train", "dev", "eval", "test")
SETTINGS = ("zero_shot", "one_shot")
COLUMNS = ("id", "language", "mwe", "previous", "target", "next", "label")

IDIOMATIC, LITERAL = 0, 1

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
RESERVED = (PAD, UNK, CLS, SEP)
PAD_ID, UNK_ID, CLS_ID, SEP_ID = 0, 1, 2, 3

MAX_SEQ_LEN = 512
CONTINUATION = "##"
MAX_WORD_CHARS = 100


@dataclass(frozen=True)
class ExampleRecord:
    id: str
    language: str
    mwe: str
    previous: str
    target: str
    next: str
    label: int

    @property
    def context(self):
        return " ".join(part for part in (self.previous, self.target, self.next) if part)

    def mwe_in_target(self):
        return self.mwe.casefold() in self.target.casefold()


@dataclass
class DatasetSplit:
    name: str
    setting: str
    records: list
    issues: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def mwes(self):
        return {r.mwe.casefold() for r in self.records}


# ---------------------------------------------------------------------------
# file ingestion
# ---------------------------------------------------------------------------


def read_records(path):
    """Parse one dataset CSV. Returns ``(records, issues)``.

    Hard format errors raise with the offending line number; soft problems
    (MWE not found inside its target sentence) are collected in ``issues``.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset file not found: {path}")
    records, issues = [], []
    try:
        with open(path, newline="", encoding="utf-8-sig") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise SchemaError(f"{path}: missing header row") from None
            header = [h.strip() for h in header]
            missing = [c for c in COLUMNS if c not in header]
            if missing:
                raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
            index = {c: header.index(c) for c in COLUMNS}
            for row in reader:
                line = reader.line_num
                if not row:
                    continue
                if len(row) != len(header):
                    raise DataValueError(
                        f"{path}: line {line}: expected {len(header)} fields, got {len(row)}"
                    )
                rec = _parse_row(row, index, path, line)
                if not rec.mwe_in_target():
                    issues.append(f"line {line}: mwe {rec.mwe!r} not found in target sentence")
                records.append(rec)
    except UnicodeDecodeError as exc:
        raise SchemaError(f"{path}: not valid UTF-8 ({exc})") from exc
    return records, issues


def _parse_row(row, index, path, line):
    def get(col):
        return row[index[col]]

    label_text = get("label").strip()
    if label_text not in ("0", "1"):
        raise DataValueError(f"{path}: line {line}: label must be 0 or 1, got {label_text!r}")
    language = get("language").strip().upper()
    if language not in LANGUAGES:
        raise DataValueError(f"{path}: line {line}: unknown language {get('language')!r}")
    mwe, target = get("mwe").strip(), get("target").strip()
    if not mwe:
        raise DataValueError(f"{path}: line {line}: empty mwe")
    if not target:
        raise DataValueError(f"{path}: line {line}: empty target sentence")
    return ExampleRecord(
        id=get("id").strip(),
        language=language,
        mwe=mwe,
        previous=get("previous").strip(),
        target=target,
        next=get("next").strip(),
        label=int(label_text),
    )


def load_dataset(path, setting):
    """Load a dataset directory (``train.csv``, ``dev.csv``, ...) or one CSV file.

    A single file becomes a split named after its stem when that is a known
    split name, and ``test`` otherwise.
    """
    if setting not in SETTINGS:
        raise ConfigError(f"unknown setting {setting!r}")
    path = Path(path)
    if path.is_dir():
        splits = []
        for name in SPLIT_NAMES:
            f = path / f"{name}.csv"
            if f.is_file():
                records, issues = read_records(f)
                splits.append(DatasetSplit(name, setting, records, issues))
        if not splits:
            raise FileNotFoundError(f"no split CSV files found in {path}")
        return splits
    records, issues = read_records(path)
    name = path.stem if path.stem in SPLIT_NAMES else "test"
    return [DatasetSplit(name, setting, records, issues)]


def write_split(split, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(COLUMNS)
        for r in split.records:
            writer.writerow([r.id, r.language, r.mwe, r.previous, r.target, r.next, r.label])


def get_split(splits, name):
    for s in splits:
        if s.name == name:
            return s
    return None


def training_pool(splits, setting):
    """Training records for ``setting``.

    Zero-shot training may only see zero-shot train data; one-shot training
    uses every train split supplied, of either setting.
    """
    pool = []
    for s in splits:
        if s.name != "train":
            continue
        if setting == "zero_shot" and s.setting != "zero_shot":
            continue
        pool.extend(s.records)
    return pool


# ---------------------------------------------------------------------------
# split-semantics validators
# ---------------------------------------------------------------------------


@dataclass
class DisjointnessReport:
    overlap: set

    @property
    def passed(self):
        return not self.overlap


@dataclass
class CoverageReport:
    missing: dict
    shared_sentences: set

    @property
    def passed(self):
        return not self.missing and not self.shared_sentences


def validate_zero_shot_disjointness(train, others):
    """MWEs (case-folded) that occur in train and in any other split."""
    seen = set()
    for other in others:
        seen |= other.mwes()
    return DisjointnessReport(train.mwes() & seen)


def validate_one_shot_coverage(train, evalset):
    """Check that each evaluation MWE has a training example of both labels.

    Also flags sentences shared verbatim between the two splits, since the
    training examples must differ from the evaluated ones.
    """
    labels = {}
    for r in train.records:
        labels.setdefault(r.mwe.casefold(), set()).add(r.label)
    missing = {}
    for m in sorted(evalset.mwes()):
        lacking = {IDIOMATIC, LITERAL} - labels.get(m, set())
        if lacking:
            missing[m] = lacking
    train_sentences = {r.context.casefold() for r in train.records}
    shared = {r.context.casefold() for r in evalset.records} & train_sentences
    return CoverageReport(missing, shared)


# ---------------------------------------------------------------------------
# vocabulary and encoding
# ---------------------------------------------------------------------------


def words(text):
    return text.lower().split()


class Vocab:
    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise ConfigError("vocab must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ConfigError("vocab tokens must be unique")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id(self, token):
        return self.index.get(token, UNK_ID)

    def tokenize(self, text):
        """Whitespace split, then greedy longest-match word pieces.

        A word with any unmatched remainder becomes a single ``[UNK]``.
        """
        pieces = []
        for word in words(text):
            if len(word) > MAX_WORD_CHARS:
                pieces.append(UNK)
                continue
            sub, start = [], 0
            while start < len(word):
                end = len(word)
                match = None
                while end > start:
                    cand = word[start:end]
                    if start:
                        cand = CONTINUATION + cand
                    if cand in self.index and cand not in RESERVED:
                        match = cand
                        break
                    end -= 1
                if match is None:
                    sub = [UNK]
                    break
                sub.append(match)
                start = end
            pieces.extend(sub)
        return pieces

    def encode(self, text):
        return [self.id(t) for t in self.tokenize(text)]

    def decode(self, ids):
        return [self.tokens[i] for i in ids]


def build_vocab(records, max_size):
    """Reserved tokens first, then corpus words by frequency (ties: lexicographic)."""
    if max_size <= len(RESERVED):
        raise ConfigError(f"max_size must exceed {len(RESERVED)}, got {max_size}")
    records = list(records)
    if not records:
        raise ConfigError("cannot build a vocabulary from no records")
    counts = Counter()
    for r in records:
        counts.update(words(r.context))
        counts.update(words(r.mwe))
    for t in RESERVED:
        counts.pop(t, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [t for t, _ in ranked[: max_size - len(RESERVED)]]
    return Vocab(list(RESERVED) + kept)


def encode_example(rec, vocab, max_len):
    """Token ids for ``[CLS] context [SEP] mwe [SEP]``.

    When too long, context tokens are dropped from the right; the MWE segment
    and both separators always survive.
    """
    if max_len > MAX_SEQ_LEN:
        raise EncodingError(f"max_len {max_len} exceeds {MAX_SEQ_LEN}")
    mwe_ids = vocab.encode(rec.mwe)
    budget = max_len - len(mwe_ids) - 3
    if budget < 0:
        raise EncodingError(
            f"max_len {max_len} cannot hold a {len(mwe_ids)}-token mwe plus 3 special tokens"
        )
    ctx_ids = vocab.encode(rec.context)[:budget]
    return [CLS_ID] + ctx_ids + [SEP_ID] + mwe_ids + [SEP_ID]


@dataclass
class EncodedBatch:
    token_ids: np.ndarray
    attention_mask: np.ndarray
    labels: np.ndarray
    record_ids: list = field(default_factory=list)
    languages: list = field(default_factory=list)

    def __len__(self):
        return self.token_ids.shape[0]


def collate(records, vocab, max_len):
    rows = [encode_example(r, vocab, max_len) for r in records]
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    for i, row in enumerate(rows):
        ids[i, : len(row)] = row
    return EncodedBatch(
        token_ids=ids,
        attention_mask=(ids != PAD_ID).astype(np.int64),
        labels=np.array([r.label for r in records], dtype=np.int64),
        record_ids=[r.id for r in records],
        languages=[r.language for r in records],
    )


def make_batches(records, vocab, batch_size, max_len, seed=0, shuffle=True):
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    records = list(records)
    order = np.arange(len(records))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(records))
    return [
        collate([records[i] for i in order[start : start + batch_size]], vocab, max_len)
        for start in range(0, len(records), batch_size)
    ]


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------

_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z")
_VOWELS = ("a", "e", "i", "o", "u")


def _pseudo_words(rng, n, taken):
    out = []
    while len(out) < n:
        syllables = rng.integers(2, 4)
        w = "".join(
            _ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
            for _ in range(syllables)
        )
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


@dataclass(frozen=True)
class SynthParams:
    seed: int = 7
    n_mwes: int = 40
    examples_per_mwe: int = 8
    setting: str = "zero_shot"
    n_filler: int = 60
    n_cues: int = 10
    distractor_prob: float = 0.5


class _Composer:
    """Builds labelled sentences around a bigram MWE.

    The label is carried only by cue words: an idiomatic context holds two
    idiom cues, a literal one two literal cues, and either may hold one cue of
    the opposite kind as a distractor.
    """

    def __init__(self, rng, params):
        taken = set()
        self.rng = rng
        self.p = params
        self.filler = _pseudo_words(rng, params.n_filler, taken)
        self.cues = {
            IDIOMATIC: _pseudo_words(rng, params.n_cues, taken),
            LITERAL: _pseudo_words(rng, params.n_cues, taken),
        }
        self.mwe_words = _pseudo_words(rng, 2 * params.n_mwes, taken)
        self.used = set()

    def mwes(self):
        w = self.mwe_words
        return [f"{w[2 * i]} {w[2 * i + 1]}" for i in range(self.p.n_mwes)]

    def _fill(self, lo, hi):
        n = int(self.rng.integers(lo, hi + 1))
        return [self.filler[self.rng.integers(len(self.filler))] for _ in range(n)]

    def _pick(self, label):
        pool = self.cues[label]
        return pool[self.rng.integers(len(pool))]

    def sentence(self, mwe, label):
        for _ in range(1000):
            body = self._fill(3, 7)
            inserts = [self._pick(label), self._pick(label)]
            if self.rng.random() < self.p.distractor_prob:
                inserts.append(self._pick(1 - label))
            inserts.append(mwe)
            for item in inserts:
                body.insert(int(self.rng.integers(len(body) + 1)), item)
            target = " ".join(body)
            previous = " ".join(self._fill(0, 6))
            nxt = " ".join(self._fill(0, 6))
            key = " ".join(p for p in (previous, target, nxt) if p)
            if key not in self.used:
                self.used.add(key)
                return previous, target, nxt
        raise ConfigError("could not generate a unique sentence; enlarge the filler pool")


def _balanced_labels(count, parity):
    """Half of each label; an odd extra goes to ``parity[0]``, which then flips."""
    labels = [IDIOMATIC] * (count // 2) + [LITERAL] * (count // 2)
    if count % 2:
        labels.append(parity[0])
        parity[0] = 1 - parity[0]
    return labels


def generate_synthetic_dataset(seed=7, n_mwes=40, examples_per_mwe=8, setting="zero_shot", **kwargs):
    """Seeded synthetic corpus mirroring the task's split semantics.

    ``zero_shot`` partitions MWEs disjointly across train/dev/test.
    ``one_shot`` reserves some MWEs for evaluation and places exactly one
    idiomatic and one literal example of each of them in train.
    """
    params = SynthParams(seed, n_mwes, examples_per_mwe, setting, **kwargs)
    if setting not in SETTINGS:
        raise ConfigError(f"unknown setting {setting!r}")
    if n_mwes < 4:
        raise ConfigError(f"n_mwes must be >= 4 to fill train/dev/test, got {n_mwes}")
    if examples_per_mwe < 4:
        raise ConfigError(f"examples_per_mwe must be >= 4, got {examples_per_mwe}")

    rng = np.random.default_rng(seed)
    comp = _Composer(rng, params)
    pool = comp.mwes()
    mwes = [pool[i] for i in rng.permutation(n_mwes)]

    if setting == "zero_shot":
        n_dev = n_test = max(1, n_mwes // 5)
    else:
        n_dev = n_test = max(1, n_mwes // 4)
    groups = {
        "dev": mwes[:n_dev],
        "test": mwes[n_dev : n_dev + n_test],
        "train": mwes[n_dev + n_test :],
    }
    langs = {"train": ("EN", "EN", "PT"), "dev": ("EN", "EN", "PT"), "test": ("EN", "PT", "GL")}
    if setting == "one_shot":
        langs["test"] = langs["dev"]

    rows = {"train": [], "dev": [], "test": []}
    parity = {name: [IDIOMATIC] for name in rows}
    for name in ("train", "dev", "test"):
        for k, mwe in enumerate(groups[name]):
            lang = langs[name][k % len(langs[name])]
            if setting == "zero_shot" or name == "train":
                for label in _balanced_labels(examples_per_mwe, parity[name]):
                    rows[name].append((lang, mwe, label))
            else:
                rows["train"].append((lang, mwe, IDIOMATIC))
                rows["train"].append((lang, mwe, LITERAL))
                for label in _balanced_labels(examples_per_mwe - 2, parity[name]):
                    rows[name].append((lang, mwe, label))

    splits = []
    for name in ("train", "dev", "test"):
        records = []
        for k, idx in enumerate(rng.permutation(len(rows[name]))):
            lang, mwe, label = rows[name][idx]
            previous, target, nxt = comp.sentence(mwe, label)
            records.append(
                ExampleRecord(f"{setting}.{name}.{k:05d}", lang, mwe, previous, target, nxt, label)
            )
        splits.append(DatasetSplit(name, setting, records))
    return splits


def write_synthetic_dataset(splits, out_dir, params):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for s in splits:
        write_split(s, out_dir / f"{s.name}.csv")
    lines = [f"{k}={v}" for k, v in sorted(params.items())]
    lines += [f"records.{s.name}={len(s)}" for s in splits]
    tmp = out_dir / "manifest.tmp"
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, out_dir / "manifest")
