"""Dialog and knowledge-base data model, knowledge-field serialization,
synthetic corpus generation and corpus file I/O.

Token sequences are tuples of integer ids under a :class:`Vocabulary`.
Turn indices are 1-based throughout, so ``build_context(d, 1)`` is empty.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ParseError, ShapeError
from .kvconfig import coerce, read_kv, write_kv

PAD, BOS, EOS, NULL, SEP = 0, 1, 2, 3, 4
# field-boundary tokens used when models see several fields in one sequence
USR, KB, RSP, ACT = 5, 6, 7, 8

RESERVED = ("<pad>", "<bos>", "<eos>", "<null>", "<sep>")
STRUCTURAL = ("<usr>", "<kb>", "<rsp>", "<act>")
N_SPECIAL = len(RESERVED) + len(STRUCTURAL)


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        if tuple(self.tokens[:N_SPECIAL]) != RESERVED + STRUCTURAL:
            raise ConfigError("vocabulary must start with the reserved and structural tokens")
        index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise ConfigError("vocabulary tokens must be distinct")
        object.__setattr__(self, "_index", index)

    @classmethod
    def from_words(cls, words: Sequence[str]) -> "Vocabulary":
        seen = dict.fromkeys(w for w in words if w not in RESERVED + STRUCTURAL)
        return cls(RESERVED + STRUCTURAL + tuple(seen))

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self._index

    def id(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise ParseError(f"unknown token {token!r}") from None

    def encode(self, text) -> tuple[int, ...]:
        words = text.split() if isinstance(text, str) else text
        return tuple(self.id(w) for w in words)

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    def content_ids(self) -> frozenset[int]:
        return frozenset(range(N_SPECIAL, len(self.tokens)))

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class SlotValue:
    entity: str
    slot: str
    value: str
    kb_index: int
    # token ids of "entity slot value"; filled in by the corpus
    tokens: tuple[int, ...] = ()


@dataclass(frozen=True)
class KnowledgeBase:
    entries: tuple[SlotValue, ...] = ()

    def __post_init__(self):
        pairs = set()
        for i, sv in enumerate(self.entries):
            if sv.kb_index != i:
                raise ShapeError(f"entry {i} carries kb_index {sv.kb_index}")
            if (sv.entity, sv.slot) in pairs:
                raise ShapeError(f"duplicate (entity, slot) pair {(sv.entity, sv.slot)}")
            pairs.add((sv.entity, sv.slot))

    def __len__(self):
        return len(self.entries)

    @property
    def entry_tokens(self) -> tuple[tuple[int, ...], ...]:
        return tuple(sv.tokens for sv in self.entries)

    @classmethod
    def from_triples(cls, triples, vocab: Vocabulary | None = None) -> "KnowledgeBase":
        entries = []
        for i, (e, s, v) in enumerate(triples):
            toks = vocab.encode(f"{e} {s} {v}") if vocab is not None else ()
            entries.append(SlotValue(e, s, v, i, toks))
        return cls(tuple(entries))


@dataclass(frozen=True)
class Turn:
    user: tuple[int, ...]
    response: tuple[int, ...]
    gold_xi: tuple[int, ...] | None = None
    # action tokens, terminated by EOS
    gold_act: tuple[int, ...] | None = None

    def __post_init__(self):
        if (self.gold_xi is None) != (self.gold_act is None):
            raise ShapeError("gold_xi and gold_act must be both present or both absent")
        if not self.response:
            raise ShapeError("response must be nonempty")

    @property
    def labeled(self) -> bool:
        return self.gold_xi is not None


@dataclass(frozen=True)
class Dialog:
    id: str
    kb: KnowledgeBase
    turns: tuple[Turn, ...]
    labeled: bool

    def __post_init__(self):
        if not self.turns:
            raise ShapeError(f"dialog {self.id} has no turns")
        if self.labeled != all(t.labeled for t in self.turns):
            raise ShapeError(f"dialog {self.id}: labeled flag disagrees with its turns")
        for t in self.turns:
            if t.gold_xi is not None and len(t.gold_xi) != len(self.kb):
                raise ShapeError(f"dialog {self.id}: gold_xi length != KB size")

    def unlabeled(self) -> "Dialog":
        turns = tuple(Turn(t.user, t.response) for t in self.turns)
        return Dialog(self.id, self.kb, turns, False)


@dataclass(frozen=True)
class Corpus:
    dialogs: tuple[Dialog, ...]
    vocabulary: Vocabulary

    def __post_init__(self):
        v = len(self.vocabulary)
        for d in self.dialogs:
            for sv in d.kb.entries:
                if sv.tokens and max(sv.tokens) >= v:
                    raise ShapeError(f"dialog {d.id}: KB token out of vocabulary")
            for t in d.turns:
                seqs = [t.user, t.response] + ([t.gold_act] if t.gold_act else [])
                for s in seqs:
                    if s and (max(s) >= v or min(s) < 0):
                        raise ShapeError(f"dialog {d.id}: token id out of vocabulary")

    def __len__(self):
        return len(self.dialogs)

    def __iter__(self):
        return iter(self.dialogs)

    def by_id(self) -> dict[str, Dialog]:
        return {d.id: d for d in self.dialogs}

    def subset(self, ids) -> "Corpus":
        table = self.by_id()
        return Corpus(tuple(table[i] for i in ids), self.vocabulary)

    def labeled_part(self) -> "Corpus":
        return Corpus(tuple(d for d in self.dialogs if d.labeled), self.vocabulary)

    def unlabeled_part(self) -> "Corpus":
        return Corpus(tuple(d for d in self.dialogs if not d.labeled), self.vocabulary)

    def n_turns(self) -> int:
        return sum(len(d.turns) for d in self.dialogs)


def build_context(dialog: Dialog, t: int) -> tuple[int, ...]:
    """Observed history u_1 SEP r_1 SEP ... u_{t-1} SEP r_{t-1} SEP."""
    if not 1 <= t <= len(dialog.turns):
        raise IndexError(f"turn {t} out of range 1..{len(dialog.turns)}")
    out: list[int] = []
    for turn in dialog.turns[: t - 1]:
        out.extend(turn.user)
        out.append(SEP)
        out.extend(turn.response)
        out.append(SEP)
    return tuple(out)


def serialize_xi(mask: Sequence[int], kb: KnowledgeBase) -> tuple[int, ...]:
    if len(mask) != len(kb):
        raise ShapeError(f"mask length {len(mask)} != KB size {len(kb)}")
    out: list[int] = []
    for bit, sv in zip(mask, kb.entries):
        if bit:
            out.extend(sv.tokens)
            out.append(SEP)
    return tuple(out) if out else (NULL,)


def parse_xi(tokens: Sequence[int], kb: KnowledgeBase) -> tuple[int, ...]:
    tokens = tuple(tokens)
    if tokens == (NULL,):
        return (0,) * len(kb)
    if not tokens:
        raise ParseError("empty knowledge field")
    mask = [0] * len(kb)
    pos = 0
    for i, chunk in enumerate(kb.entry_tokens):
        end = pos + len(chunk)
        if tokens[pos:end] == chunk and end < len(tokens) and tokens[end] == SEP:
            mask[i] = 1
            pos = end + 1
            if pos == len(tokens):
                return tuple(mask)
    raise ParseError("token sequence is not a canonical KB subset")


# ---------------------------------------------------------------------------
# synthetic corpus


SLOTS = ("price", "data", "minutes", "sms", "speed", "duration", "fee", "balance")
SYNONYMS = {
    "price": ("cost", "charge"),
    "data": ("traffic", "flow"),
    "minutes": ("calltime", "talktime"),
    "sms": ("texts", "messages"),
    "speed": ("bandwidth", "rate"),
    "duration": ("term", "period"),
    "fee": ("surcharge", "tariff"),
    "balance": ("credit", "remaining"),
}
N_STYLES = 3
CHAT_RESPONSES = (("you", "are", "welcome"), ("glad", "to", "help"), ("anything", "else"))
TEMPLATE_WORDS = (
    "what", "is", "the", "of", "and", "has", "for", "inform", "reqmore", "thanks",
) + tuple(w for r in CHAT_RESPONSES for w in r)


@dataclass(frozen=True)
class CorpusConfig:
    dialogs: int = 200
    min_turns: int = 1
    max_turns: int = 3
    min_kb: int = 2
    max_kb: int = 6
    vocab_size: int = 30
    noise_rate: float = 0.0
    labeled_fraction: float = 0.5
    seed: int = 0
    # optional extensions of the flat file
    entities: int = 12
    values_per_slot: int = 6
    chat_rate: float = 0.1
    dev_dialogs: int = 0
    test_dialogs: int = 0

    def validate(self) -> None:
        if self.dialogs <= 0:
            raise ConfigError("dialogs must be positive")
        if self.vocab_size <= 0:
            raise ConfigError("vocab_size must be positive")
        if not 1 <= self.min_turns <= self.max_turns:
            raise ConfigError("need 1 <= min_turns <= max_turns")
        if not 1 <= self.min_kb <= self.max_kb:
            raise ConfigError("need 1 <= min_kb <= max_kb")
        if self.max_kb > 3 * len(SLOTS) or self.max_kb > self.entities * len(SLOTS):
            raise ConfigError("max_kb too large for the slot inventory")
        if not 0.0 <= self.noise_rate <= 1.0 or not 0.0 <= self.labeled_fraction <= 1.0:
            raise ConfigError("rates must lie in [0, 1]")
        if not 0.0 <= self.chat_rate < 1.0:
            raise ConfigError("chat_rate must lie in [0, 1)")
        if self.entities <= 0 or self.values_per_slot <= 0:
            raise ConfigError("entities and values_per_slot must be positive")

    @classmethod
    def from_file(cls, path) -> "CorpusConfig":
        raw = read_kv(path)
        defaults = cls()
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown corpus config keys: {sorted(unknown)}")
        kwargs = {k: coerce(v, getattr(defaults, k)) for k, v in raw.items()}
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def to_file(self, path) -> None:
        write_kv(path, asdict(self))


def synthetic_vocabulary(config: CorpusConfig) -> Vocabulary:
    """The closed lexicon; depends on the config only, never on the seed."""
    words = list(TEMPLATE_WORDS) + list(SLOTS)
    words += [s for slot in SLOTS for s in SYNONYMS[slot]]
    words += [f"plan{i}" for i in range(config.entities)]
    words += [f"{slot}-{j}" for slot in SLOTS for j in range(config.values_per_slot)]
    words += [f"w{i}" for i in range(config.vocab_size)]
    return Vocabulary.from_words(words)


def response_for(entries: Sequence[SlotValue], style: int) -> list[str]:
    parts = []
    for sv in entries:
        if style == 0:
            parts.append([sv.entity, sv.slot, "is", sv.value])
        elif style == 1:
            parts.append(["the", sv.slot, "is", sv.value, "for", sv.entity])
        else:
            parts.append([sv.entity, "has", sv.slot, "of", sv.value])
    out: list[str] = []
    for i, p in enumerate(parts):
        if i:
            out.append("and")
        out.extend(p)
    return out


def _make_kb(rng, config: CorpusConfig, vocab: Vocabulary) -> KnowledgeBase:
    n = int(rng.integers(config.min_kb, config.max_kb + 1))
    n_ent = int(rng.integers(1, min(3, n, config.entities) + 1))
    n_ent = max(n_ent, math.ceil(n / len(SLOTS)))
    ents = [int(e) for e in rng.choice(config.entities, size=n_ent, replace=False)]
    chosen: set[tuple[int, int]] = set()
    for e in ents:
        chosen.add((e, int(rng.integers(len(SLOTS)))))
    rest = [(e, s) for e in ents for s in range(len(SLOTS)) if (e, s) not in chosen]
    extra = rng.choice(len(rest), size=n - len(chosen), replace=False) if n > len(chosen) else []
    chosen.update(rest[int(i)] for i in extra)
    order = {e: k for k, e in enumerate(ents)}
    triples = []
    for e, s in sorted(chosen, key=lambda p: (order[p[0]], p[1])):
        value = f"{SLOTS[s]}-{int(rng.integers(config.values_per_slot))}"
        triples.append((f"plan{e}", SLOTS[s], value))
    return KnowledgeBase.from_triples(triples, vocab)


def _insert_noise(rng, words: list[str], config: CorpusConfig) -> list[str]:
    if config.noise_rate <= 0:
        return words
    out = [words[0]]
    for w in words[1:]:
        if rng.random() < config.noise_rate:
            out.append(f"w{int(rng.integers(config.vocab_size))}")
        out.append(w)
    return out


def _make_turn(rng, kb: KnowledgeBase, config: CorpusConfig, vocab: Vocabulary, cue_p) -> Turn:
    cue = int(rng.choice(config.vocab_size, p=cue_p))
    style = cue % N_STYLES
    n = len(kb)
    if rng.random() < config.chat_rate:
        user = [f"w{cue}", "thanks"]
        act = ["reqmore"]
        response = list(CHAT_RESPONSES[style])
        mask = (0,) * n
    else:
        entities = sorted({sv.entity for sv in kb.entries}, key=lambda e: int(e[4:]))
        ent = entities[int(rng.integers(len(entities)))]
        own = [sv for sv in kb.entries if sv.entity == ent]
        k = int(rng.integers(1, min(3, len(own)) + 1))
        picked = sorted(rng.choice(len(own), size=k, replace=False).tolist())
        requested = [own[i] for i in picked]
        slot_words = []
        for sv in requested:
            if rng.random() < config.noise_rate:
                syns = SYNONYMS[sv.slot]
                slot_words.append(syns[int(rng.integers(len(syns)))])
            else:
                slot_words.append(sv.slot)
        user = [f"w{cue}", "what", "is", "the"]
        for i, w in enumerate(slot_words):
            if i:
                user.append("and")
            user.append(w)
        user += ["of", ent]
        act = ["inform"] + [sv.slot for sv in requested]
        response = response_for(requested, style)
        chosen = {sv.kb_index for sv in requested}
        mask = tuple(int(i in chosen) for i in range(n))
    user = _insert_noise(rng, user, config)
    return Turn(vocab.encode(user), vocab.encode(response), mask, vocab.encode(act) + (EOS,))


def generate_synthetic_corpus(config: CorpusConfig, seed: int | None = None, prefix: str = "dlg") -> Corpus:
    """Generate a corpus; bit-reproducible from ``(config, seed)``.

    User turns open with a cue word drawn from a Zipf law over the open
    lexicon; the cue fixes the response style, so rare cues are where extra
    (unlabeled) data pays off. ``noise_rate`` controls both slot-synonym
    substitution and filler-word insertion.
    """
    config.validate()
    seed = config.seed if seed is None else seed
    vocab = synthetic_vocabulary(config)
    rng = np.random.default_rng(seed)
    cue_p = 1.0 / np.arange(1, config.vocab_size + 1)
    cue_p /= cue_p.sum()
    dialogs = []
    for i in range(config.dialogs):
        kb = _make_kb(rng, config, vocab)
        n_turns = int(rng.integers(config.min_turns, config.max_turns + 1))
        turns = tuple(_make_turn(rng, kb, config, vocab, cue_p) for _ in range(n_turns))
        dialogs.append(Dialog(f"{prefix}{i:06d}", kb, turns, True))
    n_labeled = int(round(config.labeled_fraction * config.dialogs))
    labeled = set(rng.permutation(config.dialogs)[:n_labeled].tolist())
    dialogs = [d if i in labeled else d.unlabeled() for i, d in enumerate(dialogs)]
    return Corpus(tuple(dialogs), vocab)


def generate_splits(config: CorpusConfig) -> dict[str, Corpus]:
    """Training pools plus fully labeled dev/test sets from independent streams."""
    train = generate_synthetic_corpus(config, config.seed, prefix="train")
    out = {"labeled": train.labeled_part(), "unlabeled": train.unlabeled_part()}
    for k, (name, size) in enumerate((("dev", config.dev_dialogs), ("test", config.test_dialogs))):
        size = size or max(1, config.dialogs // 10)
        sub = CorpusConfig(**{**asdict(config), "dialogs": size, "labeled_fraction": 1.0})
        out[name] = generate_synthetic_corpus(sub, seed=config.seed * 1000 + 17 + k, prefix=f"{name}")
    return out


# ---------------------------------------------------------------------------
# file I/O


def vocab_path(path) -> Path:
    return Path(path).with_suffix(".vocab")


def save_vocabulary(vocab: Vocabulary, path) -> None:
    Path(path).write_text("\n".join(vocab.tokens) + "\n")


def load_vocabulary(path) -> Vocabulary:
    tokens = [line for line in Path(path).read_text().split("\n") if line]
    return Vocabulary(tuple(tokens))


def dialog_to_record(d: Dialog, vocab: Vocabulary) -> dict:
    turns = []
    for t in d.turns:
        xi = None if t.gold_xi is None else [i for i, b in enumerate(t.gold_xi) if b]
        act = None if t.gold_act is None else " ".join(vocab.decode(t.gold_act[:-1]))
        turns.append({
            "user": " ".join(vocab.decode(t.user)),
            "response": " ".join(vocab.decode(t.response)),
            "xi": xi,
            "act": act,
        })
    kb = [{"entity": sv.entity, "slot": sv.slot, "value": sv.value} for sv in d.kb.entries]
    return {"id": d.id, "kb": kb, "turns": turns}


def dialog_from_record(rec: dict, vocab: Vocabulary) -> Dialog:
    kb = KnowledgeBase.from_triples([(e["entity"], e["slot"], e["value"]) for e in rec["kb"]], vocab)
    turns = []
    for t in rec["turns"]:
        xi, act = t.get("xi"), t.get("act")
        if (xi is None) != (act is None):
            raise ShapeError("xi and act must be both present or both null")
        gold_xi = gold_act = None
        if xi is not None:
            if any(not isinstance(i, int) or not 0 <= i < len(kb) for i in xi):
                raise ShapeError("xi index out of range")
            gold_xi = tuple(int(i in set(xi)) for i in range(len(kb)))
            gold_act = vocab.encode(act) + (EOS,)
        turns.append(Turn(vocab.encode(t["user"]), vocab.encode(t["response"]), gold_xi, gold_act))
    labeled = bool(turns) and all(t.labeled for t in turns)
    return Dialog(str(rec["id"]), kb, tuple(turns), labeled)


def save_corpus(corpus: Corpus, path) -> None:
    path = Path(path)
    with path.open("w") as fh:
        for d in corpus.dialogs:
            fh.write(json.dumps(dialog_to_record(d, corpus.vocabulary)) + "\n")
    save_vocabulary(corpus.vocabulary, vocab_path(path))


def load_corpus(path, vocab: Vocabulary | None = None) -> Corpus:
    path = Path(path)
    vocab = vocab or load_vocabulary(vocab_path(path))
    dialogs = []
    with path.open() as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                dialogs.append(dialog_from_record(json.loads(line), vocab))
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(f"{path}: {exc}", line=n) from exc
    return Corpus(tuple(dialogs), vocab)
