"""Synthetic object-placement corpus for future captioning.

Each episode is a short robot manipulation story: grasp an object, move
it toward a piece of furniture, place it there. The future outcome is
a collision iff the grasped object is large AND the target furniture is
already occupied; object size is only observable in the grasp clip and
occupancy only in the place clip, so predicting the outcome requires
relating information across clips. Clip features are a fixed random
projection of each event's visible attributes plus Gaussian noise;
captions come from fixed templates, so the future caption is exactly
recoverable from the pre-noise attributes.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DatasetFormatError
from .transformer import BOS_ID, EOS_ID, PAD_ID, UNK_ID, N_SPECIAL_TOKENS

KINDS = ("approach", "grasp", "move", "place", "collide", "fall", "settle")
COLORS = ("red", "blue", "green", "white", "black")
CATEGORIES = ("bottle", "cup", "can", "apple", "book")
SIZES = ("small", "large")
FURNITURE = ("table", "shelf", "desk", "rack", "counter")

_SPLIT_CODES = {"train": 0, "val": 1, "test": 2}
_PROJECTION_STREAM = 100

# One-hot block layout of an event's attributes. Optional patient blocks
# reserve index 0 for "absent".
_BLOCKS = (
    ("kind", len(KINDS)),
    ("color", len(COLORS)),
    ("category", len(CATEGORIES)),
    ("size", len(SIZES)),
    ("furniture", len(FURNITURE)),
    ("occupied", 2),
    ("pcolor", len(COLORS) + 1),
    ("pcategory", len(CATEGORIES) + 1),
    ("psize", len(SIZES) + 1),
)
ATTR_DIM = sum(width for _, width in _BLOCKS)
_OFFSETS = {}
_off = 0
for _name, _width in _BLOCKS:
    _OFFSETS[_name] = _off
    _off += _width


@dataclass(frozen=True)
class Event:
    kind: str
    actor: tuple[str, str, str]                 # color, category, size
    patient: tuple[str, str, str] | None = None
    furniture: str = ""

    def __post_init__(self):
        if self.kind in ("collide", "fall") and self.patient is None:
            raise ContractError(f"{self.kind} events require a patient object")


@dataclass
class Episode:
    id: str
    clips: np.ndarray                           # (k+1, d_in)
    future_clip: np.ndarray                     # (d_in,)
    future_caption: str
    past_captions: list[str]
    meta: dict
    events: list[Event] | None = None           # present only on generated episodes

    @property
    def k(self) -> int:
        return self.clips.shape[0] - 1


@dataclass
class TokenSequence:
    """Fixed layout [BOS, words..., EOS, PAD...]; valid_len counts non-pad slots."""

    ids: np.ndarray
    valid_len: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        v = self.valid_len
        if not 2 <= v <= len(self.ids):
            raise ContractError(f"valid_len {v} outside [2, {len(self.ids)}]")
        if self.ids[0] != BOS_ID:
            raise ContractError("token sequence must start with BOS")
        if self.ids[v - 1] != EOS_ID or np.count_nonzero(self.ids[:v] == EOS_ID) != 1:
            raise ContractError("token sequence must contain exactly one EOS, at the end of the valid region")
        if np.any(self.ids[v:] != PAD_ID):
            raise ContractError("only PAD may follow EOS")

    def words(self) -> np.ndarray:
        return self.ids[1 : self.valid_len - 1]


class Vocabulary:
    """Token/id maps plus training-split frequency counts.

    Ids 0-3 are reserved for BOS/EOS/PAD/UNK; remaining tokens are
    ordered by descending training frequency (ties alphabetical).
    """

    SPECIALS = ("<bos>", "<eos>", "<pad>", "<unk>")

    def __init__(self, tokens: list[str], freq: list[int]):
        if len(tokens) != len(freq):
            raise DatasetFormatError("vocabulary tokens and freq lengths differ")
        if tuple(tokens[:N_SPECIAL_TOKENS]) != self.SPECIALS:
            raise DatasetFormatError(f"vocabulary must start with {self.SPECIALS}")
        self.tokens = list(tokens)
        self.freq = list(int(f) for f in freq)
        self._ids = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def frequency(self, token_id: int) -> int:
        return self.freq[token_id]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"tokens": self.tokens, "freq": self.freq}, fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict) or set(raw) != {"tokens", "freq"}:
            raise DatasetFormatError("vocabulary file must be a JSON object with tokens and freq")
        return cls(raw["tokens"], raw["freq"])


_WORD_RE = re.compile(r"[^a-z0-9 ]+")


def caption_words(caption: str) -> list[str]:
    """Lowercase, punctuation-stripped, whitespace-split tokens."""
    return _WORD_RE.sub(" ", caption.lower()).split()


def build_vocabulary(train_episodes) -> Vocabulary:
    counts: dict[str, int] = {}
    for ep in train_episodes:
        for caption in [ep.future_caption, *ep.past_captions]:
            for w in caption_words(caption):
                counts[w] = counts.get(w, 0) + 1
    ordered = sorted(counts, key=lambda w: (-counts[w], w))
    tokens = list(Vocabulary.SPECIALS) + ordered
    freq = [0] * N_SPECIAL_TOKENS + [counts[w] for w in ordered]
    return Vocabulary(tokens, freq)


def tokenize(caption: str, vocab: Vocabulary, max_len: int) -> TokenSequence:
    """Caption -> fixed-width id sequence; overlong captions are truncated
    to max_len - 2 words so EOS always fits."""
    words = caption_words(caption)[: max_len - 2]
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    ids[0] = BOS_ID
    for i, w in enumerate(words):
        ids[1 + i] = vocab.id_of(w)
    ids[1 + len(words)] = EOS_ID
    return TokenSequence(ids=ids, valid_len=len(words) + 2)


def detokenize(ids, vocab: Vocabulary) -> str:
    """Ids -> caption string; stops at EOS, skips BOS/PAD."""
    out = []
    for i in np.asarray(ids).tolist():
        if i == EOS_ID:
            break
        if i in (BOS_ID, PAD_ID):
            continue
        out.append(vocab.tokens[i])
    return " ".join(out)


# ---------------------------------------------------------------------------
# Templates. The future caption is a pure function of the attributes, so
# an attribute-level decoder is a 100%-exact performance ceiling.

def _caption_for(event: Event) -> str:
    color, category, size = event.actor
    if event.kind == "grasp":
        return f"the robot grasps the {size} {color} {category}"
    if event.kind == "move":
        return f"the robot moves the {color} {category} toward the {event.furniture}"
    if event.kind == "place":
        if event.patient is not None:
            pc, pk, _ = event.patient
            return (
                f"the robot places the {color} {category} on the {event.furniture} "
                f"beside the {pc} {pk}"
            )
        return f"the robot places the {color} {category} on the empty {event.furniture}"
    if event.kind == "collide":
        pc, pk, _ = event.patient
        return (
            f"the {color} {category} may contact the {pc} {pk} "
            f"and the {pc} {pk} may fall"
        )
    if event.kind == "settle":
        return f"the {color} {category} settles safely on the {event.furniture}"
    raise ContractError(f"no caption template for event kind {event.kind!r}")


def render_future_caption(attrs: dict) -> str:
    """Attribute dict (as stored in episode meta) -> future caption."""
    actor = (attrs["color"], attrs["category"], attrs["size"])
    if attrs["collide"]:
        patient = (attrs["pcolor"], attrs["pcategory"], attrs["psize"])
        return _caption_for(Event("collide", actor, patient, attrs["furniture"]))
    return _caption_for(Event("settle", actor, None, attrs["furniture"]))


# ---------------------------------------------------------------------------
# Feature encoding.

def _one_hot(vec: np.ndarray, block: str, index: int) -> None:
    vec[_OFFSETS[block] + index] = 1.0


def encode_event(event: Event, reveal: set[str]) -> np.ndarray:
    """Attribute one-hot of the blocks visible in this event's clip."""
    vec = np.zeros(ATTR_DIM)
    _one_hot(vec, "kind", KINDS.index(event.kind))
    color, category, size = event.actor
    if "color" in reveal:
        _one_hot(vec, "color", COLORS.index(color))
    if "category" in reveal:
        _one_hot(vec, "category", CATEGORIES.index(category))
    if "size" in reveal:
        _one_hot(vec, "size", SIZES.index(size))
    if "furniture" in reveal:
        _one_hot(vec, "furniture", FURNITURE.index(event.furniture))
    if "occupied" in reveal:
        _one_hot(vec, "occupied", int(event.patient is not None))
        if event.patient is not None:
            pc, pk, ps = event.patient
            _one_hot(vec, "pcolor", 1 + COLORS.index(pc))
            _one_hot(vec, "pcategory", 1 + CATEGORIES.index(pk))
            _one_hot(vec, "psize", 1 + SIZES.index(ps))
        else:
            _one_hot(vec, "pcolor", 0)
            _one_hot(vec, "pcategory", 0)
            _one_hot(vec, "psize", 0)
    return vec


def _reveal_for(kind: str, k: int) -> set[str]:
    base = {"color", "category"}
    if kind == "grasp":
        return base | {"size"}
    if kind == "move":
        return base | {"furniture"}
    if kind == "place":
        reveal = base | {"furniture", "occupied"}
        if k == 0:
            reveal |= {"size"}     # single-clip episodes must still determine the outcome
        return reveal
    # future events encode everything they involve
    return base | {"size", "furniture", "occupied"}


def feature_projection(seed: int, d_in: int) -> np.ndarray:
    """Fixed random map from attribute one-hots to clip feature space."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, _PROJECTION_STREAM]))
    return rng.standard_normal((ATTR_DIM, d_in)) / np.sqrt(ATTR_DIM)


def _past_kinds(k: int) -> list[str]:
    if k == 0:
        return ["place"]
    return ["grasp"] + ["move"] * (k - 1) + ["place"]


def generate_episode(ep_id: str, rng: np.random.Generator, k: int, d_in: int,
                     projection: np.ndarray, noise_sigma: float) -> Episode:
    collide = bool(rng.random() < 0.5)
    if collide:
        size, occupied = "large", True
    else:
        size, occupied = [("small", False), ("small", True), ("large", False)][int(rng.integers(3))]
    color = COLORS[int(rng.integers(len(COLORS)))]
    category = CATEGORIES[int(rng.integers(len(CATEGORIES)))]
    furniture = FURNITURE[int(rng.integers(len(FURNITURE)))]
    patient = None
    if occupied:
        while True:
            pc = COLORS[int(rng.integers(len(COLORS)))]
            pk = CATEGORIES[int(rng.integers(len(CATEGORIES)))]
            if (pc, pk) != (color, category):
                break
        patient = (pc, pk, SIZES[int(rng.integers(len(SIZES)))])

    actor = (color, category, size)
    past = [
        Event(kind, actor, patient if kind == "place" else None, furniture)
        for kind in _past_kinds(k)
    ]
    future = Event("collide", actor, patient, furniture) if collide else Event("settle", actor, None, furniture)

    def features(event: Event) -> np.ndarray:
        clean = encode_event(event, _reveal_for(event.kind, k)) @ projection
        return clean + noise_sigma * rng.standard_normal(d_in)

    clips = np.stack([features(e) for e in past])
    future_clip = features(future)
    attrs = {
        "collide": collide,
        "color": color,
        "category": category,
        "size": size,
        "furniture": furniture,
        "occupied": occupied,
        "pcolor": patient[0] if patient else None,
        "pcategory": patient[1] if patient else None,
        "psize": patient[2] if patient else None,
    }
    return Episode(
        id=ep_id,
        clips=clips,
        future_clip=future_clip,
        future_caption=_caption_for(future),
        past_captions=[_caption_for(e) for e in past],
        meta={"collide": collide, "attrs": attrs},
        events=past + [future],
    )


def generate_dataset(seed: int, n_train: int = 800, n_val: int = 100, n_test: int = 100,
                     k: int = 2, d_in: int = 32, noise_sigma: float = 0.05) -> dict[str, list[Episode]]:
    """Three disjoint splits, a pure function of (seed, sizes, k, d_in, sigma).

    Each episode draws from its own seed stream, so generation order (or
    parallel generation) cannot change the output.
    """
    for name, n in (("n_train", n_train), ("n_val", n_val), ("n_test", n_test)):
        if n < 1:
            raise ContractError(f"{name} must be >= 1, got {n}")
    if k < 0 or d_in < 1:
        raise ContractError("k must be >= 0 and d_in >= 1")
    projection = feature_projection(seed, d_in)
    splits: dict[str, list[Episode]] = {}
    for split, n in (("train", n_train), ("val", n_val), ("test", n_test)):
        code = _SPLIT_CODES[split]
        episodes = []
        for i in range(n):
            rng = np.random.default_rng(np.random.SeedSequence([seed, code, i]))
            episodes.append(generate_episode(f"{split}-{i:05d}", rng, k, d_in, projection, noise_sigma))
        splits[split] = episodes
    return splits


# ---------------------------------------------------------------------------
# JSONL persistence. Floats serialize via repr (shortest round-trip form),
# so save -> load reproduces every feature bit-exactly.

_REQUIRED_FIELDS = ("id", "clips", "future_clip", "future_caption", "past_captions", "meta")


def save_dataset(episodes, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            rec = {
                "id": ep.id,
                "clips": [list(map(float, row)) for row in np.asarray(ep.clips)],
                "future_clip": list(map(float, np.asarray(ep.future_clip))),
                "future_caption": ep.future_caption,
                "past_captions": list(ep.past_captions),
                "meta": ep.meta,
            }
            fh.write(json.dumps(rec) + "\n")


def _load_record(rec: dict, line_no: int) -> Episode:
    if not isinstance(rec, dict):
        raise DatasetFormatError(f"line {line_no}: episode record must be a JSON object")
    missing = [f for f in _REQUIRED_FIELDS if f not in rec]
    if missing:
        raise DatasetFormatError(f"line {line_no}: missing field {missing[0]!r}")
    unknown = [f for f in rec if f not in _REQUIRED_FIELDS]
    if unknown:
        raise DatasetFormatError(f"line {line_no}: unknown field {unknown[0]!r}")
    meta = rec["meta"]
    if not isinstance(meta, dict) or "collide" not in meta or not isinstance(meta["collide"], bool):
        raise DatasetFormatError(f"line {line_no}: field 'meta' must carry a boolean 'collide'")
    try:
        clips = np.asarray(rec["clips"], dtype=np.float64)
        future_clip = np.asarray(rec["future_clip"], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise DatasetFormatError(f"line {line_no}: non-numeric clip features ({exc})") from None
    if clips.ndim != 2 or clips.shape[0] < 1:
        raise DatasetFormatError(f"line {line_no}: field 'clips' must be a non-empty list of feature rows")
    if future_clip.shape != (clips.shape[1],):
        raise DatasetFormatError(
            f"line {line_no}: field 'future_clip' width {future_clip.shape} does not match clips {clips.shape}"
        )
    if not isinstance(rec["future_caption"], str) or not isinstance(rec["past_captions"], list):
        raise DatasetFormatError(f"line {line_no}: caption fields malformed")
    return Episode(
        id=str(rec["id"]),
        clips=clips,
        future_clip=future_clip,
        future_caption=rec["future_caption"],
        past_captions=[str(c) for c in rec["past_captions"]],
        meta=meta,
    )


def load_dataset(path) -> list[Episode]:
    episodes = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"line {line_no}: invalid JSON ({exc.msg})") from None
            episodes.append(_load_record(rec, line_no))
    return episodes
