"""Dataset ingestion: tab-separated rating and feature files, per-field
vocabularies with open-set truncation, entity feature encoding, and seeded
8:1:1 splits. All steps are deterministic given the input files and the seed.

File formats:
  ratings:  user<TAB>item<TAB>rating[<TAB>timestamp]
  features: entity<TAB>token1|token2|...          (token list may be empty)
  manifest: JSON declaring the ratings path, min_ratings, tag_top_t, and one
            entry per feature file: {field, owner, path, open}
"""

from __future__ import annotations

import hashlib
import json
import os
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import IoError, ParseError
from .seeding import derive_seed

OWNERS = ("user", "item")


@dataclass(frozen=True)
class Interaction:
    user: int
    item: int
    rating: float
    timestamp: int | None = None


@dataclass(frozen=True)
class FieldSpec:
    """One feature file: field name, owning side, path, open/closed vocabulary."""

    name: str
    owner: str
    path: str
    open_vocab: bool = False

    def __post_init__(self):
        if self.owner not in OWNERS:
            raise ParseError(f"unknown owner {self.owner!r} for field {self.name!r}")


@dataclass
class DatasetManifest:
    ratings_path: str
    features: list[FieldSpec] = field(default_factory=list)
    min_ratings: int = 5
    tag_top_t: int = 50

    @classmethod
    def from_file(cls, path: str) -> "DatasetManifest":
        if not os.path.exists(path):
            raise IoError(f"dataset manifest not found: {path}")
        try:
            with open(path, encoding="utf-8") as f:
                raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(f"dataset manifest {path}: {e}") from e
        base = os.path.dirname(os.path.abspath(path))
        try:
            specs = [FieldSpec(name=f["field"], owner=f["owner"],
                               path=os.path.join(base, f["path"]),
                               open_vocab=bool(f.get("open", False)))
                     for f in raw.get("features", [])]
            return cls(ratings_path=os.path.join(base, raw["ratings"]),
                       features=specs,
                       min_ratings=int(raw.get("min_ratings", 5)),
                       tag_top_t=int(raw.get("tag_top_t", 50)))
        except (KeyError, TypeError) as e:
            raise ParseError(f"dataset manifest {path}: missing or invalid key {e}") from e

    def fields_for(self, owner: str) -> list[FieldSpec]:
        return [f for f in self.features if f.owner == owner]


class FeatureVocab:
    """Per-field token-to-index maps. Canonical field order is user fields then
    item fields, each in manifest order; every later encoding uses this order.
    Each field reserves one extra index (after its tokens) for unknowns."""

    def __init__(self, specs: list[FieldSpec], tokens: dict[str, dict[str, int]]):
        self.user_fields = [s.name for s in specs if s.owner == "user"]
        self.item_fields = [s.name for s in specs if s.owner == "item"]
        self.owner = {s.name: s.owner for s in specs}
        self.tokens = tokens

    @property
    def fields(self) -> list[str]:
        return self.user_fields + self.item_fields

    def fields_of(self, owner: str) -> list[str]:
        return self.user_fields if owner == "user" else self.item_fields

    def unknown_index(self, fname: str) -> int:
        return len(self.tokens[fname])

    def field_size(self, fname: str) -> int:
        """Number of embedding rows for the field: tokens plus the unknown slot."""
        return len(self.tokens[fname]) + 1

    def offsets(self) -> dict[str, int]:
        """Row offset of each field inside the shared embedding table."""
        out, acc = {}, 0
        for fname in self.fields:
            out[fname] = acc
            acc += self.field_size(fname)
        return out

    @property
    def total_rows(self) -> int:
        return sum(self.field_size(f) for f in self.fields)

    def encode_token(self, fname: str, token: str) -> int:
        return self.tokens[fname].get(token, self.unknown_index(fname))

    def to_dict(self) -> dict:
        return {"user_fields": list(self.user_fields),
                "item_fields": list(self.item_fields),
                "tokens": {f: dict(self.tokens[f]) for f in self.fields},
                "owner": dict(self.owner)}


@dataclass
class EntityFeatures:
    """Per-field category indices for one entity: exactly one slot per owned
    field, never empty (missing values fall back to the unknown index)."""

    entity_id: int
    slots: list[list[int]]


@dataclass
class DatasetSplit:
    train: list[Interaction]
    validation: list[Interaction]
    test: list[Interaction]
    seed: int

    def select(self, name: str) -> list[Interaction]:
        if name not in ("train", "validation", "test"):
            raise ValueError(f"unknown split selector {name!r}")
        return getattr(self, name)


def _read_lines(path: str):
    if not os.path.exists(path):
        raise IoError(f"file not found: {path}")
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\r\n")
            if line:
                yield lineno, line


def load_ratings(path: str, min_ratings: int = 5):
    """Parse a ratings file, drop users with fewer than min_ratings interactions
    (once, before any split), and index surviving users/items in
    first-appearance order. Returns (interactions, user_ids, item_ids)."""
    rows = []
    for lineno, line in _read_lines(path):
        parts = line.split("\t")
        if len(parts) not in (3, 4):
            raise ParseError(f"{path} line {lineno}: expected 3 or 4 tab-separated "
                             f"fields, got {len(parts)}")
        user_raw, item_raw = parts[0], parts[1]
        try:
            rating = float(parts[2])
        except ValueError:
            raise ParseError(f"{path} line {lineno}: bad rating {parts[2]!r}") from None
        if not np.isfinite(rating) or not (1.0 <= rating <= 5.0):
            raise ParseError(f"{path} line {lineno}: rating outside [1,5]: {parts[2]}")
        ts = None
        if len(parts) == 4:
            try:
                ts = int(parts[3])
            except ValueError:
                raise ParseError(f"{path} line {lineno}: bad timestamp {parts[3]!r}") from None
        rows.append((user_raw, item_raw, rating, ts))

    counts = Counter(r[0] for r in rows)
    user_ids: dict[str, int] = {}
    item_ids: dict[str, int] = {}
    interactions: list[Interaction] = []
    for user_raw, item_raw, rating, ts in rows:
        if counts[user_raw] < min_ratings:
            continue
        u = user_ids.setdefault(user_raw, len(user_ids))
        i = item_ids.setdefault(item_raw, len(item_ids))
        interactions.append(Interaction(user=u, item=i, rating=rating, timestamp=ts))
    return interactions, user_ids, item_ids


def split_dataset(interactions: list[Interaction], seed: int,
                  by_time: bool = False) -> DatasetSplit:
    """Deterministic 8:1:1 split: seeded shuffle (or a stable timestamp sort
    with --split-by-time) followed by an 80/10/10 cut."""
    n = len(interactions)
    if n < 10:
        raise ValueError("dataset too small to split")
    if by_time:
        if any(x.timestamp is None for x in interactions):
            raise ValueError("split by time requires timestamps on every interaction")
        order = sorted(range(n), key=lambda j: interactions[j].timestamp)
    else:
        rng = np.random.default_rng(seed)
        order = rng.permutation(n).tolist()
    shuffled = [interactions[j] for j in order]
    n_val = n // 10
    n_test = n // 10
    n_train = n - n_val - n_test
    return DatasetSplit(train=shuffled[:n_train],
                        validation=shuffled[n_train:n_train + n_val],
                        test=shuffled[n_train + n_val:],
                        seed=seed)


def parse_feature_file(path: str) -> dict[str, list[str]]:
    """entity<TAB>token1|token2|... per line; the token list may be empty.
    Later lines for the same entity extend its token list."""
    out: dict[str, list[str]] = {}
    for lineno, line in _read_lines(path):
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError(f"{path} line {lineno}: expected 2 tab-separated fields, "
                             f"got {len(parts)}")
        entity, blob = parts
        tokens = [t for t in blob.split("|") if t != ""]
        out.setdefault(entity, []).extend(tokens)
    return out


def build_feature_vocab(specs: list[FieldSpec], tag_top_t: int,
                        population: dict[str, set] | None = None) -> FeatureVocab:
    """Index each field's tokens. Closed fields are indexed exhaustively in
    first-appearance order. Open fields keep only the tag_top_t most frequent
    tokens (frequency = number of distinct entities using the token, counted
    over the filtered population when given; ties broken lexicographically)."""
    tokens: dict[str, dict[str, int]] = {}
    for spec in specs:
        raw = parse_feature_file(spec.path)
        if spec.open_vocab:
            counts: Counter = Counter()
            for entity, toks in raw.items():
                if population is not None and entity not in population[spec.owner]:
                    continue
                counts.update(set(toks))
            ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
            tokens[spec.name] = {tok: i for i, (tok, _) in enumerate(ranked[:tag_top_t])}
        else:
            index: dict[str, int] = {}
            for toks in raw.values():
                for tok in toks:
                    index.setdefault(tok, len(index))
            tokens[spec.name] = index
    return FeatureVocab(specs, tokens)


def encode_entity_features(raw_by_field: dict[str, dict[str, list[str]]],
                           vocab: FeatureVocab, id_map: dict[str, int],
                           owner: str) -> list[EntityFeatures]:
    """One EntityFeatures per entity with exactly one slot per owned field.
    Tokens outside a field's vocabulary are dropped; a slot with nothing
    retained (including entities absent from the file) holds the unknown
    index."""
    fields = vocab.fields_of(owner)
    table: list[EntityFeatures] = [None] * len(id_map)  # type: ignore[list-item]
    for raw_id, dense in id_map.items():
        slots = []
        for fname in fields:
            toks = raw_by_field.get(fname, {}).get(raw_id, [])
            kept = sorted({vocab.tokens[fname][t] for t in toks if t in vocab.tokens[fname]})
            slots.append(kept if kept else [vocab.unknown_index(fname)])
        table[dense] = EntityFeatures(entity_id=dense, slots=slots)
    return table


@dataclass
class PackedFeatures:
    """Vectorized view of one side's EntityFeatures: per field, padded global
    embedding-row indices with a validity mask, for batched mean pooling."""

    fields: list[str]
    index: list[np.ndarray]   # per field: (num_entities, width) int64
    mask: list[np.ndarray]    # per field: (num_entities, width) float64 in {0,1}
    counts: list[np.ndarray]  # per field: (num_entities,) float64, >= 1


def pack_features(entities: list[EntityFeatures], vocab: FeatureVocab,
                  owner: str) -> PackedFeatures:
    fields = vocab.fields_of(owner)
    offsets = vocab.offsets()
    n = len(entities)
    index, mask, counts = [], [], []
    for fi, fname in enumerate(fields):
        width = max((len(e.slots[fi]) for e in entities), default=1)
        idx = np.zeros((n, width), dtype=np.int64)
        msk = np.zeros((n, width), dtype=np.float64)
        for e in entities:
            vals = e.slots[fi]
            idx[e.entity_id, :len(vals)] = np.asarray(vals, dtype=np.int64) + offsets[fname]
            msk[e.entity_id, :len(vals)] = 1.0
        index.append(idx)
        mask.append(msk)
        counts.append(msk.sum(axis=1))
    return PackedFeatures(fields=fields, index=index, mask=mask, counts=counts)


@dataclass
class PreparedData:
    """Everything downstream of ingestion: vocabularies, encoded features,
    dense interactions, and the seeded split."""

    manifest: DatasetManifest
    vocab: FeatureVocab
    interactions: list[Interaction]
    split: DatasetSplit
    user_ids: dict[str, int]
    item_ids: dict[str, int]
    user_features: list[EntityFeatures]
    item_features: list[EntityFeatures]
    user_packed: PackedFeatures
    item_packed: PackedFeatures

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    def digest(self) -> str:
        """Content hash used to detect drift between a checkpoint and the data
        pipeline it was trained on."""
        h = hashlib.sha256()
        h.update(json.dumps(self.vocab.to_dict(), sort_keys=True,
                            separators=(",", ":")).encode())
        h.update(json.dumps({"users": self.num_users, "items": self.num_items,
                             "seed": self.split.seed},
                            sort_keys=True, separators=(",", ":")).encode())
        for x in self.interactions:
            h.update(f"{x.user},{x.item},{x.rating!r},{x.timestamp}\n".encode())
        return h.hexdigest()


def build_dataset(manifest: DatasetManifest, seed: int,
                  by_time: bool = False) -> PreparedData:
    """Run the full pipeline: load + filter ratings, build vocabularies over the
    filtered population, encode features, split."""
    interactions, user_ids, item_ids = load_ratings(manifest.ratings_path,
                                                    manifest.min_ratings)
    population = {"user": set(user_ids), "item": set(item_ids)}
    vocab = build_feature_vocab(manifest.features, manifest.tag_top_t, population)
    raw_user = {s.name: parse_feature_file(s.path) for s in manifest.fields_for("user")}
    raw_item = {s.name: parse_feature_file(s.path) for s in manifest.fields_for("item")}
    user_feats = encode_entity_features(raw_user, vocab, user_ids, "user")
    item_feats = encode_entity_features(raw_item, vocab, item_ids, "item")
    split = split_dataset(interactions, derive_seed(seed, "split"), by_time=by_time)
    return PreparedData(manifest=manifest, vocab=vocab, interactions=interactions,
                        split=split, user_ids=user_ids, item_ids=item_ids,
                        user_features=user_feats, item_features=item_feats,
                        user_packed=pack_features(user_feats, vocab, "user"),
                        item_packed=pack_features(item_feats, vocab, "item"))


def interactions_to_arrays(interactions: list[Interaction]):
    """Column arrays (users, items, ratings) for batched model code."""
    users = np.asarray([x.user for x in interactions], dtype=np.int64)
    items = np.asarray([x.item for x in interactions], dtype=np.int64)
    ratings = np.asarray([x.rating for x in interactions], dtype=np.float64)
    return users, items, ratings
