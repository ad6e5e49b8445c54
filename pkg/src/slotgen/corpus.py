"""Deterministic synthetic shopping-dialogue corpus with gold slot tags.

Dialogues are built from templates over a generated catalog. The gold
system response for every turn is a pure function of the cumulative slot
constraints, the displayed items, and the knowledge base, so a model can
only produce correct responses by actually extracting that information:

* browse/refine answers echo the constraint values stated by the user;
* positional questions ask about an attribute that was never constrained,
  answerable only from the displayed items' features;
* endorsement and styling questions are answerable only from the KB.

Several value tokens deliberately belong to both the color and the
material inventories; their tag depends on where they sit relative to the
other slots in the utterance, which is what makes tagging non-trivial.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, ParseError, ValidationError

ITEM_TYPES = ("bag", "tote", "dress", "shirt", "jacket", "skirt", "shoe", "boot", "scarf", "hat")
# Colors and materials share one token inventory: a value token's slot type
# is decidable only from the utterance structure (first value = color), which
# is what makes the tagging task non-trivial.
SHADES = ("olive", "sand", "rust", "pearl", "charcoal", "moss", "clay", "slate", "ivory", "ash")
COLORS = SHADES
MATERIALS = SHADES
SIZES = ("small", "medium", "large", "32", "36", "40")
BRANDS = ("zara", "nike", "gucci", "prada", "levis", "puma", "fossil", "adidas")
PRICES = ("299", "499", "799", "999", "1299", "1999")
POSITIONS = ("1st", "2nd", "3rd", "4th", "5th")
CELEBRITIES = ("arjun", "meera", "kabir", "diya", "rohan", "sana")
STYLES = ("party", "casual", "formal", "sports")

MAX_IMAGES = 5
_FEATURE_SEED = 0xF00D

_GREETINGS = ("hello", "hi", "hey there", "excuse me", "good day")
_SUFFIXES = ("thanks", "please", "thank you", "for me", "right now")


@dataclass
class CatalogItem:
    id: int
    item_type: str
    color: str
    material: str
    size: str
    brand: str
    price: str

    def attributes(self) -> tuple[str, ...]:
        return (self.item_type, self.color, self.material, self.size, self.brand, self.price)


@dataclass
class Turn:
    role: str  # "user" | "system"
    tokens: list[str]
    image_ids: list[int] = field(default_factory=list)
    tags: list[str] | None = None  # present on user turns
    kb_ref: str | None = None


@dataclass
class DialogueRecord:
    id: str
    turns: list[Turn]


@dataclass
class KBStore:
    celebrities: dict[str, list[str]] = field(default_factory=dict)
    queries: dict[str, dict[str, str]] = field(default_factory=dict)


def generate_catalog(n: int, seed: int) -> list[CatalogItem]:
    """n items with attributes drawn uniformly from the fixed inventories."""
    if n < 1:
        raise InputError(f"catalog size must be >= 1, got {n}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xCA7]))
    items = []
    for i in range(n):
        color = COLORS[rng.integers(len(COLORS))]
        material = MATERIALS[rng.integers(len(MATERIALS))]
        while material == color:  # same-token color/material would be unreadable
            material = MATERIALS[rng.integers(len(MATERIALS))]
        items.append(
            CatalogItem(
                id=i,
                item_type=ITEM_TYPES[rng.integers(len(ITEM_TYPES))],
                color=color,
                material=material,
                size=SIZES[rng.integers(len(SIZES))],
                brand=BRANDS[rng.integers(len(BRANDS))],
                price=PRICES[rng.integers(len(PRICES))],
            )
        )
    return items


def generate_kb(seed: int) -> KBStore:
    """Celebrity endorsement lists and style-query constraint expansions."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xB0]))
    kb = KBStore()
    for name in CELEBRITIES:
        k = int(rng.integers(2, 5))
        picks = rng.permutation(len(BRANDS))[:k]
        kb.celebrities[name] = sorted(BRANDS[i] for i in picks)
    for style in STYLES:
        kb.queries[style] = {
            "color": COLORS[rng.integers(len(COLORS))],
            "item_type": ITEM_TYPES[rng.integers(len(ITEM_TYPES))],
        }
    return kb


# ---------------------------------------------------------------------------
# Image feature stub
# ---------------------------------------------------------------------------

_ATTR_LISTS = (ITEM_TYPES, COLORS, MATERIALS, SIZES, BRANDS, PRICES)
_ONEHOT_DIM = sum(len(v) for v in _ATTR_LISTS)
_proj_cache: dict[int, np.ndarray] = {}
_feature_cache: dict[tuple, np.ndarray] = {}


def image_feature(item: CatalogItem, d_img: int) -> np.ndarray:
    """Deterministic unit-norm feature vector standing in for a CNN embedding.

    Attributes are one-hot encoded, concatenated, pushed through a frozen
    random projection, and L2-normalized, so items sharing attributes share
    feature structure.
    """
    if d_img < 8:
        raise InputError(f"d_img must be >= 8, got {d_img}")
    key = (item.attributes(), d_img)
    cached = _feature_cache.get(key)
    if cached is not None:
        return cached
    proj = _proj_cache.get(d_img)
    if proj is None:
        rng = np.random.default_rng(np.random.SeedSequence([_FEATURE_SEED, d_img]))
        proj = rng.standard_normal((_ONEHOT_DIM, d_img))
        _proj_cache[d_img] = proj
    onehot = np.zeros(_ONEHOT_DIM)
    offset = 0
    for values, attr in zip(_ATTR_LISTS, item.attributes()):
        onehot[offset + values.index(attr)] = 1.0
        offset += len(values)
    feat = onehot @ proj
    feat = feat / np.linalg.norm(feat)
    _feature_cache[key] = feat
    return feat


# ---------------------------------------------------------------------------
# Dialogue generation
# ---------------------------------------------------------------------------


def _tagged(parts: list[tuple[str, str]]) -> tuple[list[str], list[str]]:
    """Expand (text, tag) chunks into aligned token/tag lists.

    A tag names the slot type of the chunk; multi-token chunks get B-/I-.
    """
    tokens: list[str] = []
    tags: list[str] = []
    for text, slot in parts:
        words = text.split()
        for i, w in enumerate(words):
            tokens.append(w)
            if slot == "O":
                tags.append("O")
            else:
                tags.append(("B-" if i == 0 else "I-") + slot)
    return tokens, tags


def _matches(item: CatalogItem, constraints: dict[str, str]) -> bool:
    return all(getattr(item, k) == v for k, v in constraints.items())


def _pick(rng: np.random.Generator, seq):
    return seq[int(rng.integers(len(seq)))]


class _DialogueBuilder:
    def __init__(self, catalog, kb, rng, n_turn_pairs, kb_rate):
        self.catalog = catalog
        self.kb = kb
        self.rng = rng
        self.n_pairs = n_turn_pairs
        self.turns: list[Turn] = []
        self.constraints: dict[str, str] = {}
        self.shown: list[CatalogItem] = []
        self.prev_system_showed = False
        self.kb_pair = -1
        self.kb_kind = None
        if n_turn_pairs >= 2 and rng.random() < kb_rate:
            self.kb_pair = int(rng.integers(1, n_turn_pairs))
            self.kb_kind = "celebrity" if rng.random() < 0.5 else "query"

    def build(self) -> list[Turn]:
        self._browse(first=True)
        for pair in range(1, self.n_pairs):
            if pair == self.kb_pair:
                if self.kb_kind == "celebrity":
                    self._kb_celebrity()
                else:
                    self._kb_style()
                continue
            options = ["refine"]
            if self.prev_system_showed:
                options.append("position")
            choice = _pick(self.rng, options)
            if choice == "refine" and not self._refine():
                self._browse(first=False)
            elif choice == "position":
                self._position_query()
        return self.turns

    # -- turn builders ------------------------------------------------------

    def _user(self, parts, kb_ref=None):
        rng = self.rng
        if rng.random() < 0.5:
            parts = [(_pick(rng, _GREETINGS), "O")] + parts
        if rng.random() < 0.4:
            parts = parts + [(_pick(rng, _SUFFIXES), "O")]
        tokens, tags = _tagged(parts)
        self.turns.append(Turn("user", tokens, [], tags, kb_ref))

    def _system(self, text: str, items: list[CatalogItem] | None = None):
        ids = [it.id for it in items] if items else []
        self.turns.append(Turn("system", text.split(), ids, None, None))
        self.prev_system_showed = bool(ids)
        if ids:
            self.shown = list(items)

    def _select_items(self) -> list[CatalogItem]:
        matches = [it for it in self.catalog if _matches(it, self.constraints)]
        k = min(len(matches), 1 + int(self.rng.integers(MAX_IMAGES)))
        order = self.rng.permutation(len(matches))
        return [matches[i] for i in order[:k]]

    def _browse(self, first: bool):
        rng = self.rng
        target = _pick(rng, self.catalog)
        self.constraints = {
            "color": target.color,
            "material": target.material,
            "item_type": target.item_type,
        }
        want_brand = self.kb_kind == "celebrity" or rng.random() < 0.5
        if want_brand:
            self.constraints["brand"] = target.brand
        if rng.random() < 0.3:
            self.constraints["size"] = target.size
        c, m, t = target.color, target.material, target.item_type
        # Value order is the grammar: the first shade token is always the
        # color, the second the material, wherever the item noun sits.
        form = int(rng.integers(4))
        if form == 0:
            parts = [("show me a", "O"), (c, "color"), (m, "material"), (t, "item_type")]
        elif form == 1:
            parts = [("i want a", "O"), (c, "color"), (m, "material"), (t, "item_type")]
        elif form == 2:
            parts = [("do you have a", "O"), (t, "item_type"), ("in", "O"),
                     (c, "color"), ("and", "O"), (m, "material")]
        else:
            parts = [("looking for a", "O"), (t, "item_type"), ("in", "O"),
                     (c, "color"), (m, "material")]
        if want_brand:
            parts += [("by", "O"), (target.brand, "brand")]
        if "size" in self.constraints:
            parts += [("in size", "O"), (target.size, "size")]
        self._user(parts)
        reply = f"here are {c} {m} {t} options"
        if want_brand:
            reply += f" by {target.brand}"
        if "size" in self.constraints:
            reply += f" in size {self.constraints['size']}"
        self._system(reply, self._select_items())

    def _refine(self) -> bool:
        rng = self.rng
        attr = _pick(rng, ("color", "material"))
        rest = {k: v for k, v in self.constraints.items() if k != attr}
        alts = [
            it
            for it in self.catalog
            if _matches(it, rest) and getattr(it, attr) != self.constraints.get(attr)
        ]
        if not alts:
            return False
        alt = _pick(rng, alts)
        value = getattr(alt, attr)
        self.constraints[attr] = value
        if attr == "color":
            lead = _pick(rng, ("same but in", "show the same in"))
            parts = [(lead, "O"), (value, "color"), ("shade", "O")]
        else:
            lead = _pick(rng, ("same but made of", "show the same made of"))
            parts = [(lead, "O"), (value, "material")]
        self._user(parts)
        c = self.constraints["color"]
        m = self.constraints["material"]
        t = self.constraints["item_type"]
        self._system(f"sure showing {c} {m} {t} instead", self._select_items())
        return True

    def _position_query(self):
        rng = self.rng
        pos_i = int(rng.integers(len(self.shown)))
        pos = POSITIONS[pos_i]
        candidates = [a for a in ("color", "material", "brand") if a not in self.constraints]
        candidates.append("price")
        attr = _pick(rng, candidates)
        lead = _pick(rng, ("what is the", "tell me the"))
        parts = [(lead, "O"), (attr, "O"), ("of the", "O"), (pos, "position"), ("image", "O")]
        self._user(parts)
        item = self.shown[pos_i]
        value = getattr(item, attr)
        replies = {
            "color": f"the {pos} image is {value} in color",
            "material": f"the {pos} image is made of {value}",
            "brand": f"the {pos} image is by {value}",
            "price": f"the {pos} image costs {value}",
        }
        self._system(replies[attr])

    def _kb_celebrity(self):
        rng = self.rng
        brand = self.constraints["brand"]
        endorsing = sorted(n for n, bs in self.kb.celebrities.items() if brand in bs)
        other = sorted(n for n, bs in self.kb.celebrities.items() if brand not in bs)
        if endorsing and (not other or rng.random() < 0.5):
            celeb = _pick(rng, endorsing)
        else:
            celeb = _pick(rng, other)
        lead = _pick(rng, ("will", "would"))
        parts = [(lead, "O"), (celeb, "O"), ("endorse this", "O")]
        self._user(parts, kb_ref=f"celebrity:{celeb}")
        if brand in self.kb.celebrities[celeb]:
            self._system(f"yes {celeb} endorses {brand}")
        else:
            self._system(f"no {celeb} does not endorse {brand}")

    def _kb_style(self):
        rng = self.rng
        style = _pick(rng, sorted(self.kb.queries))
        parts = [("suggest something for", "O"), (style, "O"), ("occasions", "O")]
        self._user(parts, kb_ref=f"query:{style}")
        q = self.kb.queries[style]
        self._system(f"for {style} we suggest {q['color']} {q['item_type']}")


def generate_dialogue(
    catalog: list[CatalogItem],
    kb: KBStore,
    seed,
    n_turn_pairs: int,
    kb_rate: float = 0.2,
) -> DialogueRecord:
    """One deterministic dialogue of n_turn_pairs user/system pairs."""
    if not catalog:
        raise InputError("generate_dialogue requires a non-empty catalog")
    if not 1 <= n_turn_pairs <= 20:
        raise InputError(f"n_turn_pairs must be in [1, 20], got {n_turn_pairs}")
    rng = np.random.default_rng(seed)
    turns = _DialogueBuilder(catalog, kb, rng, n_turn_pairs, kb_rate).build()
    return DialogueRecord(id="d0", turns=turns)


def generate_corpus(
    catalog: list[CatalogItem],
    kb: KBStore,
    n_dialogues: int,
    seed: int,
    n_turn_pairs: int = 4,
    kb_rate: float = 0.2,
    id_prefix: str = "d",
) -> list[DialogueRecord]:
    """n_dialogues independent dialogues; dialogue i uses seed mix(seed, i)."""
    records = []
    for i in range(n_dialogues):
        rec = generate_dialogue(
            catalog, kb, np.random.SeedSequence([int(seed), i]), n_turn_pairs, kb_rate
        )
        rec.id = f"{id_prefix}{i:05d}"
        records.append(rec)
    return records


def kb_tokens(kb: KBStore, ref: str) -> tuple[list[str], list[str]]:
    """Query/entity token sequences for a turn's KB reference."""
    kind, _, key = ref.partition(":")
    if kind == "celebrity":
        if key not in kb.celebrities:
            raise InputError(f"unknown celebrity {key!r} in KB reference")
        return ["endorse", key], list(kb.celebrities[key])
    if kind == "query":
        if key not in kb.queries:
            raise InputError(f"unknown query {key!r} in KB reference")
        q = kb.queries[key]
        return ["style", key], [q["color"], q["item_type"]]
    raise InputError(f"malformed KB reference {ref!r}")


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def _validate_record(rec: DialogueRecord) -> None:
    if not rec.turns:
        raise ValidationError(f"dialogue {rec.id}: no turns")
    for i, turn in enumerate(rec.turns):
        expected = "user" if i % 2 == 0 else "system"
        if turn.role != expected:
            raise ValidationError(
                f"dialogue {rec.id}: turn {i} role {turn.role!r}, expected {expected!r}"
            )
        if not turn.tokens:
            raise ValidationError(f"dialogue {rec.id}: turn {i} has no tokens")
        for tok in turn.tokens:
            if "|" in tok or "\t" in tok or " " in tok:
                raise ValidationError(
                    f"dialogue {rec.id}: token {tok!r} contains a reserved character"
                )
        if len(turn.image_ids) > MAX_IMAGES:
            raise ValidationError(
                f"dialogue {rec.id}: turn {i} has {len(turn.image_ids)} images (max {MAX_IMAGES})"
            )
        if turn.role == "user":
            if turn.tags is None or len(turn.tags) != len(turn.tokens):
                raise ValidationError(
                    f"dialogue {rec.id}: turn {i} tags do not align with tokens"
                )


def _format_turn(turn: Turn) -> str:
    imgs = ",".join(str(i) for i in turn.image_ids) if turn.image_ids else "-"
    tags = " ".join(turn.tags) if turn.tags else "-"
    kb = turn.kb_ref if turn.kb_ref else "-"
    return "\t".join([turn.role, " ".join(turn.tokens), imgs, tags, kb])


def write_corpus(path, records: list[DialogueRecord]) -> None:
    """One record per line; see read_corpus for the inverse."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            _validate_record(rec)
            line = f"{rec.id}\t{len(rec.turns)}\t" + "|".join(
                _format_turn(t) for t in rec.turns
            )
            fh.write(line + "\n")


def read_corpus(path) -> list[DialogueRecord]:
    """Parse a corpus file, validating structure; errors carry line numbers."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            head, sep, rest = line.partition("\t")
            if not sep:
                raise ParseError("missing tab after dialogue id", lineno)
            count_s, sep, rest = rest.partition("\t")
            if not sep:
                raise ParseError("missing turn count", lineno)
            try:
                count = int(count_s)
            except ValueError:
                raise ParseError(f"turn count {count_s!r} is not an integer", lineno)
            chunks = rest.split("|")
            if len(chunks) != count:
                raise ParseError(
                    f"expected {count} turns, found {len(chunks)}", lineno
                )
            turns = []
            for chunk in chunks:
                fields = chunk.split("\t")
                if len(fields) != 5:
                    raise ParseError(
                        f"turn has {len(fields)} fields, expected 5", lineno
                    )
                role, tokens_s, imgs_s, tags_s, kb_s = fields
                if role not in ("user", "system"):
                    raise ParseError(f"unknown role {role!r}", lineno)
                tokens = tokens_s.split(" ") if tokens_s else []
                image_ids = (
                    [int(x) for x in imgs_s.split(",")] if imgs_s != "-" else []
                )
                tags = tags_s.split(" ") if tags_s != "-" else None
                kb_ref = kb_s if kb_s != "-" else None
                turns.append(Turn(role, tokens, image_ids, tags, kb_ref))
            rec = DialogueRecord(id=head, turns=turns)
            _validate_record(rec)
            records.append(rec)
    return records


def write_kb(path, kb: KBStore) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for name in sorted(kb.celebrities):
            fh.write(f"celebrity\t{name}\t{','.join(kb.celebrities[name])}\n")
        for key in sorted(kb.queries):
            q = kb.queries[key]
            fh.write(f"query\t{key}\t{q['color']},{q['item_type']}\n")


def read_kb(path) -> KBStore:
    kb = KBStore()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ParseError(f"KB record has {len(fields)} fields, expected 3", lineno)
            kind, key, values = fields
            if kind == "celebrity":
                kb.celebrities[key] = values.split(",")
            elif kind == "query":
                color, item_type = values.split(",")
                kb.queries[key] = {"color": color, "item_type": item_type}
            else:
                raise ParseError(f"unknown KB record kind {kind!r}", lineno)
    return kb


def write_catalog(path, items: list[CatalogItem]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for it in items:
            fh.write(
                "\t".join(
                    [str(it.id), it.item_type, it.color, it.material, it.size, it.brand, it.price]
                )
                + "\n"
            )


def read_catalog(path) -> list[CatalogItem]:
    items = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 7:
                raise ParseError(
                    f"catalog record has {len(fields)} fields, expected 7", lineno
                )
            items.append(
                CatalogItem(int(fields[0]), fields[1], fields[2], fields[3], fields[4], fields[5], fields[6])
            )
    return items
