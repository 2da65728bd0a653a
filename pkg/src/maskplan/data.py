"""Synthetic bimodal corpus with known cross-modal pairing, plus the
stochastic mixed-modal batch sampler.

Every item is generated from one of ``num_factors`` latent factors. A
factor fixes the tokens at the even ("content") positions of both the
text and the image sequence; the odd ("filler") positions are drawn
uniformly from a small filler vocabulary, independent of the factor.
Factor identity is therefore exactly recoverable from content positions
(the template inverse) and provably absent from filler statistics.

Corpus file layout (little-endian), documented for external readers:

* magic ``MPCORP01`` (8 bytes)
* header: world seed u64; num_factors, text_vocab, text_len,
  image_vocab, image_len as u32; six u32 record counts in the order
  train text, train image, train pair, eval text, eval image, eval pair
* records, in that same order. Each record starts with tag u8
  (0 text, 1 image, 2 pair), partition u8 (0 train, 1 eval), factor u16
  (ground truth, for evaluation only), then i32 tokens: text_len of them
  for text records, image_len for image records, text_len + image_len
  for pair records (text first).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .bridge import FrozenEncoder, Modality, SemanticVector, adapt, swap_direction
from .discrete import TokenSequence
from .seeding import derive_rng

_MAGIC = b"MPCORP01"
FILLER_COUNT = 8

BATCH_KINDS = ("text_only", "image_only", "paired")


def content_positions(length: int) -> tuple[int, ...]:
    """Factor-carrying positions: the even indices."""
    return tuple(range(0, length, 2))


def filler_positions(length: int) -> tuple[int, ...]:
    return tuple(range(1, length, 2))


@dataclass(frozen=True)
class ToyWorld:
    """Generator settings plus the derived factor templates."""

    num_factors: int = 8
    text_vocab: int = 64
    text_len: int = 16
    image_vocab: int = 32
    image_len: int = 16
    seed: int = 0
    text_templates: np.ndarray = field(init=False, repr=False)
    image_templates: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "text_templates", self._make_templates(
            "world/text-templates", self.text_vocab, len(content_positions(self.text_len))))
        object.__setattr__(self, "image_templates", self._make_templates(
            "world/image-templates", self.image_vocab, len(content_positions(self.image_len))))

    def _make_templates(self, label: str, vocab: int, slots: int) -> np.ndarray:
        """Per-factor content tokens with pairwise-distinct multisets."""
        rng = derive_rng(self.seed, label)
        high = vocab - FILLER_COUNT
        templates = np.zeros((self.num_factors, slots), dtype=np.int64)
        seen: set[tuple] = set()
        for f in range(self.num_factors):
            for _ in range(1000):
                row = rng.integers(0, high, size=slots)
                key = tuple(sorted(row.tolist()))
                if key not in seen:
                    seen.add(key)
                    templates[f] = row
                    break
            else:
                raise RuntimeError("could not draw distinct factor templates")
        return templates

    def filler_tokens(self, modality: Modality) -> np.ndarray:
        vocab = self.text_vocab if modality == Modality.TEXT else self.image_vocab
        return np.arange(vocab - FILLER_COUNT, vocab)

    def render(self, factor: int, modality: Modality,
               rng: np.random.Generator) -> np.ndarray:
        """Draw one sequence for ``factor``: template + random fillers."""
        if modality == Modality.TEXT:
            length, templates = self.text_len, self.text_templates
        else:
            length, templates = self.image_len, self.image_templates
        tokens = np.zeros(length, dtype=np.int64)
        tokens[list(content_positions(length))] = templates[factor]
        fill = self.filler_tokens(modality)
        tokens[list(filler_positions(length))] = rng.choice(
            fill, size=len(filler_positions(length)))
        return tokens

    def decode_factor(self, tokens: np.ndarray, modality: Modality) -> int | None:
        """Template inverse: factor with the highest content-position
        agreement; ``None`` when the best match is tied or empty."""
        length = self.text_len if modality == Modality.TEXT else self.image_len
        templates = self.text_templates if modality == Modality.TEXT else self.image_templates
        observed = np.asarray(tokens)[list(content_positions(length))]
        agreement = (templates == observed[None, :]).sum(axis=1)
        best = int(agreement.argmax())
        top = int(agreement[best])
        if top == 0 or int((agreement == top).sum()) > 1:
            return None
        return best


@dataclass
class Corpus:
    """Generated items split into train/eval partitions.

    Factor IDs are ground truth for evaluation only; training code must
    go through ``sequence``/``pair_sequences`` and the batch sampler,
    which never expose them.
    """

    world: ToyWorld
    text: dict[str, list[tuple[int, np.ndarray]]]
    image: dict[str, list[tuple[int, np.ndarray]]]
    pairs: dict[str, list[tuple[int, np.ndarray, np.ndarray]]]
    _rep_cache: dict = field(default_factory=dict, repr=False)

    def counts(self) -> dict[str, int]:
        return {
            "train_text": len(self.text["train"]),
            "train_image": len(self.image["train"]),
            "train_pairs": len(self.pairs["train"]),
            "eval_text": len(self.text["eval"]),
            "eval_image": len(self.image["eval"]),
            "eval_pairs": len(self.pairs["eval"]),
        }

    def sequence(self, modality: Modality, partition: str, index: int) -> TokenSequence:
        source = self.text if modality == Modality.TEXT else self.image
        return TokenSequence(source[partition][index][1], modality)

    def pair_sequences(self, partition: str, index: int) -> tuple[TokenSequence, TokenSequence]:
        _, text_tokens, image_tokens = self.pairs[partition][index]
        return (TokenSequence(text_tokens, Modality.TEXT),
                TokenSequence(image_tokens, Modality.IMAGE))

    def ground_truth_factor(self, kind: str, partition: str, index: int) -> int:
        """Hidden factor ID; evaluation-only accessor."""
        table = {"text": self.text, "image": self.image, "pairs": self.pairs}[kind]
        return table[partition][index][0]

    def representation(self, encoders: dict[Modality, FrozenEncoder],
                       modality: Modality, partition: str, index: int,
                       pair: bool = False) -> SemanticVector:
        """Cached frozen-encoder output for a corpus item."""
        key = (pair, modality, partition, index)
        if key not in self._rep_cache:
            if pair:
                text_seq, image_seq = self.pair_sequences(partition, index)
                seq = text_seq if modality == Modality.TEXT else image_seq
            else:
                seq = self.sequence(modality, partition, index)
            self._rep_cache[key] = encoders[modality].encode(seq)
        return self._rep_cache[key]


def gen_corpus(world: ToyWorld, counts: dict[str, int],
               rng: np.random.Generator) -> Corpus:
    """Generate all partitions; deterministic given the rng stream."""
    for name, value in counts.items():
        if value <= 0:
            raise ValueError(f"count {name} must be positive")

    def draw_items(n, modality):
        items = []
        for _ in range(n):
            factor = int(rng.integers(0, world.num_factors))
            items.append((factor, world.render(factor, modality, rng)))
        return items

    def draw_pairs(n):
        items = []
        for _ in range(n):
            factor = int(rng.integers(0, world.num_factors))
            items.append((factor,
                          world.render(factor, Modality.TEXT, rng),
                          world.render(factor, Modality.IMAGE, rng)))
        return items

    return Corpus(
        world=world,
        text={"train": draw_items(counts["train_text"], Modality.TEXT),
              "eval": draw_items(counts["eval_text"], Modality.TEXT)},
        image={"train": draw_items(counts["train_image"], Modality.IMAGE),
               "eval": draw_items(counts["eval_image"], Modality.IMAGE)},
        pairs={"train": draw_pairs(counts["train_pairs"]),
               "eval": draw_pairs(counts["eval_pairs"])},
    )


def save_corpus(corpus: Corpus, path) -> None:
    w = corpus.world
    c = corpus.counts()
    chunks = [_MAGIC,
              struct.pack("<Q", w.seed),
              struct.pack("<5I", w.num_factors, w.text_vocab, w.text_len,
                          w.image_vocab, w.image_len),
              struct.pack("<6I", c["train_text"], c["train_image"], c["train_pairs"],
                          c["eval_text"], c["eval_image"], c["eval_pairs"])]

    def pack_tokens(tokens):
        return np.asarray(tokens, dtype="<i4").tobytes()

    for partition_id, partition in ((0, "train"), (1, "eval")):
        for factor, tokens in corpus.text[partition]:
            chunks.append(struct.pack("<BBH", 0, partition_id, factor))
            chunks.append(pack_tokens(tokens))
        for factor, tokens in corpus.image[partition]:
            chunks.append(struct.pack("<BBH", 1, partition_id, factor))
            chunks.append(pack_tokens(tokens))
        for factor, text_tokens, image_tokens in corpus.pairs[partition]:
            chunks.append(struct.pack("<BBH", 2, partition_id, factor))
            chunks.append(pack_tokens(text_tokens))
            chunks.append(pack_tokens(image_tokens))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_corpus(path) -> Corpus:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _MAGIC:
        raise ValueError("bad corpus file: magic mismatch")
    offset = 8
    (seed,) = struct.unpack_from("<Q", blob, offset)
    offset += 8
    num_factors, text_vocab, text_len, image_vocab, image_len = struct.unpack_from(
        "<5I", blob, offset)
    offset += 20
    counts = struct.unpack_from("<6I", blob, offset)
    offset += 24
    world = ToyWorld(num_factors=num_factors, text_vocab=text_vocab,
                     text_len=text_len, image_vocab=image_vocab,
                     image_len=image_len, seed=int(seed))

    def read_tokens(n):
        nonlocal offset
        arr = np.frombuffer(blob, dtype="<i4", count=n, offset=offset).astype(np.int64)
        offset += 4 * n
        return arr

    text = {"train": [], "eval": []}
    image = {"train": [], "eval": []}
    pairs = {"train": [], "eval": []}
    expected = [(0, "train", counts[0]), (1, "train", counts[1]), (2, "train", counts[2]),
                (0, "eval", counts[3]), (1, "eval", counts[4]), (2, "eval", counts[5])]
    for tag_expected, partition, n in expected:
        for _ in range(n):
            tag, partition_id, factor = struct.unpack_from("<BBH", blob, offset)
            offset += 4
            if tag != tag_expected or partition_id != (0 if partition == "train" else 1):
                raise ValueError("corpus file records out of order")
            if tag == 0:
                text[partition].append((factor, read_tokens(text_len)))
            elif tag == 1:
                image[partition].append((factor, read_tokens(image_len)))
            else:
                pairs[partition].append((factor, read_tokens(text_len),
                                         read_tokens(image_len)))
    if offset != len(blob):
        raise ValueError("corpus file has trailing bytes")
    return Corpus(world=world, text=text, image=image, pairs=pairs)


@dataclass
class BatchItem:
    x: TokenSequence
    r_condition: SemanticVector
    swap_applied: bool
    r_source: SemanticVector | None = None  # pre-adaptation encode, paired only


@dataclass
class Batch:
    kind: str
    modality: Modality
    items: list[BatchItem]
    direction: str | None = None  # adapter direction for paired batches


def make_batch(corpus: Corpus, encoders: dict[Modality, FrozenEncoder],
               store: T.ParamStore, batch_size: int,
               rng: np.random.Generator,
               mix_ratio: tuple[int, int, int] = (2, 2, 1)) -> Batch:
    """Draw one single-kind batch with the configured source mixing.

    Intra-modal items are conditioned on their own frozen encoding;
    paired items get the swapped condition: the twin's encoding pushed
    through the adapter pointing at the target modality. The swap
    direction alternates randomly per paired batch.
    """
    weights = np.asarray(mix_ratio, dtype=np.float64)
    kind = BATCH_KINDS[rng.choice(3, p=weights / weights.sum())]

    if kind in ("text_only", "image_only"):
        modality = Modality.TEXT if kind == "text_only" else Modality.IMAGE
        pool = corpus.text if modality == Modality.TEXT else corpus.image
        if not pool["train"]:
            raise ValueError(f"empty corpus partition for {kind}")
        idx = rng.integers(0, len(pool["train"]), size=batch_size)
        items = []
        for i in idx:
            x = corpus.sequence(modality, "train", int(i))
            r = corpus.representation(encoders, modality, "train", int(i))
            items.append(BatchItem(x=x, r_condition=r, swap_applied=False))
        return Batch(kind=kind, modality=modality, items=items)

    if not corpus.pairs["train"]:
        raise ValueError("empty corpus partition for paired")
    target = Modality.IMAGE if rng.random() < 0.5 else Modality.TEXT
    source = Modality.TEXT if target == Modality.IMAGE else Modality.IMAGE
    direction = swap_direction(target)
    idx = rng.integers(0, len(corpus.pairs["train"]), size=batch_size)
    items = []
    for i in idx:
        text_seq, image_seq = corpus.pair_sequences("train", int(i))
        x = image_seq if target == Modality.IMAGE else text_seq
        r_source = corpus.representation(encoders, source, "train", int(i), pair=True)
        r_cond = adapt(r_source, direction, store)
        items.append(BatchItem(x=x, r_condition=r_cond, swap_applied=True,
                               r_source=r_source))
    return Batch(kind="paired", modality=target, items=items, direction=direction)
