"""Captions, vocabularies, annotation files, synthetic scenes and batching."""

from __future__ import annotations

import json
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, IntegrityError, MissingFileError, ParseError
from .numcore import Tensor, make_rng

START, STOP, UNK = 0, 1, 2
RESERVED = ("<start>", "<stop>", "<unk>")
MAX_SEQ_LEN = 16
IMAGE_SIZE = 32

_PUNCT = str.maketrans("", "", string.punctuation)


def tokenize(text: str) -> list[str]:
    return text.lower().translate(_PUNCT).split()


@dataclass(frozen=True)
class Vocabulary:
    id_to_token: tuple[str, ...]
    min_count: int = 1
    token_to_id: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.id_to_token[:3] != RESERVED:
            raise IntegrityError("vocabulary must start with the reserved <start>, <stop>, <unk> tokens")
        mapping = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(mapping) != len(self.id_to_token):
            raise IntegrityError("vocabulary tokens must be unique")
        object.__setattr__(self, "token_to_id", mapping)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def decode(self, token_id: int) -> str:
        return self.id_to_token[token_id]

    def words(self, ids: Iterable[int]) -> list[str]:
        """Token ids to words, dropping START and stopping at the first STOP."""
        out = []
        for i in ids:
            if i == STOP:
                break
            if i != START:
                out.append(self.id_to_token[i])
        return out


def build_vocab(captions: Iterable[str | Sequence[str]], min_count: int = 1) -> Vocabulary:
    """Ids by descending frequency, ties broken lexicographically; rare tokens fall to UNK."""
    counts: Counter[str] = Counter()
    n = 0
    for cap in captions:
        counts.update(tokenize(cap) if isinstance(cap, str) else cap)
        n += 1
    if n == 0:
        raise ConfigError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in RESERVED), key=lambda t: (-counts[t], t))
    return Vocabulary(RESERVED + tuple(kept), min_count=min_count)


@dataclass(frozen=True)
class CaptionRecord:
    image_id: int | str
    tokens: tuple[int, ...]
    raw_text: str

    @property
    def n_targets(self) -> int:
        return len(self.tokens) - 1


def encode_caption(text: str, vocab: Vocabulary, max_seq_len: int = MAX_SEQ_LEN, image_id=None) -> CaptionRecord:
    interior = [vocab.encode(t) for t in tokenize(text)][:max_seq_len]
    return CaptionRecord(image_id, (START, *interior, STOP), text)


@dataclass
class ImageEntry:
    image_id: int | str
    pixels: np.ndarray | None = None
    feature: np.ndarray | None = None
    file_name: str | None = None


@dataclass
class DatasetSplit:
    images: list[ImageEntry]
    captions: list[CaptionRecord]
    vocab: Vocabulary
    role: str = "train"

    def __post_init__(self):
        self.check()

    def check(self) -> None:
        if not self.images:
            raise IntegrityError("split has no images")
        ids = [im.image_id for im in self.images]
        if len(set(ids)) != len(ids):
            raise IntegrityError("duplicate image ids in split")
        known = set(ids)
        for cap in self.captions:
            if cap.image_id not in known:
                raise IntegrityError(f"caption references unknown image id {cap.image_id!r}")
        have = {cap.image_id for cap in self.captions}
        missing = [i for i in ids if i not in have]
        if missing:
            raise IntegrityError(f"image id {missing[0]!r} has no captions")

    @property
    def has_pixels(self) -> bool:
        return all(im.pixels is not None for im in self.images)

    def image(self, image_id) -> ImageEntry:
        for im in self.images:
            if im.image_id == image_id:
                return im
        raise IntegrityError(f"unknown image id {image_id!r}")

    def references(self) -> dict:
        refs: dict = {im.image_id: [] for im in self.images}
        for cap in self.captions:
            refs[cap.image_id].append(tokenize(cap.raw_text))
        return refs

    def reencode(self, vocab: Vocabulary, max_seq_len: int = MAX_SEQ_LEN) -> "DatasetSplit":
        caps = [encode_caption(c.raw_text, vocab, max_seq_len, c.image_id) for c in self.captions]
        return DatasetSplit(self.images, caps, vocab, self.role)


# ---------------------------------------------------------------- annotation files


def load_annotations(
    path: str | Path,
    vocab: Vocabulary | None = None,
    max_seq_len: int = MAX_SEQ_LEN,
    min_count: int = 1,
    role: str = "train",
) -> DatasetSplit:
    """Read a COCO-style caption document.

    Schema: ``{"images": [{"id", "file_name" | "feature"}], "annotations":
    [{"image_id", "caption"}]}``.  ``file_name`` points at a ``.npy`` RGB grid
    relative to the document's directory.  Without ``vocab`` one is built
    from the captions.
    """
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"annotation file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
    if not isinstance(doc, dict) or "images" not in doc or "annotations" not in doc:
        raise ParseError(f"{path}: expected an object with 'images' and 'annotations'")
    images = _parse_images(doc["images"], path)
    anns = doc["annotations"]
    if not isinstance(anns, list) or not anns:
        raise IntegrityError(f"{path}: annotations list is empty")
    texts = []
    for i, ann in enumerate(anns):
        if not isinstance(ann, dict) or "image_id" not in ann or not isinstance(ann.get("caption"), str):
            raise ParseError(f"{path}: annotations[{i}] needs 'image_id' and a string 'caption'")
        texts.append((ann["image_id"], ann["caption"]))
    if vocab is None:
        vocab = build_vocab([t for _, t in texts], min_count=min_count)
    caps = [encode_caption(t, vocab, max_seq_len, image_id) for image_id, t in texts]
    return DatasetSplit(images, caps, vocab, doc.get("split", role))


def _parse_images(records, path: Path) -> list[ImageEntry]:
    if not isinstance(records, list):
        raise ParseError(f"{path}: 'images' must be a list")
    out = []
    for i, rec in enumerate(records):
        if not isinstance(rec, dict) or "id" not in rec:
            raise ParseError(f"{path}: images[{i}] needs an 'id'")
        if "feature" in rec:
            try:
                feat = np.asarray(rec["feature"], dtype=np.float32)
            except (TypeError, ValueError):
                raise ParseError(f"{path}: images[{i}].feature is not a list of numbers") from None
            if feat.ndim != 1:
                raise ParseError(f"{path}: images[{i}].feature must be a flat list")
            out.append(ImageEntry(rec["id"], feature=feat))
        elif "file_name" in rec:
            file = path.parent / rec["file_name"]
            if not file.exists():
                raise MissingFileError(f"{path}: images[{i}] file not found: {file}")
            try:
                pixels = np.load(file).astype(np.float32)
            except ValueError as e:
                raise ParseError(f"{path}: images[{i}]: cannot read {file}: {e}") from None
            if pixels.ndim != 3 or pixels.shape[2] != 3:
                raise ParseError(f"{path}: images[{i}]: expected an H×W×3 grid, got {pixels.shape}")
            out.append(ImageEntry(rec["id"], pixels=pixels, file_name=rec["file_name"]))
        else:
            raise ParseError(f"{path}: images[{i}] needs 'file_name' or 'feature'")
    return out


def load_feature_sequence(path: str | Path) -> list[np.ndarray]:
    """Feature vectors of a corpus-style document, in listed order; annotations optional."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"feature file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
    if not isinstance(doc, dict) or "images" not in doc:
        raise ParseError(f"{path}: expected an object with 'images'")
    entries = _parse_images(doc["images"], path)
    return [e.feature if e.feature is not None else e.pixels for e in entries]


def write_annotations(split: DatasetSplit, out_dir: str | Path, name: str = "annotations.json") -> Path:
    """Write ``split`` as an annotation document plus one ``.npy`` per pixel image."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    images = []
    for im in split.images:
        if im.pixels is not None:
            rel = f"images/{im.image_id}.npy"
            np.save(out_dir / rel, im.pixels.astype(np.float32))
            images.append({"id": im.image_id, "file_name": rel})
        else:
            images.append({"id": im.image_id, "feature": [float(v) for v in im.feature]})
    anns = [{"image_id": c.image_id, "caption": c.raw_text} for c in split.captions]
    doc = {"split": split.role, "images": images, "annotations": anns}
    target = out_dir / name
    target.write_text(json.dumps(doc, indent=1) + "\n")
    return target


# ---------------------------------------------------------------- synthetic scenes

SHAPES = ("square", "circle", "triangle")
COLORS = {"red": (1.0, 0.0, 0.0), "green": (0.0, 1.0, 0.0), "blue": (0.0, 0.0, 1.0)}
RELATIONS = ("above", "below", "left of", "right of")
_INVERSE = {"above": "below", "below": "above", "left of": "right of", "right of": "left of"}
_REL_WORDS = {"above": "above", "below": "below", "left of": "to the left of", "right of": "to the right of"}


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    color: str
    cy: int
    cx: int
    size: int


@dataclass(frozen=True)
class Scene:
    shapes: tuple[ShapeSpec, ...]
    relation: str | None = None  # shapes[0] <relation> shapes[1]


def render(scene: Scene, size: int = IMAGE_SIZE) -> np.ndarray:
    img = np.zeros((size, size, 3), dtype=np.float32)
    yy, xx = np.mgrid[0:size, 0:size]
    for s in scene.shapes:
        half = s.size // 2
        dy, dx = yy - s.cy, xx - s.cx
        if s.kind == "square":
            hit = (np.abs(dy) <= half) & (np.abs(dx) <= half)
        elif s.kind == "circle":
            hit = dy * dy + dx * dx <= half * half + half
        else:
            # apex at the top, base on the bottom row
            rows = dy + half
            hit = (rows >= 0) & (rows <= 2 * half) & (np.abs(dx) * 2 <= rows)
        img[hit] = COLORS[s.color]
    return img


def describe(scene: Scene) -> list[str]:
    """Canonical caption first, then the paraphrase templates for ``scene``."""
    a = scene.shapes[0]
    first = f"{a.color} {a.kind}"
    if scene.relation is None:
        return [
            f"a {first} on a black background",
            f"there is a {first} on a black background",
            f"a single {first} on a black background",
            f"one {first} on a black background",
        ]
    b = scene.shapes[1]
    second = f"{b.color} {b.kind}"
    rel = _REL_WORDS[scene.relation]
    inv = _REL_WORDS[_INVERSE[scene.relation]]
    return [
        f"a {first} {rel} a {second}",
        f"a {second} {inv} a {first}",
        f"there is a {first} {rel} a {second}",
        f"a {first} is {rel} a {second}",
        f"a {first} sits {rel} a {second}",
    ]


def _place(rng: np.random.Generator, relation: str | None, size: int) -> list[tuple[int, int, int]]:
    sz = [int(rng.integers(7, 10)) | 1 for _ in range(2)]  # odd sizes 7 or 9
    lo, hi = 5, size - 6
    if relation is None:
        return [(int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1)), sz[0])]
    near = (int(rng.integers(lo, 11)), int(rng.integers(size - 11, hi + 1)))  # (upper/left, lower/right)
    along = [int(rng.integers(lo + 2, hi - 1)) for _ in range(2)]
    if relation == "above":
        return [(near[0], along[0], sz[0]), (near[1], along[1], sz[1])]
    if relation == "below":
        return [(near[1], along[0], sz[0]), (near[0], along[1], sz[1])]
    if relation == "left of":
        return [(along[0], near[0], sz[0]), (along[1], near[1], sz[1])]
    return [(along[0], near[1], sz[0]), (along[1], near[0], sz[1])]


def random_scene(rng: np.random.Generator, size: int = IMAGE_SIZE, p_two: float = 0.75) -> Scene:
    two = rng.random() < p_two
    relation = RELATIONS[int(rng.integers(len(RELATIONS)))] if two else None
    placements = _place(rng, relation, size)
    shapes = tuple(
        ShapeSpec(SHAPES[int(rng.integers(3))], tuple(COLORS)[int(rng.integers(3))], cy, cx, s)
        for cy, cx, s in placements
    )
    return Scene(shapes, relation)


def gen_synthetic(
    n_images: int,
    rng_seed: int,
    vocab: Vocabulary | None = None,
    max_seq_len: int = MAX_SEQ_LEN,
    id_offset: int = 0,
    role: str = "train",
) -> tuple[DatasetSplit, list[Scene]]:
    """Render ``n_images`` scenes with 5 captions each.

    Each image gets its canonical caption four times and one paraphrase, in a
    seeded order.  Image ids run from ``id_offset``.
    """
    if n_images < 1:
        raise ConfigError("n_images must be at least 1")
    rng = make_rng(rng_seed, "synthetic")
    scenes, images, texts = [], [], []
    for k in range(n_images):
        scene = random_scene(rng)
        options = describe(scene)
        chosen = [options[0]] * 4 + [options[1 + int(rng.integers(len(options) - 1))]]
        order = rng.permutation(5)
        image_id = id_offset + k
        scenes.append(scene)
        images.append(ImageEntry(image_id, pixels=render(scene)))
        texts.extend((image_id, chosen[i]) for i in order)
    if vocab is None:
        vocab = build_vocab([t for _, t in texts])
    caps = [encode_caption(t, vocab, max_seq_len, i) for i, t in texts]
    return DatasetSplit(images, caps, vocab, role), scenes


# ---------------------------------------------------------------- feature expansion and batching


def expand_features(image_feature, captions: Sequence[CaptionRecord]) -> list[tuple[object, CaptionRecord]]:
    """Pair one already-computed feature with each of its image's captions."""
    if not captions:
        raise IntegrityError("cannot expand a feature over zero captions")
    return [(image_feature, cap) for cap in captions]


@dataclass
class Batch:
    image_ids: list
    tokens: np.ndarray  # B×T int64, STOP padded
    mask: np.ndarray  # B×T float32, 1 on real prediction targets
    features: Tensor | None = None

    @property
    def size(self) -> int:
        return self.tokens.shape[0]

    @property
    def n_targets(self) -> int:
        return int(self.mask.sum())


def pad_tokens(captions: Sequence[CaptionRecord]) -> tuple[np.ndarray, np.ndarray]:
    t = max(len(c.tokens) for c in captions)
    tokens = np.full((len(captions), t), STOP, dtype=np.int64)
    mask = np.zeros((len(captions), t), dtype=np.float32)
    for i, c in enumerate(captions):
        tokens[i, : len(c.tokens)] = c.tokens
        mask[i, 1 : len(c.tokens)] = 1.0
    return tokens, mask


def make_batches(
    split: DatasetSplit, batch_size: int = 16, rng_seed: int = 0, features: dict | None = None, epoch: int = 0
) -> list[Batch]:
    """Shuffle caption pairs for ``epoch`` under ``rng_seed`` and cut them into batches.

    The last batch may be partial.

    ``features`` maps image id to a feature vector; when given, each batch
    carries a B×F feature matrix built by expanding each image's feature.
    """
    if not split.captions:
        raise IntegrityError("cannot batch an empty split")
    if batch_size < 1:
        raise ConfigError("batch_size must be positive")
    order = make_rng(rng_seed, "shuffle", epoch).permutation(len(split.captions))
    caps = [split.captions[i] for i in order]
    batches = []
    for lo in range(0, len(caps), batch_size):
        chunk = caps[lo : lo + batch_size]
        tokens, mask = pad_tokens(chunk)
        feats = None
        if features is not None:
            feats = Tensor(np.stack([features[c.image_id] for c in chunk]))
        batches.append(Batch([c.image_id for c in chunk], tokens, mask, feats))
    return batches
