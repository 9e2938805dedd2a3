"""Sample schema, JSONL ingestion, tokenization and the synthetic generator."""

from __future__ import annotations

import base64
import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from .errors import ConfigError, SchemaError

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class VeracityLabel(IntEnum):
    SUPPORT_TEXT = 0
    SUPPORT_MULTIMODAL = 1
    INSUFFICIENT_TEXT = 2
    INSUFFICIENT_MULTIMODAL = 3
    REFUTE = 4

    @property
    def wire_name(self) -> str:
        return LABEL_NAMES[self.value]

    @classmethod
    def from_wire(cls, name: str) -> "VeracityLabel":
        try:
            return cls(LABEL_NAMES.index(name))
        except ValueError:
            raise KeyError(name) from None


LABEL_NAMES = (
    "Support_Text",
    "Support_Multimodal",
    "Insufficient_Text",
    "Insufficient_Multimodal",
    "Refute",
)
NUM_CLASSES = len(LABEL_NAMES)


def label_mapping() -> dict[str, int]:
    """Canonical name -> id mapping; persisted next to every model."""
    return {name: i for i, name in enumerate(LABEL_NAMES)}


@dataclass
class Sample:
    id: str
    claim_text: str
    claim_ocr: str
    claim_image: np.ndarray
    doc_text: str
    doc_ocr: str
    doc_image: np.ndarray
    label: VeracityLabel

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.id == other.id
            and self.claim_text == other.claim_text
            and self.claim_ocr == other.claim_ocr
            and self.doc_text == other.doc_text
            and self.doc_ocr == other.doc_ocr
            and self.label == other.label
            and np.array_equal(self.claim_image, other.claim_image)
            and np.array_equal(self.doc_image, other.doc_image)
        )


# --------------------------------------------------------------------------
# JSONL wire format
# --------------------------------------------------------------------------

_KEYS = ("id", "claim_text", "claim_ocr", "claim_image", "doc_text", "doc_ocr", "doc_image", "label")


def _decode_image(value, base_dir: Path, record_id: str) -> np.ndarray:
    if isinstance(value, str):
        img_path = base_dir / value
        if not img_path.exists():
            raise SchemaError(f"record {record_id!r}: image file {value!r} not found")
        return np.load(img_path).astype(np.float32)
    if isinstance(value, dict):
        try:
            raw = base64.b64decode(value["b64"])
            arr = np.frombuffer(raw, dtype=np.dtype(value.get("dtype", "float32")))
            return arr.reshape(value["shape"]).astype(np.float32)
        except (KeyError, ValueError) as exc:
            raise SchemaError(f"record {record_id!r}: malformed inline image ({exc})") from exc
    if isinstance(value, list):
        arr = np.asarray(value, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[None]
        return arr
    raise SchemaError(f"record {record_id!r}: unsupported image encoding {type(value).__name__}")


def _encode_image_inline(img: np.ndarray) -> dict:
    arr = np.ascontiguousarray(img, dtype=np.float32)
    return {"shape": list(arr.shape), "dtype": "float32", "b64": base64.b64encode(arr.tobytes()).decode("ascii")}


def parse_record(record: dict, base_dir: Path) -> Sample:
    record_id = str(record.get("id", "<missing id>"))
    missing = [k for k in _KEYS if k not in record]
    if missing:
        raise SchemaError(f"record {record_id!r}: missing keys {missing}")
    label_value = record["label"]
    try:
        if isinstance(label_value, int) and not isinstance(label_value, bool):
            label = VeracityLabel(label_value)
        else:
            label = VeracityLabel.from_wire(str(label_value))
    except (KeyError, ValueError):
        raise SchemaError(f"record {record_id!r}: unknown label {label_value!r}") from None
    claim_image = _decode_image(record["claim_image"], base_dir, record_id)
    doc_image = _decode_image(record["doc_image"], base_dir, record_id)
    if claim_image.ndim != 3 or claim_image.shape != doc_image.shape:
        raise SchemaError(
            f"record {record_id!r}: claim/doc image shapes {claim_image.shape} vs {doc_image.shape}"
        )
    return Sample(
        id=record_id,
        claim_text=str(record["claim_text"]),
        claim_ocr=str(record["claim_ocr"] or ""),
        claim_image=claim_image,
        doc_text=str(record["doc_text"]),
        doc_ocr=str(record["doc_ocr"] or ""),
        doc_image=doc_image,
        label=label,
    )


def resolve_split_path(path: str | Path, split: str) -> Path:
    """A directory resolves to ``<dir>/<split>.jsonl``; a file is used as is."""
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}; expected one of {SPLITS}")
    p = Path(path)
    if p.is_dir():
        p = p / f"{split}.jsonl"
    return p


def load_dataset(path: str | Path, split: str = "train") -> list[Sample]:
    """Read every record of ``split`` in file order.

    Raises ``FileNotFoundError`` for a missing file and ``SchemaError`` for
    unknown labels or images whose shape differs across the dataset.
    """
    p = resolve_split_path(path, split)
    if not p.exists():
        raise FileNotFoundError(f"dataset file not found: {p}")
    samples: list[Sample] = []
    shape = None
    with p.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{p}:{lineno}: invalid JSON ({exc.msg})") from exc
            sample = parse_record(record, p.parent)
            if shape is None:
                shape = sample.claim_image.shape
            elif sample.claim_image.shape != shape:
                raise SchemaError(
                    f"record {sample.id!r}: image shape {sample.claim_image.shape} differs from {shape}"
                )
            samples.append(sample)
    return samples


def save_dataset(samples: Sequence[Sample], path: str | Path, image_mode: str = "file") -> Path:
    """Write ``samples`` as JSONL.

    ``image_mode="file"`` stores each image as ``images/<id>_{claim,doc}.npy``
    beside the JSONL file; ``"inline"`` embeds base64 arrays.
    """
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    img_dir = p.parent / "images"
    with p.open("w", encoding="utf-8") as fh:
        for s in samples:
            record = {
                "id": s.id,
                "claim_text": s.claim_text,
                "claim_ocr": s.claim_ocr,
                "doc_text": s.doc_text,
                "doc_ocr": s.doc_ocr,
                "label": s.label.wire_name,
            }
            if image_mode == "file":
                img_dir.mkdir(exist_ok=True)
                for side, img in (("claim", s.claim_image), ("doc", s.doc_image)):
                    rel = f"images/{s.id}_{side}.npy"
                    np.save(p.parent / rel, np.ascontiguousarray(img, dtype=np.float32))
                    record[f"{side}_image"] = rel
            elif image_mode == "inline":
                record["claim_image"] = _encode_image_inline(s.claim_image)
                record["doc_image"] = _encode_image_inline(s.doc_image)
            else:
                raise ConfigError(f"unknown image_mode {image_mode!r}")
            fh.write(json.dumps({k: record[k] for k in _KEYS}, sort_keys=False) + "\n")
    return p


# --------------------------------------------------------------------------
# Vocabulary and tokenization
# --------------------------------------------------------------------------

PAD, UNK, CLS, SEP = 0, 1, 2, 3
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]")
_SPECIAL_LOWER = {t.lower(): i for i, t in enumerate(SPECIAL_TOKENS)}


def split_words(text: str) -> list[str]:
    return text.lower().split()


@dataclass
class Vocabulary:
    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIAL_TOKENS:
            raise ConfigError("vocabulary must start with [PAD] [UNK] [CLS] [SEP]")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ConfigError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def lookup(self, word: str) -> int:
        # special literals typed into user text are ordinary unknown words
        if word in _SPECIAL_LOWER:
            return UNK
        return self.index.get(word, UNK)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, tok in enumerate(self.tokens):
                fh.write(f"{tok}\t{i}\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        pairs = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    tok, idx = line.rstrip("\n").split("\t")
                    pairs.append((int(idx), tok))
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise ConfigError(f"{path}: vocabulary ids are not dense")
        return cls([tok for _, tok in pairs])


def build_vocab(corpus: Sequence[Sample], max_vocab: int) -> Vocabulary:
    """Most frequent lowercase whitespace tokens; ties broken lexicographically."""
    if max_vocab < 5:
        raise ConfigError(f"max_vocab must be >= 5, got {max_vocab}")
    if not corpus:
        raise ConfigError("cannot build a vocabulary from an empty corpus")
    counts: Counter[str] = Counter()
    for s in corpus:
        for text in (s.claim_text, s.claim_ocr, s.doc_text, s.doc_ocr):
            counts.update(w for w in split_words(text) if w not in _SPECIAL_LOWER)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(list(SPECIAL_TOKENS) + [tok for tok, _ in ranked[: max_vocab - len(SPECIAL_TOKENS)]])


@dataclass
class TokenSequence:
    ids: list[int]
    attention_mask: list[int]


def tokenize(text: str, ocr: str, vocab: Vocabulary, max_len: int) -> TokenSequence:
    if max_len < 2:
        raise ConfigError(f"max_len must be >= 2, got {max_len}")
    # equivalent to tokenizing text + " [SEP] " + ocr, with SEP placed structurally
    ids = [CLS] + [vocab.lookup(w) for w in split_words(text)]
    ocr_words = split_words(ocr)
    if ocr_words:
        ids += [SEP] + [vocab.lookup(w) for w in ocr_words]
    ids = ids[:max_len]
    mask = [1] * len(ids) + [0] * (max_len - len(ids))
    ids = ids + [PAD] * (max_len - len(ids))
    return TokenSequence(ids=ids, attention_mask=mask)


# --------------------------------------------------------------------------
# Tensor batches
# --------------------------------------------------------------------------


@dataclass
class EncodedBatch:
    """Model-ready tensors for a set of samples (a batch or a whole split)."""

    claim_ids: torch.Tensor
    claim_mask: torch.Tensor
    doc_ids: torch.Tensor
    doc_mask: torch.Tensor
    claim_image: torch.Tensor
    doc_image: torch.Tensor
    labels: torch.Tensor

    def __len__(self) -> int:
        return self.labels.shape[0]

    def take(self, index) -> "EncodedBatch":
        idx = torch.as_tensor(np.asarray(index, dtype=np.int64))
        return EncodedBatch(**{k: v[idx] for k, v in self.__dict__.items()})

    def to(self, dtype: torch.dtype) -> "EncodedBatch":
        return EncodedBatch(
            **{k: (v.to(dtype) if v.is_floating_point() else v) for k, v in self.__dict__.items()}
        )


def encode_samples(samples: Sequence[Sample], vocab: Vocabulary, max_len: int) -> EncodedBatch:
    claim = [tokenize(s.claim_text, s.claim_ocr, vocab, max_len) for s in samples]
    doc = [tokenize(s.doc_text, s.doc_ocr, vocab, max_len) for s in samples]
    if samples:
        claim_imgs = np.stack([s.claim_image for s in samples]).astype(np.float32)
        doc_imgs = np.stack([s.doc_image for s in samples]).astype(np.float32)
    else:
        claim_imgs = doc_imgs = np.zeros((0, 1, 1, 1), dtype=np.float32)
    return EncodedBatch(
        claim_ids=torch.tensor([t.ids for t in claim], dtype=torch.long).reshape(-1, max_len),
        claim_mask=torch.tensor([t.attention_mask for t in claim], dtype=torch.long).reshape(-1, max_len),
        doc_ids=torch.tensor([t.ids for t in doc], dtype=torch.long).reshape(-1, max_len),
        doc_mask=torch.tensor([t.attention_mask for t in doc], dtype=torch.long).reshape(-1, max_len),
        claim_image=torch.from_numpy(claim_imgs),
        doc_image=torch.from_numpy(doc_imgs),
        labels=torch.tensor([int(s.label) for s in samples], dtype=torch.long),
    )


def batch_iter(dataset, batch_size: int, shuffle_seed: int | None = None) -> Iterator:
    """Yield consecutive batches; the last one may be partial.

    ``dataset`` is either a sequence (batches are lists) or an
    ``EncodedBatch`` (batches are ``EncodedBatch`` slices).
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        order = np.random.default_rng(shuffle_seed).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if hasattr(dataset, "take"):
            yield dataset.take(idx)
        else:
            yield [dataset[i] for i in idx]


# --------------------------------------------------------------------------
# Synthetic generator
# --------------------------------------------------------------------------

# Per-class relation between claim and document, per channel:
#   shared   - both sides carry the same topic
#   distinct - topics drawn independently, conditioned on being different
#   negated  - shared topic plus the topic's negation token on the doc side
#   random   - drawn independently, unconstrained
ALIGNMENT_RULES: dict[str, tuple[str, str]] = {
    "Support_Text": ("shared", "distinct"),
    "Support_Multimodal": ("shared", "shared"),
    "Insufficient_Text": ("distinct", "shared"),
    "Insufficient_Multimodal": ("distinct", "distinct"),
    "Refute": ("negated", "random"),
}
_TEXT_RULES = {"shared", "distinct", "negated", "random"}
_IMAGE_RULES = {"shared", "distinct", "random"}


@dataclass
class SyntheticSpec:
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 500
    vocab_size: int = 200  # filler word pool
    n_topics: int = 24
    words_per_topic: int = 2  # topic keyword pool size
    topic_mentions: int = 2  # keywords drawn per text
    n_visual_topics: int = 8
    image_size: int = 32
    template_size: int = 24
    class_proportions: tuple[float, ...] = (0.2, 0.2, 0.2, 0.2, 0.2)
    noise: float = 0.3
    ocr_rate: float = 0.3
    min_words: int = 4
    max_words: int = 8
    alignment: dict[str, tuple[str, str]] = field(default_factory=lambda: dict(ALIGNMENT_RULES))
    seed: int = 42

    def validate(self) -> None:
        props = np.asarray(self.class_proportions, dtype=np.float64)
        if props.shape != (NUM_CLASSES,) or np.any(props < 0) or abs(props.sum() - 1.0) > 1e-9:
            raise ConfigError(
                f"class_proportions must be {NUM_CLASSES} non-negative values summing to 1, "
                f"got {tuple(self.class_proportions)}"
            )
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.n_topics < 2 or self.n_visual_topics < 2:
            raise ConfigError("n_topics and n_visual_topics must be >= 2")
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be >= 1")
        if not 0 <= self.ocr_rate <= 1:
            raise ConfigError(f"ocr_rate must lie in [0, 1], got {self.ocr_rate}")
        if not 1 <= self.topic_mentions <= self.words_per_topic:
            raise ConfigError("need 1 <= topic_mentions <= words_per_topic")
        if not 0 <= self.min_words <= self.max_words:
            raise ConfigError("need 0 <= min_words <= max_words")
        if not 1 <= self.template_size <= self.image_size:
            raise ConfigError("template_size must lie in [1, image_size]")
        if set(self.alignment) != set(LABEL_NAMES):
            raise ConfigError(f"alignment must define every class: {LABEL_NAMES}")
        for name, (text_rule, image_rule) in self.alignment.items():
            if text_rule not in _TEXT_RULES or image_rule not in _IMAGE_RULES:
                raise ConfigError(f"alignment[{name}]: unknown rule ({text_rule}, {image_rule})")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_proportions"] = list(self.class_proportions)
        d["alignment"] = {k: list(v) for k, v in self.alignment.items()}
        return d


def topic_token(k: int, j: int = 0) -> str:
    """Keyword ``j`` of text topic ``k``."""
    return f"topic{k:02d}_{j}"


def _topic_mentions(rng, spec: SyntheticSpec, k: int) -> list[str]:
    js = rng.choice(spec.words_per_topic, size=spec.topic_mentions, replace=False)
    return [topic_token(k, int(j)) for j in js]


def negation_token(k: int) -> str:
    return f"not_topic{k:02d}"


def visual_templates(spec: SyntheticSpec) -> np.ndarray:
    """One Gabor patch per visual topic: orientations x spatial frequencies.

    Random phases are fixed by the spec seed.
    """
    rng = np.random.default_rng([spec.seed, 7])
    t = spec.template_size
    n = spec.n_visual_topics
    n_freq = 2 if n >= 4 else 1
    n_orient = -(-n // n_freq)
    half = (t - 1) / 2.0
    yy, xx = np.mgrid[0:t, 0:t] - half
    window = np.exp(-(xx**2 + yy**2) / (2 * (t / 3.0) ** 2))
    out = np.empty((n, t, t), dtype=np.float32)
    for k in range(n):
        theta = np.pi * (k % n_orient) / n_orient
        wavelength = t / (1.5 + 1.5 * (k // n_orient))
        u = xx * np.cos(theta) + yy * np.sin(theta)
        out[k] = 1.5 * window * np.cos(2 * np.pi * u / wavelength + rng.uniform(0, 2 * np.pi))
    return out


def _pick_pair(rng: np.random.Generator, n: int, rule: str) -> tuple[int, int]:
    a = int(rng.integers(n))
    if rule in ("shared", "negated"):
        return a, a
    if rule == "distinct":
        b = int(rng.integers(n - 1))
        return a, b + (b >= a)
    return a, int(rng.integers(n))


def _render_image(rng, templates, k: int, spec: SyntheticSpec) -> np.ndarray:
    size, t = spec.image_size, spec.template_size
    img = np.zeros((size, size), dtype=np.float64)
    r, c = rng.integers(0, size - t + 1, size=2)
    img[r : r + t, c : c + t] += templates[k]
    img += spec.noise * rng.standard_normal((size, size))
    return img.astype(np.float32)[None]


def _render_text(rng, spec: SyntheticSpec, key_tokens: list[str], text_only: Sequence[str] = ()) -> tuple[str, str]:
    n_words = int(rng.integers(spec.min_words, spec.max_words + 1))
    words = [f"w{int(i):03d}" for i in rng.integers(0, spec.vocab_size, size=n_words)]
    ocr_words: list[str] = []
    if rng.random() < 0.5:
        ocr_words = [f"w{int(i):03d}" for i in rng.integers(0, spec.vocab_size, size=int(rng.integers(2, 5)))]
    for tok in key_tokens:
        target = ocr_words if rng.random() < spec.ocr_rate else words
        target.insert(int(rng.integers(0, len(target) + 1)), tok)
    for tok in text_only:
        words.insert(int(rng.integers(0, len(words) + 1)), tok)
    return " ".join(words), " ".join(ocr_words)


def _generate_split(rng, spec: SyntheticSpec, templates, n: int, prefix: str) -> list[Sample]:
    labels = rng.choice(NUM_CLASSES, size=n, p=np.asarray(spec.class_proportions, dtype=np.float64))
    out = []
    for i, y in enumerate(labels):
        label = VeracityLabel(int(y))
        text_rule, image_rule = spec.alignment[label.wire_name]
        tc, td = _pick_pair(rng, spec.n_topics, text_rule)
        vc, vd = _pick_pair(rng, spec.n_visual_topics, image_rule)
        claim_text, claim_ocr = _render_text(rng, spec, _topic_mentions(rng, spec, tc))
        negation = [negation_token(tc)] if text_rule == "negated" else []
        doc_text, doc_ocr = _render_text(rng, spec, _topic_mentions(rng, spec, td), negation)
        out.append(
            Sample(
                id=f"{prefix}-{i:05d}",
                claim_text=claim_text,
                claim_ocr=claim_ocr,
                claim_image=_render_image(rng, templates, vc, spec),
                doc_text=doc_text,
                doc_ocr=doc_ocr,
                doc_image=_render_image(rng, templates, vd, spec),
                label=label,
            )
        )
    return out


def generate_synthetic(spec: SyntheticSpec) -> tuple[list[Sample], list[Sample], list[Sample]]:
    """Deterministic train/val/test splits whose labels follow ``spec.alignment``.

    A text topic is a pool of keywords, each text mentioning a few of them.
    Visual topics are Gabor templates stamped at a random location under
    Gaussian pixel noise. With probability
    ``ocr_rate`` a topic token lands in the OCR field instead of the text;
    negation tokens always stay in ``doc_text``.
    """
    spec.validate()
    templates = visual_templates(spec)
    rng = np.random.default_rng(spec.seed)
    train = _generate_split(rng, spec, templates, spec.n_train, "train")
    val = _generate_split(rng, spec, templates, spec.n_val, "val")
    test = _generate_split(rng, spec, templates, spec.n_test, "test")
    return train, val, test
