"""Data model, on-disk formats, and the synthetic two-domain corpus generator.

File formats
------------
feature file   binary: magic ``WSFT0001`` (8 ASCII bytes), T and D as u32
               little-endian, then T*D float32 little-endian, row-major.
manifest       JSON lines, keys: id, feats, transcript (optional, space
               separated words), domain. Feature paths are resolved relative
               to the manifest file.
lexicon        UTF-8 TSV, one ``word<TAB>c1 c2 ...`` per line.
text corpus    UTF-8, one sentence per line, space-separated words.
"""

from __future__ import annotations

import json
import os
import string
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"WSFT0001"

# Guard against absurd header values before allocating T*D floats.
MAX_CELLS = 1 << 31


class FormatError(ValueError):
    """An on-disk artifact does not match its declared format."""


def check_features(values: np.ndarray) -> np.ndarray:
    """Validate a feature matrix: 2-D, T >= 1, D >= 1, all finite."""
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"feature matrix must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1:
        raise ValueError("feature matrix needs at least one frame (T >= 1)")
    if arr.shape[1] < 1:
        raise ValueError("feature matrix needs at least one dimension (D >= 1)")
    if not np.all(np.isfinite(arr)):
        raise ValueError("feature matrix contains NaN or Inf")
    return arr


def write_features(matrix: np.ndarray, path: str | Path) -> None:
    arr = check_features(matrix)
    t, d = arr.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<II", t, d))
        f.write(arr.astype("<f4").tobytes(order="C"))


def read_features(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != FEATURE_MAGIC:
            raise FormatError(f"bad magic in {path}: {magic!r}")
        header = f.read(8)
        if len(header) != 8:
            raise FormatError(f"truncated header in {path}")
        t, d = struct.unpack("<II", header)
        if t < 1:
            raise FormatError(f"invalid frame count T={t} in {path}")
        if d < 1:
            raise FormatError(f"invalid dimension D={d} in {path}")
        if t * d > MAX_CELLS:
            raise FormatError(f"T*D overflow (T={t}, D={d}) in {path}")
        payload = f.read(4 * t * d + 1)
        if len(payload) < 4 * t * d:
            raise FormatError(f"truncated payload in {path}: expected {4 * t * d} bytes")
        if len(payload) > 4 * t * d:
            raise FormatError(f"trailing bytes after payload in {path}")
    return np.frombuffer(payload, dtype="<f4").reshape(t, d).copy()


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    feats: str
    transcript: tuple[str, ...] | None
    domain: str


@dataclass
class Manifest:
    """Ordered list of utterance records, optionally anchored to a directory."""

    entries: list[ManifestEntry] = field(default_factory=list)
    base_dir: Path | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def feature_path(self, entry: ManifestEntry) -> Path:
        p = Path(entry.feats)
        if p.is_absolute() or self.base_dir is None:
            return p
        return self.base_dir / p


@dataclass(frozen=True)
class Utterance:
    id: str
    features: np.ndarray
    transcript: tuple[str, ...] | None
    domain: str


def load_utterance(manifest: Manifest, entry: ManifestEntry) -> Utterance:
    feats = read_features(manifest.feature_path(entry))
    return Utterance(entry.id, feats, entry.transcript, entry.domain)


def load_manifest(path: str | Path, check_files: bool = True) -> Manifest:
    path = Path(path)
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{lineno}: invalid JSON: {e}") from e
            for key in ("id", "feats", "domain"):
                if key not in rec:
                    raise FormatError(f"{path}:{lineno}: missing key {key!r}")
            uid = rec["id"]
            if uid in seen:
                raise FormatError(f"duplicate utterance id {uid!r} in {path}")
            seen.add(uid)
            transcript = None
            if rec.get("transcript") is not None:
                transcript = tuple(rec["transcript"].split())
            entries.append(ManifestEntry(uid, rec["feats"], transcript, rec["domain"]))
    manifest = Manifest(entries, base_dir=path.parent)
    if check_files:
        for e in entries:
            if not manifest.feature_path(e).exists():
                raise FormatError(f"feature file missing for utterance {e.id!r}: {e.feats}")
    return manifest


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        for e in manifest.entries:
            feats = e.feats
            if Path(feats).is_absolute():
                feats = os.path.relpath(feats, path.parent)
            rec: dict = {"id": e.id, "feats": feats}
            if e.transcript is not None:
                rec["transcript"] = " ".join(e.transcript)
            rec["domain"] = e.domain
            f.write(json.dumps(rec) + "\n")


@dataclass(frozen=True)
class Lexicon:
    """Word-to-spelling map plus the character inventory (blank excluded)."""

    words: tuple[str, ...]
    spellings: dict  # word -> tuple of characters
    inventory: tuple[str, ...]  # sorted characters

    @classmethod
    def from_entries(cls, entries: list[tuple[str, tuple[str, ...]]]) -> "Lexicon":
        spellings: dict = {}
        for word, chars in entries:
            if word in spellings:
                raise FormatError(f"duplicate lexicon word {word!r}")
            if not chars:
                raise FormatError(f"empty character sequence for word {word!r}")
            spellings[word] = tuple(chars)
        inventory = tuple(sorted({c for chars in spellings.values() for c in chars}))
        return cls(tuple(spellings.keys()), spellings, inventory)

    def spell(self, words) -> tuple[str, ...]:
        out: list[str] = []
        for w in words:
            if w not in self.spellings:
                raise KeyError(f"word {w!r} not in lexicon")
            out.extend(self.spellings[w])
        return tuple(out)


def load_lexicon(path: str | Path) -> Lexicon:
    entries: list[tuple[str, tuple[str, ...]]] = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise FormatError(f"{path}:{lineno}: expected 'word<TAB>chars'")
            word, chars = line.split("\t", 1)
            entries.append((word, tuple(chars.split())))
    try:
        return Lexicon.from_entries(entries)
    except FormatError as e:
        raise FormatError(f"{path}: {e}") from e


def save_lexicon(lexicon: Lexicon, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for word in lexicon.words:
            f.write(f"{word}\t{' '.join(lexicon.spellings[word])}\n")


def load_text(path: str | Path) -> list[tuple[str, ...]]:
    sentences = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            words = tuple(line.split())
            if words:
                sentences.append(words)
    return sentences


def save_text(sentences, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for sent in sentences:
            f.write(" ".join(sent) + "\n")


@dataclass(frozen=True)
class SynthSpec:
    """Configuration for the synthetic two-domain corpus.

    Each character maps to a prototype vector in R^dim; an utterance emits
    each transcript character for a uniform number of frames with Gaussian
    noise. Domain B adds a fixed channel offset (components drawn from
    N(0, offset_b^2)) and uses a larger noise scale.
    """

    vocab_size: int = 20
    inventory_size: int = 6
    dim: int = 8
    frames_per_char: tuple[int, int] = (2, 4)
    offset_b: float = 1.2
    noise_a: float = 0.3
    noise_b: float = 0.45
    n_supervised: int = 80
    n_untranscribed: int = 160
    untranscribed_b_fraction: float = 0.8
    n_test: int = 40
    n_text_sentences: int = 2000
    words_per_sentence: tuple[int, int] = (2, 5)
    word_length: tuple[int, int] = (2, 4)
    zipf_exponent: float = 1.0
    oov_test_words: int = 0
    seed: int = 7

    def validate(self) -> None:
        positive = {
            "vocab_size": self.vocab_size,
            "inventory_size": self.inventory_size,
            "dim": self.dim,
            "n_supervised": self.n_supervised,
            "n_untranscribed": self.n_untranscribed,
            "n_test": self.n_test,
            "n_text_sentences": self.n_text_sentences,
        }
        for name, value in positive.items():
            if value < 1:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.noise_a <= 0 or self.noise_b <= 0:
            raise ValueError("noise scales must be > 0")
        if not 0.0 <= self.untranscribed_b_fraction <= 1.0:
            raise ValueError("untranscribed_b_fraction must be in [0, 1]")
        if self.inventory_size > len(string.ascii_lowercase):
            raise ValueError("inventory_size exceeds available characters")
        lo, hi = self.frames_per_char
        if lo < 1 or hi < lo:
            raise ValueError("frames_per_char must satisfy 1 <= lo <= hi")
        if self.oov_test_words < 0 or self.oov_test_words > self.n_test:
            raise ValueError("oov_test_words must be in [0, n_test]")


@dataclass
class SynthCorpus:
    supervised: Manifest
    untranscribed: Manifest
    tests: dict  # domain tag -> Manifest
    lexicon: Lexicon
    text: list  # list of word tuples
    out_dir: Path


def _sample_prefix_free_words(rng, n, inventory, length_range, existing):
    """Draw n spellings such that no word is a prefix of another and no
    word repeats a character back-to-back.

    Prefix-freeness makes character streams uniquely segmentable by greedy
    longest-match, and avoiding adjacent repeats keeps frame sequences
    unambiguous (a doubled character is acoustically indistinguishable
    from a longer single one in this generative process).
    """
    words: list[str] = []
    pool = list(existing)
    lo, hi = length_range
    attempts = 0
    while len(words) < n:
        attempts += 1
        if attempts > 100000:
            raise ValueError("could not sample a prefix-free vocabulary; enlarge inventory")
        length = int(rng.integers(lo, hi + 1))
        chars = [inventory[int(i)] for i in rng.integers(0, len(inventory), size=length)]
        cand = "".join(chars)
        if any(x == y for x, y in zip(cand, cand[1:])):
            continue
        clash = any(w.startswith(cand) or cand.startswith(w) for w in pool)
        if not clash:
            words.append(cand)
            pool.append(cand)
    return words


def _emit_utterance(rng, spec: SynthSpec, prototypes, char_ids, transcript, offset, noise):
    frames = []
    lo, hi = spec.frames_per_char
    for word in transcript:
        for ch in word:
            n = int(rng.integers(lo, hi + 1))
            proto = prototypes[char_ids[ch]]
            block = proto + offset + rng.normal(size=(n, spec.dim)) * noise
            frames.append(block)
    return np.concatenate(frames, axis=0).astype(np.float32)


def synthesize_corpus(spec: SynthSpec, out_dir: str | Path) -> SynthCorpus:
    """Generate the corpus deterministically from spec.seed and write it out.

    Supervised data is domain A only; the untranscribed pool is mostly
    domain B; one test manifest per domain. Returns the loaded bundle.
    """
    spec.validate()
    out_dir = Path(out_dir)
    feats_dir = out_dir / "feats"
    feats_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    inventory = list(string.ascii_lowercase[: spec.inventory_size])
    vocab = _sample_prefix_free_words(rng, spec.vocab_size, inventory, spec.word_length, [])
    oov_words = _sample_prefix_free_words(
        rng, spec.oov_test_words, inventory, spec.word_length, vocab
    )
    char_ids = {c: i for i, c in enumerate(inventory)}
    prototypes = rng.normal(size=(len(inventory), spec.dim))
    offset_b = rng.normal(size=spec.dim) * spec.offset_b
    offsets = {"A": np.zeros(spec.dim), "B": offset_b}
    noises = {"A": spec.noise_a, "B": spec.noise_b}

    # Zipf-like word frequencies keep the trigram LM away from uniform.
    weights = 1.0 / np.arange(1, spec.vocab_size + 1) ** spec.zipf_exponent
    weights /= weights.sum()

    def sample_sentence():
        lo, hi = spec.words_per_sentence
        n = int(rng.integers(lo, hi + 1))
        out = []
        for _ in range(n):
            # Resample when a word boundary would repeat a character; the
            # concatenated character stream must stay repeat-free.
            for _ in range(1000):
                w = vocab[int(rng.choice(spec.vocab_size, p=weights))]
                if not out or out[-1][-1] != w[0]:
                    break
            out.append(w)
        return tuple(out)

    text = [sample_sentence() for _ in range(spec.n_text_sentences)]

    def make_split(prefix, count, domains, with_transcript, oov_pool=None):
        entries = []
        for i in range(count):
            domain = domains[i]
            transcript = list(sample_sentence())
            if oov_pool is not None and i < len(oov_pool):
                transcript[0] = oov_pool[i]
                while len(transcript) > 1 and transcript[0][-1] == transcript[1][0]:
                    del transcript[1]  # keep the character stream repeat-free
            transcript = tuple(transcript)
            feats = _emit_utterance(
                rng, spec, prototypes, char_ids, transcript, offsets[domain], noises[domain]
            )
            uid = f"{prefix}{i:04d}"
            rel = f"feats/{uid}.bin"
            write_features(feats, out_dir / rel)
            entries.append(
                ManifestEntry(uid, rel, transcript if with_transcript else None, domain)
            )
        return Manifest(entries, base_dir=out_dir)

    supervised = make_split("sup", spec.n_supervised, ["A"] * spec.n_supervised, True)
    n_b = int(round(spec.n_untranscribed * spec.untranscribed_b_fraction))
    unt_domains = ["B"] * n_b + ["A"] * (spec.n_untranscribed - n_b)
    untranscribed = make_split("unt", spec.n_untranscribed, unt_domains, False)
    test_a = make_split("tsa", spec.n_test, ["A"] * spec.n_test, True)
    test_b = make_split("tsb", spec.n_test, ["B"] * spec.n_test, True, oov_pool=oov_words)

    lexicon = Lexicon.from_entries([(w, tuple(w)) for w in vocab])

    save_manifest(supervised, out_dir / "supervised.jsonl")
    save_manifest(untranscribed, out_dir / "untranscribed.jsonl")
    save_manifest(test_a, out_dir / "test_a.jsonl")
    save_manifest(test_b, out_dir / "test_b.jsonl")
    save_lexicon(lexicon, out_dir / "lexicon.tsv")
    save_text(text, out_dir / "text.txt")

    return SynthCorpus(
        supervised=supervised,
        untranscribed=untranscribed,
        tests={"A": test_a, "B": test_b},
        lexicon=lexicon,
        text=text,
        out_dir=out_dir,
    )


def load_corpus(out_dir: str | Path) -> SynthCorpus:
    """Load a previously synthesized (or hand-built) corpus directory."""
    out_dir = Path(out_dir)
    return SynthCorpus(
        supervised=load_manifest(out_dir / "supervised.jsonl"),
        untranscribed=load_manifest(out_dir / "untranscribed.jsonl"),
        tests={
            "A": load_manifest(out_dir / "test_a.jsonl"),
            "B": load_manifest(out_dir / "test_b.jsonl"),
        },
        lexicon=load_lexicon(out_dir / "lexicon.tsv"),
        text=load_text(out_dir / "text.txt"),
        out_dir=out_dir,
    )
