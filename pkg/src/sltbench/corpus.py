"""Video/sentence corpora: manifests, frame sampling, tokenization, batching.

The manifest is a small line-oriented TSV file::

    #slt-manifest v1
    #name=toy
    #language=synthetic
    #frame_format=image-dir
    toy00000<TAB>train<TAB>frames/toy00000<TAB>SIGN7 SIGN1<TAB>SIGN1 SIGN7

``frames_path`` is resolved relative to the manifest's directory.
"""

from __future__ import annotations

import io
import logging
import math
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, NamedTuple, Sequence

import numpy as np
import torch
from PIL import Image

from .errors import (
    ConfigError,
    DuplicateId,
    ManifestError,
    MissingFrames,
    MissingSplit,
    UnsupportedLanguage,
)
from .seeding import derive_seed, numpy_rng

log = logging.getLogger(__name__)

MANIFEST_HEADER = "#slt-manifest v1"
SPLITS = ("train", "dev", "test")
LANGUAGES = ("german", "chinese", "synthetic")
FRAME_FORMATS = ("image-dir", "packed-video")


# ---------------------------------------------------------------------------
# manifest

@dataclass(frozen=True)
class ManifestEntry:
    id: str
    split: str
    frames_path: str
    sentence: str
    gloss: tuple[str, ...] | None = None


@dataclass
class CorpusManifest:
    name: str
    language: str
    entries: list[ManifestEntry]
    frame_format: str = "image-dir"
    root: Path = field(default=Path("."), compare=False, repr=False)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def split_sizes(self) -> dict[str, int]:
        counts = Counter(e.split for e in self.entries)
        return {s: counts.get(s, 0) for s in SPLITS}

    def frames_dir(self, entry: ManifestEntry) -> Path:
        return self.root / entry.frames_path


def _check_field(value: str, what: str) -> None:
    if "\t" in value or "\n" in value:
        raise ManifestError(f"{what} may not contain tabs or newlines: {value!r}")


def validate_manifest(manifest: CorpusManifest, *, check_frames: bool = True,
                      require_splits: bool = True) -> None:
    if manifest.language not in LANGUAGES:
        raise ManifestError(f"unknown language {manifest.language!r}")
    if manifest.frame_format not in FRAME_FORMATS:
        raise ManifestError(f"unknown frame format {manifest.frame_format!r}")
    seen = set()
    for e in manifest.entries:
        if e.id in seen:
            raise DuplicateId(e.id)
        seen.add(e.id)
        if e.split not in SPLITS:
            raise ManifestError(f"entry {e.id!r}: split {e.split!r} not in {SPLITS}")
        if not e.sentence.strip():
            raise ManifestError(f"entry {e.id!r}: empty sentence")
    if require_splits:
        sizes = manifest.split_sizes()
        empty = [s for s in SPLITS if sizes[s] == 0]
        if empty:
            raise MissingSplit(", ".join(empty))
    if check_frames:
        missing = [e.id for e in manifest.entries if not _frames_present(manifest, e)]
        if missing:
            raise MissingFrames(missing)


def _frames_present(manifest: CorpusManifest, entry: ManifestEntry) -> bool:
    path = manifest.frames_dir(entry)
    if manifest.frame_format == "image-dir":
        return path.is_dir() and any(path.glob("*.png"))
    return path.is_file()


def load_manifest(path, *, check_frames: bool = True,
                  require_splits: bool = True) -> CorpusManifest:
    """Parse and eagerly validate a manifest file."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = text.split("\n")
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise ManifestError(f"{path}: missing header line {MANIFEST_HEADER!r}")
    meta = {"name": path.stem, "language": "synthetic", "frame_format": "image-dir"}
    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, sep, value = line[1:].partition("=")
            if sep:
                meta[key.strip()] = value.strip()
            continue
        fields = line.split("\t")
        if len(fields) not in (4, 5):
            raise ManifestError(f"{path}:{lineno}: expected 4 or 5 tab-separated fields")
        gloss = tuple(fields[4].split()) if len(fields) == 5 and fields[4].strip() else None
        entries.append(ManifestEntry(fields[0], fields[1], fields[2], fields[3], gloss))
    manifest = CorpusManifest(meta["name"], meta["language"], entries,
                              meta["frame_format"], root=path.parent)
    validate_manifest(manifest, check_frames=check_frames, require_splits=require_splits)
    return manifest


def dump_manifest(manifest: CorpusManifest) -> str:
    out = [MANIFEST_HEADER,
           f"#name={manifest.name}",
           f"#language={manifest.language}",
           f"#frame_format={manifest.frame_format}"]
    for e in manifest.entries:
        for value, what in ((e.id, "id"), (e.split, "split"),
                            (e.frames_path, "frames_path"), (e.sentence, "sentence")):
            _check_field(value, what)
        row = [e.id, e.split, e.frames_path, e.sentence]
        if e.gloss is not None:
            row.append(" ".join(e.gloss))
        out.append("\t".join(row))
    return "\n".join(out) + "\n"


def save_manifest(manifest: CorpusManifest, path) -> None:
    Path(path).write_text(dump_manifest(manifest), encoding="utf-8", newline="\n")


# ---------------------------------------------------------------------------
# frames

def _read_image_dir(path: Path) -> np.ndarray:
    files = sorted(path.glob("*.png"))
    frames = [np.asarray(Image.open(f).convert("RGB")) for f in files]
    return np.stack(frames)


def _read_npy(path: Path) -> np.ndarray:
    return np.load(path, allow_pickle=False)


# suffix -> decoder for packed single-file videos
FRAME_DECODERS: dict[str, Callable[[Path], np.ndarray]] = {".npy": _read_npy}


def register_frame_decoder(suffix: str, decoder: Callable[[Path], np.ndarray]) -> None:
    FRAME_DECODERS[suffix.lower()] = decoder


def read_frames(manifest: CorpusManifest, entry: ManifestEntry) -> np.ndarray:
    path = manifest.frames_dir(entry)
    if manifest.frame_format == "image-dir":
        frames = _read_image_dir(path)
    else:
        try:
            decoder = FRAME_DECODERS[path.suffix.lower()]
        except KeyError:
            raise ManifestError(f"no frame decoder registered for {path.suffix!r}") from None
        frames = decoder(path)
    if frames.ndim != 4 or frames.shape[-1] != 3 or len(frames) == 0:
        raise ManifestError(f"{entry.id}: frames must be a non-empty T x H x W x 3 array")
    return frames.astype(np.uint8, copy=False)


@dataclass
class Sample:
    id: str
    frames: np.ndarray  # T x H x W x 3, uint8
    sentence: str
    gloss: tuple[str, ...] | None = None
    split: str = "train"

    def __post_init__(self):
        if len(self.frames) < 1:
            raise ValueError(f"sample {self.id}: no frames")
        if self.frames.ndim != 4:
            raise ValueError(f"sample {self.id}: frames must be T x H x W x 3")
        if not self.sentence.strip():
            raise ValueError(f"sample {self.id}: empty sentence")


def load_samples(manifest: CorpusManifest, split: str | None = None) -> list[Sample]:
    entries = manifest.entries if split is None else manifest.split(split)
    return [Sample(e.id, read_frames(manifest, e), e.sentence, e.gloss, e.split)
            for e in entries]


# ---------------------------------------------------------------------------
# frame sampling

@dataclass(frozen=True)
class SamplingPolicy:
    strategy: str = "random_cap"
    max_frames: int = 300
    keep_ratio: float = 1.0

    def __post_init__(self):
        if self.strategy not in ("random_cap", "uniform_subsample"):
            raise ConfigError(f"unknown sampling strategy {self.strategy!r}")
        if self.max_frames < 1:
            raise ConfigError("max_frames must be positive")
        if not 0.0 < self.keep_ratio <= 1.0:
            raise ConfigError("keep_ratio must lie in (0, 1]")


# frame sampling rows of the compared methods' original setups
SAMPLING_PRESETS = {
    "random": SamplingPolicy("random_cap", 300),
    "subsample25": SamplingPolicy("uniform_subsample", 300, 0.25),
    "subsample50": SamplingPolicy("uniform_subsample", 300, 0.5),
}


def sample_indices(num_frames: int, policy: SamplingPolicy, seed: int) -> np.ndarray:
    """Strictly increasing frame indices selected by ``policy``."""
    if num_frames < 1:
        raise ValueError("need at least one frame")
    idx = np.arange(num_frames)
    if policy.strategy == "uniform_subsample":
        n = math.ceil(policy.keep_ratio * num_frames)
        # +1e-9 guards floor() against 1/keep_ratio round-off
        idx = np.floor(np.arange(n) / policy.keep_ratio + 1e-9).astype(np.int64)
    if len(idx) > policy.max_frames:
        rng = numpy_rng(seed, "frame-cap")
        keep = np.sort(rng.choice(len(idx), size=policy.max_frames, replace=False))
        idx = idx[keep]
    return idx


def sample_frames(frames, policy: SamplingPolicy, seed: int):
    return frames[sample_indices(len(frames), policy, seed)]


# ---------------------------------------------------------------------------
# tokenization

SPECIALS = ("<pad>", "<bos>", "<eos>", "<mask>", "<unk>")
PAD, BOS, EOS, MASK, UNK = range(len(SPECIALS))


class Tokenizer:
    """Token <-> id bijection with fixed special ids (pad=0, bos=1, eos=2, mask=3, unk=4).

    ``segmentation`` is ``word`` (whitespace), ``character`` (code points,
    whitespace dropped) or ``subword-external``, in which case ``splitter``
    must map a string to SentencePiece-style pieces ("▁" marks a word start).
    """

    def __init__(self, tokens: Sequence[str], segmentation: str = "word",
                 splitter: Callable[[str], list[str]] | None = None):
        if segmentation not in ("word", "character", "subword-external"):
            raise ConfigError(f"unknown segmentation {segmentation!r}")
        if segmentation == "subword-external" and splitter is None:
            raise ConfigError("subword-external segmentation needs a splitter")
        self.segmentation = segmentation
        self.splitter = splitter
        self.itos = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ConfigError("duplicate tokens in vocabulary")

    @classmethod
    def from_corpus(cls, sentences, segmentation="word", splitter=None, min_freq=1):
        probe = cls([], segmentation, splitter)
        counts = Counter(t for s in sentences for t in probe.segment(s))
        # frequency-descending, ties alphabetical: deterministic across runs
        tokens = sorted((t for t, c in counts.items() if c >= min_freq),
                        key=lambda t: (-counts[t], t))
        return cls(tokens, segmentation, splitter)

    def __len__(self):
        return len(self.itos)

    def segment(self, text: str) -> list[str]:
        if self.segmentation == "word":
            return text.split()
        if self.segmentation == "character":
            return [c for c in text if not c.isspace()]
        return list(self.splitter(text))

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(t, UNK) for t in self.segment(text)]

    def decode(self, ids) -> str:
        tokens = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            tokens.append(self.itos[i])
        if self.segmentation == "word":
            return " ".join(tokens)
        if self.segmentation == "character":
            return "".join(tokens)
        return "".join(tokens).replace("▁", " ").strip()

    def to_dict(self) -> dict:
        return {"segmentation": self.segmentation, "tokens": self.itos[len(SPECIALS):]}

    @classmethod
    def from_dict(cls, data, splitter=None):
        return cls(data["tokens"], data["segmentation"], splitter)


class GlossVocab:
    """Pseudo-gloss label set; id 0 is the alignment blank."""

    BLANK = 0

    def __init__(self, tokens: Sequence[str]):
        self.itos = ["<blank>"] + list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    @classmethod
    def from_glosses(cls, glosses):
        return cls(sorted({g for seq in glosses for g in seq}))

    def __len__(self):
        return len(self.itos)

    def encode(self, tokens) -> list[int]:
        return [self.stoi[t] for t in tokens if t in self.stoi]


# ---------------------------------------------------------------------------
# pseudo-glosses

DEFAULT_KEEP_POS = frozenset({"NOUN", "VERB", "ADJ", "ADV", "NUM"})


class TaggedToken(NamedTuple):
    text: str
    pos: str
    lemma: str


def identity_tagger(sentence: str) -> list[TaggedToken]:
    return [TaggedToken(t, "NOUN", t) for t in sentence.split()]


class LexiconTagger:
    """Closed-class lexicon tagger.

    Words found in ``closed`` get that tag, numerals get NUM, words in
    ``adverbs`` get ADV and everything else is treated as open-class (NOUN).
    Lemmas are the lower-cased surface forms unless ``lemmas`` maps them.
    """

    _number = re.compile(r"^[+-]?\d+([.,]\d+)?$")

    def __init__(self, closed: dict[str, str], adverbs=(), numerals=(), lemmas=None,
                 split: Callable[[str], list[str]] = str.split):
        self.closed = closed
        self.adverbs = frozenset(adverbs)
        self.numerals = frozenset(numerals)
        self.lemmas = dict(lemmas or {})
        self.split = split

    def __call__(self, sentence: str) -> list[TaggedToken]:
        out = []
        for tok in self.split(sentence):
            low = tok.lower()
            if low in self.closed:
                pos = self.closed[low]
            elif self._number.match(low) or low in self.numerals:
                pos = "NUM"
            elif low in self.adverbs:
                pos = "ADV"
            else:
                pos = "NOUN"
            out.append(TaggedToken(tok, pos, self.lemmas.get(low, low)))
        return out


def _closed(tag, words):
    return {w: tag for w in words.split()}


_GERMAN_CLOSED = {
    **_closed("DET", "der die das den dem des ein eine einen einem einer eines kein keine "
                     "keinen keinem keiner dieser diese dieses diesen diesem jeder jede "
                     "jedes jeden jedem"),
    **_closed("PRON", "ich du er sie es wir ihr man sich mich mir dich dir uns euch ihnen "
                      "ihm ihn was wer"),
    **_closed("ADP", "in im an am auf aus bei mit nach von vom zu zum zur über unter vor "
                     "hinter neben zwischen durch für gegen ohne um bis seit ab"),
    **_closed("CCONJ", "und oder aber sondern denn sowie"),
    **_closed("SCONJ", "dass ob weil wenn als wie während"),
    **_closed("AUX", "ist sind war waren bin bist seid sein wird werden wurde wurden "
                     "hat haben hatte hatten kann können muss müssen darf dürfen soll "
                     "sollen will wollen"),
    **_closed("PART", "nicht zu ja nein auch noch schon nur"),
}

_GERMAN_ADVERBS = ("heute morgen gestern sehr dann jetzt bald später oft immer wieder "
                   "weiter überall dort hier meist meistens vereinzelt teilweise "
                   "zunächst nachher abends nachts tagsüber").split()

_GERMAN_NUMERALS = ("null eins zwei drei vier fünf sechs sieben acht neun zehn elf "
                    "zwölf zwanzig dreißig hundert").split()

_CHINESE_CLOSED = {
    **_closed("PART", "的 了 吗 呢 吧 啊 着 过 地 得"),
    **_closed("PRON", "我 你 他 她 它 我们 你们 他们 这 那 这个 那个"),
    **_closed("ADP", "在 从 对 把 被 给 向 跟"),
    **_closed("CCONJ", "和 与 或 但是 而且"),
    **_closed("AUX", "是 会 能 要 可以"),
}

_TAGGERS: dict[str, Callable[[str], list[TaggedToken]]] = {
    "synthetic": identity_tagger,
    "german": LexiconTagger(_GERMAN_CLOSED, _GERMAN_ADVERBS, _GERMAN_NUMERALS),
    "chinese": LexiconTagger(_CHINESE_CLOSED),
}


def register_tagger(language: str, tagger: Callable[[str], list[TaggedToken]]) -> None:
    """Plug in a real POS tagger/lemmatizer (e.g. a spaCy pipeline wrapper)."""
    _TAGGERS[language] = tagger


def extract_pseudo_gloss(sentence: str, language: str,
                         keep_pos=DEFAULT_KEEP_POS) -> list[str]:
    """Content-word lemmas of ``sentence``, upper-cased, in sentence order."""
    if not sentence.strip():
        raise ValueError("pseudo-gloss extraction needs a non-empty sentence")
    try:
        tagger = _TAGGERS[language]
    except KeyError:
        raise UnsupportedLanguage(language) from None
    return [tok.lemma.upper() for tok in tagger(sentence) if tok.pos in keep_pos]


# ---------------------------------------------------------------------------
# toy corpus

@dataclass(frozen=True)
class ToyCorpusSpec:
    num_signs: int = 10
    num_sentences: int = 200
    min_len: int = 2
    max_len: int = 5
    seed: int = 0
    frames_per_sign: int = 4
    image_size: int = 16
    jitter: int = 12

    def validate(self):
        if not 2 <= self.num_signs <= 256:
            raise ConfigError("num_signs must lie in [2, 256]")
        if self.num_sentences < 3:
            raise ConfigError("need at least 3 sentences for train/dev/test splits")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("need 1 <= min_len <= max_len")
        if self.frames_per_sign < 1:
            raise ConfigError("frames_per_sign must be positive")
        if self.max_len * self.frames_per_sign > 300:
            raise ConfigError("max_len * frames_per_sign exceeds the 300-frame cap")
        if self.image_size < 4 or self.image_size % 4:
            raise ConfigError("image_size must be a positive multiple of 4")


def sign_glyph(sign: int, size: int = 16) -> np.ndarray:
    """Fixed colour-block pattern for ``sign`` (independent of the corpus seed)."""
    rng = numpy_rng("glyph", sign)
    cells = rng.integers(0, 256, size=(4, 4, 3), dtype=np.int64)
    # a one-hot-ish stripe keyed on the sign id keeps small-vocab glyphs far apart
    cells[sign % 4, :, sign % 3] = 255
    cells[:, (sign // 4) % 4, (sign + 1) % 3] = 0
    return np.kron(cells, np.ones((size // 4, size // 4, 1), dtype=np.int64)).astype(np.uint8)


def sentence_for_signs(signs: Sequence[int]) -> str:
    """Target sentence: sign tokens in reverse signing order."""
    return " ".join(f"SIGN{s}" for s in reversed(signs))


def render_signs(signs: Sequence[int], spec: ToyCorpusSpec, sample_key) -> np.ndarray:
    rng = numpy_rng(spec.seed, "jitter", sample_key)
    frames = []
    for s in signs:
        glyph = sign_glyph(s, spec.image_size).astype(np.int64)
        for _ in range(spec.frames_per_sign):
            noise = rng.integers(-spec.jitter, spec.jitter + 1, size=glyph.shape)
            frames.append(np.clip(glyph + noise, 0, 255).astype(np.uint8))
    return np.stack(frames)


def _png_bytes(frame: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(frame, mode="RGB").save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def gen_toy_corpus(out_dir, num_signs=10, num_sentences=200, min_len=2, max_len=5,
                   seed=0, frames_per_sign=4, image_size=16) -> CorpusManifest:
    """Write a deterministic synthetic corpus under ``out_dir`` and return its manifest."""
    spec = ToyCorpusSpec(num_signs, num_sentences, min_len, max_len, seed,
                         frames_per_sign, image_size)
    spec.validate()
    out_dir = Path(out_dir)
    rng = numpy_rng(seed, "toy-sentences")
    sequences = []
    for _ in range(num_sentences):
        length = int(rng.integers(min_len, max_len + 1))
        seq = [int(rng.integers(num_signs))]
        while len(seq) < length:
            # no immediate repeats: each sign stays a separate visual segment
            nxt = int(rng.integers(num_signs - 1))
            seq.append(nxt if nxt < seq[-1] else nxt + 1)
        sequences.append(seq)

    order = numpy_rng(seed, "toy-splits").permutation(num_sentences)
    n_dev = max(1, round(0.1 * num_sentences))
    n_test = max(1, round(0.1 * num_sentences))
    n_train = num_sentences - n_dev - n_test
    split_of = {}
    for rank, i in enumerate(order):
        split_of[int(i)] = "train" if rank < n_train else "dev" if rank < n_train + n_dev else "test"

    entries = []
    for i, seq in enumerate(sequences):
        sid = f"toy{i:05d}"
        rel = f"frames/{sid}"
        frame_dir = out_dir / rel
        frame_dir.mkdir(parents=True, exist_ok=True)
        for t, frame in enumerate(render_signs(seq, spec, i)):
            (frame_dir / f"{t:06d}.png").write_bytes(_png_bytes(frame))
        entries.append(ManifestEntry(sid, split_of[i], rel, sentence_for_signs(seq),
                                     tuple(f"SIGN{s}" for s in seq)))
    manifest = CorpusManifest(f"toy-s{num_signs}-n{num_sentences}-seed{seed}", "synthetic",
                              entries, "image-dir", root=out_dir)
    save_manifest(manifest, out_dir / "manifest.tsv")
    return manifest


# ---------------------------------------------------------------------------
# batching

@dataclass
class Batch:
    ids: list[str]
    frames: torch.Tensor        # B x T x 3 x H x W, float in [0, 1]
    frame_mask: torch.Tensor    # B x T, bool (True = real frame)
    frame_lengths: torch.Tensor
    text_ids: torch.Tensor      # B x U, <bos> ... <eos>, PAD-padded
    text_mask: torch.Tensor
    text_lengths: torch.Tensor
    sentences: list[str]
    gloss_ids: torch.Tensor | None = None   # B x G, padded with blank (0)
    gloss_lengths: torch.Tensor | None = None

    def __len__(self):
        return len(self.ids)


def make_batch(samples: Sequence[Sample], tokenizer: Tokenizer, policy: SamplingPolicy,
               seed: int, gloss_vocab: GlossVocab | None = None,
               pseudo_glosses: dict[str, list[str]] | None = None) -> Batch:
    if not samples:
        raise ValueError("empty batch")
    clips = [sample_frames(s.frames, policy, derive_seed(seed, s.id)) for s in samples]
    shapes = {c.shape[1:] for c in clips}
    if len(shapes) != 1:
        raise ValueError(f"frames of different sizes in one batch: {sorted(shapes)}")
    h, w, _ = clips[0].shape[1:]
    t_max = max(len(c) for c in clips)
    frames = torch.zeros(len(clips), t_max, 3, h, w)
    frame_mask = torch.zeros(len(clips), t_max, dtype=torch.bool)
    for b, clip in enumerate(clips):
        frames[b, :len(clip)] = torch.from_numpy(clip).permute(0, 3, 1, 2).float() / 255.0
        frame_mask[b, :len(clip)] = True

    seqs = [[BOS] + tokenizer.encode(s.sentence) + [EOS] for s in samples]
    u_max = max(len(s) for s in seqs)
    text_ids = torch.full((len(seqs), u_max), PAD, dtype=torch.long)
    for b, seq in enumerate(seqs):
        text_ids[b, :len(seq)] = torch.tensor(seq)
    text_lengths = torch.tensor([len(s) for s in seqs])

    batch = Batch(
        ids=[s.id for s in samples],
        frames=frames,
        frame_mask=frame_mask,
        frame_lengths=frame_mask.sum(1),
        text_ids=text_ids,
        text_mask=text_ids != PAD,
        text_lengths=text_lengths,
        sentences=[s.sentence for s in samples],
    )
    if gloss_vocab is not None and pseudo_glosses is not None:
        gl = [gloss_vocab.encode(pseudo_glosses[s.id]) for s in samples]
        g_max = max(1, max(len(g) for g in gl))
        gloss_ids = torch.zeros(len(gl), g_max, dtype=torch.long)
        for b, g in enumerate(gl):
            gloss_ids[b, :len(g)] = torch.tensor(g, dtype=torch.long)
        batch.gloss_ids = gloss_ids
        batch.gloss_lengths = torch.tensor([len(g) for g in gl])
    return batch


def _chunk(order, batch_size):
    """Consecutive chunks; a trailing chunk of one joins its predecessor so that
    in-batch contrastive terms always have a negative."""
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2:] = [np.concatenate(chunks[-2:])]
    return chunks


class SLTData:
    """In-memory corpus with its vocabularies; produces deterministic batches."""

    def __init__(self, manifest: CorpusManifest, policy: SamplingPolicy | None = None,
                 segmentation: str = "word", splitter=None, tokenizer: Tokenizer | None = None):
        self.manifest = manifest
        self.language = manifest.language
        self.policy = policy or SamplingPolicy()
        self.samples = {s: load_samples(manifest, s) for s in SPLITS}
        train_sentences = [s.sentence for s in self.samples["train"]]
        self.tokenizer = tokenizer or Tokenizer.from_corpus(train_sentences, segmentation,
                                                            splitter)
        self._pseudo = None
        self._gloss_vocab = None

    @classmethod
    def from_path(cls, path, policy=None, segmentation="word", splitter=None, tokenizer=None):
        return cls(load_manifest(path), policy, segmentation, splitter, tokenizer)

    @property
    def pseudo_glosses(self) -> dict[str, list[str]]:
        if self._pseudo is None:
            self._pseudo = {s.id: extract_pseudo_gloss(s.sentence, self.language)
                            for split in SPLITS for s in self.samples[split]}
        return self._pseudo

    @property
    def gloss_vocab(self) -> GlossVocab:
        if self._gloss_vocab is None:
            train = [self.pseudo_glosses[s.id] for s in self.samples["train"]]
            self._gloss_vocab = GlossVocab.from_glosses(train)
        return self._gloss_vocab

    def num_batches(self, split: str, batch_size: int) -> int:
        return len(_chunk(np.arange(len(self.samples[split])), batch_size))

    def batches(self, split: str, batch_size: int, seed: int, epoch: int = 0,
                shuffle: bool = False, with_glosses: bool = False,
                workers: int = 1) -> Iterator[Batch]:
        """Batches of ``split``; order and content depend only on (seed, epoch)."""
        samples = self.samples[split]
        order = np.arange(len(samples))
        if shuffle:
            order = numpy_rng(seed, "data-shuffle", epoch).permutation(len(samples))
        chunks = _chunk(order, batch_size)
        gv = self.gloss_vocab if with_glosses else None
        pg = self.pseudo_glosses if with_glosses else None

        def build(k):
            return make_batch([samples[i] for i in chunks[k]], self.tokenizer, self.policy,
                              derive_seed(seed, "frames", epoch, k), gv, pg)

        if workers <= 1:
            for k in range(len(chunks)):
                yield build(k)
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                yield from pool.map(build, range(len(chunks)))
