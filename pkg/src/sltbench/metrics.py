"""Corpus BLEU-1..4 and ROUGE-L under explicit tokenization/smoothing profiles.

Scores are on a 0-100 scale.  A :class:`MetricProfile` fixes every
preprocessing decision that changes the number: casing, whether " ." is
appended to each sentence, word vs character segmentation and the smoothing
of zero n-gram matches.  :func:`audit` scores one corpus under several
profiles and reports the deltas.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, replace
from itertools import combinations

from .errors import ConfigError, EmptyCorpus, LengthMismatch


@dataclass(frozen=True)
class MetricProfile:
    name: str
    segmentation: str = "word"
    punctuation_append: str | None = None
    casing: str = "preserve"
    smoothing: str = "none"
    bleu_max_n: int = 4
    epsilon: float = 0.1  # used by add-epsilon smoothing

    def __post_init__(self):
        if self.segmentation not in ("word", "character"):
            raise ConfigError(f"unknown segmentation {self.segmentation!r}")
        if self.casing not in ("preserve", "lowercase"):
            raise ConfigError(f"unknown casing {self.casing!r}")
        if self.smoothing not in ("none", "exp-decay", "add-epsilon"):
            raise ConfigError(f"unknown smoothing {self.smoothing!r}")
        if self.bleu_max_n < 1:
            raise ConfigError("bleu_max_n must be >= 1")


PROFILES = {
    p.name: p for p in (
        MetricProfile("phoenix-legacy", "word", " .", "preserve", "none"),
        MetricProfile("csl-char", "character", None, "preserve", "none"),
        MetricProfile("sacre-like", "word", None, "preserve", "exp-decay"),
        MetricProfile("word", "word", None, "preserve", "none"),
        MetricProfile("char-exp", "character", None, "preserve", "exp-decay"),
    )
}


def get_profile(profile) -> MetricProfile:
    if isinstance(profile, MetricProfile):
        return profile
    try:
        return PROFILES[profile]
    except KeyError:
        raise ConfigError(f"unknown metric profile {profile!r}; "
                          f"known: {', '.join(PROFILES)}") from None


def apply_profile(text: str, profile) -> list[str]:
    """Casing, then punctuation append (non-empty text only), then segmentation."""
    profile = get_profile(profile)
    if profile.casing == "lowercase":
        text = text.lower()
    if profile.punctuation_append and text.strip():
        text = text + profile.punctuation_append
    if profile.segmentation == "word":
        return text.split()
    return [c for c in text if not c.isspace()]


def _check_corpus(candidates, references):
    if len(candidates) != len(references):
        raise LengthMismatch(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise EmptyCorpus("no sentence pairs")


def ngrams(tokens, n) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class BleuStats:
    matches: list[int]
    totals: list[int]
    cand_len: int
    ref_len: int
    precisions: list[float] = field(default_factory=list)

    @property
    def brevity_penalty(self) -> float:
        if self.cand_len == 0:
            return 0.0
        if self.cand_len > self.ref_len:
            return 1.0
        return math.exp(1.0 - self.ref_len / self.cand_len)


def bleu_stats(candidates, references, profile="word") -> BleuStats:
    """Clipped n-gram match counts accumulated over the corpus."""
    profile = get_profile(profile)
    _check_corpus(candidates, references)
    max_n = profile.bleu_max_n
    matches, totals = [0] * max_n, [0] * max_n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        c = apply_profile(cand, profile)
        r = apply_profile(ref, profile)
        c_len += len(c)
        r_len += len(r)
        for n in range(1, max_n + 1):
            cn, rn = ngrams(c, n), ngrams(r, n)
            matches[n - 1] += sum(min(k, rn[g]) for g, k in cn.items())
            totals[n - 1] += max(len(c) - n + 1, 0)
    stats = BleuStats(matches, totals, c_len, r_len)
    stats.precisions = _smoothed_precisions(stats, profile)
    return stats


def _smoothed_precisions(stats: BleuStats, profile: MetricProfile) -> list[float]:
    out = []
    decay = 1.0
    for m, t in zip(stats.matches, stats.totals):
        if m > 0:
            out.append(m / t)
        elif profile.smoothing == "exp-decay":
            decay *= 2.0
            out.append(1.0 / (decay * max(t, 1)))
        elif profile.smoothing == "add-epsilon":
            out.append(profile.epsilon / max(t, 1))
        else:
            out.append(0.0)
    return out


def bleu(candidates, references, profile="word") -> dict[int, float]:
    """BLEU-k for k = 1..bleu_max_n, each with uniform weights 1/k."""
    stats = bleu_stats(candidates, references, profile)
    bp = stats.brevity_penalty
    scores = {}
    for k in range(1, len(stats.precisions) + 1):
        ps = stats.precisions[:k]
        if bp == 0.0 or min(ps) == 0.0:
            scores[k] = 0.0
        else:
            scores[k] = 100.0 * bp * math.exp(sum(math.log(p) for p in ps) / k)
    return scores


def lcs_length(a, b) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_pair(cand_tokens, ref_tokens, beta=1.2) -> float:
    lcs = lcs_length(cand_tokens, ref_tokens)
    if lcs == 0:
        return 0.0
    p = lcs / len(cand_tokens)
    r = lcs / len(ref_tokens)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def rouge_l(candidates, references, profile="word", beta=1.2) -> float:
    """Mean sentence-level ROUGE-L F-score, x100."""
    profile = get_profile(profile)
    _check_corpus(candidates, references)
    total = sum(rouge_l_pair(apply_profile(c, profile), apply_profile(r, profile), beta)
                for c, r in zip(candidates, references))
    return 100.0 * total / len(candidates)


@dataclass
class ScoreReport:
    bleu: dict[int, float]
    rouge_l: float
    profile: str
    corpus_size: int

    def as_row(self) -> dict[str, float]:
        row = {f"bleu{n}": v for n, v in self.bleu.items()}
        row["rouge_l"] = self.rouge_l
        return row


def score(candidates, references, profile="word", beta=1.2) -> ScoreReport:
    profile = get_profile(profile)
    return ScoreReport(bleu(candidates, references, profile),
                       rouge_l(candidates, references, profile, beta),
                       profile.name, len(candidates))


@dataclass
class AuditReport:
    reports: dict[str, ScoreReport]
    deltas: dict[tuple[str, str], dict[str, float]]
    flagged: list[tuple[str, str, float]]
    threshold: float

    def lines(self) -> list[str]:
        out = []
        for name, rep in self.reports.items():
            cells = "  ".join(f"{k}={v:6.2f}" for k, v in rep.as_row().items())
            out.append(f"{name:16s} {cells}")
        for (a, b), d in self.deltas.items():
            cells = "  ".join(f"{k}={v:+6.2f}" for k, v in d.items())
            out.append(f"{b} - {a}: {cells}")
        for a, b, delta in self.flagged:
            out.append(f"INCONSISTENT: |BLEU-4({b}) - BLEU-4({a})| = {abs(delta):.2f} "
                       f"> {self.threshold:.2f}")
        return out


def audit(candidates, references, profiles, threshold=0.5, beta=1.2) -> AuditReport:
    """Score under each profile; flag pairs whose BLEU-4 differs by more than ``threshold``."""
    profiles = [get_profile(p) for p in profiles]
    if len(profiles) < 2:
        raise ConfigError("audit needs at least two profiles")
    reports = {p.name: score(candidates, references, p, beta) for p in profiles}
    deltas, flagged = {}, []
    for a, b in combinations(reports, 2):
        ra, rb = reports[a].as_row(), reports[b].as_row()
        d = {k: rb[k] - ra[k] for k in ra if k in rb}
        deltas[(a, b)] = d
        top = max(reports[a].bleu)
        if top >= 4 and abs(d["bleu4"]) > threshold:
            flagged.append((a, b, d["bleu4"]))
    return AuditReport(reports, deltas, flagged, threshold)


def with_overrides(profile, **changes) -> MetricProfile:
    return replace(get_profile(profile), **changes)
