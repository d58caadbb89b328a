"""Pretraining and fine-tuning losses, and their declarative composition."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .corpus import BOS, EOS, MASK, PAD
from .errors import ConfigError, DegenerateBatch, LengthError, NumericalError

log = logging.getLogger(__name__)

LOSS_NAMES = (
    "clip_contrastive",
    "masked_sentence",
    "adjacent_frame",
    "pseudo_gloss_align",
    "light_translation",
    "cico_contrastive",
    "translation",
)


@dataclass
class ObjectiveSpec:
    terms: list[tuple[str, float]]
    temperature: float = 0.07
    mask_ratio: float = 0.15
    margin: float = 0.5
    gap: int = 16
    sampled_negatives: bool = False
    label_smoothing: float = 0.2
    cico_aggregation: str = "mean-of-max"

    def __post_init__(self):
        self.terms = [(str(n), float(w)) for n, w in self.terms]
        if not self.terms:
            raise ConfigError("objective needs at least one term")
        for name, weight in self.terms:
            if name not in LOSS_NAMES:
                raise ConfigError(f"unknown loss term {name!r}")
            if not math.isfinite(weight) or weight < 0:
                raise ConfigError(f"weight of {name} must be finite and non-negative")
        if not any(w > 0 for _, w in self.terms):
            raise ConfigError("objective needs a term with positive weight")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if not 0 < self.mask_ratio < 1:
            raise ConfigError("mask_ratio must lie in (0, 1)")
        if self.margin <= 0 or self.gap < 1:
            raise ConfigError("margin and gap must be positive")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if self.cico_aggregation not in ("mean-of-max", "max-of-max"):
            raise ConfigError(f"unknown cico aggregation {self.cico_aggregation!r}")

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.terms]

    def to_dict(self) -> dict:
        return {"terms": [[n, w] for n, w in self.terms], "temperature": self.temperature,
                "mask_ratio": self.mask_ratio, "margin": self.margin, "gap": self.gap,
                "sampled_negatives": self.sampled_negatives,
                "label_smoothing": self.label_smoothing,
                "cico_aggregation": self.cico_aggregation}

    @classmethod
    def from_dict(cls, data) -> "ObjectiveSpec":
        data = dict(data)
        data["terms"] = [tuple(t) for t in data["terms"]]
        return cls(**data)


# Pretraining objectives of the compared methods; the fine-tuning stage is
# always plain translation (plus the adjacent-frame term for signcl).
PRETRAIN_OBJECTIVES = {
    "gfslt_vlp": [("clip_contrastive", 1.0), ("masked_sentence", 1.0)],
    "signcl": [("clip_contrastive", 1.0), ("masked_sentence", 1.0), ("adjacent_frame", 1.0)],
    "sign2gpt_pg": [("pseudo_gloss_align", 1.0)],
    "fla_llm": [("light_translation", 1.0)],
    "c2rl": [("cico_contrastive", 1.0), ("light_translation", 1.0)],
    "c2rl_icl": [("cico_contrastive", 1.0)],
}
FINETUNE_OBJECTIVES = {
    "signcl": [("translation", 1.0), ("adjacent_frame", 1.0)],
}


def preset_objective(preset: str, stage: str, **kw) -> ObjectiveSpec:
    if stage == "pretrain":
        if preset not in PRETRAIN_OBJECTIVES:
            raise ConfigError(f"preset {preset!r} has no pretraining objective")
        return ObjectiveSpec(PRETRAIN_OBJECTIVES[preset], **kw)
    return ObjectiveSpec(FINETUNE_OBJECTIVES.get(preset, [("translation", 1.0)]), **kw)


# ---------------------------------------------------------------------------
# contrastive alignment

def _symmetric_infonce(sim: torch.Tensor, temperature) -> torch.Tensor:
    logits = sim / temperature
    target = torch.arange(sim.shape[0], device=sim.device)
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def _check_norms(x: torch.Tensor, what: str) -> None:
    if (x.norm(dim=-1) == 0).any():
        raise NumericalError(f"{what} contains a zero-norm vector")


def clip_contrastive(video: torch.Tensor, text: torch.Tensor, temperature=0.07):
    """Symmetric InfoNCE over cosine similarities of paired summaries (N x D each)."""
    if video.shape[0] < 2:
        raise DegenerateBatch("contrastive loss needs at least two pairs")
    _check_norms(video, "video summaries")
    _check_norms(text, "text summaries")
    sim = F.normalize(video, dim=-1) @ F.normalize(text, dim=-1).T
    return _symmetric_infonce(sim, temperature)


def cico_similarity(video, video_mask, text, text_mask, aggregation="mean-of-max"):
    """N x N fine-grained similarity between frame and token sequences.

    For clip i and sentence j, every frame takes its best-matching token and
    every token its best-matching frame; the two directions are averaged.
    """
    v = F.normalize(video, dim=-1)
    t = F.normalize(text, dim=-1)
    cos = torch.einsum("ifd,jud->ijfu", v, t)
    valid = video_mask[:, None, :, None] & text_mask[None, :, None, :]
    cos = cos.masked_fill(~valid, -torch.inf)
    v2t = cos.max(3).values  # i x j x frames
    t2v = cos.max(2).values  # i x j x tokens
    vm = video_mask[:, None, :].expand_as(v2t)
    tm = text_mask[None, :, :].expand_as(t2v)
    if aggregation == "mean-of-max":
        v2t = torch.where(vm, v2t, 0.0).sum(2) / vm.sum(2)
        t2v = torch.where(tm, t2v, 0.0).sum(2) / tm.sum(2)
    else:
        v2t = v2t.max(2).values
        t2v = t2v.max(2).values
    return 0.5 * (v2t + t2v)


def cico_contrastive(video, video_mask, text, text_mask, temperature=0.07,
                     aggregation="mean-of-max"):
    if video.shape[0] < 2:
        raise DegenerateBatch("contrastive loss needs at least two pairs")
    if not video_mask.any(1).all() or not text_mask.any(1).all():
        raise DegenerateBatch("every sequence needs at least one valid position")
    _check_norms(video[video_mask], "video features")
    _check_norms(text[text_mask], "text features")
    sim = cico_similarity(video, video_mask, text, text_mask, aggregation)
    return _symmetric_infonce(sim, temperature)


# ---------------------------------------------------------------------------
# token-level cross-entropies

def label_smoothed_nll(logits, targets, mask=None, smoothing=0.0):
    """Mean over valid positions of -sum_k q_k log p_k.

    ``q`` puts ``1 - smoothing`` on the target and spreads ``smoothing``
    uniformly over the whole vocabulary.
    """
    logp = F.log_softmax(logits, -1)
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    uniform = -logp.mean(-1)
    loss = (1.0 - smoothing) * nll + smoothing * uniform
    if mask is None:
        return loss.mean()
    mask = mask.to(loss.dtype)
    return (loss * mask).sum() / mask.sum().clamp(min=1)


def mask_tokens(ids, mask, ratio, generator=None):
    """Replace ceil(ratio * U) random non-special positions per row with <mask>."""
    out = ids.clone()
    special = (ids == PAD) | (ids == BOS) | (ids == EOS)
    for b in range(ids.shape[0]):
        candidates = torch.nonzero(mask[b] & ~special[b]).flatten()
        if len(candidates) == 0:
            continue
        k = math.ceil(ratio * len(candidates))
        pick = torch.randperm(len(candidates), generator=generator)[:k]
        out[b, candidates[pick]] = MASK
    return out


def masked_sentence(model, text_ids, text_mask, ratio=0.15, generator=None,
                    which="shallow"):
    """Reconstruct the full sentence from its masked version.

    The masked sentence is encoded by the text encoder; the decoder, fed the
    original sentence shifted right, predicts every position.
    """
    corrupted = mask_tokens(text_ids, text_mask, ratio, generator)
    memory = model.encode_text(corrupted, text_mask)
    logits = model.decode_text(memory.features, memory.mask, text_ids[:, :-1],
                               text_mask[:, :-1], which)
    return label_smoothed_nll(logits, text_ids[:, 1:], text_mask[:, 1:])


def translation_loss(model, video, text_ids, text_mask, smoothing=0.2, which="shallow"):
    logits = model.decode_text(video.features, video.mask, text_ids[:, :-1],
                               text_mask[:, :-1], which)
    return label_smoothed_nll(logits, text_ids[:, 1:], text_mask[:, 1:], smoothing)


# ---------------------------------------------------------------------------
# adjacent-frame triplet

def adjacent_frame_contrastive(features, mask=None, margin=0.5, gap=16, sampled=False,
                               generator=None):
    """Triplet hinge pulling step t+1 towards t and pushing step t+gap away.

    ``features`` is T x D or B x T x D.  Distances are Euclidean between
    L2-normalised features.  With ``sampled`` the negative offset is drawn
    uniformly from the valid offsets >= gap.
    """
    if features.dim() == 2:
        features = features[None]
        mask = None if mask is None else mask[None]
    b, t, _ = features.shape
    if mask is None:
        mask = torch.ones(b, t, dtype=torch.bool, device=features.device)
    lengths = mask.sum(1)
    f = F.normalize(features, dim=-1)
    total = features.new_zeros(())
    count = 0
    for i in range(b):
        n = int(lengths[i])
        anchors = n - gap
        if anchors <= 0:
            continue
        idx = torch.arange(anchors, device=features.device)
        if sampled:
            span = (n - idx - gap).to(torch.float64)
            u = torch.rand(anchors, generator=generator, dtype=torch.float64)
            neg = idx + gap + torch.floor(u * span).long()
        else:
            neg = idx + gap
        d_pos = _distance(f[i, idx], f[i, idx + 1])
        d_neg = _distance(f[i, idx], f[i, neg])
        total = total + F.relu(d_pos - d_neg + margin).sum()
        count += anchors
    if count == 0:
        log.warning("adjacent-frame loss: no sequence longer than gap=%d; returning 0", gap)
        return total
    return total / count


def _distance(a, b):
    # epsilon keeps the gradient finite for coincident points
    return torch.sqrt(((a - b) ** 2).sum(-1) + 1e-12)


# ---------------------------------------------------------------------------
# pseudo-gloss alignment (CTC)

_LOG_ZERO = -1e30


def _required_frames(labels) -> int:
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def ctc_nll(log_probs, targets, input_lengths, target_lengths, blank=0):
    """Negative log-likelihood of each label sequence, summed over monotonic
    alignments with blanks (forward algorithm in log space).

    log_probs: B x T x V (log-softmax over V), targets: B x G.
    Returns a length-B tensor.
    """
    b, t_max, _ = log_probs.shape
    g_max = targets.shape[1]
    s_max = 2 * g_max + 1
    ext = targets.new_full((b, s_max), blank)
    ext[:, 1::2] = targets
    # finite stand-in for log(0): logsumexp over all -inf entries has NaN gradients
    neg_inf = log_probs.new_tensor(_LOG_ZERO)

    # transitions from s-2 allowed only onto a label different from the one two back
    skip = torch.zeros(b, s_max, dtype=torch.bool, device=log_probs.device)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])

    emit = log_probs.gather(2, ext[:, None, :].expand(b, t_max, s_max))
    alpha = log_probs.new_full((b, s_max), _LOG_ZERO)
    alpha[:, 0] = emit[:, 0, 0]
    alpha[:, 1] = torch.where(target_lengths > 0, emit[:, 0, 1], neg_inf)
    history = [alpha]
    for step in range(1, t_max):
        prev = history[-1]
        shift1 = torch.cat([prev.new_full((b, 1), _LOG_ZERO), prev[:, :-1]], 1)
        shift2 = torch.cat([prev.new_full((b, 2), _LOG_ZERO), prev[:, :-2]], 1)
        shift2 = torch.where(skip, shift2, neg_inf)
        nxt = torch.logsumexp(torch.stack([prev, shift1, shift2]), 0) + emit[:, step]
        history.append(nxt)
    alphas = torch.stack(history, 1)  # B x T x S
    last = alphas[torch.arange(b), input_lengths - 1]
    end = 2 * target_lengths
    final = torch.logsumexp(torch.stack([
        last.gather(1, end[:, None]).squeeze(1),
        torch.where(target_lengths > 0,
                    last.gather(1, (end - 1).clamp(min=0)[:, None]).squeeze(1), neg_inf),
    ]), 0)
    return -final


def pseudo_gloss_align(frame_logits, frame_mask, gloss_ids, gloss_lengths=None, blank=0):
    """-log p(pseudo-gloss sequence | frames), averaged over the batch.

    ``frame_logits`` is B x T' x V (or T' x V for a single sequence) and holds
    per-frame classification logits with ``blank`` as the alignment blank.
    """
    if frame_logits.dim() == 2:
        frame_logits = frame_logits[None]
        frame_mask = None if frame_mask is None else frame_mask[None]
        gloss_ids = torch.as_tensor(gloss_ids)[None]
    b, t, _ = frame_logits.shape
    if frame_mask is None:
        frame_mask = torch.ones(b, t, dtype=torch.bool, device=frame_logits.device)
    if gloss_lengths is None:
        gloss_lengths = torch.full((b,), gloss_ids.shape[1], dtype=torch.long)
    input_lengths = frame_mask.sum(1)
    for i in range(b):
        labels = gloss_ids[i, :int(gloss_lengths[i])].tolist()
        if len(labels) < 1:
            raise LengthError(f"sequence {i}: empty pseudo-gloss target")
        need = _required_frames(labels)
        if int(input_lengths[i]) < need:
            raise LengthError(f"sequence {i}: {int(input_lengths[i])} frames cannot emit "
                              f"{len(labels)} glosses ({need} steps needed)")
    log_probs = F.log_softmax(frame_logits, -1)
    nll = ctc_nll(log_probs, gloss_ids, input_lengths, gloss_lengths, blank)
    return nll.mean()


# ---------------------------------------------------------------------------
# composition

def combine(terms) -> torch.Tensor:
    """Weighted sum of (loss, weight) pairs."""
    terms = list(terms)
    if not terms:
        raise ValueError("combine needs at least one term")
    total = 0.0
    for loss, weight in terms:
        total = total + weight * loss
    return total


@dataclass
class ObjectiveResult:
    total: torch.Tensor
    parts: dict[str, float] = field(default_factory=dict)


def compute_objective(spec: ObjectiveSpec, model, batch, generator=None,
                      decoder: str = "shallow") -> ObjectiveResult:
    """Evaluate every weighted term of ``spec`` on ``batch``."""
    needs_video = any(n != "masked_sentence" for n in spec.names)
    video = model.encode_video(batch.frames, batch.frame_mask) if needs_video else None
    text = None
    if {"clip_contrastive", "cico_contrastive"} & set(spec.names):
        text = model.encode_text(batch.text_ids, batch.text_mask)
    tau = model.temperature if model.config.learnable_temperature else spec.temperature

    terms, parts = [], {}
    for name, weight in spec.terms:
        if weight == 0:
            continue
        if name == "clip_contrastive":
            loss = clip_contrastive(model.proj_visual(video.summary),
                                    model.proj_text(text.summary), tau)
        elif name == "cico_contrastive":
            loss = cico_contrastive(model.proj_visual(video.features), video.mask,
                                    model.proj_text(text.features), text.mask, tau,
                                    spec.cico_aggregation)
        elif name == "masked_sentence":
            loss = masked_sentence(model, batch.text_ids, batch.text_mask, spec.mask_ratio,
                                   generator, "shallow")
        elif name == "adjacent_frame":
            loss = adjacent_frame_contrastive(video.features, video.mask, spec.margin,
                                              spec.gap, spec.sampled_negatives, generator)
        elif name == "pseudo_gloss_align":
            logits = model.proj_visual.gloss(video.features)
            loss = pseudo_gloss_align(logits, video.mask, batch.gloss_ids,
                                      batch.gloss_lengths)
        elif name == "light_translation":
            loss = translation_loss(model, video, batch.text_ids, batch.text_mask,
                                    spec.label_smoothing, "shallow")
        else:  # translation
            loss = translation_loss(model, video, batch.text_ids, batch.text_mask,
                                    spec.label_smoothing, decoder)
        parts[name] = float(loss.detach())
        terms.append((loss, weight))
    return ObjectiveResult(combine(terms), parts)
