"""Visual and text encoder/decoder stacks with named parameter groups.

Every trainable parameter lives in exactly one top-level group
(``GROUP_NAMES``); checkpoints store one entry per group so that the second
training stage can load an arbitrary subset of them.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .corpus import BOS, EOS, MASK, PAD
from .errors import (
    CheckpointFormatError,
    ConfigError,
    MissingGroup,
    ShapeError,
    ShapeMismatch,
)

GROUP_NAMES = (
    "visual_backbone",
    "temporal_block",
    "visual_transformer",
    "text_encoder",
    "decoder_shallow",
    "decoder_deep",
    "proj_visual",
    "proj_text",
)
VISUAL_GROUPS = ("visual_backbone", "temporal_block", "visual_transformer")

CHECKPOINT_MAGIC = b"SLTF1\n"


# ---------------------------------------------------------------------------
# configuration

@dataclass
class TemporalStage:
    kernel: int = 5
    stride: int = 1
    pool: bool = True


@dataclass
class VisualEncoderConfig:
    backbone: str = "tiny-conv"
    temporal_block: list[TemporalStage] = field(
        default_factory=lambda: [TemporalStage(), TemporalStage()])
    encoder_layers: int = 3
    hidden_dim: int = 1024
    ff_dim: int = 4096
    heads: int = 8
    dropout: float = 0.1

    def __post_init__(self):
        self.temporal_block = [s if isinstance(s, TemporalStage) else TemporalStage(**s)
                               for s in self.temporal_block]
        for s in self.temporal_block:
            if s.kernel < 1 or s.kernel % 2 == 0 or s.stride < 1:
                raise ConfigError("temporal kernels must be odd and strides positive")
        if self.backbone not in ("tiny-conv", "residual-18"):
            raise ConfigError(f"unknown visual backbone {self.backbone!r}")
        if self.hidden_dim <= 0 or self.ff_dim <= 0:
            raise ConfigError("hidden_dim and ff_dim must be positive")
        if self.hidden_dim % self.heads:
            raise ConfigError("hidden_dim must be divisible by heads")

    @property
    def downsample(self) -> int:
        factor = 1
        for s in self.temporal_block:
            factor *= s.stride * (2 if s.pool else 1)
        return factor


@dataclass
class TextStackConfig:
    encoder_layers: int = 12
    shallow_layers: int = 3
    deep_layers: int = 12
    hidden_dim: int = 1024
    ff_dim: int = 4096
    heads: int = 16
    dropout: float = 0.1
    init: str = "random"
    init_path: str | None = None
    init_map: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.init not in ("random", "pretrained-multilingual-checkpoint"):
            raise ConfigError(f"unknown text init {self.init!r}")
        if self.init != "random" and not self.init_path:
            raise ConfigError("pretrained text init needs init_path")
        if self.hidden_dim % self.heads:
            raise ConfigError("text hidden_dim must be divisible by heads")


@dataclass
class ModelConfig:
    visual: VisualEncoderConfig = field(default_factory=VisualEncoderConfig)
    text: TextStackConfig = field(default_factory=TextStackConfig)
    vocab_size: int = 0
    gloss_vocab_size: int = 1
    proj_dim: int = 256
    max_positions: int = 512
    shared_init: bool = False
    learnable_temperature: bool = False
    temperature: float = 0.07

    def __post_init__(self):
        if isinstance(self.visual, dict):
            self.visual = VisualEncoderConfig(**self.visual)
        if isinstance(self.text, dict):
            self.text = TextStackConfig(**self.text)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data) -> "ModelConfig":
        return cls(**data)


# Table-scale widths; the toy preset is what the tests train.
VISUAL_PRESETS = {
    "gfslt": dict(hidden_dim=1024, ff_dim=4096, heads=16, encoder_layers=3,
                  backbone="residual-18"),
    "fla": dict(hidden_dim=512, ff_dim=2048, heads=8, encoder_layers=3,
                backbone="residual-18",
                temporal_block=[TemporalStage(pool=False), TemporalStage(pool=False)]),
    "toy": dict(hidden_dim=64, ff_dim=128, heads=4, encoder_layers=1, dropout=0.1),
}


def pooled_length(length: int, config: VisualEncoderConfig) -> int:
    for s in config.temporal_block:
        length = math.ceil(length / s.stride)
        if s.pool:
            length = math.ceil(length / 2)
    return length


# ---------------------------------------------------------------------------
# building blocks

class TinyConv(nn.Module):
    """Two conv layers pooled to a 4x4 spatial grid; cheap enough for CI."""

    def __init__(self, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 3, padding=1), nn.BatchNorm2d(16), nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.BatchNorm2d(32), nn.ReLU(),
            nn.AdaptiveAvgPool2d(4),
        )
        self.out = nn.Linear(32 * 16, out_dim)

    def forward(self, x):
        return self.out(self.net(x).flatten(1))


class Residual18(nn.Module):
    def __init__(self, out_dim: int):
        super().__init__()
        from torchvision.models import resnet18

        self.net = resnet18(weights=None)
        self.net.fc = nn.Identity()
        self.out = nn.Linear(512, out_dim)

    def forward(self, x):
        return self.out(self.net(x))


class FrameBackbone(nn.Module):
    """Per-frame spatial encoder; runs on real frames only, padding stays zero."""

    def __init__(self, config: VisualEncoderConfig):
        super().__init__()
        net = TinyConv if config.backbone == "tiny-conv" else Residual18
        self.net = net(config.hidden_dim)
        self.dim = config.hidden_dim

    def forward(self, frames, mask):
        b, t = mask.shape
        out = frames.new_zeros(b, t, self.dim)
        out[mask] = self.net(frames[mask])
        return out


class MaskedBatchNorm1d(nn.BatchNorm1d):
    """BatchNorm over (B, C, T) whose training statistics ignore padded steps."""

    def forward(self, x, mask):
        if not self.training:
            return super().forward(x)
        m = mask.unsqueeze(1).to(x.dtype)
        n = m.sum()
        mean = (x * m).sum((0, 2)) / n
        var = ((x - mean[None, :, None]) ** 2 * m).sum((0, 2)) / n
        with torch.no_grad():
            mom = self.momentum
            self.running_mean.mul_(1 - mom).add_(mom * mean.detach())
            unbiased = var.detach() * n / max(n.item() - 1, 1)
            self.running_var.mul_(1 - mom).add_(mom * unbiased)
            self.num_batches_tracked += 1
        y = (x - mean[None, :, None]) / torch.sqrt(var[None, :, None] + self.eps)
        return y * self.weight[None, :, None] + self.bias[None, :, None]


class TemporalBlock(nn.Module):
    """Stacks of Conv1D-BN-ReLU[-MaxPool] over time, mask-aware."""

    def __init__(self, config: VisualEncoderConfig):
        super().__init__()
        d = config.hidden_dim
        self.convs = nn.ModuleList(
            nn.Conv1d(d, d, s.kernel, stride=s.stride, padding=s.kernel // 2)
            for s in config.temporal_block)
        self.norms = nn.ModuleList(MaskedBatchNorm1d(d) for _ in config.temporal_block)
        self.stages = list(config.temporal_block)

    def forward(self, x, mask):
        x = x.transpose(1, 2)
        for stage, conv, norm in zip(self.stages, self.convs, self.norms):
            x = conv(x * mask[:, None])
            mask = mask[:, ::stage.stride]
            x = F.relu(norm(x, mask)) * mask[:, None]
            if stage.pool:
                # inputs are >= 0 after ReLU, so zeroed padding never wins the max
                x = F.max_pool1d(x, 2, 2, ceil_mode=True)
                mask = mask[:, ::2]
        return x.transpose(1, 2), mask


class SummaryEncoder(nn.Module):
    """Learned summary token prepended to a sequence, then a Transformer encoder."""

    def __init__(self, dim, layers, heads, ff_dim, dropout, max_positions):
        super().__init__()
        self.summary = nn.Parameter(torch.randn(1, 1, dim) * 0.02)
        self.pos = nn.Embedding(max_positions, dim)
        nn.init.normal_(self.pos.weight, std=0.02)
        layer = nn.TransformerEncoderLayer(dim, heads, ff_dim, dropout, batch_first=True,
                                           norm_first=True)
        self.encoder = nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x, mask):
        b, length, _ = x.shape
        if length + 1 > self.pos.num_embeddings:
            raise ShapeError(f"sequence of {length} exceeds {self.pos.num_embeddings - 1} positions")
        x = torch.cat([self.summary.expand(b, 1, -1), x], 1)
        x = x + self.pos.weight[:length + 1]
        valid = torch.cat([mask.new_ones(b, 1), mask], 1)
        h = self.norm(self.encoder(x, src_key_padding_mask=~valid))
        return h[:, 1:] * mask[..., None], h[:, 0]


def _token_embedding(vocab_size, dim) -> nn.Embedding:
    # std dim^-1/2 with inputs scaled by sqrt(dim): unit-scale inputs and
    # unit-scale logits through the tied output head
    embed = nn.Embedding(vocab_size, dim, padding_idx=PAD)
    nn.init.normal_(embed.weight, std=dim ** -0.5)
    with torch.no_grad():
        embed.weight[PAD].zero_()
    return embed


class TextEncoder(nn.Module):
    def __init__(self, vocab_size, config: TextStackConfig, max_positions):
        super().__init__()
        self.embed = _token_embedding(vocab_size, config.hidden_dim)
        self.scale = config.hidden_dim ** 0.5
        self.body = SummaryEncoder(config.hidden_dim, config.encoder_layers, config.heads,
                                   config.ff_dim, config.dropout, max_positions)

    def forward(self, ids, mask):
        return self.body(self.embed(ids) * self.scale, mask)


class TextDecoder(nn.Module):
    def __init__(self, vocab_size, layers, config: TextStackConfig, memory_dim,
                 max_positions):
        super().__init__()
        d = config.hidden_dim
        self.embed = _token_embedding(vocab_size, d)
        self.scale = d ** 0.5
        self.pos = nn.Embedding(max_positions, d)
        nn.init.normal_(self.pos.weight, std=0.02)
        self.memory_proj = nn.Identity() if memory_dim == d else nn.Linear(memory_dim, d)
        layer = nn.TransformerDecoderLayer(d, config.heads, config.ff_dim, config.dropout,
                                           batch_first=True, norm_first=True)
        self.decoder = nn.TransformerDecoder(layer, layers)
        self.norm = nn.LayerNorm(d)
        self.num_layers = layers

    def forward(self, tgt, tgt_mask, memory, memory_mask):
        if memory.shape[:2] != memory_mask.shape:
            raise ShapeError("memory and memory mask disagree in shape")
        if tgt.shape != tgt_mask.shape:
            raise ShapeError("target ids and target mask disagree in shape")
        if tgt.shape[1] < 1:
            raise ShapeError("empty target sequence")
        if not memory_mask.any(1).all():
            raise ShapeError("a memory sequence is entirely padding")
        u = tgt.shape[1]
        if u > self.pos.num_embeddings:
            raise ShapeError(f"target of {u} exceeds {self.pos.num_embeddings} positions")
        x = self.embed(tgt) * self.scale + self.pos.weight[:u]
        causal = torch.triu(torch.ones(u, u, dtype=torch.bool, device=tgt.device), 1)
        h = self.decoder(x, self.memory_proj(memory), tgt_mask=causal,
                         tgt_key_padding_mask=~tgt_mask,
                         memory_key_padding_mask=~memory_mask)
        return self.norm(h) @ self.embed.weight.T


class VisualProjection(nn.Module):
    def __init__(self, dim, proj_dim, gloss_vocab_size):
        super().__init__()
        self.embed = nn.Linear(dim, proj_dim)
        # per-frame pseudo-gloss classifier (blank = 0)
        self.gloss = nn.Linear(dim, gloss_vocab_size)

    def forward(self, x):
        return self.embed(x)


class TextProjection(nn.Module):
    def __init__(self, dim, proj_dim, temperature, learnable):
        super().__init__()
        self.embed = nn.Linear(dim, proj_dim)
        self.log_temperature = nn.Parameter(torch.tensor(math.log(temperature)),
                                            requires_grad=learnable)

    def forward(self, x):
        return self.embed(x)


class VideoRepresentation(NamedTuple):
    features: torch.Tensor  # B x T' x D
    mask: torch.Tensor      # B x T'
    summary: torch.Tensor   # B x D


class TextRepresentation(NamedTuple):
    features: torch.Tensor
    mask: torch.Tensor
    summary: torch.Tensor


# ---------------------------------------------------------------------------
# the bundle

class SLTModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.vocab_size <= EOS:
            raise ConfigError("vocab_size must cover the special tokens")
        self.config = config
        v, t = config.visual, config.text
        self.visual_backbone = FrameBackbone(v)
        self.temporal_block = TemporalBlock(v)
        self.visual_transformer = SummaryEncoder(v.hidden_dim, v.encoder_layers, v.heads,
                                                 v.ff_dim, v.dropout, config.max_positions)
        self.text_encoder = TextEncoder(config.vocab_size, t, config.max_positions)
        self.decoder_shallow = TextDecoder(config.vocab_size, t.shallow_layers, t,
                                           v.hidden_dim, config.max_positions)
        self.decoder_deep = TextDecoder(config.vocab_size, t.deep_layers, t, v.hidden_dim,
                                        config.max_positions)
        self.proj_visual = VisualProjection(v.hidden_dim, config.proj_dim,
                                            config.gloss_vocab_size)
        self.proj_text = TextProjection(t.hidden_dim, config.proj_dim, config.temperature,
                                        config.learnable_temperature)
        check_group_partition(self)

    def group(self, name: str) -> nn.Module:
        if name not in GROUP_NAMES:
            raise MissingGroup(name)
        return getattr(self, name)

    def decoder(self, which: str = "shallow") -> TextDecoder:
        return self.decoder_shallow if which == "shallow" else self.decoder_deep

    @property
    def temperature(self) -> torch.Tensor:
        return self.proj_text.log_temperature.exp()

    def encode_video(self, frames, mask) -> VideoRepresentation:
        if frames.dim() != 5 or frames.shape[:2] != mask.shape:
            raise ShapeError(f"frames {tuple(frames.shape)} do not match mask {tuple(mask.shape)}")
        x = self.visual_backbone(frames, mask)
        x, mask = self.temporal_block(x, mask)
        feats, summary = self.visual_transformer(x, mask)
        return VideoRepresentation(feats, mask, summary)

    def encode_text(self, ids, mask) -> TextRepresentation:
        if ids.shape != mask.shape:
            raise ShapeError("token ids and mask disagree in shape")
        feats, summary = self.text_encoder(ids, mask)
        return TextRepresentation(feats, mask, summary)

    def decode_text(self, memory, memory_mask, tgt, tgt_mask=None, which="shallow"):
        if tgt_mask is None:
            tgt_mask = tgt != PAD
        return self.decoder(which)(tgt, tgt_mask, memory, memory_mask)


def check_group_partition(model: nn.Module) -> None:
    for name, _ in model.named_parameters():
        if name.split(".", 1)[0] not in GROUP_NAMES:
            raise AssertionError(f"parameter {name} belongs to no checkpoint group")


def build_model(config: ModelConfig) -> SLTModel:
    model = SLTModel(config)
    if config.shared_init:
        src = model.text_encoder.body.encoder.state_dict()
        dst = model.visual_transformer.encoder
        try:
            dst.load_state_dict(src)
        except RuntimeError as exc:
            raise ConfigError(f"shared_init needs matching encoder shapes: {exc}") from None
    if config.text.init == "pretrained-multilingual-checkpoint":
        external = torch.load(config.text.init_path, map_location="cpu", weights_only=True)
        init_from_external(model, external, config.text.init_map)
    return model


def init_from_external(model: SLTModel, state: dict, mapping: dict[str, str]) -> list[str]:
    """Copy external weights into the model.

    ``mapping`` sends an external key prefix to an internal one, e.g.
    ``{"model.decoder.layers.0.": "decoder_shallow.decoder.layers.0."}``.
    Returns the internal keys that were written.
    """
    own = model.state_dict()
    written = []
    with torch.no_grad():
        for key, value in state.items():
            for ext, internal in mapping.items():
                if not key.startswith(ext):
                    continue
                target = internal + key[len(ext):]
                group = target.split(".", 1)[0]
                if target not in own:
                    raise MissingGroup(target)
                if own[target].shape != value.shape:
                    raise ShapeMismatch(group, f"{target}: {tuple(value.shape)} vs "
                                               f"{tuple(own[target].shape)}")
                own[target].copy_(value)
                written.append(target)
                break
    return written


# ---------------------------------------------------------------------------
# decoding

BANNED = (PAD, BOS, MASK)  # never emitted by the decoder


def _next_logits(logits: torch.Tensor) -> torch.Tensor:
    out = logits[:, -1].clone()
    out[:, list(BANNED)] = -math.inf
    return out


@torch.no_grad()
def greedy_decode(decoder: TextDecoder, memory, memory_mask, max_len: int) -> list[list[int]]:
    b = memory.shape[0]
    seqs = torch.full((b, 1), BOS, dtype=torch.long, device=memory.device)
    done = torch.zeros(b, dtype=torch.bool, device=memory.device)
    for _ in range(max_len):
        logits = decoder(seqs, torch.ones_like(seqs, dtype=torch.bool), memory, memory_mask)
        nxt = _next_logits(logits).argmax(-1)
        nxt[done] = PAD
        seqs = torch.cat([seqs, nxt[:, None]], 1)
        done |= nxt == EOS
        if done.all():
            break
    return [_strip(row.tolist()) for row in seqs[:, 1:]]


def _strip(tokens: list[int]) -> list[int]:
    out = []
    for tok in tokens:
        if tok in (EOS, PAD):
            break
        out.append(tok)
    return out


@torch.no_grad()
def beam_search(decoder: TextDecoder, memory, memory_mask, max_len: int,
                beam: int) -> list[int]:
    """Length-normalised beam search for a single memory sequence (batch of 1)."""
    live = [(0.0, [BOS])]
    finished = []
    for _ in range(max_len):
        prefix = torch.tensor([seq for _, seq in live], device=memory.device)
        k = len(live)
        logits = decoder(prefix, torch.ones_like(prefix, dtype=torch.bool),
                         memory.expand(k, -1, -1), memory_mask.expand(k, -1))
        logp = F.log_softmax(_next_logits(logits).double(), -1).tolist()
        candidates = [(score + lp, seq + [tok])
                      for (score, seq), row in zip(live, logp)
                      for tok, lp in enumerate(row) if lp > -math.inf]
        candidates.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for score, seq in candidates[:beam]:
            if seq[-1] == EOS:
                finished.append((score / (len(seq) - 1), seq))
            else:
                live.append((score, seq))
        if len(finished) >= beam or not live:
            break
    finished.extend((score / (len(seq) - 1), seq) for score, seq in live)
    best = min(finished, key=lambda c: (-c[0], c[1]))
    return _strip(best[1][1:])


def generate(model: SLTModel, memory, memory_mask, max_len: int = 50, beam: int = 1,
             which: str = "shallow") -> list[list[int]]:
    """Token ids (without bos/eos) for every memory sequence in the batch."""
    if beam < 1 or max_len < 1:
        raise ValueError("beam and max_len must be >= 1")
    decoder = model.decoder(which)
    if beam == 1:
        return greedy_decode(decoder, memory, memory_mask, max_len)
    return [beam_search(decoder, memory[i:i + 1], memory_mask[i:i + 1], max_len, beam)
            for i in range(memory.shape[0])]


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class LoadReport:
    loaded: list[str]
    skipped: list[str]
    meta: dict


def _zip_write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    zf.writestr(info, data)


def save_checkpoint(model: SLTModel, path, meta: dict | None = None, groups=None) -> Path:
    """Write ``groups`` (default: all) plus a JSON meta block to ``path``."""
    groups = list(groups or GROUP_NAMES)
    buf = io.BytesIO()
    shapes = {}
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for g in groups:
            state = model.group(g).state_dict()
            shapes[g] = {k: list(v.shape) for k, v in state.items()}
            blob = io.BytesIO()
            torch.save(state, blob)
            _zip_write(zf, f"groups/{g}.pt", blob.getvalue())
        block = dict(meta or {})
        block.update(format=1, groups=groups, shapes=shapes,
                     model_config=model.config.to_dict())
        _zip_write(zf, "meta.json", json.dumps(block, indent=2, sort_keys=True).encode())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(CHECKPOINT_MAGIC + buf.getvalue())
    return path


def _open_checkpoint(path) -> zipfile.ZipFile:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointFormatError(f"{path}: not an SLTF1 checkpoint")
    return zipfile.ZipFile(io.BytesIO(data[len(CHECKPOINT_MAGIC):]))


def read_checkpoint_meta(path) -> dict:
    with _open_checkpoint(path) as zf:
        return json.loads(zf.read("meta.json"))


def load_checkpoint(model: SLTModel, path, groups=None) -> LoadReport:
    """Replace exactly ``groups`` (default: all groups in the file) in ``model``.

    Shapes are checked for every requested group before anything is written.
    """
    with _open_checkpoint(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        available = meta["groups"]
        requested = list(available if groups is None else groups)
        for g in requested:
            if g not in available:
                raise MissingGroup(g)
            own = {k: list(v.shape) for k, v in model.group(g).state_dict().items()}
            theirs = meta["shapes"][g]
            if own != theirs:
                bad = sorted(k for k in set(own) | set(theirs) if own.get(k) != theirs.get(k))
                raise ShapeMismatch(g, ", ".join(bad[:3]))
        for g in requested:
            state = torch.load(io.BytesIO(zf.read(f"groups/{g}.pt")), map_location="cpu",
                               weights_only=True)
            model.group(g).load_state_dict(state)
    skipped = [g for g in available if g not in requested]
    return LoadReport(requested, skipped, meta)
