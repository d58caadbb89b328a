import math

import pytest
import torch
from conftest import tiny_config

from sltbench.corpus import BOS, EOS, MASK, PAD
from sltbench.errors import (
    CheckpointFormatError,
    ConfigError,
    MissingGroup,
    ShapeError,
    ShapeMismatch,
)
from sltbench.model import (
    GROUP_NAMES,
    ModelConfig,
    TemporalStage,
    TextStackConfig,
    VisualEncoderConfig,
    build_model,
    generate,
    init_from_external,
    load_checkpoint,
    pooled_length,
    read_checkpoint_meta,
    save_checkpoint,
)


def toy64(**kw):
    visual = VisualEncoderConfig(hidden_dim=64, ff_dim=128, heads=4, encoder_layers=1)
    text = TextStackConfig(encoder_layers=1, shallow_layers=1, deep_layers=2, hidden_dim=64,
                           ff_dim=128, heads=4)
    return ModelConfig(visual, text, vocab_size=kw.pop("vocab_size", 100), proj_dim=16,
                       max_positions=64, **kw)


@pytest.fixture(scope="module")
def model64():
    torch.manual_seed(0)
    return build_model(toy64()).eval()


def frames(b, t, seed=0, size=8):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(b, t, 3, size, size, generator=g)


def test_encode_video_shapes(model64):
    rep = model64.encode_video(frames(2, 20), torch.ones(2, 20, dtype=torch.bool))
    assert rep.features.shape == (2, 5, 64)
    assert rep.mask.shape == (2, 5)
    assert rep.summary.shape == (2, 64)
    assert torch.isfinite(rep.summary).all()


def test_video_padding_invariance(model64):
    x = frames(1, 20)
    mask = torch.zeros(1, 20, dtype=torch.bool)
    mask[0, :8] = True
    padded = x.clone()
    padded[0, 8:] = torch.rand(12, 3, 8, 8)  # garbage in the padding
    a = model64.encode_video(padded, mask)
    b = model64.encode_video(x[:, :8], torch.ones(1, 8, dtype=torch.bool))
    assert a.mask.sum() == 2
    assert torch.allclose(a.features[:, :2], b.features, atol=1e-5)
    assert torch.allclose(a.summary, b.summary, atol=1e-5)
    assert torch.all(a.features[:, 2:] == 0)


def test_eval_mode_is_deterministic(model64):
    x, m = frames(2, 12), torch.ones(2, 12, dtype=torch.bool)
    a = model64.encode_video(x, m)
    b = model64.encode_video(x, m)
    assert torch.equal(a.features, b.features) and torch.equal(a.summary, b.summary)


def test_encode_video_shape_error(model64):
    with pytest.raises(ShapeError):
        model64.encode_video(frames(2, 12), torch.ones(2, 11, dtype=torch.bool))


@pytest.mark.parametrize("stages,factor", [
    ([TemporalStage(pool=False), TemporalStage(pool=False)], 1),
    ([TemporalStage(pool=True), TemporalStage(pool=False)], 2),
    ([TemporalStage(), TemporalStage()], 4),
])
def test_pooled_length_exhaustive(stages, factor):
    cfg = VisualEncoderConfig(temporal_block=stages, hidden_dim=8, ff_dim=8, heads=2,
                              encoder_layers=1)
    assert cfg.downsample == factor
    for t in range(1, 301):
        assert pooled_length(t, cfg) == math.ceil(t / factor)


@pytest.mark.parametrize("t", [1, 2, 3, 5, 7, 8, 13])
def test_pooled_length_matches_forward(t):
    torch.manual_seed(0)
    cfg = tiny_config(hidden=8)
    model = build_model(cfg).eval()
    rep = model.encode_video(frames(1, t, size=4), torch.ones(1, t, dtype=torch.bool))
    assert rep.features.shape[1] == pooled_length(t, cfg.visual)


def test_encode_text_shapes_and_padding(model64):
    ids = torch.tensor([[1, 10, 11, 12, 2, 0, 0], [1, 20, 21, 22, 2, 0, 0]])
    mask = ids != PAD
    rep = model64.encode_text(ids, mask)
    assert rep.features.shape == (2, 7, 64) and rep.summary.shape == (2, 64)
    junk = ids.clone()
    junk[:, 5:] = torch.tensor([[40, 41], [42, 43]])
    other = model64.encode_text(junk, mask)
    assert torch.allclose(rep.features[:, :5], other.features[:, :5], atol=1e-5)
    assert torch.allclose(rep.summary, other.summary, atol=1e-5)


def test_text_summaries_distinguish_sentences(model64):
    g = torch.Generator().manual_seed(1)
    for _ in range(100):
        a = torch.randint(5, 100, (1, 6), generator=g)
        b = torch.randint(5, 100, (1, 6), generator=g)
        if torch.equal(a, b):
            continue
        m = torch.ones(1, 6, dtype=torch.bool)
        sa = model64.encode_text(a, m).summary
        sb = model64.encode_text(b, m).summary
        assert torch.cosine_similarity(sa, sb).item() < 1 - 1e-6


def test_decode_logits_shape_and_causality(model64):
    mem = torch.randn(2, 5, 64)
    mem_mask = torch.ones(2, 5, dtype=torch.bool)
    tgt = torch.randint(5, 100, (2, 7))
    logits = model64.decode_text(mem, mem_mask, tgt)
    assert logits.shape == (2, 7, 100)
    for t in range(6):
        changed = tgt.clone()
        changed[:, t + 1] = (changed[:, t + 1] + 1 - 5) % 95 + 5
        again = model64.decode_text(mem, mem_mask, changed)
        assert torch.allclose(again[:, :t + 1], logits[:, :t + 1], atol=1e-5)
        assert not torch.allclose(again[:, t + 1], logits[:, t + 1], atol=1e-5)


def test_decode_memory_padding_invariance(model64):
    mem = torch.randn(1, 5, 64)
    mask = torch.tensor([[True, True, True, False, False]])
    tgt = torch.tensor([[BOS, 7, 8]])
    a = model64.decode_text(mem, mask, tgt)
    mem2 = mem.clone()
    mem2[:, 3:] = 100.0
    b = model64.decode_text(mem2, mask, tgt)
    c = model64.decode_text(mem[:, :3], mask[:, :3], tgt)
    assert torch.allclose(a, b, atol=1e-5) and torch.allclose(a, c, atol=1e-5)


def test_decode_rejects_all_padding_memory(model64):
    mem = torch.randn(2, 4, 64)
    mask = torch.tensor([[True, True, False, False], [False] * 4])
    with pytest.raises(ShapeError):
        model64.decode_text(mem, mask, torch.tensor([[BOS], [BOS]]))


def greedy_reference(model, memory, mask, max_len, which="shallow"):
    """Argmax rollout over non-special tokens, one sequence at a time, recomputing every step."""
    out = []
    for i in range(memory.shape[0]):
        seq = [BOS]
        for _ in range(max_len):
            logits = model.decode_text(memory[i:i + 1], mask[i:i + 1], torch.tensor([seq]),
                                       which=which)
            row = logits[0, -1].clone()
            row[[PAD, BOS, MASK]] = float("-inf")
            tok = int(torch.argmax(row))
            if tok == EOS:
                break
            seq.append(tok)
        out.append(seq[1:])
    return out


@pytest.mark.parametrize("which", ["shallow", "deep"])
def test_greedy_matches_reference_rollout(model64, which):
    torch.manual_seed(3)
    mem = torch.randn(3, 4, 64)
    mask = torch.tensor([[True] * 4, [True, True, False, False], [True, False, False, False]])
    got = generate(model64, mem, mask, max_len=6, beam=1, which=which)
    assert got == greedy_reference(model64, mem, mask, 6, which)


def test_max_len_one_emits_at_most_one_token(model64):
    out = generate(model64, torch.randn(2, 3, 64), torch.ones(2, 3, dtype=torch.bool), 1, 1)
    assert all(len(s) <= 1 for s in out)
    out = generate(model64, torch.randn(2, 3, 64), torch.ones(2, 3, dtype=torch.bool), 1, 3)
    assert all(len(s) <= 1 for s in out)


def test_beam_search_is_deterministic_and_clean(model64):
    mem = torch.randn(2, 4, 64)
    mask = torch.ones(2, 4, dtype=torch.bool)
    a = generate(model64, mem, mask, 8, beam=4)
    b = generate(model64, mem, mask, 8, beam=4)
    assert a == b
    assert all(not {PAD, BOS, EOS, MASK} & set(s) for s in a)
    with pytest.raises(ValueError):
        generate(model64, mem, mask, 8, beam=0)


def test_overfit_one_pair_then_generate_target():
    torch.manual_seed(0)
    model = build_model(tiny_config(hidden=32, vocab=12))
    memory = torch.randn(1, 3, 32)
    mask = torch.ones(1, 3, dtype=torch.bool)
    target = [7, 9, 5, 11]
    seq = torch.tensor([[BOS, *target, EOS]])
    opt = torch.optim.Adam(model.decoder_shallow.parameters(), lr=3e-3)
    for _ in range(150):
        logits = model.decode_text(memory, mask, seq[:, :-1])
        loss = torch.nn.functional.cross_entropy(logits[0], seq[0, 1:])
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    assert generate(model, memory, mask, 10, beam=1) == [target]
    assert generate(model, memory, mask, 10, beam=3) == [target]


# --- groups and checkpoints -------------------------------------------------

def test_every_parameter_in_exactly_one_group(model64):
    names = [n for n, _ in model64.named_parameters()]
    owners = [[g for g in GROUP_NAMES if n.startswith(g + ".")] for n in names]
    assert all(len(o) == 1 for o in owners)
    total = sum(p.numel() for p in model64.parameters())
    assert total == sum(p.numel() for g in GROUP_NAMES
                        for p in model64.group(g).parameters())


def test_decoder_depths(model64):
    assert len(model64.decoder_shallow.decoder.layers) == 1
    assert len(model64.decoder_deep.decoder.layers) == 2


def test_checkpoint_round_trip_bit_identical(tmp_path, model64):
    path = save_checkpoint(model64, tmp_path / "a.ckpt", {"stage": "pretrain", "seed": 0})
    assert path.read_bytes().startswith(b"SLTF1\n")
    torch.manual_seed(99)
    other = build_model(toy64())
    report = load_checkpoint(other, path)
    assert report.loaded == list(GROUP_NAMES) and report.skipped == []
    a, b = model64.state_dict(), other.state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    meta = read_checkpoint_meta(path)
    assert meta["stage"] == "pretrain" and meta["seed"] == 0
    assert ModelConfig.from_dict(meta["model_config"]) == model64.config


def test_checkpoint_bytes_are_reproducible(tmp_path, model64):
    a = save_checkpoint(model64, tmp_path / "a.ckpt", {"x": 1}).read_bytes()
    b = save_checkpoint(model64, tmp_path / "b.ckpt", {"x": 1}).read_bytes()
    assert a == b


def test_partial_load_leaves_other_groups_untouched(tmp_path, model64):
    path = save_checkpoint(model64, tmp_path / "a.ckpt")
    torch.manual_seed(5)
    fresh = build_model(toy64())
    before = {k: v.clone() for k, v in fresh.state_dict().items()}
    report = load_checkpoint(fresh, path, ["visual_backbone", "temporal_block"])
    assert set(report.loaded) == {"visual_backbone", "temporal_block"}
    after = fresh.state_dict()
    source = model64.state_dict()
    for k in after:
        if k.split(".")[0] in report.loaded:
            assert torch.equal(after[k], source[k])
        else:
            assert torch.equal(after[k], before[k])


def test_shape_mismatch_names_group_and_writes_nothing(tmp_path, model64):
    path = save_checkpoint(model64, tmp_path / "a.ckpt")
    big = toy64()
    big.visual.hidden_dim = big.text.hidden_dim = 128
    other = build_model(big)
    with pytest.raises(ShapeMismatch) as info:
        load_checkpoint(other, path, ["visual_transformer"])
    assert info.value.group == "visual_transformer"
    before = {k: v.clone() for k, v in other.state_dict().items()}
    with pytest.raises(ShapeMismatch):
        load_checkpoint(other, path)
    assert all(torch.equal(before[k], v) for k, v in other.state_dict().items())


def test_missing_group(tmp_path, model64):
    path = save_checkpoint(model64, tmp_path / "a.ckpt", groups=["visual_backbone"])
    with pytest.raises(MissingGroup) as info:
        load_checkpoint(build_model(toy64()), path, ["visual_backbone", "text_encoder"])
    assert info.value.group == "text_encoder"


def test_bad_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"PK\x03\x04 nope")
    with pytest.raises(CheckpointFormatError):
        read_checkpoint_meta(tmp_path / "x.ckpt")


def test_shared_init_copies_text_encoder_into_visual_transformer():
    torch.manual_seed(0)
    cfg = toy64(shared_init=True)
    cfg.visual.encoder_layers = 1
    model = build_model(cfg)
    a = model.text_encoder.body.encoder.state_dict()
    b = model.visual_transformer.encoder.state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_external_init_mapping(tmp_path):
    torch.manual_seed(0)
    donor = build_model(toy64())
    state = {"ext.dec." + k: v for k, v in donor.decoder_shallow.state_dict().items()}
    path = tmp_path / "ext.pt"
    torch.save(state, path)
    cfg = toy64()
    cfg.text.init = "pretrained-multilingual-checkpoint"
    cfg.text.init_path = str(path)
    cfg.text.init_map = {"ext.dec.": "decoder_shallow."}
    model = build_model(cfg)
    own = model.decoder_shallow.state_dict()
    assert all(torch.equal(own[k], v) for k, v in donor.decoder_shallow.state_dict().items())
    with pytest.raises(ShapeMismatch):
        init_from_external(build_model(tiny_config()), state, {"ext.dec.": "decoder_shallow."})


@pytest.mark.parametrize("kw", [dict(backbone="vgg"), dict(hidden_dim=10, heads=4),
                                dict(temporal_block=[TemporalStage(kernel=4)])])
def test_visual_config_validation(kw):
    with pytest.raises(ConfigError):
        VisualEncoderConfig(**kw)
