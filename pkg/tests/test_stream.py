import dataclasses
import math
import random

import numpy as np
import pytest

from dialogforge.dialogue import (
    Dialogue,
    ImageRef,
    ImageSource,
    Provenance,
    Role,
    Round,
    Segment,
    Stage,
    Turn,
)
from dialogforge.fixtures import make_random_dialogue, make_t2i_records
from dialogforge.stage_a import build_t_i_0_0, t2i_record_from_obj
from dialogforge.stage_c import interleave_output
from dialogforge.stream import (
    BlockKind,
    EmptyText,
    InvalidStream,
    LossTag,
    SpecialToken,
    StreamConfig,
    StreamTooLong,
    TokenBlock,
    TokenStream,
    UnitOverflow,
    build_mask,
    default_vae_units,
    default_vit_units,
    loss_summary,
    mask_intervals,
    mask_oracle,
    parse_stream,
    serialize,
    stream_from_record,
    stream_to_record,
    validate_stream,
)
from dialogforge.taxonomy import parse_signature

PROV = Provenance(Stage.SOURCE)


def t2i_dialogue(backend, *, w=256, h=256, seed=90):
    rec = make_t2i_records(1, seed)[0]
    rec["image"]["width"] = w
    rec["image"]["height"] = h
    return build_t_i_0_0(t2i_record_from_obj(rec), backend, seed=1)


def simple_stream(*spans):
    """Hand-build a stream from (kind, units, role, loss[, tok]) tuples."""
    blocks = []
    pos = 0
    for span in spans:
        kind, units, role, loss = span[:4]
        tok = span[4] if len(span) > 4 else None
        blocks.append(TokenBlock(kind=kind, units=units, round_index=0, role=role,
                                 loss=loss, start=pos, end=pos + units, tok=tok))
        pos += units
    return TokenStream("hand", tuple(blocks), pos)


def test_unit_formulas():
    assert default_vit_units(256, 256) == math.ceil(256 / 14) ** 2
    assert default_vae_units(256, 256) == 16 * 16
    assert default_vae_units(17, 17) == 4


def test_serialize_t2i_block_sequence(backend):
    s = serialize(t2i_dialogue(backend))
    kinds = [(b.tok.value if b.tok else b.kind.value) for b in s.blocks]
    assert kinds == ["|im_s|", "text", "|im_e|",
                     "|v_s|", "vae_noised", "|v_e|",
                     "|v_s|", "vit", "vae_clean", "|v_e|", "|end|"]
    losses = [b.loss.value for b in s.blocks]
    assert losses == ["none", "none", "none",
                      "ce", "mse", "ce",
                      "none", "none", "none", "none", "ce"]
    assert validate_stream(s).ok
    assert s.total_len == sum(b.units for b in s.blocks)
    noised = s.blocks[4]
    clean = s.blocks[8]
    assert noised.units == clean.units == default_vae_units(256, 256)
    assert noised.image_id == clean.image_id
    assert s.blocks[7].units == default_vit_units(256, 256)


def test_serialize_no_replay(backend):
    cfg = StreamConfig(replay_clean_after_noised=False)
    s = serialize(t2i_dialogue(backend), cfg)
    kinds = [(b.tok.value if b.tok else b.kind.value) for b in s.blocks]
    assert kinds == ["|im_s|", "text", "|im_e|", "|v_s|", "vae_noised", "|v_e|", "|end|"]
    assert validate_stream(s).ok


def test_serialize_interleaved_order(backend):
    d = interleave_output(t2i_dialogue(backend), backend)
    s = serialize(d)
    kinds = [b.kind for b in s.blocks]
    # noised image blocks come before the answer text
    assert kinds.index(BlockKind.VAE_NOISED) < kinds.index(BlockKind.TEXT, 2)
    asst_text = [b for b in s.blocks if b.kind is BlockKind.TEXT and b.role is Role.ASSISTANT]
    assert len(asst_text) == 1 and asst_text[0].loss is LossTag.CE
    assert s.blocks[-1].tok is SpecialToken.END
    assert validate_stream(s).ok


def test_serialize_upload_blocks(backend):
    img = ImageRef("up0", ImageSource.UPLOADED, "img/up0.png", 64, 64)
    d = Dialogue(
        id="d",
        rounds=(Round(
            Turn(Role.USER, (Segment(text="make it blue"), Segment(image=img)), PROV),
            Turn(Role.ASSISTANT, (Segment(image=ImageRef("g0", ImageSource.GENERATED,
                                                         "img/g0.png", 64, 64, "a cat")),), PROV),
        ),),
        signature=parse_signature("ti_i_0_0"),
    )
    s = serialize(d)
    user_kinds = [(b.tok.value if b.tok else b.kind.value)
                  for b in s.blocks if b.role is Role.USER]
    assert user_kinds == ["|im_s|", "text", "|im_e|", "|v_s|", "vit", "vae_clean", "|v_e|"]
    assert all(b.loss is LossTag.NONE for b in s.blocks if b.role is Role.USER)
    assert validate_stream(s).ok


def test_serialize_empty_text(backend):
    d = t2i_dialogue(backend)
    user = d.rounds[0].user
    blank = dataclasses.replace(user, segments=(Segment(text="   "),))
    d2 = dataclasses.replace(d, rounds=(Round(blank, d.rounds[0].assistant),))
    with pytest.raises(EmptyText):
        serialize(d2)


def test_serialize_unit_overflow(backend):
    with pytest.raises(UnitOverflow):
        serialize(t2i_dialogue(backend), StreamConfig(max_image_units=10))


def test_round_index_and_roles(backend):
    rng = random.Random(5)
    d = make_random_dialogue(rng, "rr", max_rounds=3)
    s = serialize(d)
    indices = [b.round_index for b in s.blocks]
    assert indices == sorted(indices)
    parsed = parse_stream(s)
    assert [p.index for p in parsed] == list(range(len(d.rounds)))


def test_parse_stream_reconstructs_skeleton(backend):
    rng = random.Random(9)
    for i in range(25):
        d = make_random_dialogue(rng, f"sk-{i}", max_rounds=3)
        parsed = parse_stream(serialize(d))
        assert len(parsed) == len(d.rounds)
        for p, rnd in zip(parsed, d.rounds):
            uploads = rnd.user.images()
            generated = rnd.assistant.images()
            assert p.upload_image_id == (uploads[0].id if uploads else None)
            assert p.noised_image_id == (generated[0].id if generated else None)
            assert p.has_replay == bool(generated)
            assert (p.assistant_text_units > 0) == any(
                s.is_text for s in rnd.assistant.segments)


def test_validate_rejects_noised_in_user_part():
    s = simple_stream(
        (BlockKind.SPECIAL, 1, Role.USER, LossTag.NONE, SpecialToken.IM_S),
        (BlockKind.VAE_NOISED, 4, Role.USER, LossTag.MSE),
        (BlockKind.SPECIAL, 1, Role.USER, LossTag.NONE, SpecialToken.IM_E),
    )
    report = validate_stream(s)
    assert not report.ok
    assert "grammar" in report.rules()


def test_validate_rejects_end_without_ce():
    s = simple_stream(
        (BlockKind.SPECIAL, 1, Role.USER, LossTag.NONE, SpecialToken.IM_S),
        (BlockKind.TEXT, 2, Role.USER, LossTag.NONE),
        (BlockKind.SPECIAL, 1, Role.USER, LossTag.NONE, SpecialToken.IM_E),
        (BlockKind.SPECIAL, 1, Role.ASSISTANT, LossTag.CE, SpecialToken.IM_S),
        (BlockKind.TEXT, 2, Role.ASSISTANT, LossTag.CE),
        (BlockKind.SPECIAL, 1, Role.ASSISTANT, LossTag.CE, SpecialToken.IM_E),
        (BlockKind.SPECIAL, 1, Role.ASSISTANT, LossTag.NONE, SpecialToken.END),
    )
    report = validate_stream(s)
    assert "loss-tags" in report.rules()
    assert any("|end|" in v.detail for v in report.violations)


def test_validate_rejects_mse_outside_noised():
    s = simple_stream(
        (BlockKind.SPECIAL, 1, Role.USER, LossTag.NONE, SpecialToken.IM_S),
        (BlockKind.TEXT, 2, Role.USER, LossTag.MSE),
        (BlockKind.SPECIAL, 1, Role.USER, LossTag.NONE, SpecialToken.IM_E),
    )
    assert "loss-tags" in validate_stream(s).rules()


def test_validate_rejects_broken_positions():
    good = simple_stream(
        (BlockKind.SPECIAL, 1, Role.USER, LossTag.NONE, SpecialToken.IM_S),
        (BlockKind.TEXT, 2, Role.USER, LossTag.NONE),
        (BlockKind.SPECIAL, 1, Role.USER, LossTag.NONE, SpecialToken.IM_E),
    )
    shifted = TokenStream(good.dialogue_id, tuple(
        dataclasses.replace(b, start=b.start + 1, end=b.end + 1) if b.kind is BlockKind.TEXT else b
        for b in good.blocks
    ), good.total_len)
    assert "positions" in validate_stream(shifted).rules()
    with pytest.raises(InvalidStream):
        build_mask(shifted)


def test_serialized_dialogues_always_validate(backend):
    rng = random.Random(44)
    for i in range(50):
        d = make_random_dialogue(rng, f"v-{i}")
        report = validate_stream(serialize(d))
        assert report.ok, report.violations


def test_loss_summary_partition(backend):
    d = t2i_dialogue(backend)
    s = serialize(d)
    summary = loss_summary(s)
    assert summary.total == s.total_len
    assert summary.mse_positions == default_vae_units(256, 256)
    # CE covers the assistant's structural specials only: v_s, v_e, end
    assert summary.ce_positions == 3


def test_loss_summary_no_image():
    s = simple_stream(
        (BlockKind.SPECIAL, 1, Role.USER, LossTag.NONE, SpecialToken.IM_S),
        (BlockKind.TEXT, 5, Role.USER, LossTag.NONE),
        (BlockKind.SPECIAL, 1, Role.USER, LossTag.NONE, SpecialToken.IM_E),
        (BlockKind.SPECIAL, 1, Role.ASSISTANT, LossTag.CE, SpecialToken.IM_S),
        (BlockKind.TEXT, 3, Role.ASSISTANT, LossTag.CE),
        (BlockKind.SPECIAL, 1, Role.ASSISTANT, LossTag.CE, SpecialToken.IM_E),
        (BlockKind.SPECIAL, 1, Role.ASSISTANT, LossTag.CE, SpecialToken.END),
    )
    summary = loss_summary(s)
    assert summary.mse_positions == 0
    assert summary.ce_positions == 6
    assert summary.none_positions == 7


# --- attention mask -------------------------------------------------------------


def test_mask_pure_causal_text():
    s = simple_stream((BlockKind.TEXT, 3, Role.USER, LossTag.NONE))
    mask = build_mask(s)
    assert np.array_equal(mask, np.tril(np.ones((3, 3), dtype=bool)))


def test_mask_noised_isolated_and_bidirectional():
    s = simple_stream(
        (BlockKind.TEXT, 2, Role.USER, LossTag.NONE),
        (BlockKind.VAE_NOISED, 3, Role.ASSISTANT, LossTag.MSE),
        (BlockKind.TEXT, 1, Role.ASSISTANT, LossTag.CE),
    )
    mask = build_mask(s)
    q = 5  # the final text token
    assert mask[q, 0] and mask[q, 1]          # sees the prior text
    assert not mask[q, 2] and not mask[q, 3] and not mask[q, 4]  # never the noised latents
    assert mask[q, q]                          # self
    assert np.array_equal(mask[2:5, 2:5], np.ones((3, 3), dtype=bool))  # within noised block
    assert mask[2:5, 0:2].all()               # noised queries see prior text
    assert np.array_equal(mask, mask_oracle(s))


def test_mask_two_noised_blocks_do_not_see_each_other():
    s = simple_stream(
        (BlockKind.VAE_NOISED, 2, Role.ASSISTANT, LossTag.MSE),
        (BlockKind.TEXT, 1, Role.ASSISTANT, LossTag.CE),
        (BlockKind.VAE_NOISED, 2, Role.ASSISTANT, LossTag.MSE),
    )
    mask = build_mask(s)
    assert not mask[3:5, 0:2].any()
    assert not mask[0:2, 3:5].any()
    assert mask[3:5, 2].all()
    assert np.array_equal(mask, mask_oracle(s))


def test_mask_empty_stream():
    s = TokenStream("empty", (), 0)
    assert build_mask(s).shape == (0, 0)
    assert mask_oracle(s).shape == (0, 0)


def test_mask_self_visibility_everywhere(backend):
    s = serialize(t2i_dialogue(backend, w=32, h=32))
    mask = build_mask(s)
    assert mask.diagonal().all()


def test_oracle_refuses_long_streams(backend):
    s = serialize(t2i_dialogue(backend, w=512, h=512))
    assert s.total_len > 512
    with pytest.raises(StreamTooLong):
        mask_oracle(s)


def test_mask_matches_oracle_on_random_streams():
    rng = random.Random(7)
    checked = 0
    while checked < 40:
        d = make_random_dialogue(rng, f"m-{checked}", max_rounds=2, dims=[16, 24, 32])
        s = serialize(d)
        if s.total_len > 256:
            continue
        assert np.array_equal(build_mask(s), mask_oracle(s))
        checked += 1


def test_mask_prefix_stability(backend):
    rng = random.Random(17)
    for i in range(10):
        d = make_random_dialogue(rng, f"p-{i}", max_rounds=3, dims=[16, 24])
        if len(d.rounds) < 2:
            continue
        full = build_mask(serialize(d))
        head = build_mask(serialize(dataclasses.replace(d, rounds=d.rounds[:-1])))
        n = head.shape[0]
        assert np.array_equal(full[:n, :n], head)


def test_mask_intervals_reconstruct_dense():
    rng = random.Random(23)
    for i in range(15):
        s = serialize(make_random_dialogue(rng, f"r-{i}", max_rounds=2, dims=[16, 24]))
        dense = np.zeros((s.total_len, s.total_len), dtype=bool)
        for row in mask_intervals(s):
            lo, hi = row["start"], row["end"]
            for a, b in row["context"]:
                dense[lo:hi, a:b] = True
            if row["within"] == "bidirectional":
                dense[lo:hi, lo:hi] = True
            else:
                for q in range(lo, hi):
                    dense[q, lo:q + 1] = True
        assert np.array_equal(dense, build_mask(s))


def test_stream_record_round_trip(backend):
    s = serialize(t2i_dialogue(backend))
    rec = stream_to_record(s)
    assert stream_from_record(rec) == s
    assert stream_to_record(stream_from_record(rec)) == rec
    assert list(rec) == ["dialogue_id", "total_len", "blocks"]
    special = rec["blocks"][0]
    assert list(special) == ["kind", "tok", "units", "round", "role", "loss", "start", "end"]
    noised = rec["blocks"][4]
    assert list(noised) == ["kind", "units", "round", "role", "image_id", "loss", "start", "end"]
