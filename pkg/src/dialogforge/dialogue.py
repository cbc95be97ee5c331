"""Conversation data model: image references, segments, turns, rounds, dialogues.

A dialogue is an ordered list of (user, assistant) rounds plus dependency
annotations tying the final user request to earlier rounds. Values are frozen
after construction; the transformation stages always build new dialogues.
Structural rules are checked by ``validate_dialogue``, which reports
violations as data rather than raising.

Depth bookkeeping: ``dep_depth_value`` records how far back the *farthest*
dependency target sits (in rounds), while the signature's depth kind is
classified by the *nearest* target — a composition request over the two
immediately preceding rounds is still an immediate (depth-one) task even
though its farthest subject is two rounds back.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any

from .taxonomy import (
    DependencyDepth,
    DependencyModality,
    DepthKind,
    InputModality,
    OutputModality,
    TaskSignature,
    format_signature,
    parse_signature,
)


class InvalidTarget(ValueError):
    """A dependency target index that cannot precede the final round."""


class AmbiguousDependency(ValueError):
    """Dependency targets mix text and image history; no code covers that."""


class UnclassifiableModality(ValueError):
    """A final turn whose content has no code in the taxonomy."""


class MissingCaption(ValueError):
    """An operation needed an image caption that is absent or blank."""


class ImageSource(Enum):
    DATASET = "dataset"
    UPLOADED = "uploaded"
    GENERATED = "generated"


class Role(Enum):
    USER = "user"
    ASSISTANT = "assistant"


class Stage(Enum):
    A = "a"
    B = "b"
    C = "c"
    DISTRACTOR = "distractor"
    SOURCE = "source"


@dataclass(frozen=True)
class ImageRef:
    id: str
    source: ImageSource
    uri: str
    width: int
    height: int
    caption: str | None = None


@dataclass(frozen=True)
class Segment:
    """Exactly one of ``text`` or ``image``."""

    text: str | None = None
    image: ImageRef | None = None

    def __post_init__(self):
        if (self.text is None) == (self.image is None):
            raise ValueError("a segment holds exactly one of text or image")

    @property
    def is_text(self) -> bool:
        return self.text is not None

    @property
    def is_image(self) -> bool:
        return self.image is not None


@dataclass(frozen=True)
class Provenance:
    stage: Stage
    op_kind: str | None = None
    # Pre-rewrite final query, kept when a history-dependent rewrite replaces it.
    original_text: str | None = None


@dataclass(frozen=True)
class Turn:
    role: Role
    segments: tuple[Segment, ...]
    provenance: Provenance
    is_distractor: bool = False

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))

    def text_content(self) -> str:
        """All text segments joined with single spaces, in order."""
        return " ".join(s.text for s in self.segments if s.is_text)

    def images(self) -> list[ImageRef]:
        return [s.image for s in self.segments if s.is_image]


@dataclass(frozen=True)
class Round:
    user: Turn
    assistant: Turn | None


@dataclass(frozen=True)
class Dialogue:
    id: str
    rounds: tuple[Round, ...]
    signature: TaskSignature
    dep_target_rounds: tuple[int, ...] = ()
    dep_depth_value: int | None = None
    annotations: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "rounds", tuple(self.rounds))
        object.__setattr__(self, "dep_target_rounds", tuple(self.dep_target_rounds))
        object.__setattr__(self, "annotations", tuple(self.annotations))

    @property
    def last_round_index(self) -> int:
        return len(self.rounds) - 1

    def final_user(self) -> Turn:
        return self.rounds[-1].user

    def final_assistant(self) -> Turn | None:
        return self.rounds[-1].assistant


@dataclass(frozen=True)
class Violation:
    rule: str
    detail: str
    where: int | None = None  # round index (dialogues) or block index (streams)


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, rule: str, detail: str, where: int | None = None) -> None:
        self.violations.append(Violation(rule, detail, where))

    def rules(self) -> set[str]:
        return {v.rule for v in self.violations}


def validate_round_turns(user: Turn, assistant: Turn | None, report: ValidationReport,
                         where: int | None = None) -> None:
    """Turn-level checks for one round; shared with distractor-pool validation."""
    if user.role is not Role.USER:
        report.add("round-roles", f"user slot holds role {user.role.value!r}", where)
    if assistant is not None and assistant.role is not Role.ASSISTANT:
        report.add("round-roles", f"assistant slot holds role {assistant.role.value!r}", where)

    for turn in (user, assistant):
        if turn is None:
            continue
        if not turn.segments:
            report.add("empty-segments", f"{turn.role.value} turn has no segments", where)
            continue
        for seg in turn.segments:
            if seg.is_text and not seg.text.strip():
                report.add("empty-text", f"{turn.role.value} turn has a blank text segment", where)
            if seg.is_image and (seg.image.width <= 0 or seg.image.height <= 0):
                report.add("image-dims", f"image {seg.image.id!r} has non-positive dimensions", where)
        images = turn.images()
        if turn.role is Role.USER and len(images) > 1:
            report.add("user-image-count", f"user turn carries {len(images)} images", where)
        if turn.role is Role.ASSISTANT:
            seen_text = False
            for seg in turn.segments:
                if seg.is_text:
                    seen_text = True
                elif seen_text:
                    report.add("assistant-image-order",
                               "assistant image segment appears after text", where)
                    break
        for img in images:
            if img.source is ImageSource.GENERATED and turn.role is not Role.ASSISTANT:
                report.add("generated-placement",
                           f"generated image {img.id!r} in a user turn", where)
            if img.source is ImageSource.UPLOADED and turn.role is not Role.USER:
                report.add("uploaded-placement",
                           f"uploaded image {img.id!r} in an assistant turn", where)


def validate_dialogue(d: Dialogue) -> ValidationReport:
    """Check every structural invariant; violations are data, not errors."""
    report = ValidationReport()
    if not d.rounds:
        report.add("empty-dialogue", "dialogue has no rounds")
        return report

    last = d.last_round_index
    for i, rnd in enumerate(d.rounds):
        validate_round_turns(rnd.user, rnd.assistant, report, where=i)
        if rnd.assistant is None:
            if i == last:
                report.add("ends-with-assistant", "dialogue must end with an assistant turn", i)
            else:
                report.add("missing-assistant", "round has no assistant turn", i)

    seen_ids: set[str] = set()
    for i, rnd in enumerate(d.rounds):
        for turn in (rnd.user, rnd.assistant):
            if turn is None:
                continue
            for img in turn.images():
                if img.id in seen_ids:
                    report.add("image-id-unique", f"image id {img.id!r} appears twice", i)
                seen_ids.add(img.id)

    if not d.signature.is_consistent:
        report.add("signature-consistency",
                   "signature dependency and depth fields disagree")

    targets = d.dep_target_rounds
    dep = d.signature.dep
    if (len(targets) == 0) != (dep is DependencyModality.NONE):
        report.add("dep-targets-presence",
                   f"dependency {dep.value!r} with {len(targets)} target rounds")

    if len(set(targets)) != len(targets):
        report.add("target-unique", "duplicate dependency target rounds")

    in_range = [t for t in targets if 0 <= t < last]
    for t in targets:
        if not (0 <= t < last):
            report.add("target-range",
                       f"target round {t} does not precede the final round {last}")
        elif d.rounds[t].user.is_distractor or (
            d.rounds[t].assistant is not None and d.rounds[t].assistant.is_distractor
        ):
            report.add("distractor-target", f"target round {t} is a distractor", t)

    if targets and len(in_range) == len(targets):
        seps = [last - t for t in targets]
        nearest, farthest = min(seps), max(seps)
        if d.dep_depth_value != farthest:
            report.add("depth-value",
                       f"dep_depth_value {d.dep_depth_value} != farthest target separation {farthest}")
        expected_kind = DepthKind.ONE if nearest == 1 else DepthKind.N
        if d.signature.depth.kind is not expected_kind:
            report.add("depth-kind",
                       f"depth mismatch: nearest separation {nearest} implies "
                       f"{expected_kind.value!r}, signature says {d.signature.depth.kind.value!r}")
    elif not targets:
        if d.dep_depth_value is not None:
            report.add("depth-value", "dep_depth_value set but there are no targets")
        if d.signature.depth.kind is not DepthKind.ZERO and d.signature.is_consistent:
            report.add("depth-kind", "nonzero depth without dependency targets")

    if dep in (DependencyModality.I1, DependencyModality.T1) and len(targets) != 1:
        report.add("target-count", f"dependency {dep.value!r} requires exactly one target")
    if dep in (DependencyModality.IN, DependencyModality.TN) and targets and len(targets) < 2:
        report.add("target-count", f"dependency {dep.value!r} requires at least two targets")

    wants_image = dep in (DependencyModality.I1, DependencyModality.IN)
    wants_text = dep in (DependencyModality.T1, DependencyModality.TN)
    for t in in_range:
        asst = d.rounds[t].assistant
        if asst is None:
            continue
        has_image = bool(asst.images())
        if wants_image and not has_image:
            report.add("dep-modality", f"image dependency targets round {t} without an image", t)
        if wants_text and has_image:
            report.add("dep-modality", f"text dependency targets image round {t}", t)
        if wants_text and not any(s.is_text for s in asst.segments):
            report.add("dep-modality", f"text dependency targets round {t} without text", t)

    return report


def compute_dependency_depth(d: Dialogue) -> DependencyDepth:
    """Depth class from the dependency targets.

    Zero without targets; one when some target is the immediately preceding
    round; long-range otherwise, carrying the farthest separation as n.

    Raises:
        InvalidTarget: a target does not strictly precede the final round.
    """
    if not d.dep_target_rounds:
        return DependencyDepth(DepthKind.ZERO)
    last = d.last_round_index
    seps = []
    for t in d.dep_target_rounds:
        if not (0 <= t < last):
            raise InvalidTarget(f"target round {t} does not precede the final round {last}")
        seps.append(last - t)
    if min(seps) == 1:
        return DependencyDepth(DepthKind.ONE)
    return DependencyDepth(DepthKind.N, n_value=max(seps))


def infer_signature(d: Dialogue) -> TaskSignature:
    """Derive the task signature from the dialogue's content.

    Returns the canonical form (no concrete n on the depth), so the result
    compares equal to the stored signature of any pipeline-produced dialogue.

    Raises:
        AmbiguousDependency: targets mix text and image history.
        UnclassifiableModality: final-turn content outside the taxonomy.
    """
    if not d.rounds:
        raise UnclassifiableModality("empty dialogue")
    final = d.rounds[-1]
    if final.assistant is None:
        raise UnclassifiableModality("dialogue does not end with an assistant turn")

    inp = InputModality.TI if final.user.images() else InputModality.T
    out_images = bool(final.assistant.images())
    out_text = any(s.is_text for s in final.assistant.segments)
    if not out_images:
        raise UnclassifiableModality("final assistant turn produces no image")
    out = OutputModality.TI if out_text else OutputModality.I

    targets = d.dep_target_rounds
    if not targets:
        dep = DependencyModality.NONE
    else:
        kinds = set()
        for t in targets:
            asst = d.rounds[t].assistant
            if asst is None:
                raise InvalidTarget(f"target round {t} has no assistant turn")
            kinds.add("image" if asst.images() else "text")
        if len(kinds) != 1:
            raise AmbiguousDependency("dependency targets mix text and image rounds")
        if kinds == {"image"}:
            dep = DependencyModality.I1 if len(targets) == 1 else DependencyModality.IN
        else:
            dep = DependencyModality.T1 if len(targets) == 1 else DependencyModality.TN

    depth = DependencyDepth(compute_dependency_depth(d).kind)
    return TaskSignature(inp, out, dep, depth)


def structural_equal(a: Dialogue, b: Dialogue) -> bool:
    """Content equality ignoring provenance and annotations."""
    return _structure_key(a) == _structure_key(b)


def _structure_key(d: Dialogue):
    def seg_key(s: Segment):
        if s.is_text:
            return ("text", s.text)
        img = s.image
        return ("image", img.id, img.source.value, img.uri, img.width, img.height, img.caption)

    def turn_key(t: Turn | None):
        if t is None:
            return None
        return (t.role.value, t.is_distractor, tuple(seg_key(s) for s in t.segments))

    return (
        d.id,
        format_signature(d.signature),
        d.dep_target_rounds,
        d.dep_depth_value,
        tuple((turn_key(r.user), turn_key(r.assistant)) for r in d.rounds),
    )


# --- JSONL record schema -----------------------------------------------------
# One dialogue per line. Field order is fixed and absent optionals are
# omitted, so identical dialogues serialize to identical bytes.


def image_to_obj(img: ImageRef) -> dict[str, Any]:
    obj: dict[str, Any] = {
        "id": img.id,
        "source": img.source.value,
        "uri": img.uri,
        "width": img.width,
        "height": img.height,
    }
    if img.caption is not None:
        obj["caption"] = img.caption
    return obj


def image_from_obj(obj: dict[str, Any]) -> ImageRef:
    return ImageRef(
        id=obj["id"],
        source=ImageSource(obj["source"]),
        uri=obj["uri"],
        width=obj["width"],
        height=obj["height"],
        caption=obj.get("caption"),
    )


def _segment_to_obj(seg: Segment) -> dict[str, Any]:
    if seg.is_text:
        return {"text": seg.text}
    return {"image": image_to_obj(seg.image)}


def _segment_from_obj(obj: dict[str, Any]) -> Segment:
    if "text" in obj:
        return Segment(text=obj["text"])
    return Segment(image=image_from_obj(obj["image"]))


def turn_to_obj(turn: Turn) -> dict[str, Any]:
    prov: dict[str, Any] = {"stage": turn.provenance.stage.value}
    if turn.provenance.op_kind is not None:
        prov["op_kind"] = turn.provenance.op_kind
    if turn.provenance.original_text is not None:
        prov["original_text"] = turn.provenance.original_text
    return {
        "segments": [_segment_to_obj(s) for s in turn.segments],
        "is_distractor": turn.is_distractor,
        "provenance": prov,
    }


def turn_from_obj(obj: dict[str, Any], role: Role) -> Turn:
    prov = obj["provenance"]
    return Turn(
        role=role,
        segments=tuple(_segment_from_obj(s) for s in obj["segments"]),
        provenance=Provenance(
            stage=Stage(prov["stage"]),
            op_kind=prov.get("op_kind"),
            original_text=prov.get("original_text"),
        ),
        is_distractor=obj["is_distractor"],
    )


def dialogue_to_record(d: Dialogue) -> dict[str, Any]:
    rec: dict[str, Any] = {
        "id": d.id,
        "signature": format_signature(d.signature),
        "dep_target_rounds": list(d.dep_target_rounds),
    }
    if d.dep_depth_value is not None:
        rec["dep_depth_value"] = d.dep_depth_value
    rounds = []
    for rnd in d.rounds:
        if rnd.assistant is None:
            raise ValueError(f"dialogue {d.id!r}: cannot serialize a round without an assistant turn")
        rounds.append({"user": turn_to_obj(rnd.user), "assistant": turn_to_obj(rnd.assistant)})
    rec["rounds"] = rounds
    if d.annotations:
        rec["annotations"] = list(d.annotations)
    return rec


def dialogue_from_record(rec: dict[str, Any]) -> Dialogue:
    rounds = tuple(
        Round(
            user=turn_from_obj(r["user"], Role.USER),
            assistant=turn_from_obj(r["assistant"], Role.ASSISTANT),
        )
        for r in rec["rounds"]
    )
    return Dialogue(
        id=rec["id"],
        rounds=rounds,
        signature=parse_signature(rec["signature"]),
        dep_target_rounds=tuple(rec["dep_target_rounds"]),
        dep_depth_value=rec.get("dep_depth_value"),
        annotations=tuple(rec.get("annotations", ())),
    )


def with_annotation(d: Dialogue, note: str) -> Dialogue:
    return replace(d, annotations=d.annotations + (note,))


def dialogue_to_json(d: Dialogue) -> str:
    return json.dumps(dialogue_to_record(d), ensure_ascii=False, separators=(",", ":"))
