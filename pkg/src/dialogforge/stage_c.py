"""Interleaved output generation: image-only replies gain a caption-grounded Q&A.

The final user turn is augmented with a general-knowledge question about the
requested image's subject and the final assistant turn answers it right after
the image, turning the output modality from image-only into text-and-image.
"""

from __future__ import annotations

import random
from dataclasses import replace
from typing import Any

from .atomic_ops import BackendUnavailable, CompletionBackend, OpKind, OpRequest, invoke
from .dialogue import (
    Dialogue,
    MissingCaption,
    Round,
    Segment,
    Turn,
    with_annotation,
)
from .taxonomy import OutputModality
from .util import derive_seed, map_ordered


class AlreadyInterleaved(ValueError):
    """The dialogue's output modality is already text-and-image."""


def _final_caption(d: Dialogue) -> str:
    asst = d.rounds[-1].assistant
    if asst is None:
        raise ValueError(f"dialogue {d.id!r} does not end with an assistant turn")
    images = asst.images()
    if not images:
        raise ValueError(f"dialogue {d.id!r}: final assistant turn has no image segment")
    caption = images[0].caption
    if not (caption or "").strip():
        raise MissingCaption(f"dialogue {d.id!r}: final image carries no caption")
    return caption


def _append_after_text(turn: Turn, text: str) -> Turn:
    """Insert a text segment right after the turn's last text segment."""
    at = max((i for i, s in enumerate(turn.segments) if s.is_text), default=-1) + 1
    segments = turn.segments[:at] + (Segment(text=text),) + turn.segments[at:]
    return replace(turn, segments=segments)


def _append_after_image(turn: Turn, text: str) -> Turn:
    at = max(i for i, s in enumerate(turn.segments) if s.is_image) + 1
    segments = turn.segments[:at] + (Segment(text=text),) + turn.segments[at:]
    return replace(turn, segments=segments)


def interleave_output(d: Dialogue, backend: CompletionBackend, *,
                      seed: int = 0, retries: int = 2) -> Dialogue:
    """Append a Q to the final request and an A after the final image.

    Raises:
        AlreadyInterleaved: output modality is already text-and-image.
        MissingCaption: the final image has no caption to ground the Q&A.
    """
    if d.signature.output is OutputModality.TI:
        raise AlreadyInterleaved(f"dialogue {d.id!r} already has an interleaved output")
    caption = _final_caption(d)
    question = invoke(
        OpRequest(OpKind.Q_FROM_CAPTION, {"caption": caption},
                  derive_seed(seed, d.id, "q_from_caption")),
        backend, retries,
    ).fields["q"]
    answer = invoke(
        OpRequest(OpKind.A_FROM_CAPTION, {"caption": caption, "question": question},
                  derive_seed(seed, d.id, "a_from_caption")),
        backend, retries,
    ).fields["a"]

    final = d.rounds[-1]
    new_final = Round(
        user=_append_after_text(final.user, question),
        assistant=_append_after_image(final.assistant, answer),
    )
    return replace(
        d,
        rounds=d.rounds[:-1] + (new_final,),
        signature=replace(d.signature, output=OutputModality.TI),
    )


def run_stage_c(dialogues: list[Dialogue], backend: CompletionBackend, *,
                apply_fraction: float = 1.0, seed: int = 0,
                retries: int = 2, concurrency: int = 1,
                ) -> tuple[list[Dialogue], list[dict[str, Any]]]:
    """Interleave each dialogue selected by a seeded per-id coin.

    Unselected dialogues pass through untouched; selected ones that are
    already interleaved pass through with a skip annotation.
    """
    if not 0.0 <= apply_fraction <= 1.0:
        raise ValueError("apply_fraction must lie in [0, 1]")

    def one(d: Dialogue):
        if random.Random(derive_seed(seed, d.id, "apply")).random() >= apply_fraction:
            return d, None
        if d.signature.output is OutputModality.TI:
            return with_annotation(d, "stage_c_skipped"), None
        try:
            return interleave_output(d, backend, seed=seed, retries=retries), None
        except BackendUnavailable:
            raise  # infrastructure failure, not a data problem
        except Exception as err:  # noqa: BLE001 - per-record errors become rejects
            return None, {"id": d.id, "error": str(err)}

    outputs, rejects = [], []
    for dialogue, reject in map_ordered(one, dialogues, concurrency):
        if dialogue is not None:
            outputs.append(dialogue)
        else:
            rejects.append(reject)
    return outputs, rejects
