"""LLM-powered text transformations used as pipeline building blocks.

Ten operations cover query synthesis from captions, Q&A generation,
subject-driven composition queries, history-dependent query rewriting, and
caption-grounded question answering. Each operation renders a prompt carrying
a distinct header line, sends it to a completion backend, and parses the
tagged-line reply (``QUERY:`` / ``Q:`` / ``A:``). The mock backend recognizes
the header, extracts the substituted inputs, and answers by fixed string
rules, so the whole pipeline runs offline and deterministically.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Protocol, Sequence

import requests

from .util import map_ordered


class MissingInput(ValueError):
    """A required input key is absent or blank."""


class UnparseableResponse(ValueError):
    """A required tag is missing from the backend reply, or its payload is empty."""


class BackendUnavailable(RuntimeError):
    """Transport failure or malformed wire response from a completion backend."""


class UnknownTemplate(ValueError):
    """The mock backend received a prompt it did not render."""


class OpKind(Enum):
    CAPTION2QUERY = "caption2query"
    CAPTION2QA_Q = "caption2qa_q"
    DRIVE_HS = "drive_hs"
    DRIVE_I_H = "drive_i_h"
    QUERY2DEP_Q = "query2dep_q"
    CAPTION2QA_Q_DEP = "caption2qa_q_dep"
    DRIVE_HS_DEP = "drive_hs_dep"
    DRIVE_I_H_DEP = "drive_i_h_dep"
    Q_FROM_CAPTION = "q_from_caption"
    A_FROM_CAPTION = "a_from_caption"


REQUIRED_INPUTS: dict[OpKind, tuple[str, ...]] = {
    OpKind.CAPTION2QUERY: ("caption",),
    OpKind.CAPTION2QA_Q: ("caption",),
    OpKind.DRIVE_HS: ("caption_a", "caption_b"),
    OpKind.DRIVE_I_H: ("caption_history",),
    OpKind.QUERY2DEP_Q: ("query", "target_caption"),
    OpKind.CAPTION2QA_Q_DEP: ("caption",),
    OpKind.DRIVE_HS_DEP: ("caption_a", "caption_b"),
    OpKind.DRIVE_I_H_DEP: ("caption_history",),
    OpKind.Q_FROM_CAPTION: ("caption",),
    OpKind.A_FROM_CAPTION: ("caption", "question"),
}

REQUIRED_OUTPUTS: dict[OpKind, tuple[str, ...]] = {
    OpKind.CAPTION2QUERY: ("query",),
    OpKind.CAPTION2QA_Q: ("q", "a", "query"),
    OpKind.DRIVE_HS: ("query",),
    OpKind.DRIVE_I_H: ("query",),
    OpKind.QUERY2DEP_Q: ("query",),
    OpKind.CAPTION2QA_Q_DEP: ("q", "a", "query"),
    OpKind.DRIVE_HS_DEP: ("query",),
    OpKind.DRIVE_I_H_DEP: ("query",),
    OpKind.Q_FROM_CAPTION: ("q",),
    OpKind.A_FROM_CAPTION: ("a",),
}

_TAGS = {"query": "QUERY:", "q": "Q:", "a": "A:"}

_HEADER_PREFIX = "### op: "

# Instruction body per operation. The reply-format sentence names every tag
# the parser will require.
_INSTRUCTIONS: dict[OpKind, str] = {
    OpKind.CAPTION2QUERY: (
        "Rewrite the image caption below as a natural user request asking for that image "
        "to be generated. Reply with a single line of the form \"QUERY: <request>\"."
    ),
    OpKind.CAPTION2QA_Q: (
        "From the image caption below, write a general question a curious user might ask "
        "about the subject, a factual answer, and a short follow-up request asking for such "
        "an image without naming the subject again. Reply with three lines: "
        "\"Q: <question>\", \"A: <answer>\", \"QUERY: <request>\"."
    ),
    OpKind.DRIVE_HS: (
        "The two captions below describe subjects shown in the two immediately preceding "
        "turns of a conversation. Write one user request asking for a new image that "
        "combines both subjects. Reply with a single line \"QUERY: <request>\"."
    ),
    OpKind.DRIVE_I_H: (
        "The caption below describes the subject shown in the immediately preceding turn. "
        "Write one user request asking to combine that subject with the image the user is "
        "uploading alongside this message. Reply with a single line \"QUERY: <request>\"."
    ),
    OpKind.QUERY2DEP_Q: (
        "Rewrite the edit request below into a specific, self-contained instruction that "
        "names the subject of the target image, so the request stays unambiguous even after "
        "unrelated conversation in between. Reply with a single line \"QUERY: <instruction>\"."
    ),
    OpKind.CAPTION2QA_Q_DEP: (
        "From the image caption below, write a general question about the subject, a factual "
        "answer, and a request for such an image that explicitly points back to the earlier "
        "discussion of the subject (several unrelated turns will sit in between). Reply with "
        "three lines: \"Q: <question>\", \"A: <answer>\", \"QUERY: <request>\"."
    ),
    OpKind.DRIVE_HS_DEP: (
        "The two captions below describe subjects shown in earlier turns, now separated from "
        "the current turn by unrelated turns. Write one user request that explicitly names "
        "both subjects and asks for a new image combining them. Reply with a single line "
        "\"QUERY: <request>\"."
    ),
    OpKind.DRIVE_I_H_DEP: (
        "The caption below describes a subject shown several turns ago, separated from the "
        "current turn by unrelated turns. Write one user request that explicitly names that "
        "subject and asks to combine it with the image the user is uploading now. Reply with "
        "a single line \"QUERY: <request>\"."
    ),
    OpKind.Q_FROM_CAPTION: (
        "Write one relevant general-knowledge question about the subject of the image "
        "caption below. Reply with a single line \"Q: <question>\"."
    ),
    OpKind.A_FROM_CAPTION: (
        "Answer the question below factually, using the image caption as grounding. Reply "
        "with a single line \"A: <answer>\"."
    ),
}


@dataclass(frozen=True)
class OpRequest:
    kind: OpKind
    inputs: Mapping[str, str]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "inputs", dict(self.inputs))

    def validate(self) -> None:
        for key in REQUIRED_INPUTS[self.kind]:
            value = self.inputs.get(key)
            if value is None or not value.strip():
                raise MissingInput(f"{self.kind.value}: required input {key!r} absent or blank")


@dataclass(frozen=True)
class OpResponse:
    kind: OpKind
    fields: Mapping[str, str]
    raw: str

    def __post_init__(self):
        object.__setattr__(self, "fields", dict(self.fields))


class CompletionBackend(Protocol):
    def complete(self, prompt: str, seed: int, *, max_tokens: int = 512,
                 temperature: float = 0.7) -> str: ...


def render_prompt(req: OpRequest) -> str:
    """Deterministic prompt: header line, instruction, one tagged line per input.

    Raises:
        MissingInput: a required input key is absent or blank.
    """
    req.validate()
    lines = [f"{_HEADER_PREFIX}{req.kind.value}", _INSTRUCTIONS[req.kind]]
    for key in REQUIRED_INPUTS[req.kind]:
        lines.append(f"INPUT {key}: {req.inputs[key]}")
    return "\n".join(lines)


def parse_response(kind: OpKind, raw: str) -> OpResponse:
    """Extract the kind's required tagged lines; first occurrence of each tag wins.

    Raises:
        UnparseableResponse: a required tag is missing or its payload is empty.
    """
    wanted = REQUIRED_OUTPUTS[kind]
    found: dict[str, str] = {}
    for line in raw.splitlines():
        stripped = line.strip()
        for key in wanted:
            tag = _TAGS[key]
            if key not in found and stripped.startswith(tag):
                found[key] = stripped[len(tag):].strip()
    fields: dict[str, str] = {}
    for key in wanted:
        if key not in found:
            raise UnparseableResponse(f"{kind.value}: tag {_TAGS[key]!r} not found in reply")
        if not found[key]:
            raise UnparseableResponse(f"{kind.value}: tag {_TAGS[key]!r} has an empty payload")
        fields[key] = found[key]
    return OpResponse(kind=kind, fields=fields, raw=raw)


def invoke(req: OpRequest, backend: CompletionBackend, retries: int = 2) -> OpResponse:
    """render -> complete -> parse, retrying with seed+attempt on failure.

    Raises:
        BackendUnavailable / UnparseableResponse: all attempts failed; the
        last attempt's error is raised.
    """
    prompt = render_prompt(req)
    last_err: Exception | None = None
    for attempt in range(retries + 1):
        try:
            raw = backend.complete(prompt, req.seed + attempt)
        except BackendUnavailable as err:
            last_err = err
            continue
        try:
            return parse_response(req.kind, raw)
        except UnparseableResponse as err:
            last_err = err
    assert last_err is not None
    raise last_err


def invoke_many(reqs: Sequence[OpRequest], backend: CompletionBackend,
                retries: int = 2, concurrency: int = 8) -> list[OpResponse]:
    """Concurrent invoke with a bounded in-flight limit; results in input order."""
    return map_ordered(lambda r: invoke(r, backend, retries), reqs, concurrency)


# --- Mock backend -------------------------------------------------------------


def _mock_lines(kind: OpKind, inputs: dict[str, str]) -> list[str]:
    if kind is OpKind.CAPTION2QUERY:
        return [f"QUERY: Please generate an image of {inputs['caption']}"]
    if kind is OpKind.CAPTION2QA_Q:
        return [
            f"Q: What can you tell me about {inputs['caption']}?",
            f"A: Here is what I know: {inputs['caption']}.",
            "QUERY: Create one for me.",
        ]
    if kind is OpKind.DRIVE_HS:
        return [f"QUERY: Please draw {inputs['caption_a']} and {inputs['caption_b']} together in one image."]
    if kind is OpKind.DRIVE_I_H:
        return [f"QUERY: Please combine {inputs['caption_history']} with this image I uploaded."]
    if kind is OpKind.QUERY2DEP_Q:
        return [f"QUERY: {inputs['query']} — apply this to the image showing: {inputs['target_caption']}"]
    if kind is OpKind.CAPTION2QA_Q_DEP:
        return [
            f"Q: What can you tell me about {inputs['caption']}?",
            f"A: Here is what I know: {inputs['caption']}.",
            f"QUERY: Now generate the one we discussed earlier: {inputs['caption']}.",
        ]
    if kind is OpKind.DRIVE_HS_DEP:
        return [f"QUERY: Draw {inputs['caption_a']} and {inputs['caption_b']} together in the next image."]
    if kind is OpKind.DRIVE_I_H_DEP:
        return [f"QUERY: Draw {inputs['caption_history']} together with this image I uploaded."]
    if kind is OpKind.Q_FROM_CAPTION:
        return [f"Q: What are the key features of {inputs['caption']}?"]
    if kind is OpKind.A_FROM_CAPTION:
        return [f"A: Regarding the question {inputs['question']!r}: the image shows {inputs['caption']}."]
    raise UnknownTemplate(f"no mock rule for {kind!r}")


def mock_complete(prompt: str, seed: int) -> str:
    """Answer a rendered prompt by fixed string rules; pure in (prompt, seed).

    Raises:
        UnknownTemplate: the prompt lacks a known header or its input lines.
    """
    lines = prompt.splitlines()
    if not lines or not lines[0].startswith(_HEADER_PREFIX):
        raise UnknownTemplate("prompt does not start with an operation header")
    name = lines[0][len(_HEADER_PREFIX):].strip()
    try:
        kind = OpKind(name)
    except ValueError:
        raise UnknownTemplate(f"unknown operation header {name!r}") from None
    inputs: dict[str, str] = {}
    for line in lines[1:]:
        if line.startswith("INPUT ") and ": " in line:
            key, _, value = line[len("INPUT "):].partition(": ")
            inputs.setdefault(key, value)
    for key in REQUIRED_INPUTS[kind]:
        if key not in inputs:
            raise UnknownTemplate(f"prompt is missing the input line for {key!r}")
    return "\n".join(_mock_lines(kind, inputs))


class MockBackend:
    """Deterministic offline backend answering rendered prompts by fixed rules."""

    def complete(self, prompt: str, seed: int, *, max_tokens: int = 512,
                 temperature: float = 0.7) -> str:
        return mock_complete(prompt, seed)


# --- Remote backend -----------------------------------------------------------


@dataclass
class RemoteBackend:
    """HTTP completion service speaking a one-endpoint JSON contract.

    POST ``{"prompt", "seed", "max_tokens", "temperature"}`` to ``url``;
    the service replies ``{"text": <completion>}``. Anything else (transport
    error, non-2xx, malformed body) raises BackendUnavailable.
    """

    url: str
    timeout: float = 30.0
    session: requests.Session = field(default_factory=requests.Session, repr=False)

    def complete(self, prompt: str, seed: int, *, max_tokens: int = 512,
                 temperature: float = 0.7) -> str:
        body = {"prompt": prompt, "seed": seed, "max_tokens": max_tokens,
                "temperature": temperature}
        try:
            resp = self.session.post(self.url, json=body, timeout=self.timeout)
        except requests.RequestException as err:
            raise BackendUnavailable(f"POST {self.url} failed: {err}") from err
        if not 200 <= resp.status_code < 300:
            raise BackendUnavailable(f"POST {self.url} returned {resp.status_code}")
        try:
            data = resp.json()
        except ValueError as err:
            raise BackendUnavailable(f"{self.url}: response body is not JSON") from err
        text = data.get("text") if isinstance(data, dict) else None
        if not isinstance(text, str):
            raise BackendUnavailable(f"{self.url}: response lacks a string 'text' field")
        return text
