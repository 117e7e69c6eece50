"""Captioning and question-answering clients.

Two interfaces, each with a deterministic mock for hermetic runs and a
generic HTTP implementation for real endpoints:

  * captioning: ``submit(CaptionRequest) -> caption string``
  * question answering: ``ask(question, image=None) -> answer string``

HTTP clients POST JSON to a configured endpoint; the bearer token comes
from an environment variable so credentials never live in configs.
"""

from __future__ import annotations

import base64
import os
import re
from dataclasses import dataclass

from .errors import CaptioningError, ConfigError, RetrievalError

DEFAULT_TOKEN_ENV = "ANOMGEN_API_TOKEN"


@dataclass
class CaptionRequest:
    record_id: str
    image_png: bytes
    bbox: object | None
    template: str
    bbox_in_text: bool = False


class MockCaptioningClient:
    """Pure function of the record id; optionally fails chosen ids."""

    def __init__(self, fail_ids: set[str] | None = None, prefix: str = "CAP"):
        self.fail_ids = fail_ids or set()
        self.prefix = prefix
        self.calls = 0

    def submit(self, request: CaptionRequest) -> str:
        self.calls += 1
        if request.record_id in self.fail_ids:
            raise CaptioningError(f"mock failure for {request.record_id!r}")
        return f"{self.prefix}:{request.record_id}"


class HttpCaptioningClient:
    """POSTs the captioning payload to a generic endpoint.

    Request JSON: ``{"id", "image_b64", "bbox", "template"}``.
    Response JSON must carry a ``caption`` string.
    """

    def __init__(self, endpoint: str, token_env: str = DEFAULT_TOKEN_ENV,
                 timeout: float = 30.0):
        if not endpoint:
            raise ConfigError("captioning endpoint must be non-empty")
        self.endpoint = endpoint
        self.token_env = token_env
        self.timeout = timeout

    def submit(self, request: CaptionRequest) -> str:
        import requests

        payload = {
            "id": request.record_id,
            "image_b64": base64.b64encode(request.image_png).decode(),
            "bbox": list(request.bbox.as_tuple()) if request.bbox else None,
            "template": request.template,
        }
        try:
            resp = requests.post(self.endpoint, json=payload,
                                 headers=_auth_header(self.token_env),
                                 timeout=self.timeout)
            resp.raise_for_status()
            caption = resp.json().get("caption")
        except Exception as exc:
            raise CaptioningError(
                f"captioning request for {request.record_id!r} failed: "
                f"{exc}") from exc
        if not isinstance(caption, str) or not caption:
            raise CaptioningError(
                f"endpoint returned no caption for {request.record_id!r}")
        return caption


MATCH_PROMPT_PREFIX = "Match each defect name to the closest term"


def build_match_question(candidates: list[str], vocabulary: list[str]) -> str:
    return (f"{MATCH_PROMPT_PREFIX} from this list: "
            f"{', '.join(vocabulary)}. Names: {', '.join(candidates)}. "
            f"Answer one 'name -> term' per line, 'name -> none' if nothing "
            f"matches.")


def parse_match_answer(answer: str) -> dict[str, str | None]:
    out: dict[str, str | None] = {}
    for line in answer.splitlines():
        if "->" not in line:
            continue
        name, term = (part.strip() for part in line.split("->", 1))
        out[name] = None if term.lower() == "none" else term
    return out


def _normalize_question(question: str) -> str:
    return re.sub(r"\s+", " ", question.strip().strip("?").lower())


def _singular(word: str) -> str:
    w = word.strip().lower()
    if w.endswith("es") and len(w) > 3 and w[:-2].endswith(("ch", "sh", "x")):
        return w[:-2]
    if w.endswith("s") and not w.endswith("ss"):
        return w[:-1]
    return w


DEFAULT_ANSWERS = {
    "what defects commonly appear in cashews":
        "cracks, holes, bulges, scratches",
    "what defects commonly appear in capsules":
        "scratches, dents, contamination",
    "what defects commonly appear in circuit boards":
        "scratches, missing components, bent pins",
    "what defects commonly appear in candles":
        "chips, wicks bent, foreign particles",
    "what defects commonly appear in fabric":
        "holes, stains, thread errors",
}


class MockMllmClient:
    """Deterministic lookup-table answering.

    Plain questions answer from the committed table (extendable per
    instance). Category-matching questions built by
    ``build_match_question`` are adjudicated by case-insensitive
    singular/plural normalization, the same rule a remote model is asked
    to apply.
    """

    def __init__(self, answers: dict[str, str] | None = None,
                 fail: bool = False):
        self.answers = dict(DEFAULT_ANSWERS)
        if answers:
            self.answers.update({_normalize_question(q): a
                                 for q, a in answers.items()})
        self.fail = fail
        self.calls = 0

    def ask(self, question: str, image=None) -> str:
        self.calls += 1
        if self.fail:
            raise RetrievalError("mock client configured to fail")
        if question.startswith(MATCH_PROMPT_PREFIX):
            return self._adjudicate(question)
        key = _normalize_question(question)
        if key in self.answers:
            return self.answers[key]
        return "unknown"

    def _adjudicate(self, question: str) -> str:
        m = re.search(r"from this list: (.*?)\. Names: (.*?)\. Answer",
                      question, flags=re.S)
        if not m:
            return ""
        vocabulary = [v.strip() for v in m.group(1).split(",") if v.strip()]
        names = [n.strip() for n in m.group(2).split(",") if n.strip()]
        lines = []
        for name in names:
            target = None
            for term in vocabulary:
                if _singular(name) == _singular(term):
                    target = term
                    break
            lines.append(f"{name} -> {target if target else 'none'}")
        return "\n".join(lines)


class HttpMllmClient:
    """POSTs ``{"question", "image_b64"?}`` and reads back ``answer``."""

    def __init__(self, endpoint: str, token_env: str = DEFAULT_TOKEN_ENV,
                 timeout: float = 30.0):
        if not endpoint:
            raise ConfigError("mllm endpoint must be non-empty")
        self.endpoint = endpoint
        self.token_env = token_env
        self.timeout = timeout

    def ask(self, question: str, image=None) -> str:
        import requests

        payload: dict = {"question": question}
        if image is not None:
            from .images import image_to_png_bytes
            payload["image_b64"] = base64.b64encode(
                image_to_png_bytes(image)).decode()
        try:
            resp = requests.post(self.endpoint, json=payload,
                                 headers=_auth_header(self.token_env),
                                 timeout=self.timeout)
            resp.raise_for_status()
            answer = resp.json().get("answer")
        except Exception as exc:
            raise RetrievalError(f"mllm request failed: {exc}") from exc
        if not isinstance(answer, str):
            raise RetrievalError("endpoint returned no answer string")
        return answer


def _auth_header(token_env: str) -> dict[str, str]:
    token = os.environ.get(token_env, "")
    return {"Authorization": f"Bearer {token}"} if token else {}
