"""Chat-completion client for the taxonomy-building prompts.

Talks the de-facto open chat-completions protocol (JSON POST with
``{model, messages, temperature}``) so any compatible provider can serve
the pipeline. A deterministic in-memory mock and a record/replay
transcript client cover tests and reproducible builds.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import requests

from .errors import CredentialMissing, HttpError, LlmUnavailable, Timeout, UnparseableResponse

ENV_KEY = "HIERSPLAT_LLM_KEY"

_COMMON_HEADER = (
    "You are a smart assistant tasked with dividing the following items into "
    "meaningful groups based on their properties. The key requirements are:\n"
    "Balance: The number of items in each group should be as evenly distributed "
    "as possible. A difference of 1 item between groups is acceptable, but larger "
    "differences should be avoided.\n"
    "Meaningfulness: The groups must be meaningful, based on the items' inherent "
    "characteristics. Grouping should make logical sense to a human observer.\n"
    "Descriptive Group Names: Each group must have a clear and descriptive name "
    "that reflects its characteristics.\n"
)

_JSON_FORMAT = (
    '{\n    "<GROUP_1>": ["<ITEM_1>", ...], \n    "<GROUP_2>": ["<ITEM_2>", ...], \n    ...\n}'
)

SIZE_PROMPT = (
    _COMMON_HEADER
    + "Goal: Cluster items into size groups, based on their typical physical size "
    "in scenes. The groups must strictly be by sizes, for example: small, small "
    "medium, medium, large, extra large, etc.\n"
    "Items: {classes input}\n"
    "\n"
    "Ensure groups are meaningful and provide descriptive group names. Output "
    "must follow this JSON format:\n" + _JSON_FORMAT
)

FUNCTION_PROMPT = (
    _COMMON_HEADER
    + "Goal: Cluster items in the '{size}' size group into functionality-based "
    "groups.\n"
    "The name of the clusters should not be too specific, it could be as general "
    "like storage, furniture, etc.\n"
    "Ensure that items in each group serve similar purposes or have similar "
    "functionalities.\n"
    "Items: {classes input}\n"
    "\n"
    "Ensure groups are meaningful and provide descriptive group names. Output "
    "must follow this JSON format:\n" + _JSON_FORMAT
)

GEOMETRY_SUMMARIZE_PROMPT = (
    "The following groups of indoor scene items have been clustered based on "
    "their shape: {formatted_clusters}\n"
    "Instructions: Balance: Ensure the groups are as evenly distributed as "
    "possible. A difference of 1 item between groups is acceptable. If needed, "
    "move a small number of items from one group to another to achieve balance, "
    "feel free to even remove a group if it has only one member (just dont leave "
    "any groups empty), ensuring that the groups remain meaningful.\n"
    "Meaningful Naming: After balancing the groups, assign a descriptive and "
    "meaningful name to each group, based on the shared shape characteristic. "
    "The name should clearly reflect the shape or geometric property of the "
    "items in that group. Always prefer singular shapes names like box, "
    "rectangle, soft, flat, etc.\n"
    "No Duplications: make sure to not repeat any class members, the group names "
    "are fine but not the groups' members.\n"
    "The group names must strictly by shapes and DO NOT leave any group empty, "
    "you could remove it if its empty.\n"
    "The output must be the same JSON format as below:\n" + _JSON_FORMAT
)

VALIDATOR_PROMPT = (
    "The following groups of items in a scene have been clustered based on "
    "their shape: {formatted_clusters}\n"
    "Instructions: Balance: Ensure the groups are as evenly distributed as "
    "possible. A difference of 1 item between groups is acceptable. If needed, "
    "move a small number of items from one group to another to achieve balance, "
    "remove a group if it has only one member, ensuring that the groups remain "
    "meaningful.\n"
    "Meaningful Naming: After balancing the groups, assign a descriptive and "
    "meaningful name to each group, based on the shared shape characteristic. "
    "The name should clearly reflect the shape or geometric property of the "
    "items in that group. Always prefer singular shapes names like box, "
    "rectangle, soft, flat, etc.\n"
    "New Group: If it is necessary to create a new group, feel free to do so, "
    "DO NOT create any non-original items.\n"
    "No Duplications: make sure to not repeat any class members, the group names "
    "are fine but not the groups' members.\n"
    "The output must be the same JSON format as below:\n" + _JSON_FORMAT
)


@dataclass(frozen=True)
class PromptTemplate:
    name: str  # size | function | geometry_summarize | validator
    body: str

    def render(self, bindings: dict[str, str]) -> str:
        text = self.body
        for key, value in bindings.items():
            text = text.replace("{" + key + "}", value)
        unresolved = re.findall(r"\{(classes input|size|formatted_clusters)\}", text)
        if unresolved:
            raise ValueError(f"unresolved placeholders: {unresolved}")
        return text


TEMPLATES = {
    "size": PromptTemplate("size", SIZE_PROMPT),
    "function": PromptTemplate("function", FUNCTION_PROMPT),
    "geometry_summarize": PromptTemplate("geometry_summarize", GEOMETRY_SUMMARIZE_PROMPT),
    "validator": PromptTemplate("validator", VALIDATOR_PROMPT),
}


@dataclass
class ChatExchange:
    request: str
    response: str
    model: str = ""
    timestamp: float = 0.0
    prompt_tokens: int | None = None
    completion_tokens: int | None = None


def mock_key(template_name: str, bindings: dict[str, str]) -> str:
    digest = hashlib.sha256(
        json.dumps(bindings, sort_keys=True).encode("utf-8")
    ).hexdigest()[:12]
    return f"{template_name}:{digest}"


class MockClient:
    """Pure in-memory client: canned text keyed by template name + binding hash.

    Values may be lists, consumed in order, so a scripted conversation can
    return a malformed reply first and a correction on retry.
    """

    def __init__(self, responses: dict[str, str | list[str]]):
        self._responses = {
            k: list(v) if isinstance(v, list) else [v] for k, v in responses.items()
        }
        self._consumed: dict[str, int] = {}
        self.calls: list[ChatExchange] = []

    def complete(self, template: PromptTemplate, bindings: dict[str, str]) -> str:
        key = mock_key(template.name, bindings)
        if key not in self._responses:
            raise LlmUnavailable(f"mock has no response for {key}")
        turn = self._consumed.get(key, 0)
        queue = self._responses[key]
        text = queue[min(turn, len(queue) - 1)]
        self._consumed[key] = turn + 1
        self.calls.append(ChatExchange(template.render(bindings), text))
        return text


class HttpClient:
    """Chat-completions client over HTTP with retry and optional recording."""

    def __init__(
        self,
        endpoint: str,
        model: str = "gpt-4-turbo",
        temperature: float = 0.0,
        timeout_s: float = 60.0,
        retries: int = 3,
        max_in_flight: int = 4,
        api_key: str | None = None,
    ):
        self.endpoint = endpoint
        self.model = model
        self.temperature = temperature
        self.timeout_s = timeout_s
        self.retries = retries
        self._sem = threading.Semaphore(max_in_flight)
        self._key = api_key if api_key is not None else os.environ.get(ENV_KEY)
        self.recorder: "TranscriptRecorder | None" = None

    def complete(self, template: PromptTemplate, bindings: dict[str, str]) -> str:
        if not self._key:
            raise CredentialMissing(f"set {ENV_KEY} or pass api_key")
        prompt = template.render(bindings)
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature,
        }
        headers = {"Authorization": f"Bearer {self._key}", "Content-Type": "application/json"}
        last_error: Exception = LlmUnavailable("no attempt made")
        for attempt in range(self.retries):
            try:
                with self._sem:
                    resp = requests.post(
                        self.endpoint, json=body, headers=headers, timeout=self.timeout_s
                    )
            except requests.Timeout as exc:
                last_error = Timeout(str(exc))
                continue
            except requests.RequestException as exc:
                last_error = LlmUnavailable(str(exc))
                continue
            if resp.status_code == 200:
                text = resp.json()["choices"][0]["message"]["content"]
                if self.recorder is not None:
                    self.recorder.record(prompt, text, self.model)
                return text
            last_error = HttpError(resp.status_code, resp.text[:200])
            if resp.status_code in (429, 500, 502, 503):
                time.sleep(min(2.0**attempt, 8.0))
                continue
            break
        raise last_error


@dataclass
class TranscriptRecorder:
    path: Path
    exchanges: list[dict] = field(default_factory=list)

    def record(self, request: str, response: str, model: str = ""):
        self.exchanges.append({"request": request, "response": response, "model": model})
        self.flush()

    def flush(self):
        self.path.write_text(
            json.dumps({"exchanges": self.exchanges}, indent=2) + "\n", encoding="utf-8"
        )


class ReplayClient:
    """Serves recorded exchanges byte-identically, keyed by rendered request.

    Repeated identical requests are answered in recorded order.
    """

    def __init__(self, transcript_path: str | Path):
        data = json.loads(Path(transcript_path).read_text(encoding="utf-8"))
        self._queues: dict[str, list[str]] = {}
        for ex in data["exchanges"]:
            self._queues.setdefault(ex["request"], []).append(ex["response"])
        self._served: dict[str, int] = {}

    def complete(self, template: PromptTemplate, bindings: dict[str, str]) -> str:
        request = template.render(bindings)
        if request not in self._queues:
            raise LlmUnavailable(
                f"transcript has no exchange for a {template.name} request "
                f"({len(request)} chars)"
            )
        i = self._served.get(request, 0)
        queue = self._queues[request]
        self._served[request] = i + 1
        return queue[min(i, len(queue) - 1)]


def complete(client, template: PromptTemplate, bindings: dict[str, str]) -> str:
    """Single chat completion via whichever client is active."""
    return client.complete(template, bindings)


_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)


def parse_group_json(text: str) -> dict[str, list[str]]:
    """Extract the first JSON object mapping group names to member lists.

    Accepts bare JSON, fenced code blocks, and prose around the object.
    """
    candidates = [m.strip() for m in _FENCE_RE.findall(text)]
    candidates.append(text)
    for candidate in candidates:
        start = candidate.find("{")
        while start != -1:
            depth = 0
            for end in range(start, len(candidate)):
                if candidate[end] == "{":
                    depth += 1
                elif candidate[end] == "}":
                    depth -= 1
                    if depth == 0:
                        try:
                            obj = json.loads(candidate[start : end + 1])
                        except json.JSONDecodeError:
                            break
                        if _is_grouping(obj):
                            return {k: [str(x) for x in v] for k, v in obj.items()}
                        break
            start = candidate.find("{", start + 1)
    raise UnparseableResponse(f"no valid grouping object in {len(text)}-char response")


def _is_grouping(obj) -> bool:
    return (
        isinstance(obj, dict)
        and len(obj) > 0
        and all(
            isinstance(v, list) and all(isinstance(x, str) for x in v) for v in obj.values()
        )
    )


def serialize_grouping(groups: dict[str, list[str]]) -> str:
    return json.dumps(groups, indent=4)
