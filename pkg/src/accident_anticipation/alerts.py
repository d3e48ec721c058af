"""Verbal accident alerts.

Stage-2 outputs are summarized into a :class:`SceneAnnotation`, rendered into
a chat-style prompt and sent to a language-model endpoint. The offline
:class:`MockClient` answers deterministically without touching the network.
"""

from __future__ import annotations

import json
import logging
import os
import re
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError
from .heads import LocalizationTrace, ScoreTrace

log = logging.getLogger(__name__)

TOKEN_ENV = "ALERT_API_TOKEN"
NO_OBJECTS_LINE = "Involved objects: none identified."

TEMPLATES = {
    "v1": {
        "system": (
            "You are an in-vehicle safety assistant. Given the risk analysis of the dashcam "
            "scene below, warn the passengers in one or two short sentences. State when the "
            "accident is expected and which traffic agents are involved. Do not speculate "
            "beyond the data."
        ),
        "header": "Scene {clip_id}, frame {frame}.",
        "probability": "Accident probability: {prob:.2f}",
        "tta": "Predicted time to accident: {tta:.2f} s",
        "threshold": "Alert threshold: {thr:.2f}",
        "object": "- object slot {slot} ({category}): score {score:.2f}, box [{x1:.3f}, {y1:.3f}, {x2:.3f}, {y2:.3f}]",
        "objects_title": "Involved objects:",
    },
}


class AlertError(Exception):
    pass


class DeliveryError(AlertError):
    """The endpoint could not be reached after all retries."""


class RemoteError(AlertError):
    """The endpoint answered with an error status or an unusable payload."""


class TransportError(AlertError):
    """A single failed attempt; retried by the client."""


@dataclass(frozen=True)
class InvolvedObject:
    slot: int
    box: tuple
    score: float
    category: str = "unknown"


@dataclass(frozen=True)
class SceneAnnotation:
    clip_id: str
    current_frame: int
    accident_probability: float
    predicted_tta_seconds: float
    involved_objects: tuple = ()
    threshold_used: float = 0.5

    def __post_init__(self):
        scores = [o.score for o in self.involved_objects]
        if scores != sorted(scores, reverse=True):
            raise ConfigurationError("involved_objects must be sorted by descending score")


@dataclass(frozen=True)
class PromptBundle:
    system_text: str
    user_text: str
    attachments: Optional[bytes] = None


def build_prompt(ann: SceneAnnotation, template_version: str = "v1", attachments: Optional[bytes] = None) -> PromptBundle:
    try:
        tpl = TEMPLATES[template_version]
    except KeyError:
        raise ConfigurationError(f"unknown template version {template_version!r}") from None
    lines = [
        tpl["header"].format(clip_id=ann.clip_id, frame=ann.current_frame),
        tpl["probability"].format(prob=ann.accident_probability),
        tpl["tta"].format(tta=ann.predicted_tta_seconds),
        tpl["threshold"].format(thr=ann.threshold_used),
    ]
    if ann.involved_objects:
        lines.append(tpl["objects_title"])
        for o in ann.involved_objects:
            x1, y1, x2, y2 = (float(v) for v in o.box)
            lines.append(tpl["object"].format(slot=o.slot, category=o.category, score=o.score,
                                              x1=x1, y1=y1, x2=x2, y2=y2))
    else:
        lines.append(NO_OBJECTS_LINE)
    return PromptBundle(tpl["system"], "\n".join(lines), attachments)


def alert_trigger(s, threshold: float, persistence: int = 2) -> Optional[int]:
    """First 1-indexed frame at which ``persistence`` consecutive scores exceed ``threshold``.

    The returned frame is the last one of the run, i.e. when the alert can be
    issued online.
    """
    run = 0
    for t, v in enumerate(np.asarray(s), 1):
        run = run + 1 if v > threshold else 0
        if run >= persistence:
            return t
    return None


def estimate_tta(s, frame: int, fps: float, tau: Optional[int] = None) -> float:
    """Seconds until the accident as seen from ``frame``.

    With a labelled accident frame this is the ground-truth lead time; otherwise
    the recent score slope is extrapolated to 1, bounded by the rest of the clip.
    """
    if tau is not None:
        return max(tau - frame, 0) / fps
    s = np.asarray(s, dtype=np.float64)
    lo = max(frame - 5, 1)
    slope = (s[frame - 1] - s[lo - 1]) / max(frame - lo, 1)
    remaining = len(s) - frame
    if slope <= 0:
        return remaining / fps
    return min((1.0 - s[frame - 1]) / slope, remaining) / fps


def annotate(
    clip_id: str,
    score: ScoreTrace,
    loc: Optional[LocalizationTrace],
    boxes: np.ndarray,
    fps: float,
    threshold: float,
    persistence: int = 2,
    tau: Optional[int] = None,
    categories=None,
) -> Optional[SceneAnnotation]:
    """Summarize one clip at its alert trigger frame; None if the alert never fires."""
    frame = alert_trigger(score.s, threshold, persistence)
    if frame is None:
        return None
    objects = []
    if loc is not None:
        row = loc.obj_scores[frame - 1]
        for slot in loc.topk[frame - 1]:
            if loc.involved[frame - 1, slot]:
                cat = categories[slot] if categories else "unknown"
                box = tuple(round(float(v), 6) for v in boxes[frame - 1, slot])
                objects.append(InvolvedObject(int(slot), box, float(row[slot]), cat))
    return SceneAnnotation(
        clip_id=clip_id,
        current_frame=frame,
        accident_probability=float(score.s[frame - 1]),
        predicted_tta_seconds=estimate_tta(score.s, frame, fps, tau),
        involved_objects=tuple(objects),
        threshold_used=threshold,
    )


_PROB_RE = re.compile(r"Accident probability: ([0-9.]+)")
_TTA_RE = re.compile(r"Predicted time to accident: ([0-9.]+) s")
_OBJ_RE = re.compile(r"- object slot (\d+) \(([^)]*)\)")


def mock_alert(bundle: PromptBundle) -> str:
    """Deterministic stand-in for the language model, reading the values back from the prompt."""
    text = bundle.user_text
    prob = _PROB_RE.search(text)
    tta = _TTA_RE.search(text)
    prob_s = prob.group(1) if prob else "?"
    tta_s = tta.group(1) if tta else "?"
    obj = _OBJ_RE.search(text)
    if obj is None:
        return f"Warning: possible accident in {tta_s}s, no specific agent identified (p={prob_s})."
    return f"Warning: possible accident in {tta_s}s involving object {obj.group(1)} ({obj.group(2)}) (p={prob_s})."


def chat_payload(bundle: PromptBundle, model: str, max_tokens: int) -> dict:
    return {
        "model": model,
        "messages": [
            {"role": "system", "content": bundle.system_text},
            {"role": "user", "content": bundle.user_text},
        ],
        "max_tokens": max_tokens,
    }


def urllib_transport(url: str, body: bytes, headers: dict, timeout: float) -> tuple[int, bytes]:
    req = urllib.request.Request(url, data=body, headers=headers, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.status, resp.read()
    except urllib.error.HTTPError as exc:
        return exc.code, exc.read()
    except (urllib.error.URLError, OSError) as exc:
        raise TransportError(str(exc)) from exc


class MockClient:
    """Offline client; never opens a socket."""

    def complete(self, bundle: PromptBundle) -> str:
        return mock_alert(bundle)


@dataclass
class ChatClient:
    """Chat-completions style HTTP client with retries and exponential backoff."""

    url: str
    model: str = "default"
    timeout: float = 10.0
    retries: int = 2
    backoff: float = 0.5
    max_tokens: int = 128
    token: Optional[str] = None
    transport: Callable[[str, bytes, dict, float], tuple] = urllib_transport
    sleep: Callable[[float], None] = time.sleep
    retry_log: list = field(default_factory=list)

    def headers(self) -> dict:
        h = {"Content-Type": "application/json"}
        token = self.token if self.token is not None else os.environ.get(TOKEN_ENV)
        if token:
            h["Authorization"] = f"Bearer {token}"
        return h

    def complete(self, bundle: PromptBundle) -> str:
        body = json.dumps(chat_payload(bundle, self.model, self.max_tokens)).encode("utf-8")
        last = None
        for attempt in range(self.retries + 1):
            if attempt:
                delay = self.backoff * 2 ** (attempt - 1)
                self.retry_log.append((attempt, str(last)))
                log.warning("alert request failed (%s); retry %d in %.2fs", last, attempt, delay)
                self.sleep(delay)
            try:
                status, raw = self.transport(self.url, body, self.headers(), self.timeout)
            except TransportError as exc:
                last = exc
                continue
            if not 200 <= status < 300:
                excerpt = raw[:200].decode("utf-8", "replace")
                raise RemoteError(f"endpoint returned HTTP {status}: {excerpt}")
            try:
                return json.loads(raw)["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                excerpt = raw[:200].decode("utf-8", "replace")
                raise RemoteError(f"malformed response ({exc!r}): {excerpt}") from exc
        raise DeliveryError(f"no response after {self.retries + 1} attempts: {last}")


def request_alert(bundle: PromptBundle, client) -> str:
    return client.complete(bundle)
