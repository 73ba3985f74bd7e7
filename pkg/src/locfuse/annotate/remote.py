"""HTTP backends: a generic chat-completion client and a similarity scorer."""

from __future__ import annotations

import configparser
import json
import logging
import os
import time
from importlib import resources

import httpx

from .loop import AnnotationState, BackendError

log = logging.getLogger(__name__)

DEFAULT_TOKEN_ENV = "LOCFUSE_API_TOKEN"
RETRIES = 2
BACKOFF = 0.5


class MissingCredentials(RuntimeError):
    pass


def load_prompts(path=None) -> dict[str, dict[str, str]]:
    cp = configparser.ConfigParser(interpolation=None)
    if path is None:
        cp.read_string(resources.files(__package__).joinpath("prompts.ini").read_text())
    else:
        with open(path) as f:
            cp.read_file(f)
    return {s: dict(cp[s]) for s in cp.sections()}


def _token(env: str) -> str:
    tok = os.environ.get(env)
    if not tok:
        raise MissingCredentials(f"environment variable {env} is not set")
    return tok


def _retrying(call, what: str, retries: int, backoff: float, sleep=time.sleep):
    for attempt in range(retries + 1):
        try:
            return call()
        except (httpx.TransportError, httpx.HTTPStatusError, KeyError, ValueError) as e:
            status = getattr(getattr(e, "response", None), "status_code", None)
            retryable = status is None or status == 429 or status >= 500
            if attempt == retries or not retryable:
                raise BackendError(f"{what} failed after {attempt + 1} attempt(s): {e}") from e
            delay = backoff * 2**attempt
            log.warning("%s failed (%s); retrying in %.2fs", what, e, delay)
            sleep(delay)


class ChatClient:
    """POSTs to ``{base_url}/chat/completions`` and returns the first choice's text."""

    def __init__(self, base_url: str, model: str, token_env: str = DEFAULT_TOKEN_ENV,
                 timeout: float = 60.0, retries: int = RETRIES, backoff: float = BACKOFF,
                 transport: httpx.BaseTransport | None = None, sleep=time.sleep):
        self.model = model
        self.retries, self.backoff, self.sleep = retries, backoff, sleep
        self.http = httpx.Client(base_url=base_url.rstrip("/"), timeout=timeout, transport=transport,
                                 headers={"Authorization": f"Bearer {_token(token_env)}"})

    def complete(self, system: str, user: str) -> str:
        body = {"model": self.model,
                "messages": [{"role": "system", "content": system}, {"role": "user", "content": user}]}

        def call():
            r = self.http.post("/chat/completions", json=body)
            r.raise_for_status()
            return r.json()["choices"][0]["message"]["content"]

        return _retrying(call, "chat completion", self.retries, self.backoff, self.sleep)


def _scored(pairs) -> str:
    return "\n".join(f"- ({s:.4f}) {t}" for t, s in pairs) or "(none)"


def _listed(texts) -> str:
    return "\n".join(f"- {t}" for t in texts) or "(none)"


class RemoteGenerator:
    def __init__(self, client: ChatClient, prompts: dict):
        self.client, self.prompt = client, prompts["generate"]

    def __call__(self, context: dict) -> list[str]:
        user = self.prompt["user"].format(image_id=context["image_id"], fanout=context["fanout"],
                                          scored=_scored(context["candidates"]),
                                          hard_negatives=_listed(context["hard_negatives"]))
        lines = [ln.strip() for ln in self.client.complete(self.prompt["system"], user).splitlines()]
        return [ln for ln in lines if ln][: context["fanout"]]


class RemoteSelector:
    def __init__(self, client: ChatClient, prompts: dict):
        self.client, self.prompt = client, prompts["select"]

    def __call__(self, state: AnnotationState) -> str:
        user = self.prompt["user"].format(scored=_scored((c.text, c.score) for c in state.candidates),
                                          hard_negatives=_listed(c.text for c in state.hard_negatives))
        return self.client.complete(self.prompt["system"], user).strip()


class RemoteQA:
    def __init__(self, client: ChatClient, prompts: dict):
        self.client, self.prompt = client, prompts["qa"]

    def __call__(self, caption: str) -> str:
        return self.client.complete(self.prompt["system"], self.prompt["user"].format(caption=caption))


class RemoteJudge:
    def __init__(self, client: ChatClient, prompts: dict):
        self.client, self.prompt = client, prompts["judge"]

    def __call__(self, ir_caption: str, rgb_reference: str) -> dict:
        user = self.prompt["user"].format(ir_caption=ir_caption, rgb_reference=rgb_reference)
        raw = self.client.complete(self.prompt["system"], user)
        try:
            return json.loads(raw)
        except json.JSONDecodeError:
            raise BackendError(f"judge reply is not JSON: {raw[:80]!r}") from None


class RemoteScorer:
    """POSTs ``{"text", "image_path"}`` to ``url`` and reads ``{"score": float}``."""

    def __init__(self, url: str, token_env: str = DEFAULT_TOKEN_ENV, timeout: float = 30.0,
                 retries: int = RETRIES, backoff: float = BACKOFF,
                 transport: httpx.BaseTransport | None = None, sleep=time.sleep):
        self.url = url
        self.retries, self.backoff, self.sleep = retries, backoff, sleep
        self.http = httpx.Client(timeout=timeout, transport=transport,
                                 headers={"Authorization": f"Bearer {_token(token_env)}"})

    def __call__(self, text: str, image) -> float:
        def call():
            r = self.http.post(self.url, json={"text": text, "image_path": str(image)})
            r.raise_for_status()
            return float(r.json()["score"])

        return _retrying(call, "similarity score", self.retries, self.backoff, self.sleep)
