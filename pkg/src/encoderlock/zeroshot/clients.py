"""Agent and image-generator boundaries, with offline mock and HTTP JSON backends.

Agent contract (one JSON object in, one out):
  {"task": "generate", "theme": str, "k": int, "exclude": [str]} -> {"prompts": [str]}
  {"task": "revise", "theme": str, "prompts": [str], "flagged": [[i, j]]} -> {"prompts": [str]}
Generator contract:
  {"prompt": str, "n": int, "seed": int, "inference_iterations": int, "size": [h, w]}
    -> {"images": [base64 PNG]}
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import os
import re
import time
import urllib.error
import urllib.request
from typing import Protocol, runtime_checkable

import numpy as np
from PIL import Image


class ClientError(RuntimeError):
    pass


@runtime_checkable
class AgentClient(Protocol):
    def complete(self, request: dict) -> dict: ...


@runtime_checkable
class ImageGeneratorClient(Protocol):
    def generate(self, prompt: str, n: int, seed: int, inference_iterations: int) -> list[np.ndarray]: ...


# Theme "military vehicles": initial agent output, one refinement, and a manual rewrite.
MILITARY_INITIAL = [
    "futuristic tank, stealth design", "antique cannon, ceremonial use",
    "amphibious assault vehicle, coastal operations", "drone carrier truck, mobile base",
    "armored medical evacuation vehicle, red cross", "cyberpunk hoverbike, scout unit",
    "nuclear-powered submarine, deep-sea exploration", "stealth bomber, night operation",
    "battlefield command and control center, high-tech", "anti-aircraft missile system, mobile defense",
]
MILITARY_REFINED = [
    "Armored Ground Vehicle, Modern Combat", "Artillery System, Classic Aesthetics",
    "Amphibious Assault Transport", "Drone Carrier, Tactical", "Field Support Unit, Healthcare",
    "Reconnaissance Craft, Urban Aerial", "Deep Sea Explorer, Nuclear Propulsion", "Stealth Surveillance Plane",
    "Command Center, High-Tech", "Missile Defense Network, Mobile",
]
MILITARY_MANUAL = [
    "Armored Personnel Carrier", "Anti-tank Combat Vehicle", "Tactical Missile Vehicle", "Forward Command Vehicle",
    "Communication Support Vehicle", "Artillery Tractor", "Logistic Support Transport Vehicle", "Tank",
    "Self-propelled Artillery", "Multi-functional Infantry Vehicle",
]


def normalize_prompt(p: str) -> str:
    return " ".join(p.lower().split())


class MockAgent:
    """Deterministic offline agent.

    ``generate`` replays ``canned`` (default: the military-vehicles list).
    ``revise`` walks each flagged prompt one step along its ``script`` chain;
    prompts at the end of their chain come back unchanged.
    """

    def __init__(self, canned: list[str] | None = None, script: dict[str, str] | None = None):
        self.canned = list(canned if canned is not None else MILITARY_INITIAL)
        if script is None:
            script = {**dict(zip(MILITARY_INITIAL, MILITARY_REFINED)), **dict(zip(MILITARY_REFINED, MILITARY_MANUAL))}
        self.script = script
        self.calls: list[dict] = []

    def complete(self, request: dict) -> dict:
        self.calls.append(request)
        task = request.get("task")
        if task == "generate":
            exclude = {normalize_prompt(p) for p in request.get("exclude", [])}
            fresh = [p for p in self.canned if normalize_prompt(p) not in exclude]
            return {"prompts": fresh[: request["k"]]}
        if task == "revise":
            prompts = list(request["prompts"])
            for i in sorted({i for pair in request["flagged"] for i in pair}):
                prompts[i] = self.script.get(prompts[i], prompts[i])
            return {"prompts": prompts}
        raise ClientError(f"unknown agent task {task!r}")


_STOP = {"and", "of", "the", "a", "an", "with", "for", "use", "unit"}


def prompt_tokens(prompt: str) -> list[str]:
    return [t for t in re.findall(r"[a-z0-9]+", prompt.lower()) if t not in _STOP]


def _hash_floats(key: str, k: int) -> np.ndarray:
    h = hashlib.sha256(key.encode()).digest()
    return np.frombuffer(h[: 2 * k], dtype=np.uint16).astype(np.float64) / 65535.0


class MockImageGenerator:
    """Procedural text-to-image stand-in.

    Each prompt token hashes to a coloured Gaussian blob, so prompts that share
    words render similar images. Fewer inference iterations leave more noise.
    """

    def __init__(self, size: tuple[int, int] = (32, 32), fail_on: set[str] | None = None):
        self.size = size
        self.fail_on = set(fail_on or ())

    def generate(self, prompt: str, n: int, seed: int, inference_iterations: int) -> list[np.ndarray]:
        if prompt in self.fail_on:
            raise ClientError(f"generator refused {prompt!r}")
        h, w = self.size
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        toks = prompt_tokens(prompt) or ["empty"]
        params = [_hash_floats("tok:" + t, 8) for t in toks]
        noise = 0.5 / (1.0 + inference_iterations / 10.0)
        out = []
        for i in range(n):
            digest = hashlib.sha256(f"{prompt}|{i}|{seed}".encode()).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            img = np.zeros((h, w, 3))
            for p in params:
                cy = 4 + p[0] * (h - 8) + rng.normal(0, 1.0)
                cx = 4 + p[1] * (w - 8) + rng.normal(0, 1.0)
                sigma = (1.5 + 2.5 * p[2]) * h / 32
                blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
                img += blob[..., None] * p[3:6] * rng.uniform(0.7, 1.0)
            img += rng.normal(0, noise, img.shape)
            out.append((np.clip(img, 0, 1) * 255).round().astype(np.uint8))
        return out


def _post_json(url: str, payload: dict, key: str | None, timeout: float) -> dict:
    req = urllib.request.Request(url, data=json.dumps(payload).encode(), method="POST",
                                 headers={"Content-Type": "application/json",
                                          **({"Authorization": f"Bearer {key}"} if key else {})})
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return json.loads(resp.read().decode())


def with_retry(fn, retries: int = 3, backoff: float = 0.5, sleep=time.sleep):
    """Call ``fn`` up to ``retries + 1`` times with exponential backoff."""
    last: Exception | None = None
    for attempt in range(retries + 1):
        try:
            return fn()
        except (urllib.error.URLError, TimeoutError, ConnectionError, ClientError, json.JSONDecodeError) as exc:
            last = exc
            if attempt < retries:
                sleep(backoff * 2 ** attempt)
    raise ClientError(f"request failed after {retries + 1} attempts: {last}") from last


class HttpAgent:
    def __init__(self, url: str | None = None, key: str | None = None, timeout: float = 60.0, retries: int = 3):
        self.url = url or os.environ.get("ENCODERLOCK_AGENT_URL")
        self.key = key or os.environ.get("ENCODERLOCK_AGENT_KEY")
        if not self.url:
            raise ClientError("no agent URL (set ENCODERLOCK_AGENT_URL)")
        self.timeout, self.retries = timeout, retries

    def complete(self, request: dict) -> dict:
        return with_retry(lambda: _post_json(self.url, request, self.key, self.timeout), self.retries)


class HttpImageGenerator:
    def __init__(self, url: str | None = None, key: str | None = None, size: tuple[int, int] = (32, 32),
                 timeout: float = 300.0, retries: int = 3):
        self.url = url or os.environ.get("ENCODERLOCK_GEN_URL")
        self.key = key or os.environ.get("ENCODERLOCK_GEN_KEY")
        if not self.url:
            raise ClientError("no generator URL (set ENCODERLOCK_GEN_URL)")
        self.size, self.timeout, self.retries = size, timeout, retries

    def generate(self, prompt: str, n: int, seed: int, inference_iterations: int) -> list[np.ndarray]:
        payload = {"prompt": prompt, "n": n, "seed": seed, "inference_iterations": inference_iterations,
                   "size": list(self.size)}
        resp = with_retry(lambda: _post_json(self.url, payload, self.key, self.timeout), self.retries)
        try:
            return [np.asarray(Image.open(io.BytesIO(base64.b64decode(b))).convert("RGB")) for b in resp["images"]]
        except (KeyError, TypeError, ValueError, OSError) as exc:
            raise ClientError(f"malformed generator response: {str(resp)[:200]}") from exc
