"""Chat-completions client for object listing, with retry and an on-disk cache."""

from __future__ import annotations

import base64
import io
import json
import logging
import math
import os
import random
import threading
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import httpx

from .envsim import HEADING_VECTORS, GridEnvironment, Observation
from .representation import viewpoint_index

log = logging.getLogger(__name__)

_PROMPT = (
    "Give me a list of objects that appear in the given image. "
    "Ignore the general environmental objects such as walls, floors or rooftops. "
    "Please only answer with a list of objects, and separate each object by a comma."
)


def canonical_prompt() -> str:
    return _PROMPT


class VlmError(RuntimeError):
    pass


class VlmTimeout(VlmError):
    pass


class HttpStatus(VlmError):
    def __init__(self, code: int, body: str = ""):
        super().__init__(f"HTTP {code}: {body[:200]}")
        self.code = code


class MalformedResponse(VlmError):
    pass


class MissingCredentials(VlmError):
    pass


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str = "http://localhost:8000/v1"
    model_name: str = "llava-v1.5-7b"
    api_key_env_var: str = "VLM_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    max_in_flight: int = 4
    backoff_base: float = 1.0

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")


@dataclass
class VlmRequestRecord:
    observation_index: int
    image_reference: str
    prompt_text: str
    response_text: str
    latency: float
    attempt_count: int
    env_seed: int | None = None
    model_name: str = ""


def image_data_url(image_ref: str | bytes | os.PathLike) -> str:
    """Accepts raw PNG bytes, a file path, a data URL or a bare base64 payload."""
    if isinstance(image_ref, bytes):
        payload = base64.b64encode(image_ref).decode("ascii")
    else:
        s = os.fspath(image_ref)
        if s.startswith("data:"):
            return s
        p = Path(s)
        if len(s) < 4096 and p.is_file():
            payload = base64.b64encode(p.read_bytes()).decode("ascii")
        else:
            payload = s
    return f"data:image/png;base64,{payload}"


def build_request_body(image_ref, model_name: str) -> dict:
    return {
        "model": model_name,
        "messages": [
            {
                "role": "user",
                "content": [
                    {"type": "text", "text": canonical_prompt()},
                    {"type": "image_url", "image_url": {"url": image_data_url(image_ref)}},
                ],
            }
        ],
    }


def _extract_text(payload) -> str:
    try:
        content = payload["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise MalformedResponse(f"missing choices[0].message.content: {exc!r}") from exc
    if isinstance(content, list):  # content-part form
        parts = [p.get("text") for p in content if isinstance(p, dict) and p.get("type") == "text"]
        if not parts or any(t is None for t in parts):
            raise MalformedResponse("content parts carry no text")
        content = "".join(parts)
    if not isinstance(content, str):
        raise MalformedResponse(f"content is {type(content).__name__}, expected str")
    return content


class VlmClient:
    """Thread-safe client; at most ``cfg.max_in_flight`` requests are outstanding."""

    def __init__(self, cfg: EndpointConfig, transport: httpx.BaseTransport | None = None, sleep=time.sleep, seed=None):
        self.cfg = cfg
        self._http = httpx.Client(timeout=cfg.timeout, transport=transport)
        self._slots = threading.BoundedSemaphore(cfg.max_in_flight)
        self._sleep = sleep
        self._rng = random.Random(seed)
        self.network_calls = 0

    def close(self) -> None:
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _headers(self) -> dict:
        key = os.environ.get(self.cfg.api_key_env_var, "").strip()
        if not key:
            raise MissingCredentials(f"environment variable {self.cfg.api_key_env_var} is empty or unset")
        return {"Authorization": f"Bearer {key}", "Content-Type": "application/json"}

    def _backoff(self, attempt: int) -> float:
        base = self.cfg.backoff_base * 2**attempt
        return base + self._rng.uniform(0, self.cfg.backoff_base)

    def request(self, image_ref, observation_index: int = -1) -> VlmRequestRecord:
        headers = self._headers()
        body = build_request_body(image_ref, self.cfg.model_name)
        url = self.cfg.base_url.rstrip("/") + "/chat/completions"
        t0 = time.monotonic()
        last: VlmError | None = None
        for attempt in range(self.cfg.max_retries + 1):
            if attempt:
                self._sleep(self._backoff(attempt - 1))
            try:
                with self._slots:
                    self.network_calls += 1
                    resp = self._http.post(url, json=body, headers=headers)
            except httpx.TimeoutException as exc:
                last = VlmTimeout(str(exc) or "request timed out")
                continue
            except httpx.TransportError as exc:
                last = VlmError(f"transport error: {exc}")
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = HttpStatus(resp.status_code, resp.text)
                log.debug("transient HTTP %s on attempt %d", resp.status_code, attempt + 1)
                continue
            if resp.status_code >= 400:
                raise HttpStatus(resp.status_code, resp.text)
            try:
                payload = resp.json()
            except json.JSONDecodeError as exc:
                raise MalformedResponse(f"response is not JSON: {exc}") from exc
            text = _extract_text(payload)
            ref = image_ref if isinstance(image_ref, str) and len(image_ref) < 4096 else "<inline>"
            return VlmRequestRecord(
                observation_index, str(ref), canonical_prompt(), text,
                time.monotonic() - t0, attempt + 1, model_name=self.cfg.model_name,
            )
        raise last


def request_objects(image_ref, cfg: EndpointConfig, transport=None, sleep=time.sleep) -> str:
    with VlmClient(cfg, transport=transport, sleep=sleep) as client:
        return client.request(image_ref).response_text


class ResponseCache:
    """JSON-lines cache of :class:`VlmRequestRecord` keyed by (env seed, index, model).

    Writes are serialised by a lock; reads take a snapshot of the in-memory map.
    """

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._records: dict[tuple, VlmRequestRecord] = {}
        if self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                try:
                    rec = VlmRequestRecord(**json.loads(line))
                except (json.JSONDecodeError, TypeError):
                    log.warning("skipping corrupt cache line in %s", self.path)
                    continue
                self._records[(rec.env_seed, rec.observation_index, rec.model_name)] = rec

    def __len__(self) -> int:
        return len(self._records)

    def get(self, env_seed, index: int, model_name: str) -> VlmRequestRecord | None:
        return self._records.get((env_seed, index, model_name))

    def put(self, rec: VlmRequestRecord) -> None:
        if rec.prompt_text != canonical_prompt():
            raise ValueError("refusing to cache a record with a non-canonical prompt")
        key = (rec.env_seed, rec.observation_index, rec.model_name)
        with self._lock:
            if key in self._records:
                return
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(asdict(rec)) + "\n")
            self._records[key] = rec


def render_observation_png(env: GridEnvironment, obs: Observation, size: tuple[int, int] = (320, 160)) -> bytes:
    """Schematic first-person view: visible labels drawn by bearing and distance."""
    from PIL import Image, ImageDraw

    w, h = size
    img = Image.new("RGB", size, (235, 232, 225))
    draw = ImageDraw.Draw(img)
    draw.rectangle([0, int(h * 0.65), w, h], fill=(190, 180, 165))
    hx, hy = HEADING_VECTORS[obs.pose.heading]
    for oid in sorted(obs.visible_ids):
        o = env.object(oid)
        vx, vy = o.cell[0] - obs.pose.cell[0], o.cell[1] - obs.pose.cell[1]
        fwd = vx * hx + vy * hy
        side = vx * hy - vy * hx  # positive to the right
        dist = max(abs(vx), abs(vy), 0.5)
        bearing = math.atan2(side, max(fwd, 1e-6))
        cx = int(w / 2 + bearing / math.pi * w * 0.9)
        cy = int(h * 0.65 - 10 / dist)
        draw.rectangle([cx - 30, cy - 12, cx + 30, cy + 12], outline=(60, 60, 60), fill=(250, 250, 250))
        draw.text((cx - 27, cy - 6), o.label, fill=(0, 0, 0))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


class VlmDetector:
    """Cache-first adapter used by the VLM detection backend.

    Images are a pure function of the pose, so the cache is keyed by the
    viewpoint index; every episode in an environment shares its entries.
    """

    def __init__(self, client: VlmClient, cache: ResponseCache, image_fn=render_observation_png):
        self.client = client
        self.cache = cache
        self.image_fn = image_fn

    def describe(self, env: GridEnvironment, obs: Observation) -> str:
        model = self.client.cfg.model_name
        idx = viewpoint_index(env, obs.pose)
        hit = self.cache.get(env.seed, idx, model)
        if hit is not None:
            return hit.response_text
        rec = self.client.request(self.image_fn(env, obs), idx)
        rec.env_seed = env.seed
        self.cache.put(rec)
        return rec.response_text
