"""Polling client that stores timestamped snapshots from a public traffic camera."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Callable, List, Optional

import requests

from .errors import TrafficCamError

logger = logging.getLogger(__name__)

INDEX_NAME = "index.json"
INDEX_VERSION = 1


class FeedError(TrafficCamError):
    """Every attempt to fetch a frame failed."""


@dataclass(frozen=True)
class StoredFrame:
    timestamp: str  # UTC, ISO 8601 basic format
    file: str  # relative to the output directory
    bytes: int
    sha256: str


def utc_stamp(when: datetime) -> str:
    return when.astimezone(timezone.utc).strftime("%Y%m%dT%H%M%SZ")


def load_index(camera_dir: str) -> List[StoredFrame]:
    path = os.path.join(camera_dir, INDEX_NAME)
    if not os.path.exists(path):
        return []
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != INDEX_VERSION:
        raise TrafficCamError(f"unsupported index version {doc.get('schema_version')!r} in {path}")
    return [StoredFrame(**f) for f in doc["frames"]]


def _save_index(camera_dir: str, camera: str, frames: List[StoredFrame]) -> None:
    path = os.path.join(camera_dir, INDEX_NAME)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump({"schema_version": INDEX_VERSION, "camera": camera,
                   "frames": [f.__dict__ for f in frames]}, fh, indent=2)
    os.replace(tmp, path)


def fetch_once(
    session, url: str, timeout_s: float, max_retries: int, backoff_s: float, sleep: Callable[[float], None]
) -> bytes:
    """GET ``url``, retrying with exponential backoff; raises ``FeedError`` when all attempts fail."""
    last = None
    for attempt in range(max_retries + 1):
        if attempt:
            delay = backoff_s * 2 ** (attempt - 1)
            logger.warning("retry %d/%d for %s in %.1fs (%s)", attempt, max_retries, url, delay, last)
            sleep(delay)
        try:
            resp = session.get(url, timeout=timeout_s)
        except requests.RequestException as exc:
            last = f"{type(exc).__name__}: {exc}"
            continue
        if resp.status_code == 200 and resp.content:
            return resp.content
        last = f"HTTP {resp.status_code}"
    raise FeedError(f"{url}: giving up after {max_retries + 1} attempts ({last})")


def fetch_feed(
    url: str,
    camera: str,
    output_dir: str,
    interval_s: float = 120.0,
    max_frames: int = 1,
    max_polls: Optional[int] = None,
    max_retries: int = 3,
    backoff_s: float = 1.0,
    timeout_s: float = 10.0,
    session=None,
    sleep: Callable[[float], None] = time.sleep,
    clock: Callable[[], datetime] = lambda: datetime.now(timezone.utc),
) -> List[StoredFrame]:
    """Poll ``url`` every ``interval_s`` seconds until ``max_frames`` new frames are stored.

    Images go to ``{output_dir}/{camera}/{utc}.jpg`` and are listed in
    ``index.json`` next to them. Re-running resumes from the existing index; a
    timestamp that is already stored is never written twice. A poll whose
    retries are exhausted is logged and skipped. ``max_polls`` bounds the total
    number of polls (default: ``4 * max_frames``). Returns the full index.
    """
    if not interval_s > 0:
        raise ValueError("interval_s must be positive")
    camera_dir = os.path.join(output_dir, camera)
    os.makedirs(camera_dir, exist_ok=True)
    frames = load_index(camera_dir)
    known = {f.timestamp for f in frames}
    session = session or requests.Session()
    max_polls = 4 * max_frames if max_polls is None else max_polls
    stored = failures = 0
    for poll in range(max_polls):
        if stored >= max_frames:
            break
        if poll:
            sleep(interval_s)
        try:
            data = fetch_once(session, url, timeout_s, max_retries, backoff_s, sleep)
        except FeedError as exc:
            failures += 1
            logger.error("%s", exc)
            continue
        stamp = utc_stamp(clock())
        if stamp in known:
            logger.info("frame %s already stored; skipping", stamp)
            continue
        name = f"{stamp}.jpg"
        with open(os.path.join(camera_dir, name), "wb") as fh:
            fh.write(data)
        frame = StoredFrame(stamp, f"{camera}/{name}", len(data), hashlib.sha256(data).hexdigest())
        frames.append(frame)
        known.add(stamp)
        _save_index(camera_dir, camera, frames)
        stored += 1
        logger.info("stored %s (%d bytes)", frame.file, frame.bytes)
    if stored == 0 and failures > 0:
        raise FeedError(f"no frame could be fetched from {url} in {failures} poll(s)")
    return frames
