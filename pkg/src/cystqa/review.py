"""Manual-review queue service for images escalated by the selection step.

build_queue turns every Manual decision into a pending queue item with
pre-rendered overlay rasters (label overlay: G1 red, G2 blue, intersection
white; proposal overlay: P1/P2/P3 on the red/green/blue channels). The HTTP
service exposes the queue as JSON, serves the overlay media and appends
reviewer decisions to an fsynced JSON-lines log; replaying that log over a
freshly built queue reproduces the same pending set.
"""
from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from .dataset import load_gray_png, load_mask_png, save_gray_png
from .harness import resize_mask
from .preprocess import WORK_SIZE, bilinear_resize

from PIL import Image

DEFAULT_PORT = 8713
CHOICES = ("G1", "G2", "reject_both")
MEDIA_NAMES = ("image", "labels", "rps")


@dataclass
class QueueItem:
    id: str
    image_uri: str
    overlay_uris: dict[str, str]
    tlsa: dict
    status: str = "pending"
    decision: dict | None = None

    def as_dict(self) -> dict:
        payload = {
            "id": self.id,
            "image_uri": self.image_uri,
            "overlay_uris": self.overlay_uris,
            "tlsa": self.tlsa,
            "status": self.status,
        }
        if self.decision is not None:
            payload["decision"] = self.decision
        return payload


@dataclass
class ReviewDecision:
    id: str
    choice: str
    reviewer: str = ""
    note: str = ""
    timestamp: str = ""

    def validate(self, known_ids) -> None:
        if self.choice not in CHOICES:
            raise ValueError(f"choice must be one of {CHOICES}, got {self.choice!r}")
        if self.id not in known_ids:
            raise KeyError(f"unknown queue item id {self.id!r}")


def _overlay_labels(img: np.ndarray, g1: np.ndarray, g2: np.ndarray) -> np.ndarray:
    rgb = np.stack([img, img, img], axis=-1) * 0.6
    rgb[g1 & ~g2] = (1.0, 0.1, 0.1)
    rgb[g2 & ~g1] = (0.1, 0.1, 1.0)
    rgb[g1 & g2] = (1.0, 1.0, 1.0)
    return rgb


def _overlay_rps(img: np.ndarray, p1: np.ndarray, p2: np.ndarray, p3: np.ndarray) -> np.ndarray:
    base = img * 0.5
    return np.stack(
        [np.maximum(base, p1.astype(float)), np.maximum(base, p2.astype(float)), np.maximum(base, p3.astype(float))],
        axis=-1,
    )


def _save_rgb(rgb: np.ndarray, path: Path) -> None:
    arr = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


class QueueStore:
    """Pending/decided queue state backed by an append-only decision log."""

    def __init__(self, store_dir: Path | str):
        self.store_dir = Path(store_dir)
        self.log_path = self.store_dir / "review_log.jsonl"
        self.items: dict[str, QueueItem] = {}
        self._lock = threading.Lock()

    @classmethod
    def open(cls, store_dir: Path | str) -> "QueueStore":
        store = cls(store_dir)
        queue_file = store.store_dir / "queue.json"
        data = json.loads(queue_file.read_text())
        for entry in data["items"]:
            store.items[entry["id"]] = QueueItem(
                id=entry["id"],
                image_uri=entry["image_uri"],
                overlay_uris=entry["overlay_uris"],
                tlsa=entry["tlsa"],
            )
        store.replay_log()
        return store

    def save_manifest(self) -> None:
        payload = {"items": [item.as_dict() for item in self.sorted_items()]}
        (self.store_dir / "queue.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def sorted_items(self) -> list[QueueItem]:
        return [self.items[k] for k in sorted(self.items)]

    def pending(self) -> list[QueueItem]:
        return [item for item in self.sorted_items() if item.status == "pending"]

    def decided_count(self) -> int:
        return sum(1 for item in self.items.values() if item.status == "decided")

    def replay_log(self) -> None:
        if not self.log_path.exists():
            return
        for line in self.log_path.read_text().splitlines():
            if not line.strip():
                continue
            record = json.loads(line)
            item = self.items.get(record["id"])
            if item is not None:
                item.status = "decided"
                item.decision = record

    def decide(self, decision: ReviewDecision) -> QueueItem:
        """Validate, append to the log (fsynced) and update queue state."""
        decision.validate(self.items)
        if not decision.timestamp:
            decision.timestamp = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        record = {
            "id": decision.id,
            "choice": decision.choice,
            "reviewer": decision.reviewer,
            "note": decision.note,
            "timestamp": decision.timestamp,
        }
        with self._lock:
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            item = self.items[decision.id]
            item.status = "decided"
            item.decision = record
        return item


def build_queue(
    decisions_file: Path | str,
    stack_dir: Path | str,
    store_dir: Path | str,
    rps_dir: Path | str | None = None,
) -> QueueStore:
    """Create a queue store with one pending item per Manual decision.

    Overlay rasters are pre-rendered at build time so the service (and its
    tests) never need a browser or live model. rps_dir defaults to the `rps`
    directory next to the decisions file, as written by the selection run.
    """
    decisions_file = Path(decisions_file)
    if not decisions_file.exists():
        raise FileNotFoundError(f"decisions file not found: {decisions_file}")
    stack_dir = Path(stack_dir)
    rps_dir = Path(rps_dir) if rps_dir is not None else decisions_file.parent / "rps"

    store_dir = Path(store_dir)
    media_root = store_dir / "media"
    media_root.mkdir(parents=True, exist_ok=True)

    store = QueueStore(store_dir)
    for line in decisions_file.read_text().splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        if record["tau"] != "Manual":
            continue
        image_id = record["id"]
        img = load_gray_png(stack_dir / f"{image_id}.img.png")
        if img.shape != (WORK_SIZE, WORK_SIZE):
            img = bilinear_resize(img, WORK_SIZE, WORK_SIZE)
        g1 = resize_mask(load_mask_png(stack_dir / f"{image_id}.G1.png"))
        g2 = resize_mask(load_mask_png(stack_dir / f"{image_id}.G2.png"))
        proposals = [
            resize_mask(load_mask_png(rps_dir / f"{image_id}.P{k}.png")) for k in (1, 2, 3)
        ]

        media_dir = media_root / image_id
        media_dir.mkdir(exist_ok=True)
        save_gray_png(img, media_dir / "image.png")
        _save_rgb(_overlay_labels(img, g1, g2), media_dir / "labels.png")
        _save_rgb(_overlay_rps(img, *proposals), media_dir / "rps.png")

        store.items[image_id] = QueueItem(
            id=image_id,
            image_uri=f"/media/{image_id}/image.png",
            overlay_uris={
                "labels": f"/media/{image_id}/labels.png",
                "rps": f"/media/{image_id}/rps.png",
            },
            tlsa={
                "tau": record["tau"],
                "ratio_mu": record.get("ratio_mu"),
                "ratio_v": record.get("ratio_v"),
                "eta": record.get("eta"),
                "phi_pi": record.get("phi_pi"),
                "branch_taken": record.get("branch_taken"),
            },
        )
    store.replay_log()
    store.save_manifest()
    return store


_CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".png": "image/png",
    ".json": "application/json",
    ".map": "application/json",
    ".svg": "image/svg+xml",
}


def _make_handler(store: QueueStore, static_dir: Path | None):
    class ReviewHandler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):  # keep test output quiet
            pass

        def _send_json(self, payload, status=200):
            body = json.dumps(payload).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _send_file(self, path: Path):
            if not path.is_file():
                self._send_json({"error": f"not found: {self.path}"}, status=404)
                return
            body = path.read_bytes()
            self.send_response(200)
            self.send_header(
                "Content-Type", _CONTENT_TYPES.get(path.suffix, "application/octet-stream")
            )
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self):
            path = self.path.split("?", 1)[0]
            if path == "/api/queue":
                self._send_json(
                    {
                        "pending": [item.as_dict() for item in store.pending()],
                        "total": len(store.items),
                        "decided": store.decided_count(),
                    }
                )
                return
            if path.startswith("/api/item/"):
                image_id = path[len("/api/item/") :]
                item = store.items.get(image_id)
                if item is None:
                    self._send_json({"error": f"unknown item {image_id!r}"}, status=404)
                else:
                    self._send_json(item.as_dict())
                return
            if path.startswith("/media/"):
                rel = path[len("/media/") :]
                target = (store.store_dir / "media" / rel).resolve()
                if store.store_dir.resolve() not in target.parents:
                    self._send_json({"error": "forbidden"}, status=403)
                    return
                self._send_file(target)
                return
            if static_dir is not None:
                rel = "index.html" if path == "/" else path.lstrip("/")
                target = (static_dir / rel).resolve()
                if static_dir.resolve() not in target.parents and target != static_dir.resolve():
                    self._send_json({"error": "forbidden"}, status=403)
                    return
                self._send_file(target)
                return
            self._send_json({"error": f"not found: {path}"}, status=404)

        def do_POST(self):
            path = self.path.split("?", 1)[0]
            if path != "/api/decision":
                self._send_json({"error": f"not found: {path}"}, status=404)
                return
            length = int(self.headers.get("Content-Length", "0"))
            try:
                payload = json.loads(self.rfile.read(length) or b"{}")
            except json.JSONDecodeError:
                self._send_json({"error": "invalid JSON body"}, status=400)
                return
            decision = ReviewDecision(
                id=str(payload.get("id", "")),
                choice=str(payload.get("choice", "")),
                reviewer=str(payload.get("reviewer", "")),
                note=str(payload.get("note", "")),
            )
            try:
                item = store.decide(decision)
            except KeyError as exc:
                self._send_json({"error": str(exc)}, status=404)
                return
            except ValueError as exc:
                self._send_json({"error": str(exc)}, status=400)
                return
            self._send_json({"ok": True, "item": item.as_dict()})

    return ReviewHandler


def make_server(
    store: QueueStore, port: int = DEFAULT_PORT, static_dir: Path | str | None = None
) -> ThreadingHTTPServer:
    """Bind the review service; port 0 selects an ephemeral port."""
    static = Path(static_dir) if static_dir else None
    return ThreadingHTTPServer(("127.0.0.1", port), _make_handler(store, static))


def serve(
    store: QueueStore, port: int = DEFAULT_PORT, static_dir: Path | str | None = None
) -> None:
    server = make_server(store, port, static_dir)
    print(f"review service listening on http://127.0.0.1:{server.server_address[1]}/")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
