"""Promptable-segmenter backends.

`PromptableSegmenter` is the contract the refinement loop drives: a
deterministic `segment(image_ref, prompts) -> mask` at a per-session fixed
resolution. Two backends ship: a scene-based oracle for offline testing that
snaps to whole objects, and a TCP client for a model-serving sidecar speaking
newline-delimited JSON.
"""
from __future__ import annotations

import json
import socket
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy import ndimage

from .errors import (
    BridgeTimeout,
    ProtocolError,
    SegmenterFailure,
    UnknownImageError,
)
from .refine import PromptSet


class PromptableSegmenter(Protocol):
    def segment(self, image_ref: str, prompts: PromptSet) -> np.ndarray: ...

    def output_size(self, image_ref: str) -> tuple[int, int]: ...


# ---------------------------------------------------------------------------
# run-length codec (row-major, alternating runs, false run first)


def rle_encode(mask: np.ndarray) -> str:
    """Encode a boolean mask as space-separated run lengths starting with the
    false-run; the lengths sum to H*W."""
    flat = np.asarray(mask, dtype=bool).ravel()
    runs: list[int] = []
    value = False
    pos = 0
    boundaries = np.nonzero(np.diff(flat))[0] + 1
    for b in np.concatenate([boundaries, [flat.size]]):
        runs.append(int(b - pos))
        pos = int(b)
        value = not value
    if flat.size and flat[0]:
        runs.insert(0, 0)
    return " ".join(str(r) for r in runs)


def rle_decode(rle: str, height: int, width: int) -> np.ndarray:
    """Inverse of rle_encode; validates lengths and total pixel count."""
    try:
        runs = [int(tok) for tok in rle.split()]
    except ValueError as exc:
        raise ProtocolError(f"non-integer run length in {rle!r}") from exc
    if any(r < 0 for r in runs):
        raise ProtocolError("negative run length")
    if sum(runs) != height * width:
        raise ProtocolError(f"run lengths sum to {sum(runs)}, raster has {height * width}")
    flat = np.zeros(height * width, dtype=bool)
    pos = 0
    value = False
    for r in runs:
        if value:
            flat[pos:pos + r] = True
        pos += r
        value = not value
    return flat.reshape(height, width)


# ---------------------------------------------------------------------------
# oracle backend


@dataclass(frozen=True)
class OracleScene:
    """Pairwise-disjoint, connected objects on a fixed canvas."""
    height: int
    width: int
    objects: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        occupancy = np.zeros((self.height, self.width), dtype=np.int32)
        for obj in self.objects:
            obj = np.asarray(obj, dtype=bool)
            if obj.shape != (self.height, self.width):
                raise ValueError("object mask dims differ from the canvas")
            if not obj.any():
                raise ValueError("objects must be nonempty")
            _, n_comp = ndimage.label(obj, structure=np.ones((3, 3), dtype=bool))
            if n_comp != 1:
                raise ValueError("objects must be 8-connected")
            occupancy += obj
        if (occupancy > 1).any():
            raise ValueError("objects must be pairwise disjoint")

    def to_json_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "objects": [rle_encode(o) for o in self.objects],
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "OracleScene":
        h, w = int(data["height"]), int(data["width"])
        objs = tuple(rle_decode(r, h, w) for r in data["objects"])
        return cls(height=h, width=w, objects=objs)


def oracle_segment(scene: OracleScene, prompts: PromptSet) -> np.ndarray:
    """Whole-object selection: union of objects holding a positive point, minus
    objects holding a negative point; a box restricts eligibility to objects
    intersecting it. No prompts selects nothing."""
    for x, y in prompts.positives + prompts.negatives:
        if not (0 <= x < scene.width and 0 <= y < scene.height):
            raise ValueError(f"prompt ({x}, {y}) outside the canvas")
    box = prompts.box
    if box is not None:
        x0, y0, x1, y1 = box
        if x0 > x1 or y0 > y1:
            raise ValueError("box corners are not ordered")

    out = np.zeros((scene.height, scene.width), dtype=bool)
    for obj in scene.objects:
        if box is not None and not obj[y0:y1 + 1, x0:x1 + 1].any():
            continue
        if any(obj[y, x] for x, y in prompts.negatives):
            continue
        if any(obj[y, x] for x, y in prompts.positives):
            out |= obj
    return out


class OracleSegmenter:
    """Scene-backed segmenter; scenes are loaded per image id from JSON files
    (``<scene_dir>/<image_id>.json``) or registered directly."""

    def __init__(self, scene_dir: str | Path | None = None):
        self._scene_dir = Path(scene_dir) if scene_dir else None
        self._scenes: dict[str, OracleScene] = {}

    def register_scene(self, image_ref: str, scene: OracleScene) -> None:
        self._scenes[image_ref] = scene

    def _scene(self, image_ref: str) -> OracleScene:
        if image_ref not in self._scenes:
            if self._scene_dir is None:
                raise SegmenterFailure(f"no scene registered for {image_ref!r}")
            path = self._scene_dir / f"{image_ref}.json"
            if not path.exists():
                raise SegmenterFailure(f"scene file missing: {path}")
            try:
                self._scenes[image_ref] = OracleScene.from_json_dict(
                    json.loads(path.read_text()))
            except (ValueError, KeyError, ProtocolError) as exc:
                raise SegmenterFailure(f"unreadable scene {path}: {exc}") from exc
        return self._scenes[image_ref]

    def segment(self, image_ref: str, prompts: PromptSet) -> np.ndarray:
        return oracle_segment(self._scene(image_ref), prompts)

    def output_size(self, image_ref: str) -> tuple[int, int]:
        scene = self._scene(image_ref)
        return scene.height, scene.width


# ---------------------------------------------------------------------------
# bridge client


class BridgeClient:
    """Client for the model-serving sidecar: one JSON object per line over TCP,
    one in-flight request per connection.

    Feature tensors come back as NPY file paths (the sidecar shares a
    filesystem); masks come back inline as RLE at the session resolution.
    """

    def __init__(self, addr: str, timeout: float = 30.0,
                 mask_size: tuple[int, int] = (1024, 1024)):
        host, _, port = addr.rpartition(":")
        if not host or not port.isdigit():
            raise ProtocolError(f"bridge address must be HOST:PORT, got {addr!r}")
        self._addr = (host, int(port))
        self._timeout = timeout
        self._mask_size = mask_size
        self._sock: socket.socket | None = None
        self._buffer = b""

    # -- framing ------------------------------------------------------------

    def _connect(self) -> socket.socket:
        if self._sock is None:
            try:
                self._sock = socket.create_connection(self._addr, timeout=self._timeout)
            except socket.timeout as exc:
                raise BridgeTimeout(f"connect to {self._addr} timed out") from exc
            except OSError as exc:
                raise ProtocolError(f"cannot reach bridge at {self._addr}: {exc}") from exc
        return self._sock

    def _request(self, payload: dict) -> dict:
        sock = self._connect()
        try:
            sock.sendall(json.dumps(payload).encode() + b"\n")
            while b"\n" not in self._buffer:
                chunk = sock.recv(65536)
                if not chunk:
                    raise ProtocolError("bridge closed the connection mid-response")
                self._buffer += chunk
        except socket.timeout as exc:
            raise BridgeTimeout("bridge did not answer in time") from exc
        line, _, self._buffer = self._buffer.partition(b"\n")
        try:
            response = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"malformed JSON from bridge: {line[:120]!r}") from exc
        if not isinstance(response, dict):
            raise ProtocolError("bridge response is not an object")
        if not response.get("ok", False):
            code = response.get("error", "unknown")
            if code == "UnknownImage":
                raise UnknownImageError(response.get("image_id", ""))
            raise ProtocolError(f"bridge error: {code}")
        return response

    def close(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None
            self._buffer = b""

    def __enter__(self) -> "BridgeClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- operations ----------------------------------------------------------

    def register_image(self, image_id: str, image_path: str | Path) -> None:
        self._request({"op": "register_image", "image_id": image_id,
                       "image_path": str(image_path)})

    def fetch_features(self, image_id: str) -> np.ndarray:
        from .tensor_io import load_npy_tensor

        response = self._request({"op": "features", "image_id": image_id})
        tensor_path = response.get("tensor_path")
        if not tensor_path:
            raise ProtocolError("features response lacks tensor_path")
        return load_npy_tensor(tensor_path)

    def segment(self, image_ref: str, prompts: PromptSet) -> np.ndarray:
        points = [[int(x), int(y), 1] for x, y in prompts.positives]
        points += [[int(x), int(y), 0] for x, y in prompts.negatives]
        payload: dict = {"op": "segment", "image_id": image_ref, "points": points}
        if prompts.box is not None:
            payload["box"] = [int(v) for v in prompts.box]
        response = self._request(payload)
        height = response.get("height")
        width = response.get("width")
        rle = response.get("rle")
        if not isinstance(height, int) or not isinstance(width, int) or not isinstance(rle, str):
            raise ProtocolError("segment response lacks rle/height/width")
        if (height, width) != self._mask_size:
            raise ProtocolError(
                f"mask dims {(height, width)} differ from session {self._mask_size}")
        return rle_decode(rle, height, width)

    def output_size(self, image_ref: str) -> tuple[int, int]:
        return self._mask_size
