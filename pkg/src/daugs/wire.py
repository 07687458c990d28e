"""DAUGS-WIRE: the bit-exact request/response protocol spoken with external
segmenter backends over their standard streams.

Handshake: engine sends ``DWP1`` + u32 LE {patch, frames, classes}; the backend
replies ``DWP1`` + u32 LE protocol version (must be 1). Each request is
u32 LE request id | u32 LE payload bytes | f32 LE patch volume (x fastest,
then y, then t). Each response mirrors the id with f32 LE probabilities
(class fastest, then x, then y). Request id 0xFFFFFFFF with empty payload
asks the backend to shut down.
"""

from __future__ import annotations

import select
import struct
import subprocess
import sys
import time

import numpy as np

from .core import BackendError

MAGIC = b"DWP1"
PROTOCOL_VERSION = 1
SHUTDOWN_ID = 0xFFFFFFFF
DEFAULT_TIMEOUT_S = 30.0

_U32 = struct.Struct("<I")
_HANDSHAKE = struct.Struct("<III")


def pack_handshake(patch: int, n_frames: int, n_classes: int) -> bytes:
    return MAGIC + _HANDSHAKE.pack(patch, n_frames, n_classes)


def pack_handshake_reply(version: int = PROTOCOL_VERSION) -> bytes:
    return MAGIC + _U32.pack(version)


def pack_frame(req_id: int, payload: bytes) -> bytes:
    return _U32.pack(req_id) + _U32.pack(len(payload)) + payload


def _read_exact_blocking(stream, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            raise EOFError(f"stream closed after {len(buf)} of {n} bytes")
        buf += chunk
    return buf


def _read_exact_timeout(stream, n: int, timeout_s: float, model_id=None) -> bytes:
    fd = stream.fileno()
    deadline = time.monotonic() + timeout_s
    buf = b""
    while len(buf) < n:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise BackendError(f"timed out waiting for {n} bytes", model_id)
        ready, _, _ = select.select([fd], [], [], remaining)
        if not ready:
            continue
        chunk = stream.read1(n - len(buf)) if hasattr(stream, "read1") else stream.read(n - len(buf))
        if not chunk:
            raise BackendError("backend terminated mid-stream", model_id)
        buf += chunk
    return buf


class BackendClient:
    """One external backend process; requests are pipelined sequentially."""

    def __init__(
        self,
        cmd: tuple[str, ...],
        patch: int,
        n_frames: int,
        n_classes: int = 3,
        timeout_s: float = DEFAULT_TIMEOUT_S,
        model_id: int | None = None,
    ):
        self.patch = patch
        self.n_frames = n_frames
        self.n_classes = n_classes
        self.timeout_s = timeout_s
        self.model_id = model_id
        self._next_id = 1
        try:
            self.proc = subprocess.Popen(
                list(cmd),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=sys.stderr.fileno() if hasattr(sys.stderr, "fileno") else None,
            )
        except OSError as e:
            raise BackendError(f"cannot launch backend {cmd!r}: {e}", model_id) from e
        try:
            self.proc.stdin.write(pack_handshake(patch, n_frames, n_classes))
            self.proc.stdin.flush()
            reply = _read_exact_timeout(self.proc.stdout, 8, timeout_s, model_id)
        except BrokenPipeError as e:
            raise BackendError("backend closed its pipe during handshake", model_id) from e
        if reply[:4] != MAGIC:
            raise BackendError("handshake reply has wrong magic", model_id)
        version = _U32.unpack(reply[4:])[0]
        if version != PROTOCOL_VERSION:
            raise BackendError(f"protocol version mismatch: backend speaks {version}", model_id)

    def segment(self, volume: np.ndarray) -> np.ndarray:
        """Send one (t, y, x) float32 patch volume; return (y, x, class) probs."""
        vol = np.ascontiguousarray(volume, dtype="<f4")
        if vol.shape != (self.n_frames, self.patch, self.patch):
            raise BackendError(
                f"patch volume shape {vol.shape} does not match the handshake", self.model_id
            )
        req_id = self._next_id
        self._next_id += 1
        payload = vol.tobytes()
        try:
            self.proc.stdin.write(pack_frame(req_id, payload))
            self.proc.stdin.flush()
        except BrokenPipeError as e:
            raise BackendError("backend terminated (pipe closed)", self.model_id) from e
        header = _read_exact_timeout(self.proc.stdout, 8, self.timeout_s, self.model_id)
        got_id = _U32.unpack(header[:4])[0]
        nbytes = _U32.unpack(header[4:])[0]
        if got_id != req_id:
            raise BackendError(f"response id {got_id} does not match request {req_id}", self.model_id)
        expected = self.patch * self.patch * self.n_classes * 4
        if nbytes != expected:
            raise BackendError(
                f"response payload {nbytes} bytes, expected {expected}", self.model_id
            )
        blob = _read_exact_timeout(self.proc.stdout, nbytes, self.timeout_s, self.model_id)
        probs = np.frombuffer(blob, dtype="<f4").reshape(self.patch, self.patch, self.n_classes)
        return probs.astype(np.float32)

    def close(self) -> None:
        if self.proc.poll() is None:
            try:
                self.proc.stdin.write(pack_frame(SHUTDOWN_ID, b""))
                self.proc.stdin.flush()
                self.proc.stdin.close()
            except (BrokenPipeError, OSError):
                pass
            try:
                self.proc.wait(timeout=self.timeout_s)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()
                raise BackendError("backend ignored shutdown; killed", self.model_id)
        if self.proc.returncode not in (0, None):
            raise BackendError(
                f"backend exited with status {self.proc.returncode}", self.model_id
            )

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        try:
            self.close()
        except BackendError:
            if exc[0] is None:
                raise


def serve_loop(handler, stdin=None, stdout=None) -> None:
    """Backend-side request loop: read the handshake, answer requests with
    ``handler(volume) -> (y, x, class) float32``, exit on the shutdown id.

    Used by in-repo reference/test backends; real backends may implement the
    byte protocol in any language.
    """
    fin = stdin if stdin is not None else sys.stdin.buffer
    fout = stdout if stdout is not None else sys.stdout.buffer
    hs = _read_exact_blocking(fin, 16)
    if hs[:4] != MAGIC:
        raise EOFError("bad handshake magic")
    patch, n_frames, n_classes = _HANDSHAKE.unpack(hs[4:])
    fout.write(pack_handshake_reply())
    fout.flush()
    while True:
        header = _read_exact_blocking(fin, 8)
        req_id = _U32.unpack(header[:4])[0]
        nbytes = _U32.unpack(header[4:])[0]
        payload = _read_exact_blocking(fin, nbytes) if nbytes else b""
        if req_id == SHUTDOWN_ID:
            return
        vol = np.frombuffer(payload, dtype="<f4").reshape(n_frames, patch, patch)
        probs = np.ascontiguousarray(handler(vol), dtype="<f4")
        fout.write(pack_frame(req_id, probs.tobytes()))
        fout.flush()
