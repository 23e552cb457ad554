"""JSON-lines subprocess client for auditing external classifiers forward-only.

An adapter is any executable that speaks the ``faud-bb`` protocol on its
standard streams:

* handshake (adapter -> engine, first line)::

      {"protocol": "faud-bb", "version": 1, "n_classes": 5}

* request (engine -> adapter, one per line)::

      {"id": 0, "shape": [1, 32, 32], "data": [0.0, ...]}   # row-major

* response (adapter -> engine, any order)::

      {"id": 0, "probs": [0.1, ...]}            # sums to 1 +/- 1e-6
      {"id": 3, "error": "what went wrong"}     # per-request failure

The handle pipelines up to ``window`` requests, demultiplexes responses by
id on a reader thread, and is safe to call from multiple threads.  Gradients
and activations are deliberately not part of the wire format: only RISE,
random baselines, and deletion/insertion with an externally supplied heatmap
make sense for adapter-hosted models.

Set the environment variable ``FAUD_BB_LOG`` to a file path to append a
trace of every frame sent (``>>``) and received (``<<``).
"""

from __future__ import annotations

import itertools
import json
import os
import shlex
import subprocess
import threading
import time

import numpy as np

PROTOCOL_NAME = "faud-bb"
PROTOCOL_VERSION = 1
DEFAULT_HANDSHAKE_TIMEOUT = 10.0
DEFAULT_RESPONSE_TIMEOUT = 30.0
DEFAULT_WINDOW = 32


class ProtocolError(RuntimeError):
    """Transport or framing failure; the handle is unusable afterwards."""


class HandshakeError(ProtocolError):
    """The adapter did not present a valid handshake line."""


class AdapterError(ProtocolError):
    """The adapter answered a request with an error field (handle stays live)."""


class ModelHandle:
    """Client for one adapter child process.

    Exposes the same calling surface as the in-process predictors:
    ``handle(image) -> probs`` and ``handle.predict_batch(images)``, so a
    handle can be passed anywhere a predict function is accepted.
    """

    def __init__(
        self,
        command,
        *,
        handshake_timeout: float = DEFAULT_HANDSHAKE_TIMEOUT,
        response_timeout: float = DEFAULT_RESPONSE_TIMEOUT,
        window: int = DEFAULT_WINDOW,
        env: dict | None = None,
    ):
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        if window < 1:
            raise ValueError(f"window must be >= 1, got {window}")
        try:
            self._proc = subprocess.Popen(
                argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
                env=env,
            )
        except OSError as exc:
            raise ProtocolError(f"failed to spawn adapter {argv!r}: {exc}") from exc
        self.command = argv
        self.n_classes = 0
        self.info: dict = {}
        self._response_timeout = response_timeout
        self._window = threading.BoundedSemaphore(window)
        self._cond = threading.Condition()
        self._write_lock = threading.Lock()
        self._ids = itertools.count()
        self._inflight: set[int] = set()
        self._responses: dict[int, dict] = {}
        self._fatal: str | None = None
        self._closed = False
        self._got_handshake = threading.Event()
        trace_path = os.environ.get("FAUD_BB_LOG")
        self._trace_fh = open(trace_path, "a") if trace_path else None
        self._trace_lock = threading.Lock()
        self._reader = threading.Thread(
            target=self._read_loop, name="faud-bb-reader", daemon=True
        )
        self._reader.start()
        if not self._got_handshake.wait(handshake_timeout):
            self.close()
            raise HandshakeError(
                f"no handshake from {argv!r} within {handshake_timeout} s"
            )
        with self._cond:
            fatal = self._fatal
        if fatal is not None:
            self.close()
            raise HandshakeError(fatal)

    # -- reader side ---------------------------------------------------------

    def _read_loop(self) -> None:
        saw_handshake = False
        for line in self._proc.stdout:
            self._trace("<<", line)
            line = line.strip()
            if not line:
                continue
            try:
                msg = json.loads(line)
            except ValueError:
                self._abort(f"adapter sent invalid JSON: {line!r}")
                return
            if not saw_handshake:
                error = self._check_handshake(msg, line)
                if error is not None:
                    self._abort(error)
                    return
                saw_handshake = True
                self._got_handshake.set()
                continue
            rid = msg.get("id")
            with self._cond:
                if rid not in self._inflight:
                    self._abort_locked(
                        f"adapter answered unknown request id {rid!r}"
                    )
                    return
                self._inflight.discard(rid)
                self._responses[rid] = msg
                self._cond.notify_all()
            self._window.release()
        if self._closed:
            return
        if saw_handshake:
            self._abort("adapter closed its output stream")
        else:
            self._abort("adapter exited before sending a handshake")

    def _check_handshake(self, msg, line: str) -> str | None:
        if not isinstance(msg, dict) or msg.get("protocol") != PROTOCOL_NAME:
            return f"malformed handshake line: {line!r}"
        version = msg.get("version")
        if version != PROTOCOL_VERSION:
            return (
                f"protocol version mismatch: adapter speaks {version!r}, "
                f"this client speaks {PROTOCOL_VERSION}"
            )
        n_classes = msg.get("n_classes")
        if not isinstance(n_classes, int) or n_classes < 2:
            return f"handshake n_classes must be an int >= 2: {line!r}"
        self.n_classes = n_classes
        self.info = msg
        return None

    def _abort(self, message: str) -> None:
        with self._cond:
            self._abort_locked(message)

    def _abort_locked(self, message: str) -> None:
        if self._fatal is None:
            self._fatal = message
        self._got_handshake.set()
        self._cond.notify_all()

    # -- caller side -----------------------------------------------------------

    def predict(self, image) -> np.ndarray:
        """One request/response round trip for a single [c,h,w] image."""
        return self._collect(self._send(image))

    __call__ = predict

    def predict_batch(self, images) -> np.ndarray:
        """Pipeline the whole batch (up to the window), gather by id."""
        rids = [self._send(img) for img in images]
        return np.stack([self._collect(rid) for rid in rids])

    def _send(self, image) -> int:
        arr = np.asarray(image, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3:
            raise ValueError(f"image must be [c,h,w] or [h,w], got shape {arr.shape}")
        with self._cond:
            if self._fatal is not None:
                raise ProtocolError(self._fatal)
        self._window.acquire()
        rid = next(self._ids)
        payload = json.dumps(
            {"id": rid, "shape": list(arr.shape), "data": arr.ravel().tolist()}
        )
        with self._cond:
            self._inflight.add(rid)
        try:
            with self._write_lock:
                self._proc.stdin.write(payload + "\n")
                self._proc.stdin.flush()
        except (OSError, ValueError) as exc:
            with self._cond:
                self._inflight.discard(rid)
            self._window.release()
            raise ProtocolError(
                f"adapter pipe closed while sending request {rid}: {exc}"
            ) from exc
        self._trace(">>", payload + "\n")
        return rid

    def _collect(self, rid: int) -> np.ndarray:
        deadline = time.monotonic() + self._response_timeout
        with self._cond:
            while rid not in self._responses:
                if self._fatal is not None:
                    raise ProtocolError(self._fatal)
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    # a stuck adapter cannot be resynchronized; poison the handle
                    self._abort_locked(
                        f"no response to request {rid} within "
                        f"{self._response_timeout} s"
                    )
                    self._proc.kill()
                    raise ProtocolError(self._fatal)
                self._cond.wait(remaining)
            msg = self._responses.pop(rid)
        error = msg.get("error")
        if error:
            raise AdapterError(f"adapter error for request {rid}: {error}")
        probs = np.asarray(msg.get("probs"), dtype=np.float64)
        if probs.ndim != 1 or probs.size != self.n_classes:
            raise ProtocolError(
                f"request {rid}: expected {self.n_classes} probs, "
                f"got shape {probs.shape}"
            )
        total = float(probs.sum())
        if abs(total - 1.0) > 1e-6:
            raise ProtocolError(
                f"request {rid}: probs sum to {total!r}, outside 1 +/- 1e-6"
            )
        return probs

    # -- lifecycle ----------------------------------------------------------------

    def close(self) -> None:
        with self._cond:
            if self._closed:
                return
            self._closed = True
            if self._fatal is None:
                self._fatal = "handle is closed"
            self._cond.notify_all()
        try:
            self._proc.stdin.close()
        except OSError:
            pass
        try:
            self._proc.wait(timeout=2.0)
        except subprocess.TimeoutExpired:
            self._proc.kill()
            self._proc.wait(timeout=5.0)
        if self._trace_fh is not None:
            self._trace_fh.close()
            self._trace_fh = None

    def __enter__(self) -> "ModelHandle":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass

    def _trace(self, direction: str, line: str) -> None:
        if self._trace_fh is None:
            return
        with self._trace_lock:
            self._trace_fh.write(f"{direction} {line.rstrip()}\n")
            self._trace_fh.flush()


def spawn_adapter(command, **kwargs) -> ModelHandle:
    """Launch an adapter process and complete the handshake."""
    return ModelHandle(command, **kwargs)
