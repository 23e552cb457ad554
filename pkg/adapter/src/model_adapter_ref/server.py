"""Single-threaded request loop speaking the ``faud-bb`` wire protocol.

The adapter side of the contract is deliberately dumb: read one JSON request
per line, answer one JSON response per line, in arrival order.  Ids exist so
a pipelining client does not have to care about order, not so we can reorder.

* handshake (first line out)::

      {"protocol": "faud-bb", "version": 1, "n_classes": 5}

* request (one per line in)::

      {"id": 0, "shape": [1, 32, 32], "data": [0.0, ...]}   # row-major

* response (one per request, same order)::

      {"id": 0, "probs": [0.1, ...]}
      {"id": 3, "error": "what went wrong"}

A malformed line or a predictor exception produces an ``error`` response
(with the request id echoed when it can be recovered, ``null`` otherwise)
and the loop keeps serving.  Only stdin closing ends the session.

The wrapped callable may return probabilities or raw logits for one image;
anything that is not already a distribution (non-negative, summing to
1 +/- 1e-6) is passed through a softmax, and the result is renormalized so
the engine-side sum check can never trip on rounding.  Floats are serialized
with ``repr`` semantics (shortest string that round-trips, up to 17
significant digits), so the engine recovers bit-identical float64 values.

Set ``FAUD_BB_LOG`` to a file path to append a trace of every frame
received (``<<``) and sent (``>>``).
"""

from __future__ import annotations

import json
import os
import sys

import numpy as np

PROTOCOL_NAME = "faud-bb"
PROTOCOL_VERSION = 1


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def _as_distribution(out) -> np.ndarray:
    """Coerce a predictor result to a normalized probability vector."""
    arr = np.asarray(out, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise ValueError("predictor returned non-finite values")
    if arr.min() < 0.0 or abs(arr.sum() - 1.0) > 1e-6:
        arr = _softmax(arr)
    return arr / arr.sum()


class AdapterSession:
    """One protocol session over a pair of line-oriented text streams.

    ``predict`` maps a float64 ``[c,h,w]`` array to logits or probabilities
    for one image.  ``log_requests=True`` keeps an in-memory list of
    ``(id, shape)`` pairs, one per request line that parsed far enough to
    have them.
    """

    def __init__(
        self,
        predict,
        n_classes: int,
        *,
        stdin=None,
        stdout=None,
        log_requests: bool = False,
    ):
        if not isinstance(n_classes, int) or n_classes < 2:
            raise ValueError(f"n_classes must be an int >= 2, got {n_classes!r}")
        self.predict = predict
        self.n_classes = n_classes
        self.stdin = stdin if stdin is not None else sys.stdin
        self.stdout = stdout if stdout is not None else sys.stdout
        self.request_log: list[tuple[object, tuple[int, ...]]] | None = (
            [] if log_requests else None
        )
        trace_path = os.environ.get("FAUD_BB_LOG")
        self._trace_fh = open(trace_path, "a") if trace_path else None

    # -- wire helpers ---------------------------------------------------------

    def _emit(self, payload: dict) -> None:
        line = json.dumps(payload)
        self.stdout.write(line + "\n")
        self.stdout.flush()
        self._trace(">>", line)

    def _trace(self, direction: str, line: str) -> None:
        if self._trace_fh is not None:
            self._trace_fh.write(f"{direction} {line.rstrip()}\n")
            self._trace_fh.flush()

    # -- request handling -----------------------------------------------------

    def _parse_request(self, line: str) -> tuple[object, np.ndarray]:
        """Returns (id, image array) or raises ValueError with a client-safe
        message; the id is attached to the exception when recoverable."""
        try:
            msg = json.loads(line)
        except ValueError as exc:
            raise _RequestError(None, f"invalid JSON: {exc}") from exc
        if not isinstance(msg, dict):
            raise _RequestError(None, f"request must be a JSON object, got {type(msg).__name__}")
        rid = msg.get("id")
        shape = msg.get("shape")
        if (
            not isinstance(shape, list)
            or not shape
            or not all(isinstance(d, int) and d > 0 for d in shape)
        ):
            raise _RequestError(rid, f"shape must be a list of positive ints, got {shape!r}")
        if len(shape) == 2:
            shape = [1] + shape
        if len(shape) != 3:
            raise _RequestError(rid, f"shape must have rank 2 or 3, got rank {len(shape)}")
        data = msg.get("data")
        if not isinstance(data, list):
            raise _RequestError(rid, "data must be a list of numbers")
        count = shape[0] * shape[1] * shape[2]
        if len(data) != count:
            raise _RequestError(
                rid, f"data has {len(data)} values, shape {shape} needs {count}"
            )
        try:
            arr = np.asarray(data, dtype=np.float64).reshape(shape)
        except (TypeError, ValueError) as exc:
            raise _RequestError(rid, f"data is not numeric: {exc}") from exc
        if not np.all(np.isfinite(arr)):
            raise _RequestError(rid, "data contains non-finite values")
        if self.request_log is not None:
            self.request_log.append((rid, tuple(shape)))
        return rid, arr

    def _answer(self, rid, image: np.ndarray) -> dict:
        try:
            probs = _as_distribution(self.predict(image))
        except Exception as exc:
            return {"id": rid, "error": f"predictor failed: {exc}"}
        if probs.size != self.n_classes:
            return {
                "id": rid,
                "error": f"predictor returned {probs.size} values, expected {self.n_classes}",
            }
        return {"id": rid, "probs": probs.tolist()}

    def handle_line(self, line: str) -> dict | None:
        """Response payload for one raw input line (None for blank lines)."""
        if not line.strip():
            return None
        try:
            rid, image = self._parse_request(line)
        except _RequestError as exc:
            return {"id": exc.rid, "error": str(exc)}
        return self._answer(rid, image)

    # -- session loop ---------------------------------------------------------

    def run(self) -> int:
        """Handshake, then serve until the input stream closes.

        Returns the number of responses sent (errors included).
        """
        self._emit(
            {
                "protocol": PROTOCOL_NAME,
                "version": PROTOCOL_VERSION,
                "n_classes": self.n_classes,
            }
        )
        served = 0
        try:
            for line in self.stdin:
                self._trace("<<", line)
                response = self.handle_line(line)
                if response is None:
                    continue
                self._emit(response)
                served += 1
        except BrokenPipeError:
            pass  # engine went away mid-write; nothing left to answer
        finally:
            if self._trace_fh is not None:
                self._trace_fh.close()
                self._trace_fh = None
        return served


class _RequestError(ValueError):
    def __init__(self, rid, message: str):
        super().__init__(message)
        self.rid = rid


def serve(predict, n_classes: int, **kwargs) -> int:
    """Run one session on the process streams; returns requests served."""
    return AdapterSession(predict, n_classes, **kwargs).run()
