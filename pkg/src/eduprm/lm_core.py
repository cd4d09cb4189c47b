"""Token-level generative model contract plus built-in toy models.

Three model kinds share one calling convention, ``next_logits(model,
prompt, prefix) -> float64[|V|]``:

* ``table`` -- an explicit prefix -> logits lookup, for scripted tests,
* ``ngram`` -- an add-k smoothed count model trained on token corpora,
* ``remote`` -- a line-protocol client for an external token server.

Table and ngram handles are immutable after construction and safe to
share across threads. The remote handle serializes requests per
connection; open one handle per worker for parallel use.
"""

from __future__ import annotations

import base64
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

NGRAM_MAGIC = b"EDUNGRAM1"

# floor applied before log so unsmoothed zero-count tokens still yield
# finite logits (softmax recovers ~0 probability for them)
_LOG_FLOOR = 1e-300


class UnknownTokenError(ValueError):
    """A token id is outside the model vocabulary."""


class RemoteUnreachableError(ConnectionError):
    """The remote token server cannot be reached or broke the protocol."""


@dataclass(frozen=True)
class Vocabulary:
    """Dense token index space with one end-of-sequence marker."""

    tokens: Tuple[str, ...]
    eos_id: int

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("token surfaces must be unique")
        if not 0 <= self.eos_id < len(self.tokens):
            raise ValueError("eos_id out of range")

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def eos(self) -> str:
        return self.tokens[self.eos_id]

    def id(self, surface: str) -> int:
        return self._index()[surface]

    def surface(self, token_id: int) -> str:
        return self.tokens[token_id]

    def encode(self, surfaces: Sequence[str]) -> List[int]:
        idx = self._index()
        return [idx[s] for s in surfaces]

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.tokens[i] for i in ids]

    def _index(self) -> Dict[str, int]:
        idx = self.__dict__.get("_idx")
        if idx is None:
            idx = {s: i for i, s in enumerate(self.tokens)}
            object.__setattr__(self, "_idx", idx)
        return idx


def _check_ids(vocab: Vocabulary, ids: Sequence[int]) -> None:
    for t in ids:
        if not 0 <= t < vocab.size:
            raise UnknownTokenError(f"token id {t} out of range for |V|={vocab.size}")


@dataclass(frozen=True)
class TableModel:
    """Explicit (prefix -> logits) lookup, used to script decode behaviour.

    The table is keyed on the generated prefix only; the prompt is
    ignored, which keeps hand-written scripts short. Unknown prefixes
    fall back to ``default`` logits.
    """

    vocab: Vocabulary
    rules: Dict[Tuple[int, ...], np.ndarray]
    default: np.ndarray
    identity: str = "table"
    kind: str = field(default="table", init=False)

    def next_logits(self, prompt: Sequence[int], prefix: Sequence[int]) -> np.ndarray:
        _check_ids(self.vocab, prompt)
        _check_ids(self.vocab, prefix)
        row = self.rules.get(tuple(prefix), self.default)
        if len(row) != self.vocab.size:
            raise ValueError("table row length != vocabulary size")
        return np.asarray(row, dtype=np.float64)


class NgramModel:
    """Add-k model over token sequences with longest-match backoff.

    Conditioning context is the longest suffix of prompt + prefix, up to
    ``order - 1`` tokens, that was observed in training; probabilities at
    that context are its add-k smoothed relative counts. Unseen suffixes
    back off toward the unigram table; with nothing observed at all the
    distribution is uniform.
    """

    kind = "ngram"

    def __init__(self, vocab: Vocabulary, order: int, smoothing: float,
                 counts: Dict[Tuple[int, ...], np.ndarray], identity: str = "ngram"):
        if order < 1:
            raise ValueError("order must be >= 1")
        self.vocab = vocab
        self.order = order
        self.smoothing = float(smoothing)
        self.counts = counts
        self.identity = identity

    def probabilities(self, context: Sequence[int]) -> np.ndarray:
        context = list(context)
        v = self.vocab.size
        row = None
        for length in range(min(self.order - 1, len(context)), -1, -1):
            row = self.counts.get(tuple(context[len(context) - length:]))
            if row is not None:
                break
        if row is None:
            row = np.zeros(v, dtype=np.float64)
        denom = row.sum() + self.smoothing * v
        if denom <= 0.0:
            return np.full(v, 1.0 / v)
        return (row + self.smoothing) / denom

    def next_logits(self, prompt: Sequence[int], prefix: Sequence[int]) -> np.ndarray:
        _check_ids(self.vocab, prompt)
        _check_ids(self.vocab, prefix)
        probs = self.probabilities(list(prompt) + list(prefix))
        return np.log(np.maximum(probs, _LOG_FLOOR))

    def save(self, path: str) -> None:
        with open(path, "wb") as f:
            f.write(NGRAM_MAGIC)
            f.write(struct.pack("<Id", self.order, self.smoothing))
            f.write(struct.pack("<II", self.vocab.size, self.vocab.eos_id))
            for surface in self.vocab.tokens:
                raw = surface.encode("utf-8")
                f.write(struct.pack("<I", len(raw)))
                f.write(raw)
            f.write(struct.pack("<Q", len(self.counts)))
            for ctx in sorted(self.counts):
                f.write(struct.pack("<H", len(ctx)))
                f.write(struct.pack(f"<{len(ctx)}I", *ctx))
                f.write(self.counts[ctx].astype(np.float64).tobytes())

    @classmethod
    def load(cls, path: str) -> "NgramModel":
        with open(path, "rb") as f:
            magic = f.read(len(NGRAM_MAGIC))
            if magic != NGRAM_MAGIC:
                raise ValueError(f"not an ngram model file: bad magic {magic!r}")
            order, smoothing = struct.unpack("<Id", f.read(12))
            vsize, eos_id = struct.unpack("<II", f.read(8))
            tokens = []
            for _ in range(vsize):
                (n,) = struct.unpack("<I", f.read(4))
                tokens.append(f.read(n).decode("utf-8"))
            vocab = Vocabulary(tuple(tokens), eos_id)
            (n_ctx,) = struct.unpack("<Q", f.read(8))
            counts: Dict[Tuple[int, ...], np.ndarray] = {}
            for _ in range(n_ctx):
                (clen,) = struct.unpack("<H", f.read(2))
                ctx = struct.unpack(f"<{clen}I", f.read(4 * clen)) if clen else ()
                counts[tuple(ctx)] = np.frombuffer(f.read(8 * vsize), dtype=np.float64).copy()
        return cls(vocab, order, smoothing, counts)


def train_ngram(corpus: Sequence[Sequence[int]], order: int, smoothing: float,
                vocab: Vocabulary) -> NgramModel:
    """Count all context lengths 0..order-1 over the corpus sequences."""
    if order < 1:
        raise ValueError("order must be >= 1")
    if not corpus:
        raise ValueError("empty corpus")
    counts: Dict[Tuple[int, ...], np.ndarray] = {}
    v = vocab.size
    for seq in corpus:
        _check_ids(vocab, seq)
        for i, target in enumerate(seq):
            for clen in range(min(order - 1, i) + 1):
                ctx = tuple(seq[i - clen:i])
                row = counts.get(ctx)
                if row is None:
                    row = counts[ctx] = np.zeros(v, dtype=np.float64)
                row[target] += 1.0
    return NgramModel(vocab, order, smoothing, counts)


def next_logits(model, prompt: Sequence[int], prefix: Sequence[int]) -> np.ndarray:
    """Dispatch to the handle; all kinds return finite float64[|V|]."""
    return model.next_logits(prompt, prefix)


# ---------------------------------------------------------------------------
# Remote token protocol (text, one message per line):
#   -> LOGITS <base64(prompt ids as comma list)> <base64(prefix ids)>
#   <- OK <comma-separated decimal logits>   |   ERR <code>
# ---------------------------------------------------------------------------

def encode_ids(ids: Sequence[int]) -> str:
    return base64.b64encode(",".join(str(i) for i in ids).encode("ascii")).decode("ascii")


def decode_ids(blob: str) -> List[int]:
    raw = base64.b64decode(blob.encode("ascii")).decode("ascii")
    return [int(x) for x in raw.split(",")] if raw else []


class RemoteModel:
    """Client for a line-protocol token server."""

    kind = "remote"

    def __init__(self, vocab: Vocabulary, host: str, port: int, timeout: float = 10.0):
        self.vocab = vocab
        self.host = host
        self.port = port
        self.timeout = timeout
        self.identity = f"remote:{host}:{port}"
        self._sock: Optional[socket.socket] = None
        self._rfile = None
        self._lock = threading.Lock()

    def _connect(self):
        if self._sock is None:
            try:
                self._sock = socket.create_connection((self.host, self.port), self.timeout)
                self._rfile = self._sock.makefile("r", encoding="ascii", newline="\n")
            except OSError as e:
                self._sock = None
                raise RemoteUnreachableError(f"cannot reach {self.host}:{self.port}: {e}") from e

    def close(self):
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None
                self._rfile = None

    def next_logits(self, prompt: Sequence[int], prefix: Sequence[int]) -> np.ndarray:
        _check_ids(self.vocab, prompt)
        _check_ids(self.vocab, prefix)
        line = f"LOGITS {encode_ids(prompt)} {encode_ids(prefix)}\n"
        with self._lock:
            self._connect()
            try:
                self._sock.sendall(line.encode("ascii"))
                reply = self._rfile.readline()
            except OSError as e:
                self.close()
                raise RemoteUnreachableError(f"transport failure: {e}") from e
        if not reply:
            self.close()
            raise RemoteUnreachableError("server closed the connection")
        reply = reply.rstrip("\n")
        if reply.startswith("OK "):
            values = np.array([float(x) for x in reply[3:].split(",")], dtype=np.float64)
            if len(values) != self.vocab.size:
                raise RemoteUnreachableError("logit vector length mismatch")
            return values
        if reply.startswith("ERR "):
            code = reply[4:]
            if code == "unknown-token":
                raise UnknownTokenError("server rejected a token id")
            raise RemoteUnreachableError(f"server error: {code}")
        raise RemoteUnreachableError(f"malformed reply: {reply!r}")


class _LogitsHandler(socketserver.StreamRequestHandler):
    def handle(self):
        model = self.server.model  # type: ignore[attr-defined]
        for raw in self.rfile:
            line = raw.decode("ascii", errors="replace").rstrip("\n")
            if not line:
                continue
            parts = line.split(" ")
            if parts[0] != "LOGITS" or len(parts) != 3:
                self.wfile.write(b"ERR bad-request\n")
                continue
            try:
                prompt = decode_ids(parts[1])
                prefix = decode_ids(parts[2])
            except (ValueError, base64.binascii.Error):
                self.wfile.write(b"ERR bad-request\n")
                continue
            try:
                logits = model.next_logits(prompt, prefix)
            except UnknownTokenError:
                self.wfile.write(b"ERR unknown-token\n")
                continue
            except Exception:
                self.wfile.write(b"ERR internal\n")
                continue
            body = ",".join(repr(float(x)) for x in logits)
            self.wfile.write(f"OK {body}\n".encode("ascii"))


class LogitServer(socketserver.ThreadingTCPServer):
    """Serves a local model over the LOGITS line protocol."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, model, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _LogitsHandler)
        self.model = model

    @property
    def address(self) -> Tuple[str, int]:
        return self.server_address[0], self.server_address[1]

    def start(self) -> "LogitServer":
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        return self
