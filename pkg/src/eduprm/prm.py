"""Small feature-based process reward model.

A two-class classifier (linear by default, optional one-hidden-layer)
over fragment-prefix features, trained with cross-entropy against soft
targets (1-label, label) by mini-batch gradient descent under a linear
warmup + cosine decay schedule; the epoch checkpoint with the best
held-out loss is returned. Tasks (not fragments) are held out to avoid
prefix leakage between the splits.

Also provides the scorers used by search experiments: a verifier-backed
oracle (upper bound), a scripted table scorer, the trained-model scorer,
and a line-protocol remote scorer (``SCORE <task id> <base64 prefix>``
-> ``OK <decimal>``).
"""

from __future__ import annotations

import hashlib
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import _kernels
from .lm_core import RemoteUnreachableError, Vocabulary, decode_ids, encode_ids
from .mc_labeler import LabeledExample
from .task_env import Task, trace_diagnostics, verify
from .tree_sampler import Scorer, _path_rng, _sample_token

PRM_MAGIC = b"EDUPRM1"

_DIAG_KEYS = ("lines_total", "frac_lines_ok", "last_line_ok", "answered", "answer_consistent")


class TrainingDivergedError(RuntimeError):
    """Loss went non-finite during training."""


@dataclass(frozen=True)
class PrmScore:
    p_correct: float


@dataclass(frozen=True)
class FeatureConfig:
    """Feature extractor identity; fixes the vector dimensionality."""
    vocab_size: int
    last_k: int = 3
    max_len: int = 256
    diagnostics: bool = True

    @property
    def dim(self) -> int:
        d = self.vocab_size + 1 + self.last_k * self.vocab_size + 1
        if self.diagnostics:
            d += len(_DIAG_KEYS)
        return d


def extract_features(task: Task, prefix: Sequence[int], vocab: Vocabulary,
                     config: FeatureConfig) -> np.ndarray:
    """Token counts, length, last-k one-hots, running consistency state, bias."""
    v = config.vocab_size
    x = np.zeros(config.dim, dtype=np.float64)
    n = len(prefix)
    if n:
        counts = np.bincount(np.asarray(prefix, dtype=np.int64), minlength=v)
        x[:v] = counts / max(n, 1)
    x[v] = n / config.max_len
    base = v + 1
    for k in range(config.last_k):
        if n > k:
            x[base + k * v + prefix[n - 1 - k]] = 1.0
    pos = base + config.last_k * v
    if config.diagnostics:
        diag = trace_diagnostics(task, prefix, vocab)
        for i, key in enumerate(_DIAG_KEYS):
            val = diag[key]
            x[pos + i] = val / 8.0 if key == "lines_total" else val
        pos += len(_DIAG_KEYS)
    x[pos] = 1.0  # bias
    return x


@dataclass
class PrmModel:
    vocab: Vocabulary
    feature_config: FeatureConfig
    weights: np.ndarray  # (2, D) linear output layer (or (2, H) with hidden)
    hidden_weights: Optional[np.ndarray] = None  # (H, D) when one hidden layer
    training_meta: Dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return "linear" if self.hidden_weights is None else "mlp"

    def logits(self, x: np.ndarray) -> np.ndarray:
        if self.hidden_weights is not None:
            x = np.maximum(x @ self.hidden_weights.T, 0.0)
        return x @ self.weights.T

    def save(self, path: str) -> None:
        fc = self.feature_config
        with open(path, "wb") as f:
            f.write(PRM_MAGIC)
            f.write(struct.pack("<B", 0 if self.hidden_weights is None else 1))
            f.write(struct.pack("<IIB", fc.last_k, fc.max_len, int(fc.diagnostics)))
            f.write(struct.pack("<II", self.vocab.size, self.vocab.eos_id))
            for surface in self.vocab.tokens:
                raw = surface.encode("utf-8")
                f.write(struct.pack("<I", len(raw)))
                f.write(raw)
            if self.hidden_weights is not None:
                f.write(struct.pack("<II", *self.hidden_weights.shape))
                f.write(self.hidden_weights.astype(np.float64).tobytes())
            f.write(struct.pack("<II", *self.weights.shape))
            f.write(self.weights.astype(np.float64).tobytes())

    @classmethod
    def load(cls, path: str) -> "PrmModel":
        with open(path, "rb") as f:
            if f.read(len(PRM_MAGIC)) != PRM_MAGIC:
                raise ValueError("not a PRM model file: bad magic")
            (kind,) = struct.unpack("<B", f.read(1))
            last_k, max_len, diag = struct.unpack("<IIB", f.read(9))
            vsize, eos_id = struct.unpack("<II", f.read(8))
            tokens = []
            for _ in range(vsize):
                (n,) = struct.unpack("<I", f.read(4))
                tokens.append(f.read(n).decode("utf-8"))
            vocab = Vocabulary(tuple(tokens), eos_id)
            hidden = None
            if kind == 1:
                h, d = struct.unpack("<II", f.read(8))
                hidden = np.frombuffer(f.read(8 * h * d), dtype=np.float64).reshape(h, d).copy()
            r, c = struct.unpack("<II", f.read(8))
            weights = np.frombuffer(f.read(8 * r * c), dtype=np.float64).reshape(r, c).copy()
        fc = FeatureConfig(vocab_size=vsize, last_k=last_k, max_len=max_len,
                           diagnostics=bool(diag))
        return cls(vocab=vocab, feature_config=fc, weights=weights, hidden_weights=hidden)


def score_prefix(model: PrmModel, task: Task, prefix: Sequence[int]) -> PrmScore:
    """Class-1 softmax output; pure function of its inputs."""
    x = extract_features(task, prefix, model.vocab, model.feature_config)
    z = model.logits(x)
    z = z - z.max()
    e = np.exp(z)
    return PrmScore(p_correct=float(e[1] / e.sum()))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    learning_rate: float = 1e-3
    warmup_ratio: float = 0.01
    floor_factor: float = 1e-4
    batch_size: int = 64
    val_fraction: float = 0.1
    hidden: int = 0  # 0 = linear; else one hidden layer of this width
    feature_config: Optional[FeatureConfig] = None


def lr_schedule(step: int, total_steps: int, initial: float,
                warmup_ratio: float = 0.01, floor_factor: float = 1e-4) -> float:
    """Linear warmup to `initial`, then cosine decay to initial*floor_factor."""
    warmup = max(1, int(np.ceil(warmup_ratio * total_steps)))
    floor = initial * floor_factor
    if step < warmup:
        return initial * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    t = min(step - warmup, span) / span
    return floor + 0.5 * (initial - floor) * (1.0 + np.cos(np.pi * t))


def select_best_epoch(losses: Sequence[float]) -> int:
    """Argmin validation loss; earliest epoch wins ties."""
    best = 0
    for i, v in enumerate(losses):
        if v < losses[best]:
            best = i
    return best


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def linear_loss_and_grad(weights: np.ndarray, x: np.ndarray,
                         y: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean two-class cross-entropy -1/N sum_i sum_k y_ik log p_ik."""
    z = x @ weights.T
    loss = -float(np.sum(y * _log_softmax_rows(z))) / len(x)
    dz = (_softmax_rows(z) - y) / len(x)
    return loss, dz.T @ x


def mlp_loss_and_grad(hidden_weights: np.ndarray, weights: np.ndarray,
                      x: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    h = np.maximum(x @ hidden_weights.T, 0.0)
    z = h @ weights.T
    loss = -float(np.sum(y * _log_softmax_rows(z))) / len(x)
    dz = (_softmax_rows(z) - y) / len(x)
    dh = (dz @ weights) * (h > 0.0)
    return loss, dh.T @ x, dz.T @ h


def _dataset_matrices(examples: Sequence[LabeledExample], tasks: Dict[str, Task],
                      vocab: Vocabulary, fc: FeatureConfig) -> Tuple[np.ndarray, np.ndarray, List[str]]:
    x = np.empty((len(examples), fc.dim), dtype=np.float64)
    y = np.empty((len(examples), 2), dtype=np.float64)
    ids = []
    for i, ex in enumerate(examples):
        task = tasks[ex.fragment.task_id]
        x[i] = extract_features(task, ex.fragment.path_prefix, vocab, fc)
        y[i, 0] = 1.0 - ex.label
        y[i, 1] = ex.label
        ids.append(task.id)
    return x, y, ids


def train(examples: Sequence[LabeledExample], tasks: Sequence[Task],
          vocab: Vocabulary, config: TrainConfig = TrainConfig(),
          seed: int = 0) -> PrmModel:
    """Gradient descent on the cross-entropy; returns the best-epoch checkpoint."""
    if not examples:
        raise ValueError("empty dataset")
    fc = config.feature_config or FeatureConfig(vocab_size=vocab.size)
    task_map = {t.id: t for t in tasks}
    x, y, ex_task_ids = _dataset_matrices(examples, task_map, vocab, fc)

    rng = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF)
    unique_ids = sorted(set(ex_task_ids))
    n_val_tasks = int(len(unique_ids) * config.val_fraction)
    val_ids = set(np.array(unique_ids)[rng.permutation(len(unique_ids))[:n_val_tasks]])
    is_val = np.array([tid in val_ids for tid in ex_task_ids])
    x_train, y_train = x[~is_val], y[~is_val]
    x_val, y_val = x[is_val], y[is_val]
    if len(x_train) == 0:
        x_train, y_train = x, y
        x_val = x_val[:0]

    w_out = np.zeros((2, config.hidden or fc.dim), dtype=np.float64)
    w_hidden = None
    if config.hidden:
        w_hidden = rng.normal(0.0, 1.0 / np.sqrt(fc.dim), size=(config.hidden, fc.dim))

    n = len(x_train)
    steps_per_epoch = max(1, (n + config.batch_size - 1) // config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    step = 0
    checkpoints: List[Tuple[np.ndarray, Optional[np.ndarray]]] = []
    val_losses: List[float] = []
    train_losses: List[float] = []
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = perm[b * config.batch_size:(b + 1) * config.batch_size]
            if len(idx) == 0:
                continue
            lr = lr_schedule(step, total_steps, config.learning_rate,
                             config.warmup_ratio, config.floor_factor)
            if w_hidden is None:
                loss, grad = linear_loss_and_grad(w_out, x_train[idx], y_train[idx])
                w_out = w_out - lr * grad
            else:
                loss, g1, g2 = mlp_loss_and_grad(w_hidden, w_out, x_train[idx], y_train[idx])
                w_hidden = w_hidden - lr * g1
                w_out = w_out - lr * g2
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} step {step} (lr={lr:.3g})")
            step += 1
        if w_hidden is None:
            epoch_train, _ = linear_loss_and_grad(w_out, x_train, y_train)
        else:
            epoch_train = mlp_loss_and_grad(w_hidden, w_out, x_train, y_train)[0]
        train_losses.append(epoch_train)
        if len(x_val):
            if w_hidden is None:
                epoch_val, _ = linear_loss_and_grad(w_out, x_val, y_val)
            else:
                epoch_val = mlp_loss_and_grad(w_hidden, w_out, x_val, y_val)[0]
        else:
            epoch_val = epoch_train
        val_losses.append(epoch_val)
        checkpoints.append((w_out.copy(), None if w_hidden is None else w_hidden.copy()))

    best = select_best_epoch(val_losses)
    w_out, w_hidden = checkpoints[best]
    return PrmModel(
        vocab=vocab, feature_config=fc, weights=w_out, hidden_weights=w_hidden,
        training_meta={
            "epochs": config.epochs,
            "learning_rate": config.learning_rate,
            "seed": seed,
            "best_epoch": best,
            "train_losses": train_losses,
            "val_losses": val_losses,
            "val_tasks": sorted(val_ids),
        },
    )


def auc(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """Rank-based AUC with average ranks on ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need both positive and negative labels")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# Scorers
# ---------------------------------------------------------------------------

def make_prm_scorer(model: PrmModel) -> Scorer:
    def scorer(task: Task, prefix: Sequence[int]) -> float:
        return score_prefix(model, task, prefix).p_correct
    return scorer


def scripted_scorer(table: Dict[Tuple[int, ...], float], default: float = 0.5) -> Scorer:
    """Prefix-keyed lookup scorer for scripted search experiments."""
    def scorer(task: Task, prefix: Sequence[int]) -> float:
        return table.get(tuple(prefix), default)
    return scorer


def _stable_key(task_id: str, prefix: Sequence[int]) -> Tuple[int, ...]:
    digest = hashlib.sha256(
        (task_id + "|" + ",".join(map(str, prefix))).encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i:i + 4], "big") for i in range(0, 8, 4))


def make_oracle_scorer(model, vocab: Vocabulary, max_len: int = 256,
                       rollouts: int = 1, temperature: float = 0.0,
                       seed: int = 0) -> Scorer:
    """Correct fraction of bounded completions from the prefix.

    The default single greedy completion gives a 0/1 upper-bound scorer
    that isolates search behaviour from learned-PRM quality; rollouts > 1
    with a positive temperature gives a smoother estimate.
    """
    eos = vocab.eos_id

    def complete(task: Task, prefix: List[int],
                 rng: Optional[np.random.Generator]) -> bool:
        sim = list(prefix)
        prompt = list(task.prompt)
        while len(sim) < max_len and (not sim or sim[-1] != eos):
            logits = model.next_logits(prompt, sim)
            probs = _kernels.softmax(np.ascontiguousarray(logits, dtype=np.float64), 1.0)
            greedy = int(_kernels.top2(probs)[0])
            if rng is None:
                sim.append(greedy)
            else:
                sim.append(_sample_token(logits, temperature, rng, greedy))
        return verify(task, sim, vocab).correct

    def scorer(task: Task, prefix: Sequence[int]) -> float:
        prefix = list(prefix)
        if rollouts <= 1 or temperature <= 0.0:
            return 1.0 if complete(task, prefix, None) else 0.0
        key = _stable_key(task.id, prefix)
        hits = sum(
            complete(task, prefix, _path_rng(seed, key + (j,)))
            for j in range(rollouts)
        )
        return hits / rollouts

    return scorer


# ---------------------------------------------------------------------------
# Remote scoring protocol:
#   -> SCORE <task id> <base64(prefix ids)>
#   <- OK <decimal>   |   ERR <code>
# ---------------------------------------------------------------------------

class _ScoreHandler(socketserver.StreamRequestHandler):
    def handle(self):
        scorer = self.server.scorer  # type: ignore[attr-defined]
        tasks = self.server.tasks  # type: ignore[attr-defined]
        for raw in self.rfile:
            line = raw.decode("ascii", errors="replace").rstrip("\n")
            if not line:
                continue
            parts = line.split(" ")
            if parts[0] != "SCORE" or len(parts) != 3:
                self.wfile.write(b"ERR bad-request\n")
                continue
            task = tasks.get(parts[1])
            if task is None:
                self.wfile.write(b"ERR unknown-task\n")
                continue
            try:
                prefix = decode_ids(parts[2])
                value = scorer(task, prefix)
            except Exception:
                self.wfile.write(b"ERR internal\n")
                continue
            self.wfile.write(f"OK {value!r}\n".encode("ascii"))


class ScoreServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, scorer: Scorer, tasks: Sequence[Task],
                 host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _ScoreHandler)
        self.scorer = scorer
        self.tasks = {t.id: t for t in tasks}

    @property
    def address(self) -> Tuple[str, int]:
        return self.server_address[0], self.server_address[1]

    def start(self) -> "ScoreServer":
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        return self


class RemoteScorer:
    """Client-side scorer speaking the SCORE line protocol."""

    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self.host = host
        self.port = port
        self.timeout = timeout
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

    def __call__(self, task: Task, prefix: Sequence[int]) -> float:
        line = f"SCORE {task.id} {encode_ids(prefix)}\n"
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
            return float(reply[3:])
        raise RemoteUnreachableError(f"server error: {reply!r}")
