"""Synthetic verifiable reasoning tasks.

Each task is a prompt posing a small left-to-right reduction problem
("eval : 7 + 5 - 3 ;") whose solution trace rewrites the expression one
step per line, states the answer after an ``=`` delimiter, and signs off
with a closing word:

    then 1 2 - 3 ; so = 9 done <eos>

Three families share this grammar: ``chain-arithmetic`` (+/-),
``modular-sum`` (+ then a final %), and ``digit-product`` (*). The
line-opening connective and the closing word are free stylistic choices
(they vary across reference traces and never affect correctness), which
gives model-built corpora genuinely uncertain token positions at several
distinct entropy levels. Traces are verified exactly: the answer is the
digit run after the last ``=``, normalized and compared to the reference
string. All functions here are pure and safe for unrestricted concurrent
use.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .lm_core import Vocabulary

FAMILIES = ("chain-arithmetic", "modular-sum", "digit-product")

CONNECTIVES = ("then", "so", "next")

CLOSERS = ("done", "ok", "good", "fine", "right", "yes", "thus", "hence",
           "now", "also", "see", "note", "well", "clearly", "indeed", "namely")

DEFAULT_MAX_LEN = 256

TASKS_SCHEMA = "eduprm-tasks/1"


class UnknownFamilyError(ValueError):
    pass


def build_vocabulary() -> Vocabulary:
    """The fixed task alphabet shared by all families."""
    tokens = tuple(str(d) for d in range(10)) + (
        "+", "-", "*", "%", "=", ";",
    ) + CONNECTIVES + CLOSERS + (
        "eval", "mod", "digprod", ":",
        "<eos>",
    )
    return Vocabulary(tokens, eos_id=len(tokens) - 1)


@dataclass(frozen=True)
class Task:
    id: str
    prompt: Tuple[int, ...]
    reference_answer: str
    family: str


@dataclass(frozen=True)
class Verdict:
    correct: bool
    extracted_answer: Optional[str]


def normalize_answer(s: str) -> str:
    s = s.strip()
    try:
        return str(int(s))
    except ValueError:
        return s


def _digits(value: int) -> List[str]:
    return list(str(value))


def _apply(a: int, op: str, b: int) -> int:
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "%":
        return a % b
    raise ValueError(f"bad operator {op!r}")


def _reduce_once(values: List[int], ops: List[str]) -> Tuple[List[int], List[str]]:
    """Evaluate the leftmost operator of the expression."""
    head = _apply(values[0], ops[0], values[1])
    return [head] + values[2:], ops[1:]


def _expr_surfaces(values: Sequence[int], ops: Sequence[str]) -> List[str]:
    out = _digits(values[0])
    for op, v in zip(ops, values[1:]):
        out.append(op)
        out.extend(_digits(v))
    return out


def _make_expression(family: str, difficulty: int, rng: np.random.Generator) -> Tuple[List[int], List[str]]:
    if family == "chain-arithmetic":
        values = [int(rng.integers(0, 10))]
        ops = []
        running = values[0]
        for _ in range(difficulty):
            op = "+" if running == 0 else ("+", "-")[int(rng.integers(0, 2))]
            if op == "-":
                operand = int(rng.integers(0, min(9, running) + 1))
            else:
                operand = int(rng.integers(0, 10))
            ops.append(op)
            values.append(operand)
            running = _apply(running, op, operand)
        return values, ops
    if family == "modular-sum":
        values = [int(rng.integers(0, 10)) for _ in range(difficulty + 1)]
        ops = ["+"] * difficulty
        values.append(int(rng.integers(2, 10)))
        ops.append("%")
        return values, ops
    if family == "digit-product":
        values = [int(rng.integers(1, 10)) for _ in range(difficulty + 1)]
        return values, ["*"] * difficulty
    raise UnknownFamilyError(family)


_FAMILY_KEYWORD = {
    "chain-arithmetic": "eval",
    "modular-sum": "mod",
    "digit-product": "digprod",
}


def solve(values: Sequence[int], ops: Sequence[str]) -> int:
    values, ops = list(values), list(ops)
    while ops:
        values, ops = _reduce_once(values, ops)
    return values[0]


def generate_tasks(family: str, count: int, difficulty: int, seed: int,
                   vocab: Optional[Vocabulary] = None) -> List[Task]:
    """Deterministic task list; every reference answer verifies."""
    if family not in FAMILIES:
        raise UnknownFamilyError(family)
    if count < 1:
        raise ValueError("count must be >= 1")
    if difficulty < 1:
        raise ValueError("difficulty must be >= 1")
    vocab = vocab or build_vocabulary()
    rng = np.random.default_rng(seed)
    tasks = []
    for i in range(count):
        values, ops = _make_expression(family, difficulty, rng)
        surfaces = [_FAMILY_KEYWORD[family], ":"] + _expr_surfaces(values, ops) + [";"]
        prompt = tuple(vocab.encode(surfaces))
        answer = str(solve(values, ops))
        tasks.append(Task(
            id=f"{family}-d{difficulty}-s{seed}-{i:05d}",
            prompt=prompt,
            reference_answer=answer,
            family=family,
        ))
    return tasks


def parse_expression(tokens: Sequence[str]) -> Optional[Tuple[List[int], List[str]]]:
    """Parse digit/operator surfaces into (values, ops); None if malformed."""
    values: List[int] = []
    ops: List[str] = []
    digits = ""
    for t in tokens:
        if t.isdigit():
            digits += t
        elif t in ("+", "-", "*", "%"):
            if not digits:
                return None
            values.append(int(digits))
            digits = ""
            ops.append(t)
        else:
            return None
    if not digits:
        return None
    values.append(int(digits))
    if len(values) != len(ops) + 1:
        return None
    return values, ops


def task_expression(task: Task, vocab: Vocabulary) -> Tuple[List[int], List[str]]:
    surfaces = vocab.decode(task.prompt)
    assert surfaces[-1] == ";", "prompt must end with ';'"
    parsed = parse_expression(surfaces[2:-1])
    if parsed is None:
        raise ValueError(f"unparseable prompt for task {task.id}")
    return parsed


def reference_trace(task: Task, vocab: Vocabulary,
                    rng: Optional[np.random.Generator] = None) -> List[int]:
    """The canonical solution trace; connective and closing words vary
    when rng is given (any choice verifies)."""
    values, ops = task_expression(task, vocab)
    lines: List[List[str]] = []
    while ops:
        values, ops = _reduce_once(values, ops)
        if ops:
            lines.append(_expr_surfaces(values, ops) + [";"])
    closer = CLOSERS[int(rng.integers(0, len(CLOSERS)))] if rng is not None else "done"
    lines.append(["="] + _digits(values[0]) + [closer, "<eos>"])
    surfaces: List[str] = []
    for line in lines:
        conn = CONNECTIVES[int(rng.integers(0, len(CONNECTIVES)))] if rng is not None else "then"
        surfaces.append(conn)
        surfaces.extend(line)
    return vocab.encode(surfaces)


def _digit_run(surfaces: Sequence[str]) -> str:
    """Leading signed digit run; stops at the first non-digit surface."""
    out = ""
    for i, s in enumerate(surfaces):
        if s.isdigit():
            out += s
        elif s == "-" and i == 0:
            out += s
        else:
            break
    return out


def verify(task: Task, trace: Sequence[int], vocab: Vocabulary) -> Verdict:
    """Exact answer check: the digit run after the last '=' up to eos.

    A trace that never reaches eos (length-capped) is incorrect, as is
    one with no '=' delimiter; both still yield a Verdict, never raise.
    """
    surfaces = vocab.decode(trace)
    if "<eos>" in surfaces:
        surfaces = surfaces[:surfaces.index("<eos>")]
        terminated = True
    else:
        terminated = False
    if "=" not in surfaces:
        return Verdict(correct=False, extracted_answer=None)
    tail = surfaces[len(surfaces) - 1 - surfaces[::-1].index("="):]
    extracted = _digit_run(tail[1:])
    ok = terminated and extracted != "" and \
        normalize_answer(extracted) == normalize_answer(task.reference_answer)
    return Verdict(correct=ok, extracted_answer=extracted)


def trace_diagnostics(task: Task, trace: Sequence[int], vocab: Vocabulary) -> Dict[str, float]:
    """Running consistency state of a (partial) trace.

    Checks each complete rewrite line against a one-step reduction of the
    previously claimed expression; the claimed expression is adopted even
    when wrong, so the answer check measures internal consistency rather
    than peeking at the reference.
    """
    decoration = set(CONNECTIVES) | set(CLOSERS)
    surfaces = [s for s in vocab.decode(trace) if s not in decoration]
    if "<eos>" in surfaces:
        surfaces = surfaces[:surfaces.index("<eos>")]
    state = task_expression(task, vocab)
    lines_total = 0
    lines_ok = 0
    last_ok = 1.0
    answered = 0.0
    answer_ok = 0.0
    segment: List[str] = []
    segments: List[List[str]] = []
    for s in surfaces:
        if s == ";":
            segments.append(segment)
            segment = []
        else:
            segment.append(s)
    open_segment = segment
    for seg in segments:
        lines_total += 1
        expected = _reduce_once(*state) if state[1] else None
        parsed = parse_expression(seg)
        ok = parsed is not None and expected is not None and parsed == (expected[0], expected[1])
        if ok:
            lines_ok += 1
            last_ok = 1.0
        else:
            last_ok = 0.0
        if parsed is not None:
            state = (parsed[0], parsed[1])
    if open_segment and open_segment[0] == "=":
        answered = 1.0
        claim = _digit_run(open_segment[1:])
        try:
            implied = solve(*state)
            answer_ok = 1.0 if claim and normalize_answer(claim) == str(implied) else 0.0
        except (ZeroDivisionError, IndexError):
            answer_ok = 0.0
    return {
        "lines_total": float(lines_total),
        "frac_lines_ok": lines_ok / lines_total if lines_total else 1.0,
        "last_line_ok": last_ok,
        "answered": answered,
        "answer_consistent": answer_ok,
    }


def save_tasks(path: str, tasks: Sequence[Task], vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8") as f:
        header = {"schema": TASKS_SCHEMA, "vocab": list(vocab.tokens), "eos_id": vocab.eos_id}
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for t in tasks:
            rec = {
                "id": t.id,
                "family": t.family,
                "prompt": vocab.decode(t.prompt),
                "reference_answer": t.reference_answer,
            }
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_tasks(path: str) -> Tuple[List[Task], Vocabulary]:
    with open(path, "r", encoding="utf-8") as f:
        header = json.loads(f.readline())
        if header.get("schema") != TASKS_SCHEMA:
            raise ValueError(f"unexpected task file schema: {header.get('schema')!r}")
        vocab = Vocabulary(tuple(header["vocab"]), header["eos_id"])
        tasks = []
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            tasks.append(Task(
                id=rec["id"],
                prompt=tuple(vocab.encode(rec["prompt"])),
                reference_answer=rec["reference_answer"],
                family=rec["family"],
            ))
    return tasks, vocab
