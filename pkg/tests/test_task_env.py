import numpy as np
import pytest

from eduprm.task_env import (
    CLOSERS, CONNECTIVES, FAMILIES, Task, UnknownFamilyError, build_vocabulary,
    generate_tasks, load_tasks, normalize_answer, reference_trace, save_tasks,
    solve, task_expression, trace_diagnostics, verify,
)


@pytest.fixture(scope="module")
def v():
    return build_vocabulary()


def test_generate_is_deterministic(v):
    a = generate_tasks("chain-arithmetic", 10, 2, 7, v)
    b = generate_tasks("chain-arithmetic", 10, 2, 7, v)
    assert a == b


def test_generate_simple_task_shape(v):
    (task,) = generate_tasks("chain-arithmetic", 1, 1, 7, v)
    surfaces = v.decode(task.prompt)
    assert surfaces[0] == "eval" and surfaces[-1] == ";"
    values, ops = task_expression(task, v)
    assert len(ops) == 1
    assert task.reference_answer == str(solve(values, ops))


def test_unknown_family(v):
    with pytest.raises(UnknownFamilyError):
        generate_tasks("no-such-family", 1, 1, 0, v)


def test_all_families_reference_traces_verify(v):
    for family in FAMILIES:
        tasks = generate_tasks(family, 100, 2, 11, v)
        for t in tasks:
            trace = reference_trace(t, v)
            assert verify(t, trace, v).correct, (family, t.id)


def test_reference_traces_verify_with_varied_style(v):
    rng = np.random.default_rng(0)
    for family in FAMILIES:
        for t in generate_tasks(family, 30, 3, 5, v):
            assert verify(t, reference_trace(t, v, rng), v).correct


def test_verify_exact_answer(v):
    (task,) = generate_tasks("chain-arithmetic", 1, 1, 3, v)
    ans = task.reference_answer
    trace = v.encode(["then", "="] + list(ans) + ["<eos>"])
    verdict = verify(task, trace, v)
    assert verdict.correct and verdict.extracted_answer == ans


def test_verify_no_delimiter_is_incorrect(v):
    (task,) = generate_tasks("chain-arithmetic", 1, 1, 3, v)
    verdict = verify(task, v.encode(["then", "5", "<eos>"]), v)
    assert not verdict.correct
    assert verdict.extracted_answer is None


def test_verify_leading_zero_normalization(v):
    task = Task(id="t", prompt=tuple(v.encode(["eval", ":", "2", "+", "3", ";"])),
                reference_answer="5", family="chain-arithmetic")
    # enumerate numeral forms of the same value
    for form in ("5", "05", "005"):
        trace = v.encode(["="] + list(form) + ["<eos>"])
        assert verify(task, trace, v).correct, form
    for form in ("50", "6"):
        trace = v.encode(["="] + list(form) + ["<eos>"])
        assert not verify(task, trace, v).correct, form


def test_verify_requires_termination(v):
    (task,) = generate_tasks("chain-arithmetic", 1, 1, 3, v)
    ans = task.reference_answer
    capped = v.encode(["then", "="] + list(ans))  # no eos: length-capped
    assert not verify(task, capped, v).correct


def test_verify_ignores_trailing_closer(v):
    (task,) = generate_tasks("chain-arithmetic", 1, 1, 3, v)
    ans = task.reference_answer
    trace = v.encode(["then", "="] + list(ans) + ["done", "<eos>"])
    assert verify(task, trace, v).correct


def test_verifier_is_total(v):
    (task,) = generate_tasks("modular-sum", 1, 2, 1, v)
    rng = np.random.default_rng(2)
    for _ in range(300):
        trace = list(rng.integers(0, v.size, size=rng.integers(0, 30)))
        verdict = verify(task, trace, v)  # must not raise
        assert verdict.correct in (True, False)


def test_normalize_answer():
    assert normalize_answer(" 05 ") == "5"
    assert normalize_answer("000") == "0"
    assert normalize_answer("x1") == "x1"


def test_solver_soundness_all_families(v):
    for family in FAMILIES:
        for t in generate_tasks(family, 50, 3, 17, v):
            values, ops = task_expression(t, v)
            assert str(solve(values, ops)) == t.reference_answer


def test_diagnostics_on_good_and_corrupted_traces(v):
    (task,) = generate_tasks("chain-arithmetic", 1, 3, 21, v)
    good = reference_trace(task, v)
    d = trace_diagnostics(task, good, v)
    assert d["frac_lines_ok"] == 1.0
    assert d["answered"] == 1.0 and d["answer_consistent"] == 1.0

    # corrupt the first digit of the first rewrite line
    surfaces = v.decode(good)
    idx = 1  # first token after the opening connective
    surfaces[idx] = "9" if surfaces[idx] != "9" else "8"
    bad = v.encode(surfaces)
    d2 = trace_diagnostics(task, bad, v)
    assert d2["frac_lines_ok"] < 1.0


def test_diagnostics_partial_prefix(v):
    (task,) = generate_tasks("chain-arithmetic", 1, 2, 5, v)
    trace = reference_trace(task, v)
    d = trace_diagnostics(task, trace[:3], v)
    assert d["answered"] == 0.0


def test_task_file_round_trip(tmp_path, v):
    tasks = generate_tasks("digit-product", 25, 2, 9, v)
    path = str(tmp_path / "tasks.jsonl")
    save_tasks(path, tasks, v)
    loaded, v2 = load_tasks(path)
    assert v2.tokens == v.tokens
    assert loaded == tasks


def test_vocabulary_has_required_structure(v):
    assert v.eos == "<eos>"
    for word in CONNECTIVES + CLOSERS:
        assert word in v.tokens
    for sym in ("+", "-", "*", "%", "=", ";", ":"):
        assert sym in v.tokens
