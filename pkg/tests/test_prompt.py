import numpy as np
import pytest

from iconops.families import DemoRecord, OperatorSpec
from iconops.gridfn import FunctionSample, SizingError
from iconops.prompt import (
    MAX_DEMOS,
    ROLE_DEMO_COND,
    ROLE_DEMO_QOI,
    ROLE_QUERY,
    ROLE_QUESTION_COND,
    Prompt,
    PromptError,
    build_mask,
    build_prompt,
    prompt_from_json,
    prompt_to_json,
    subsample_function,
)
from iconops.randproc import RngStream

OP = OperatorSpec("ode1", "forward", {"a1": 0.5, "a2": -0.5, "u0": 0.0}, 0)
OP2 = OperatorSpec("ode1", "forward", {"a1": 0.5, "a2": -0.5, "u0": 0.1}, 1)


def fs(npts, seed, t0=0.0):
    t = t0 + np.arange(npts) / max(npts - 1, 1)
    return FunctionSample(coords=np.column_stack([t, np.zeros(npts)]),
                          values=RngStream(seed).normals(npts))


def rec(npts, seed, op=OP):
    return DemoRecord(operator=op, condition=fs(npts, seed),
                      qoi=fs(npts, seed + 1), seed=seed)


def oracle_allowed(tokens, p, q):
    """The visibility rule, written out pairwise and independently."""
    tp, tq = tokens[p], tokens[q]
    if tq.role == ROLE_QUERY:
        return False  # nothing attends to a query, not even itself
    if tp.role == ROLE_QUERY:
        if tq.example_index < tp.example_index:
            return True
        return tq.example_index == tp.example_index and tq.role in (
            ROLE_DEMO_COND, ROLE_QUESTION_COND)
    return tq.example_index <= tp.example_index


def test_inference_prompt_token_count_and_query_isolation():
    demos = [rec(50, 1)]
    question = fs(50, 10)
    p = build_prompt(demos, question, fs(50, 11).coords)
    assert len(p) == 200  # 50*2 demo + 50 question-cond + 50 queries
    q = p.query_positions
    assert np.all(~p.mask[np.ix_(q, q)])
    assert np.all(~p.mask[:, q])  # queries are sinks for every row


def test_zero_shot_prompt():
    question = fs(8, 2)
    p = build_prompt([], question, question.coords)
    assert p.n_examples == 0
    q = p.query_positions
    cond = np.flatnonzero(p.roles == ROLE_QUESTION_COND)
    for row in q:
        assert np.array_equal(np.flatnonzero(p.mask[row]), cond)


def test_mask_matches_pairwise_oracle_on_five_demo_training_prompt():
    demos = [rec(6, 10 * i) for i in range(1, 6)]
    question = fs(6, 99)
    p = build_prompt(demos, question, fs(6, 98).coords, training=True,
                     question_targets=np.zeros(6))
    toks = p.tokens()
    T = len(p)
    expect = np.zeros((T, T), dtype=bool)
    for a in range(T):
        for b in range(T):
            expect[a, b] = oracle_allowed(toks, a, b)
    assert np.array_equal(p.mask, expect)


def test_demo3_queries_see_exactly_earlier_data_plus_own_condition():
    demos = [rec(4, 7 * i) for i in range(1, 6)]
    p = build_prompt(demos, fs(4, 77), fs(4, 78).coords, training=True,
                     question_targets=np.zeros(4))
    rows = np.flatnonzero((p.roles == ROLE_QUERY) & (p.example_index == 3))
    assert rows.size == 4
    for row in rows:
        seen = p.mask[row]
        ex, rl = p.example_index, p.roles
        assert np.all(seen[(ex <= 2) & (rl != ROLE_QUERY)])
        assert np.all(seen[(ex == 3) & (rl == ROLE_DEMO_COND)])
        assert not np.any(seen[(ex == 3) & (rl == ROLE_DEMO_QOI)])
        assert not np.any(seen[ex > 3])
        assert not np.any(seen[rl == ROLE_QUERY])


def test_visibility_grows_with_example_index():
    demos = [rec(3, 5 * i) for i in range(1, 5)]
    p = build_prompt(demos, fs(3, 50), fs(3, 51).coords, training=True,
                     question_targets=np.zeros(3))
    data = p.roles != ROLE_QUERY
    for role_filter in (data, p.roles == ROLE_QUERY):
        rows = np.flatnonzero(role_filter)
        for a in rows:
            for b in rows:
                if p.example_index[a] < p.example_index[b]:
                    allowed_a = p.mask[a] & data
                    allowed_b = p.mask[b] & data
                    assert np.all(~allowed_a | allowed_b)


def test_training_prompt_targets_alignment():
    demos = [rec(5, 3 * i) for i in range(1, 4)]
    qt = np.arange(5.0)
    p = build_prompt(demos, fs(5, 40), fs(5, 41).coords, training=True,
                     question_targets=qt)
    # demo-1 queries excluded by default: targets are demos 2,3 then question
    assert p.n_queries == 15
    assert np.array_equal(p.targets[:5], demos[1].qoi.values)
    assert np.array_equal(p.targets[5:10], demos[2].qoi.values)
    assert np.array_equal(p.targets[10:], qt)
    p1 = build_prompt(demos, fs(5, 40), fs(5, 41).coords, training=True,
                      question_targets=qt, include_first_demo_queries=True)
    assert p1.n_queries == 20
    assert np.array_equal(p1.targets[:5], demos[0].qoi.values)


def test_token_order_and_example_indices():
    demos = [rec(3, 11), rec(4, 12)]
    p = build_prompt(demos, fs(5, 13), fs(2, 14).coords)
    assert np.array_equal(p.roles[:3], np.full(3, ROLE_DEMO_COND))
    assert np.array_equal(p.roles[3:6], np.full(3, ROLE_DEMO_QOI))
    assert np.array_equal(p.roles[6:10], np.full(4, ROLE_DEMO_COND))
    assert np.array_equal(p.roles[10:14], np.full(4, ROLE_DEMO_QOI))
    assert np.array_equal(p.roles[14:19], np.full(5, ROLE_QUESTION_COND))
    assert np.array_equal(p.roles[19:], np.full(2, ROLE_QUERY))
    assert np.array_equal(p.example_index[:6], np.full(6, 1))
    assert np.array_equal(p.example_index[6:14], np.full(8, 2))
    assert np.array_equal(p.example_index[14:], np.full(7, 3))
    assert np.all(p.values[19:] == 0.0)


def test_target_zeroing_touches_no_token_or_mask():
    demos = [rec(6, 21), rec(6, 22)]
    qt = RngStream(23).normals(6)
    a = build_prompt(demos, fs(6, 24), fs(6, 25).coords, training=True,
                     question_targets=qt)
    b = build_prompt(demos, fs(6, 24), fs(6, 25).coords, training=True,
                     question_targets=np.zeros(6))
    assert np.array_equal(a.token_features(), b.token_features())
    assert np.array_equal(a.mask, b.mask)
    assert not np.array_equal(a.targets, b.targets)


def test_token_count_formula():
    demos = [rec(4, 31), rec(7, 32), rec(5, 33)]
    question = fs(6, 34)
    qc = fs(9, 35).coords
    p = build_prompt(demos, question, qc)
    assert len(p) == sum(len(r.condition) + len(r.qoi) for r in demos) + 6 + 9


def test_mixed_operators_rejected():
    with pytest.raises(PromptError, match="operator"):
        build_prompt([rec(3, 1), rec(3, 2, op=OP2)], fs(3, 3), fs(3, 4).coords)


def test_too_many_demos_rejected():
    demos = [rec(3, i) for i in range(MAX_DEMOS + 1)]
    with pytest.raises(PromptError, match="at most"):
        build_prompt(demos, fs(3, 50), fs(3, 51).coords)


def test_operator_params_never_tokenized():
    with pytest.raises(PromptError):
        build_prompt([rec(3, 1)], fs(3, 2), fs(3, 3).coords,
                     params_note={"a1": 0.5})


def test_subsample_full_size_is_permutation():
    f = fs(12, 61)
    out = subsample_function(f, 12, RngStream(62))
    pairs = {(c[0], c[1], v) for c, v in zip(f.coords, f.values)}
    out_pairs = {(c[0], c[1], v) for c, v in zip(out.coords, out.values)}
    assert pairs == out_pairs
    assert len(out) == 12


def test_subsample_single_point_comes_from_source():
    f = fs(9, 63)
    out = subsample_function(f, 1, RngStream(64))
    i = np.flatnonzero(np.all(f.coords == out.coords[0], axis=1))
    assert i.size == 1 and f.values[i[0]] == out.values[0]


def test_subsample_deterministic():
    f = fs(50, 65)
    a = subsample_function(f, 40, RngStream(66))
    b = subsample_function(f, 40, RngStream(66))
    assert a == b


def test_subsample_oversize_rejected():
    with pytest.raises(SizingError):
        subsample_function(fs(5, 67), 6, RngStream(0))


def test_prompt_json_round_trip():
    demos = [rec(4, 71), rec(4, 72)]
    p = build_prompt(demos, fs(4, 73), fs(4, 74).coords, training=True,
                     question_targets=RngStream(75).normals(4))
    back = prompt_from_json(prompt_to_json(p))
    assert np.array_equal(back.coords, p.coords)
    assert np.array_equal(back.roles, p.roles)
    assert np.array_equal(back.values, p.values)
    assert np.array_equal(back.example_index, p.example_index)
    assert np.array_equal(back.targets, p.targets)
    assert back.n_examples == p.n_examples
    assert np.array_equal(back.mask, p.mask)  # mask reconstructed, not stored
    assert "mask" not in prompt_to_json(p)


def test_prompt_validation():
    with pytest.raises(PromptError, match="value 0"):
        Prompt(coords=np.zeros((2, 2)), roles=np.array([2, 3], dtype=np.int8),
               values=np.array([1.0, 1.0]), example_index=np.array([1, 1]),
               n_examples=0, targets=np.zeros(1))
    with pytest.raises(PromptError, match="targets"):
        Prompt(coords=np.zeros((2, 2)), roles=np.array([2, 3], dtype=np.int8),
               values=np.array([1.0, 0.0]), example_index=np.array([1, 1]),
               n_examples=0, targets=np.zeros(3))


def test_build_mask_standalone_matches_prompt_mask():
    demos = [rec(3, 81), rec(3, 82)]
    p = build_prompt(demos, fs(3, 83), fs(3, 84).coords)
    assert np.array_equal(build_mask(p.roles, p.example_index), p.mask)
