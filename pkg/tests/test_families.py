import json

import numpy as np
import pytest

from iconops.families import (
    CONS_GRID,
    FAMILY_IDS,
    LAMBDA,
    PDE2D_GRID,
    TAU,
    TRAINABLE_FAMILY_IDS,
    Corpus,
    CorpusFormatError,
    CorpusVersionError,
    DemoRecord,
    OperatorSpec,
    UnknownFamilyError,
    X_GRID,
    generate_corpus,
    generate_record,
    read_corpus,
    sample_operator,
    write_corpus,
)
from iconops.gridfn import fd_derivative_1d, fd_partials_2d
from iconops.randproc import RngStream, mix_seed


def test_family_registry_shape():
    assert len(FAMILY_IDS) == 18
    assert len(TRAINABLE_FAMILY_IDS) == 17
    assert "heat_fwd" in FAMILY_IDS and "heat_fwd" not in TRAINABLE_FAMILY_IDS
    assert "heat_inv" not in FAMILY_IDS
    assert "conservation_inv" not in FAMILY_IDS


def test_sample_operator_respects_ranges():
    for i in range(30):
        op = sample_operator("heat_fwd", RngStream(100, i))
        assert 0.001 <= op.params["k"] <= 0.01
        assert -0.01 <= op.params["alpha"] <= -0.001
        assert -1.0 <= op.params["u0"] <= 1.0
        assert -1.0 <= op.params["uL"] <= 1.0
    for i in range(30):
        op = sample_operator("pde2d_fwd", RngStream(200, i))
        assert set(op.params) == set("abcdef")
        assert all(-0.5 <= v <= 0.5 for v in op.params.values())


def test_sample_operator_deterministic():
    a = sample_operator("ode3_inv", RngStream(55))
    b = sample_operator("ode3_inv", RngStream(55))
    assert a == b


def test_unknown_family_rejected():
    with pytest.raises(UnknownFamilyError):
        sample_operator("ode9_fwd", RngStream(0))
    with pytest.raises(UnknownFamilyError):
        sample_operator("ode1", RngStream(0))  # direction suffix required


def test_operator_spec_validation():
    with pytest.raises(ValueError):
        OperatorSpec("ode1", "forward", {"a1": 0.0, "a2": 0.0}, 0)  # missing u0
    with pytest.raises(ValueError):
        OperatorSpec("ode1", "forward", {"a1": 2.0, "a2": 0.0, "u0": 0.0}, 0)
    with pytest.raises(ValueError):
        OperatorSpec("heat", "inverse", {"k": 0.005, "alpha": -0.005, "u0": 0.0, "uL": 0.0}, 0)
    # the homogeneous boundary case used by the OOD study must validate
    OperatorSpec("heat", "forward", {"k": 0.005, "alpha": 0.0, "u0": 0.0, "uL": 0.0}, 0)


def test_ode1_decoupled_condition_gives_identity_solution():
    op = OperatorSpec("ode1", "forward", {"a1": 0.0, "a2": 1.0, "u0": 0.0}, 0)
    rec = generate_record(op, RngStream(9))
    t = rec.qoi.coords[:, 0]
    assert np.max(np.abs(rec.qoi.values - t)) <= 1e-14


def test_ode1_forward_difference_identity():
    # Euler construction: (u[i+1]-u[i])/h == a1*c[i] + a2 exactly
    op = sample_operator("ode1_fwd", RngStream(4))
    rec = generate_record(op, RngStream(5))
    c, u = rec.condition.values, rec.qoi.values
    h = rec.qoi.coords[1, 0] - rec.qoi.coords[0, 0]
    lhs = (u[1:] - u[:-1]) / h
    rhs = op.params["a1"] * c[:-1] + op.params["a2"]
    assert np.max(np.abs(lhs - rhs)) <= 1e-12


def test_poisson_stencil_identity():
    op = sample_operator("poisson_fwd", RngStream(14))
    rec = generate_record(op, RngStream(15))
    c, u = rec.condition.values, rec.qoi.values
    h = X_GRID.h
    res = (u[:-2] - 2 * u[1:-1] + u[2:]) / h**2 - c[1:-1]
    assert np.max(np.abs(res)) <= 1e-9
    assert u[0] == op.params["u0"] and u[-1] == op.params["u1"]


def test_nonlinear_rd_condition_replays_from_qoi():
    # recompute the source from the stored solution with the same stencils
    for i in range(5):
        op = sample_operator("nonlinear_rd_fwd", RngStream(60, i))
        rec = generate_record(op, RngStream(61, i))
        u = rec.qoi.values
        uxx = fd_derivative_1d(u, X_GRID.h, 2)
        c = -LAMBDA * op.params["a"] * uxx + op.params["k"] * u**3
        assert np.max(np.abs(c[1:-1] - rec.condition.values[1:-1])) <= 1e-12


FIG_COEFFS = {"a": 0.4563, "b": 0.1500, "c": -0.4341, "d": -0.0525, "e": -0.0457, "f": 0.1578}


def test_pde2d_condition_replays_from_qoi():
    op = OperatorSpec("pde2d", "forward", dict(FIG_COEFFS), 0)
    rec = generate_record(op, RngStream(71))
    d = fd_partials_2d(rec.qoi, PDE2D_GRID)
    g = (op.params["a"] * d["u_xx"].values + op.params["b"] * d["u_xt"].values
         + op.params["c"] * d["u_tt"].values + op.params["d"] * d["u_x"].values
         + op.params["e"] * d["u_t"].values + op.params["f"] * rec.qoi.values)
    assert np.max(np.abs(g - rec.condition.values)) <= 1e-12


def test_pde2d_qoi_matches_slices():
    op = sample_operator("pde2d_fwd", RngStream(81))
    rec = generate_record(op, RngStream(82))
    m = rec.qoi.values.reshape(26, 26)
    t = rec.qoi.coords[:, 0].reshape(26, 26)
    assert np.all(t[0] == 0.0) and np.all(t[-1] == 1.0)


def test_oscillator_record_structure_and_replay():
    op = sample_operator("oscillator_fwd", RngStream(31))
    rec = generate_record(op, RngStream(32))
    assert len(rec.condition) == 50 and len(rec.qoi) == 50
    # shared midpoint, condition on [0, 0.5], QoI on [0.5, 1]
    assert rec.condition.coords[-1, 0] == 0.5 == rec.qoi.coords[0, 0]
    assert rec.condition.values[-1] == rec.qoi.values[0]
    # replay the per-record amplitude/period/phase draws
    rng = RngStream(32)
    amp, period, eta = rng.uniform(0.5, 1.5), rng.uniform(0.3, 1.0), rng.uniform(0, 2 * np.pi)
    t = rec.qoi.coords[:, 0]
    expect = amp * np.sin(2 * np.pi / period * t + eta) * np.exp(-op.params["k"] * t)
    assert np.array_equal(rec.qoi.values, expect)


def test_linear_rd_condition_is_positive():
    op = sample_operator("linear_rd_fwd", RngStream(41))
    rec = generate_record(op, RngStream(42))
    assert np.all(rec.condition.values > 0)


def test_conservation_record_is_periodic():
    op = sample_operator("conservation_fwd", RngStream(51))
    rec = generate_record(op, RngStream(52))
    assert rec.condition.values[0] == rec.condition.values[-1]
    assert rec.qoi.values[0] == rec.qoi.values[-1]
    assert np.all(rec.qoi.coords[:, 0] == TAU)
    assert len(rec.condition) == CONS_GRID.n
    # discrete mean over unique cells is conserved by the finite-volume form
    assert abs(np.mean(rec.qoi.values[:-1]) - np.mean(rec.condition.values[:-1])) <= 1e-12


def test_heat_record_boundaries_and_horizon():
    op = sample_operator("heat_fwd", RngStream(91))
    rec = generate_record(op, RngStream(92))
    assert rec.condition.values[0] == op.params["u0"]
    assert rec.condition.values[-1] == op.params["uL"]
    assert rec.qoi.values[0] == op.params["u0"]
    assert rec.qoi.values[-1] == op.params["uL"]
    assert np.all(rec.qoi.coords[:, 0] == TAU)


def test_inverse_is_exact_field_swap():
    for base in ("ode2", "poisson", "pde2d"):
        fwd_op = sample_operator(f"{base}_fwd", RngStream(7))
        inv_op = sample_operator(f"{base}_inv", RngStream(7))
        assert fwd_op.params == inv_op.params
        f = generate_record(fwd_op, RngStream(8))
        v = generate_record(inv_op, RngStream(8))
        assert f.condition == v.qoi
        assert f.qoi == v.condition


def test_every_family_replays_bit_exactly():
    for fid in FAMILY_IDS:
        op = sample_operator(fid, RngStream(mix_seed(3, 1)), operator_id=1)
        rec = generate_record(op, RngStream(mix_seed(3, 1, 4)))
        again = generate_record(op, RngStream(rec.seed))
        assert again.condition == rec.condition, fid
        assert again.qoi == rec.qoi, fid
        assert np.all(np.isfinite(rec.condition.values)), fid
        assert np.all(np.isfinite(rec.qoi.values)), fid


def test_generate_corpus_validations():
    with pytest.raises(ValueError):
        generate_corpus("ode1_fwd", 0, 6, 1)
    with pytest.raises(ValueError):
        generate_corpus("ode1_fwd", 1, 5, 1)


def test_corpus_grouping_and_sizes():
    c = generate_corpus("oscillator_inv", 3, 7, 12)
    assert len(c) == 21
    assert c.operator_ids() == [0, 1, 2]
    assert all(len(c.records_for(i)) == 7 for i in range(3))


def test_corpus_write_is_byte_deterministic(tmp_path):
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_corpus(generate_corpus("ode2_fwd", 2, 6, 99), p1)
    write_corpus(generate_corpus("ode2_fwd", 2, 6, 99), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_corpus_round_trip(tmp_path):
    c = generate_corpus("linear_rd_inv", 2, 6, 5)
    p = tmp_path / "c.jsonl"
    write_corpus(c, p)
    back = read_corpus(p)
    assert back.metadata == c.metadata
    assert len(back) == len(c)
    for a, b in zip(back.records, c.records):
        assert a == b  # bitwise: repr round-trip keeps full float64 fidelity


def test_corpus_metadata_keys(tmp_path):
    c = generate_corpus("conservation_fwd", 1, 6, 3)
    assert set(c.metadata) == {"format_version", "family", "direction", "grids",
                               "gp", "ranges", "base_seed"}
    assert c.metadata["gp"] == {"length_scale": 0.2, "variance": 2.0}
    assert c.metadata["grids"]["tau"] == TAU


def test_empty_corpus_round_trips(tmp_path):
    c = Corpus(metadata=generate_corpus("ode1_fwd", 1, 6, 1).metadata, records=[])
    p = tmp_path / "empty.jsonl"
    write_corpus(c, p)
    back = read_corpus(p)
    assert len(back) == 0
    assert back.metadata == c.metadata


def test_truncated_line_reports_number(tmp_path):
    c = generate_corpus("ode1_fwd", 1, 6, 2)
    p = tmp_path / "t.jsonl"
    write_corpus(c, p)
    text = p.read_text().splitlines()
    (tmp_path / "bad.jsonl").write_text("\n".join(text[:3] + [text[3][: len(text[3]) // 2]]) + "\n")
    with pytest.raises(CorpusFormatError, match="line 4"):
        read_corpus(tmp_path / "bad.jsonl")


def test_version_mismatch_rejected(tmp_path):
    p = tmp_path / "v.jsonl"
    p.write_text(json.dumps({"format_version": 2, "family": "ode1",
                             "direction": "forward"}) + "\n")
    with pytest.raises(CorpusVersionError):
        read_corpus(p)


def test_undersized_operator_group_rejected():
    c = generate_corpus("ode1_fwd", 1, 6, 8)
    with pytest.raises(ValueError, match="at least 6"):
        Corpus(metadata=c.metadata, records=c.records[:5])
