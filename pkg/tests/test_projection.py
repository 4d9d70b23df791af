import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spark_dfl.errors import ConfigurationError, ContractViolation
from spark_dfl.model import MlpArchitecture, init_weights, jacobian
from spark_dfl.projection import (
    Allocation, ProjectionSpec, allocate_widths, back_project, choose_rows, compress, compress_mlp,
    generate_projection, jacobian_reduction, orthogonal_projector, sample_rows,
)

MNIST_MLP = MlpArchitecture(784, 100, 10)


def test_generation_is_reproducible_and_layer_specific():
    spec = ProjectionSpec(global_seed=5, proj_dim=8)
    a = generate_projection(spec, "W1", 40)
    b = generate_projection(ProjectionSpec(global_seed=5, proj_dim=8), "W1", 40)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, generate_projection(spec, "W2", 40))
    assert not np.allclose(a, generate_projection(ProjectionSpec(global_seed=6, proj_dim=8), "W1", 40))
    assert not a.flags.writeable


def test_entries_have_variance_one_over_k():
    p = generate_projection(ProjectionSpec(global_seed=1, proj_dim=50), "W1", 4000)
    assert p.shape == (4000, 50)
    assert abs(p.var() * 50 - 1.0) < 0.02
    assert abs(p.mean()) < 0.002


def test_identity_mode_is_eye():
    spec = ProjectionSpec(mode="identity")
    np.testing.assert_array_equal(generate_projection(spec, "b2", 7), np.eye(7))


def test_proportional_widths_sum_to_budget():
    for k, reduction in ((1000, 0.98742), (500, 0.99371)):
        spec = ProjectionSpec(proj_dim=k)
        widths = spec.widths(MNIST_MLP.layer_dims)
        assert sum(widths.values()) == k
        assert min(widths.values()) >= 1
        assert jacobian_reduction(spec, MNIST_MLP.layer_dims) == pytest.approx(reduction, abs=5e-6)


def test_per_layer_widths():
    spec = ProjectionSpec(proj_dim=12, allocation=Allocation.PER_LAYER)
    assert set(spec.widths(MNIST_MLP.layer_dims).values()) == {12}


@given(st.integers(4, 2000), st.lists(st.integers(1, 10_000), min_size=4, max_size=4))
def test_allocation_properties(budget, dims):
    d = dict(zip("abcd", dims))
    widths = allocate_widths(budget, d)
    assert sum(widths.values()) == budget
    assert all(w >= 1 for w in widths.values())


def test_budget_below_layer_count_is_rejected():
    with pytest.raises(ConfigurationError):
        allocate_widths(3, {"a": 1, "b": 1, "c": 1, "d": 1})


def test_inner_products_are_roughly_preserved():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(20, 3000))
    p = generate_projection(ProjectionSpec(global_seed=2, proj_dim=800), "W1", 3000)
    y = x @ p
    gram, sk = x @ x.T, y @ y.T
    rel = np.abs(np.diag(sk) / np.diag(gram) - 1)
    assert rel.max() < 0.2


def test_back_projection_is_the_adjoint():
    arch = MlpArchitecture(6, 5, 3)
    spec = ProjectionSpec(global_seed=4, proj_dim=11)
    widths = spec.widths(arch.layer_dims)
    rng = np.random.default_rng(1)
    for name, d in arch.layer_dims.items():
        a = rng.normal(size=widths[name])
        b = rng.normal(size=d)
        p = generate_projection(spec, name, d, widths[name])
        lhs = back_project({**{n: np.zeros(w) for n, w in widths.items()}, name: a}, spec, arch.layer_dims)[name] @ b
        assert lhs == pytest.approx(a @ (p.T @ b), rel=1e-12)


def test_compress_matches_explicit_product():
    arch = MlpArchitecture(5, 4, 3)
    w = init_weights(arch, np.random.default_rng(2))
    x = np.random.default_rng(3).normal(size=(6, 5))
    spec = ProjectionSpec(global_seed=9, proj_dim=10)
    jac = jacobian(w, x)
    cj = compress(jac, spec)
    widths = spec.widths(arch.layer_dims)
    for name, block in jac.layers.items():
        p = generate_projection(spec, name, block.shape[2], widths[name])
        np.testing.assert_allclose(cj.layers[name], np.einsum("ncd,dk->nck", block, p), atol=1e-13)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000), st.sampled_from(["proportional", "per_layer", "identity"]))
def test_structured_fast_path_matches_generic(seed, variant):
    arch = MlpArchitecture(7, 6, 4)
    w = init_weights(arch, np.random.default_rng(seed))
    w.layers["b1"] = np.random.default_rng(seed + 1).normal(size=6) * 0.1
    x = np.random.default_rng(seed + 2).normal(size=(5, 7))
    if variant == "identity":
        spec = ProjectionSpec(mode="identity")
    else:
        spec = ProjectionSpec(global_seed=seed, proj_dim=9, allocation=variant)
    fast, slow = compress_mlp(w, x, spec), compress(jacobian(w, x), spec)
    for name in slow.layers:
        np.testing.assert_allclose(fast.layers[name], slow.layers[name], atol=1e-12)


def test_orthogonal_projector_is_idempotent_and_symmetric():
    p = generate_projection(ProjectionSpec(global_seed=3, proj_dim=5), "W1", 30)
    pi = orthogonal_projector(p)
    np.testing.assert_allclose(pi @ pi, pi, atol=1e-12)
    np.testing.assert_allclose(pi, pi.T, atol=1e-12)
    assert np.trace(pi) == pytest.approx(5)


def test_choose_rows():
    assert choose_rows(10, 1.0, 0).tolist() == list(range(10))
    idx = choose_rows(10, 0.25, 0)
    assert idx.size == 3 and np.all(np.diff(idx) > 0)
    np.testing.assert_array_equal(idx, choose_rows(10, 0.25, 0))
    with pytest.raises(ContractViolation):
        choose_rows(10, 0.0, 0)
    with pytest.raises(ContractViolation):
        choose_rows(0, 0.5, 0)


def test_sample_rows_keeps_rows_aligned():
    arch = MlpArchitecture(4, 3, 2)
    w = init_weights(arch, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(8, 4))
    jac = jacobian(w, x)
    logits = np.arange(16.0).reshape(8, 2)
    sub, lg, lab, idx = sample_rows(jac, logits, 0.5, 3, labels=np.arange(8))
    assert idx.size == 4
    np.testing.assert_array_equal(lg, logits[idx])
    np.testing.assert_array_equal(lab, idx)
    np.testing.assert_array_equal(sub.layers["W1"], jac.layers["W1"][idx])


def test_compressed_indices_must_increase():
    from spark_dfl.projection import CompressedJacobian

    with pytest.raises(ContractViolation):
        CompressedJacobian({"W1": np.zeros((2, 1, 1))}, sample_indices=[1, 1])


def naive_contract(block, p):
    n, c, d = block.shape
    out = np.zeros((n, c, p.shape[1]))
    for i in range(n):
        for j in range(c):
            for m in range(p.shape[1]):
                out[i, j, m] = sum(block[i, j, t] * p[t, m] for t in range(d))
    return out


def test_small_block_against_triple_loop():
    from spark_dfl.model import JacobianBlock

    spec = ProjectionSpec(global_seed=42, proj_dim=2, allocation=Allocation.PER_LAYER)
    block = np.array([[[1.0, 0.0, 2.0]], [[0.0, 1.0, 0.0]]])
    cj = compress(JacobianBlock({"W1": block}), spec)
    p = generate_projection(spec, "W1", 3, 2)
    np.testing.assert_allclose(cj.layers["W1"], naive_contract(block, p), atol=1e-15)


def test_back_projection_matvec_by_hand():
    spec = ProjectionSpec(global_seed=7, proj_dim=2, allocation=Allocation.PER_LAYER)
    p = generate_projection(spec, "W1", 3, 2)
    out = back_project({"W1": np.array([1.0, -1.0])}, spec, {"W1": 3})["W1"]
    np.testing.assert_allclose(out, [p[r, 0] - p[r, 1] for r in range(3)], atol=1e-15)
    zero = back_project({"W1": np.zeros(2)}, spec, {"W1": 3})["W1"]
    assert not zero.any()


def test_variance_over_a_1000_by_200_draw():
    k = 200
    p = generate_projection(ProjectionSpec(global_seed=11, proj_dim=k), "W1", 1000)
    assert 0.8 / k <= p.var() <= 1.2 / k


def test_jl_distortion_on_unit_pairs():
    rng = np.random.default_rng(2024)
    u = rng.normal(size=(500, 2000))
    v = rng.normal(size=(500, 2000))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    p = generate_projection(ProjectionSpec(global_seed=5, proj_dim=400), "W1", 2000)
    err = np.abs(((u @ p) * (v @ p)).sum(axis=1) - (u * v).sum(axis=1))
    assert err.mean() <= 0.12


def test_compression_is_linear():
    from spark_dfl.model import JacobianBlock

    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(3, 2, 50)), rng.normal(size=(3, 2, 50))
    spec = ProjectionSpec(global_seed=1, proj_dim=9, allocation=Allocation.PER_LAYER)
    lhs = compress(JacobianBlock({"W1": 2.0 * a - 0.5 * b}), spec).layers["W1"]
    rhs = 2.0 * compress(JacobianBlock({"W1": a}), spec).layers["W1"] - 0.5 * compress(JacobianBlock({"W1": b}), spec).layers["W1"]
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_zero_jacobian_and_identity_copy():
    from spark_dfl.model import JacobianBlock

    zero = compress(JacobianBlock({"W1": np.zeros((2, 2, 30))}), ProjectionSpec(proj_dim=4, allocation="per_layer"))
    assert not zero.layers["W1"].any()
    block = np.random.default_rng(0).normal(size=(2, 2, 5))
    same = compress(JacobianBlock({"W1": block}), ProjectionSpec(mode="identity"))
    np.testing.assert_array_equal(same.layers["W1"], block)


def test_identity_reduction_is_zero():
    assert jacobian_reduction(ProjectionSpec(mode="identity"), MNIST_MLP.layer_dims) == 0.0


def test_matrices_identical_across_processes():
    import subprocess
    import sys

    code = ("import hashlib;from spark_dfl.projection import ProjectionSpec, generate_projection;"
            "print(hashlib.sha256(generate_projection(ProjectionSpec(3, 40), 'W2', 500).tobytes()).hexdigest())")
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout.strip()
    import hashlib
    here = hashlib.sha256(generate_projection(ProjectionSpec(3, 40), "W2", 500).tobytes()).hexdigest()
    assert out == here
