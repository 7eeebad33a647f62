"""Tests for tensor.py autograd core."""
import numpy as np
import pytest

from common import (
    ConfigurationError,
    ContractError,
    DimensionError,
    LabelError,
    VocabularyError,
)
from tensor import (
    Tape,
    Tensor,
    activations,
    add,
    backward,
    causal_depthwise_conv1d,
    concat,
    cross_entropy,
    embedding_lookup,
    exp,
    gradcheck,
    masked_softmax,
    matmul,
    mean_all,
    mul,
    reshape,
    rmsnorm,
    scale,
    slice_rows,
    softmax_lastaxis,
    softplus,
    sub,
    sum_all,
    transpose,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def _weighted(out: Tensor, seed: int = 7) -> Tensor:
    """Reduce to a scalar with fixed random weights so every coordinate matters."""
    weights = Tensor(np.random.default_rng(seed).normal(size=out.shape))
    return sum_all(mul(out, weights))


def _t(rng, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


UNARY_CASES = {
    "exp": lambda a: exp(a),
    "softplus": lambda a: softplus(a),
    "sigmoid": lambda a: activations(a, "sigmoid"),
    "silu": lambda a: activations(a, "silu"),
    "softmax": lambda a: softmax_lastaxis(a),
    "transpose": lambda a: transpose(a),
    "reshape": lambda a: reshape(a, (a.shape[1], a.shape[0])),
    "scale": lambda a: scale(a, -2.5),
    "slice": lambda a: slice_rows(a, 1, 3),
    "mean": lambda a: mean_all(mul(a, a)),
}


@pytest.mark.parametrize("name", sorted(UNARY_CASES))
def test_unary_ops_match_finite_differences(rng, name):
    """Test every unary op against central differences."""
    op = UNARY_CASES[name]
    assert gradcheck(lambda a: _weighted(op(a)), [_t(rng, 4, 5)])


def test_broadcasting_binary_ops(rng):
    """Test add, sub and mul with a broadcast row operand."""
    a, b = _t(rng, 4, 3), _t(rng, 3)
    assert gradcheck(lambda x, y: _weighted(add(x, y)), [a, b])
    assert gradcheck(lambda x, y: _weighted(sub(x, y)), [a, b])
    assert gradcheck(lambda x, y: _weighted(mul(x, y)), [a, b])


def test_matmul_and_concat(rng):
    """Test gradients through matmul and row concat."""
    a, b, c = _t(rng, 3, 4), _t(rng, 4, 2), _t(rng, 2, 2)
    assert gradcheck(lambda x, y: _weighted(matmul(x, y)), [a, b])
    assert gradcheck(lambda x, y, z: _weighted(concat([matmul(x, y), z], axis=0)), [a, b, c])


def test_concat_columns(rng):
    """Test gradients through column concat."""
    a, b = _t(rng, 3, 2), _t(rng, 3, 4)
    assert gradcheck(lambda x, y: _weighted(concat([x, y], axis=1)), [a, b])


def test_masked_softmax_gradient(rng):
    """Test masked softmax gradients."""
    mask = np.tril(np.ones((5, 5), dtype=bool))
    assert gradcheck(lambda a: _weighted(masked_softmax(a, mask)), [_t(rng, 5, 5)])


def test_rmsnorm_gradient(rng):
    """Test rmsnorm gradients for input and weight."""
    x, w = _t(rng, 4, 6), _t(rng, 6)
    assert gradcheck(lambda a, b: _weighted(rmsnorm(a, b)), [x, w])


def test_conv1d_gradient(rng):
    """Test conv gradients for input and kernels."""
    x, k = _t(rng, 7, 3), _t(rng, 4, 3)
    assert gradcheck(lambda a, b: _weighted(causal_depthwise_conv1d(a, b)), [x, k])


def test_embedding_gradient_accumulates_repeated_ids(rng):
    """Test that repeated ids accumulate into one table row."""
    table = _t(rng, 6, 4)
    assert gradcheck(lambda t: _weighted(embedding_lookup(t, [1, 3, 1, 5])), [table])


def test_cross_entropy_gradient(rng):
    """Test cross-entropy gradients."""
    logits = _t(rng, 3, 4)
    assert gradcheck(lambda a: cross_entropy(a, [0, 3, 1]), [logits])


def test_cross_entropy_uniform_logits_is_log_k():
    """Test that uniform logits give a loss of ln K."""
    loss = cross_entropy(Tensor(np.zeros((2, 4))), [1, 2])
    assert loss.item() == pytest.approx(np.log(4.0), abs=1e-12)


def test_cross_entropy_rejects_bad_label():
    """Test that an out-of-range target is a label error."""
    with pytest.raises(LabelError):
        cross_entropy(Tensor(np.zeros((1, 3))), [3])


def test_nothing_recorded_without_tape(rng):
    """Test the inference path leaves no graph behind."""
    a = _t(rng, 2, 2)
    out = matmul(a, a)
    assert not out.requires_grad
    with Tape() as tape:
        matmul(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))))
    assert len(tape) == 0


def test_shared_input_gradients_accumulate(rng):
    """Test x used twice receives the sum of both paths."""
    x = _t(rng, 3)
    with Tape() as tape:
        loss = sum_all(mul(x, x))
    backward(loss, tape)
    np.testing.assert_allclose(x.grad, 2.0 * x.data)
    assert tape.visits == len(tape)


def test_detach_stops_gradient(rng):
    """Test that a detached operand gets no gradient."""
    x = _t(rng, 3)
    with Tape() as tape:
        loss = sum_all(mul(x, x.detach()))
    backward(loss, tape)
    np.testing.assert_allclose(x.grad, x.data)


def test_backward_needs_scalar(rng):
    """Test that backward from a non-scalar is a contract error."""
    x = _t(rng, 3)
    with Tape() as tape:
        out = scale(x, 2.0)
    with pytest.raises(ContractError):
        backward(out, tape)


def test_matmul_shape_error_names_both_shapes():
    """Test that a matmul shape error names both shapes."""
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_masked_entries_are_exact_zero():
    """Test that masked entries are exactly zero."""
    mask = np.array([[True, False, True]])
    p = masked_softmax(Tensor(np.array([[1.0, 50.0, 2.0]])), mask)
    assert p.data[0, 1] == 0.0
    assert p.data.sum() == pytest.approx(1.0)


def test_fully_masked_row_is_contract_error():
    """Test that a row with no allowed key is a contract error."""
    with pytest.raises(ContractError):
        masked_softmax(Tensor(np.zeros((2, 2))), np.array([[True, False], [False, False]]))


def test_embedding_rejects_unknown_id():
    """Test that an out-of-range id raises with the id attached."""
    with pytest.raises(VocabularyError) as excinfo:
        embedding_lookup(Tensor(np.zeros((4, 2))), [0, 4])
    assert excinfo.value.token_id == 4


def test_non_finite_output_is_contract_error():
    """Test that an overflowing op is a contract error."""
    with pytest.raises(ContractError):
        exp(Tensor(np.array([1000.0])))


def test_conv_width_above_cap_rejected():
    """Test that a kernel wider than the cap is rejected."""
    with pytest.raises(ConfigurationError):
        causal_depthwise_conv1d(Tensor(np.zeros((3, 2))), Tensor(np.zeros((5, 2))), max_width=4)


def test_conv_is_causal(rng):
    """Test that the conv ignores later positions."""
    x = rng.normal(size=(6, 2))
    k = Tensor(rng.normal(size=(3, 2)))
    base = causal_depthwise_conv1d(Tensor(x), k).data
    x[4] += 1.0
    moved = causal_depthwise_conv1d(Tensor(x), k).data
    np.testing.assert_array_equal(base[:4], moved[:4])


def test_softmax_of_logs_recovers_proportions():
    """Test softmax([ln1, ln2, ln3]) = [1/6, 2/6, 3/6]."""
    p = softmax_lastaxis(Tensor(np.log([1.0, 2.0, 3.0]))).data
    np.testing.assert_allclose(p, [1 / 6, 2 / 6, 3 / 6], atol=1e-12)


def test_softmax_large_logit_does_not_overflow():
    """Test that a logit of 1000 does not overflow."""
    p = softmax_lastaxis(Tensor(np.array([1000.0, 0.0]))).data
    assert p[0] == pytest.approx(1.0)
    assert 0.0 <= p[1] < 1e-300


def test_rmsnorm_scales_by_weight():
    """Test x=[1,2,2] with weight 2 gives 2*x/sqrt(3+eps)."""
    out = rmsnorm(Tensor(np.array([1.0, 2.0, 2.0])), Tensor(np.full(3, 2.0))).data
    np.testing.assert_allclose(out, 2.0 * np.array([1.0, 2.0, 2.0]) / np.sqrt(3.0 + 1e-6),
                               rtol=1e-14)


def test_silu_at_one():
    """Test silu at 0 and 1."""
    out = activations(Tensor(np.array([0.0, 1.0])), "silu").data
    assert out[0] == 0.0
    assert out[1] == pytest.approx(0.7310585786300049, rel=1e-14)


def test_conv_identity_kernel(rng):
    """Test a kernel tapping only the current position returns the input."""
    x = rng.normal(size=(5, 3))
    kernels = np.zeros((3, 3))
    kernels[-1] = 1.0
    np.testing.assert_array_equal(causal_depthwise_conv1d(Tensor(x), Tensor(kernels)).data, x)


def test_conv_shift_kernel_delays_by_one():
    """Test kernel [1, 0] on [1, 2, 3] gives [0, 1, 2]."""
    out = causal_depthwise_conv1d(Tensor(np.array([[1.0], [2.0], [3.0]])),
                                  Tensor(np.array([[1.0], [0.0]])))
    np.testing.assert_array_equal(out.data[:, 0], [0.0, 1.0, 2.0])
