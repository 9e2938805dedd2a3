import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from _fd import fd_oracle_rel_error, fd_rel_error
from multicheck.data import SyntheticSpec, build_vocab, encode_samples, generate_synthetic
from multicheck.fusion import GELU, Classifier, FusionFFN, GELUFunction, gelu, predict_labels, relational_fuse
from multicheck.model import ModelConfig, MultiCheckModel
from multicheck.trainer import gradient_check, total_loss_fn

mpmath.mp.dps = 40


def _gelu_oracle(x):
    x = mpmath.mpf(x)
    return x * (1 + mpmath.erf(x / mpmath.sqrt(2))) / 2


GRID = np.linspace(-6.0, 6.0, 1000)


# ----------------------------------------------------------------- GELU


def test_gelu_matches_high_precision_erf():
    ours = gelu(torch.tensor(GRID, dtype=torch.float64)).numpy()
    ref = np.array([float(_gelu_oracle(x)) for x in GRID])
    assert np.max(np.abs(ours - ref)) < 1e-6


def test_gelu_derivative_matches_high_precision_oracle():
    x = torch.tensor(GRID, dtype=torch.float64, requires_grad=True)
    gelu(x).sum().backward()
    ref = np.array([float(mpmath.diff(_gelu_oracle, mpmath.mpf(v))) for v in GRID[::10]])
    assert np.max(np.abs(x.grad.numpy()[::10] - ref)) < 1e-10


def test_gelu_is_exact_not_tanh():
    # the tanh approximation differs from x*Phi(x) by ~1e-4 near |x| = 2
    x = torch.tensor([2.0], dtype=torch.float64)
    approx = torch.nn.functional.gelu(x, approximate="tanh")
    assert abs(float(gelu(x)) - float(_gelu_oracle(2.0))) < 1e-12
    assert abs(float(approx) - float(_gelu_oracle(2.0))) > 1e-5


def test_gelu_module_uses_explicit_backward():
    assert GELU.function is GELUFunction
    x = torch.randn(20, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(gelu, (x,))


# ----------------------------------------------------------------- relational fusion


def test_identity_case():
    v = torch.tensor([[1.5, -2.0, 0.5, 3.0]])
    v_diff, v_prod, _ = relational_fuse(v, v)
    assert torch.equal(v_diff, torch.zeros_like(v))
    assert torch.equal(v_prod, v * v)


def test_hand_example():
    c, d = torch.tensor([[1.0, -2.0]]), torch.tensor([[-1.0, 2.0]])
    v_diff, v_prod, v_fused = relational_fuse(c, d)
    assert v_diff.tolist() == [[2.0, 4.0]]
    assert v_prod.tolist() == [[-1.0, -4.0]]
    assert v_fused.tolist() == [[2.0, 4.0, -1.0, -4.0, 1.0, -2.0, -1.0, 2.0]]


def test_shape_mismatch_asserts():
    with pytest.raises(AssertionError):
        relational_fuse(torch.zeros(2, 4), torch.zeros(2, 6))


def test_abs_subgradient_at_zero_is_zero():
    c = torch.tensor([[1.0, 2.0]], requires_grad=True)
    d = torch.tensor([[1.0, 0.0]], requires_grad=True)
    v_diff, _, _ = relational_fuse(c, d)
    v_diff.sum().backward()
    assert c.grad.tolist() == [[0.0, 1.0]]


finite = st.floats(-1e3, 1e3, allow_nan=False, width=32)


@given(a=arrays(np.float32, (3, 4), elements=finite), b=arrays(np.float32, (3, 4), elements=finite))
def test_fusion_symmetries(a, b):
    a, b = torch.from_numpy(a), torch.from_numpy(b)
    d1, p1, f1 = relational_fuse(a, b)
    d2, p2, f2 = relational_fuse(b, a)
    assert torch.equal(d1, d2) and torch.equal(p1, p2)
    assert (d1 >= 0).all()
    assert torch.equal(f1[:, 8:12], f2[:, 12:16]) and torch.equal(f1[:, 12:16], f2[:, 8:12])
    if not torch.equal(a, b):
        assert not torch.equal(f1, f2)


@given(h=st.integers(1, 8), b=st.integers(1, 3))
def test_width_contract(h, b):
    c, d = torch.randn(b, 2 * h), torch.randn(b, 2 * h)
    _, _, v_fused = relational_fuse(c, d)
    assert v_fused.shape == (b, 8 * h)
    ffn, cls = FusionFFN(h).eval(), Classifier(h)
    assert ffn.fc1.in_features == 8 * h and ffn.fc1.out_features == 2 * h
    v_final = ffn(v_fused)
    assert v_final.shape == (b, h)
    assert cls(v_final).shape == (b, 5)


# ----------------------------------------------------------------- fusion FFN


def test_zero_weights_give_final_bias():
    ffn = FusionFFN(3)
    c = torch.tensor([1.0, -2.0, 0.5])
    with torch.no_grad():
        for p in ffn.parameters():
            p.zero_()
        ffn.fc2.bias.copy_(c)
    assert torch.equal(ffn(torch.randn(4, 24)), c.expand(4, 3))


def test_eval_mode_is_deterministic_train_mode_is_not():
    torch.manual_seed(0)
    ffn = FusionFFN(4, dropout=0.5)
    x = torch.randn(6, 32)
    ffn.eval()
    assert torch.equal(ffn(x), ffn(x))
    ffn.train()
    assert not torch.equal(ffn(x), ffn(x))


def test_ffn_gradient_matches_finite_differences():
    torch.manual_seed(0)
    ffn = FusionFFN(4).eval()
    x = torch.randn(3, 32, generator=torch.Generator().manual_seed(1))
    coords = list(range(0, ffn.fc1.weight.numel(), 7))
    err = fd_rel_error(lambda: ffn(x).sum(), ffn.fc1.weight, coords, eps=1e-3)
    assert err < 1e-3
    errors = fd_oracle_rel_error(
        ffn,
        lambda m: m(x.to(next(m.parameters()).dtype)).sum(),
        lambda name, p: list(range(p.numel())),
    )
    assert errors["fc1.weight"] < 1e-3


# ----------------------------------------------------------------- classifier


def test_bias_only_classifier_predicts_class_3():
    cls = Classifier(4)
    with torch.no_grad():
        cls.linear.weight.zero_()
        cls.linear.bias.copy_(torch.tensor([0.0, 0.0, 0.0, 1.0, 0.0]))
    assert predict_labels(cls(torch.randn(10, 4))).tolist() == [3] * 10


def test_tie_breaks_to_smallest_index():
    logits = torch.tensor([[0.0, 2.0, 1.0, -1.0, 2.0]])
    assert predict_labels(logits).tolist() == [1]


def _argmax_oracle(row):
    best = 0
    for j in range(1, len(row)):
        if row[j] > row[best]:
            best = j
    return best


@given(arrays(np.float32, (7, 5), elements=st.sampled_from([-1.0, 0.0, 0.5, 2.0])))
def test_argmax_matches_enumeration(logits):
    preds = predict_labels(torch.from_numpy(logits)).tolist()
    assert preds == [_argmax_oracle(list(r)) for r in logits]


# ----------------------------------------------------------------- mutation test


class _CorruptedGELU(GELUFunction):
    """Drops the x * pdf term of the derivative."""

    @staticmethod
    def backward(ctx, grad_out):
        (x,) = ctx.saved_tensors
        return grad_out * 0.5 * (1.0 + torch.erf(x / 2**0.5))


def _fixture():
    samples, _, _ = generate_synthetic(SyntheticSpec(n_train=2, n_val=0, n_test=0))
    batch = encode_samples(samples, build_vocab(samples, 100), 16)
    torch.manual_seed(0)
    model = MultiCheckModel(ModelConfig(h=8, d_text=16, text_ffn=32), 100, 16, (1, 32, 32))
    return model, batch


def test_corrupted_gelu_derivative_is_caught():
    model, batch = _fixture()
    clean = gradient_check(model, batch, total_loss_fn(), n_coords=8)
    assert clean.passed, clean.failures

    model.fusion_ffn.act.function = _CorruptedGELU
    report = gradient_check(model, batch, total_loss_fn(), n_coords=8)
    assert not report.passed
    assert "fusion_ffn.fc1.weight" in report.failures
    assert "fusion_ffn.fc1.bias" in report.failures
    # tensors downstream of the activation never see its derivative
    for name in ("fusion_ffn.fc2.weight", "fusion_ffn.fc2.bias", "classifier.linear.weight", "classifier.linear.bias"):
        assert name not in report.failures
