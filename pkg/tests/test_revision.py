import pytest
import torch
from hypothesis import given, settings, strategies as st

from focuscir.data import HyperConfig, ShapeError
from focuscir.revision import FocusRevision, compose, reduce_channels, revision_weights


def revision(P=2, D=16, seed=0):
    torch.manual_seed(seed)
    return FocusRevision(HyperConfig.for_profile("stub", P=P, D=D)).double()


def test_reducer_starts_as_local_global_mean():
    rev = revision(P=1, D=2)
    x = torch.tensor([[0.0, 2.0], [4.0, 6.0]], dtype=torch.float64)
    assert torch.equal(reduce_channels(x, rev.reduce_ref), torch.tensor([[2.0, 4.0]], dtype=torch.float64))
    rev = revision(P=3, D=4)
    x = torch.randn(6, 4, dtype=torch.float64)
    assert torch.allclose(reduce_channels(x, rev.reduce_mod), (x[:3] + x[3:]) / 2)
    with pytest.raises(ShapeError):
        reduce_channels(torch.zeros(4, 4), rev.reduce_ref)


def test_zero_parameters_give_half_gates():
    rev = revision()
    with torch.no_grad():
        for p in (*rev.gate_in.parameters(), *rev.gate_out.parameters()):
            p.zero_()
    alpha, beta = revision_weights(torch.randn(2, 16, dtype=torch.float64),
                                   torch.randn(2, 16, dtype=torch.float64), rev)
    assert torch.equal(alpha, torch.full((2, 16), 0.5, dtype=torch.float64))
    assert torch.equal(beta, alpha)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(1e-3, 5.0))
def test_gates_inside_open_unit_interval(seed, scale):
    rev = revision(seed=seed % 1000)
    g = torch.Generator().manual_seed(seed)
    fr = scale * torch.randn(2, 16, generator=g, dtype=torch.float64)
    fm = scale * torch.randn(2, 16, generator=g, dtype=torch.float64)
    alpha, beta = revision_weights(fr, fm, rev)
    assert alpha.shape == beta.shape == (2, 16)
    for w in (alpha, beta):
        assert bool(((w > 0) & (w < 1)).all())


def test_compose_oracles():
    x = torch.randn(2, 3)
    assert torch.equal(compose(torch.ones_like(x), torch.zeros_like(x), x, torch.randn(2, 3)), x)
    half = torch.full_like(x, 0.5)
    assert torch.allclose(compose(half, half, x, x), x)
    out = compose(torch.tensor([[0.25, 0.75]]), torch.tensor([[1.0, 0.0]]),
                  torch.tensor([[4.0, 4.0]]), torch.tensor([[2.0, 8.0]]))
    assert torch.equal(out, torch.tensor([[3.0, 3.0]]))


def test_forward_shape_and_additive_mode():
    rev = revision(P=4, D=16)
    fr, fm = torch.randn(3, 8, 16, dtype=torch.float64), torch.randn(3, 8, 16, dtype=torch.float64)
    assert rev(fr, fm).shape == (3, 4, 16)
    additive = rev(fr, fm, additive=True)
    assert torch.allclose(additive, (fr[:, :4] + fr[:, 4:] + fm[:, :4] + fm[:, 4:]) / 2)
