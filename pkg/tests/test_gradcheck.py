import torch

from brainaudio.nn import finite_difference_check


def test_detects_wrong_gradient():
    w = torch.randn(5, dtype=torch.float64, requires_grad=True)

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return (x ** 3).sum()

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 2.9 * x ** 2  # should be 3 x^2

    assert finite_difference_check(lambda: Wrong.apply(w), [w], n_probe=5) > 1e-2
    assert finite_difference_check(lambda: (w ** 3).sum(), [w], n_probe=5) < 1e-6


def test_zero_gradient_entries_do_not_blow_up():
    w = torch.randn(4, dtype=torch.float64, requires_grad=True)
    b = torch.randn(4, dtype=torch.float64, requires_grad=True)
    # softmax(w + b.mean()) is invariant to b's mean, so b only enters through zero-gradient directions
    loss = lambda: (torch.softmax(w + b.mean(), 0) * torch.arange(4.0, dtype=torch.float64)).sum() * 30
    assert finite_difference_check(loss, [w, b], n_probe=4) < 1e-4
