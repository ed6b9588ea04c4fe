"""
Differentiation helpers over torch's autograd tape.

Every value is a float64 tensor; the recorded autograd graph plays the role
of the evaluation graph.

    grad(f, x)        ∇f(x) for scalar-valued f
    jvp(F, x, v)      (∂F/∂x) v, forward mode
    vjp(F, x, v)      vᵀ (∂F/∂x), reverse mode (optionally keeping the graph)
    value_and_vjp     F(x) together with vᵀ (∂F/∂x) from a single forward pass
    hvp(f, x, v)      (∇²f) v, forward-over-reverse

Usage:
    from src.autodiff.diffengine import grad, hvp
    g = grad(lambda z: (z ** 2).sum(), torch.tensor([3.0]))   # tensor([6.])
"""

from typing import Callable, Tuple

import numpy as np
import torch
from torch.func import grad as func_grad
from torch.func import jvp as func_jvp

DTYPE = torch.float64


def as_tensor(x) -> torch.Tensor:
    """Convert array-likes to a float64 tensor (no copy for float64 tensors)."""
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


def _check_same_shape(x: torch.Tensor, v: torch.Tensor, op: str):
    if x.shape != v.shape:
        raise ValueError(
            f"{op}: dimension mismatch, x has shape {tuple(x.shape)} "
            f"but v has shape {tuple(v.shape)}"
        )


def grad(f: Callable[[torch.Tensor], torch.Tensor], x) -> torch.Tensor:
    """
    Gradient of a scalar-valued function.

    Args:
        f: callable mapping a tensor shaped like x to a scalar tensor
        x: point of evaluation

    Returns:
        tensor shaped like x holding ∇f(x)

    Raises:
        ValueError: if f(x) has more than one element
    """
    x = as_tensor(x).detach().requires_grad_(True)
    with torch.enable_grad():
        out = f(x)
        if not isinstance(out, torch.Tensor):
            out = as_tensor(out)
        if out.numel() != 1:
            raise ValueError(
                f"grad: f must return a scalar, got output of shape {tuple(out.shape)}"
            )
        if not out.requires_grad:
            # f does not depend on x
            return torch.zeros_like(x).detach()
        (g,) = torch.autograd.grad(out.reshape(()), x, allow_unused=True)
    if g is None:
        return torch.zeros_like(x).detach()
    return g.detach()


def jvp(F: Callable[[torch.Tensor], torch.Tensor], x, v) -> torch.Tensor:
    """Jacobian-vector product (∂F/∂x)|ₓ · v computed in forward mode."""
    x = as_tensor(x).detach()
    v = as_tensor(v).detach()
    _check_same_shape(x, v, "jvp")
    _, tangent = func_jvp(F, (x,), (v,))
    return tangent


def value_and_vjp(
    F: Callable[[torch.Tensor], torch.Tensor],
    x,
    v,
    create_graph: bool = False,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Evaluate F(x) and the vector-Jacobian product vᵀ (∂F/∂x) in one sweep.

    With create_graph=True both results stay on the tape, so they can be
    differentiated again (the second-order path used when the likelihood
    itself is differentiated with respect to the input). If x already
    carries a graph it is used as is.
    """
    x = as_tensor(x)
    v = as_tensor(v)
    if not x.requires_grad:
        x = x.detach().requires_grad_(True)
    with torch.enable_grad():
        out = F(x)
        _check_same_shape(out, v, "vjp")
        if not out.requires_grad:
            g = torch.zeros_like(x)
        else:
            (g,) = torch.autograd.grad(
                out, x, grad_outputs=v, create_graph=create_graph, allow_unused=True
            )
            if g is None:
                g = torch.zeros_like(x)
    if create_graph:
        return out, g
    return out.detach(), g.detach()


def vjp(F, x, v, create_graph: bool = False) -> torch.Tensor:
    """Vector-Jacobian product vᵀ (∂F/∂x) computed in reverse mode."""
    return value_and_vjp(F, x, v, create_graph)[1]


def hvp(f: Callable[[torch.Tensor], torch.Tensor], x, v) -> torch.Tensor:
    """
    Hessian-vector product (∇²f)|ₓ · v.

    Forward-over-reverse: the tangent v is pushed through the reverse-mode
    gradient of f.
    """
    x = as_tensor(x).detach()
    v = as_tensor(v).detach()
    _check_same_shape(x, v, "hvp")

    def scalar_f(z):
        out = f(z)
        if out.numel() != 1:
            raise ValueError(
                f"hvp: f must return a scalar, got output of shape {tuple(out.shape)}"
            )
        return out.reshape(())

    _, tangent = func_jvp(func_grad(scalar_f), (x,), (v,))
    return tangent
