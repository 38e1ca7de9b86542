"""
Numerics module for abnet.

Thin, checked wrappers around the torch kernels the AB-Net graph is built
from. Each op validates shapes, refuses non-finite results and keeps torch
autograd as the reverse-mode engine, so every tensor produced here can be
differentiated with backward().
"""

import logging
from typing import Callable, Iterable, Optional, Sequence

import torch
import torch.nn.functional as F

from abnet.errors import (
    BackwardStateError,
    ConfigurationError,
    DimensionError,
    EmptyLossError,
    NumericError,
)

logger = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}
LAYER_NORM_EPS = 1e-5

_BACKWARD_DONE = "_abnet_backward_done"


def resolve_dtype(name: str) -> torch.dtype:
    """Map a config precision name to a torch dtype."""
    try:
        return DTYPES[name]
    except KeyError:
        raise ConfigurationError(
            f"dtype must be one of {sorted(DTYPES)}, got {name!r}"
        ) from None


def _check_finite(t: torch.Tensor, op: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericError(f"{op}: produced non-finite values")
    return t


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """
    Matrix product of rank-2 or batched rank-3 tensors.

    Accepted forms: (m,k)@(k,n), (B,m,k)@(k,n) and (B,m,k)@(B,k,n).
    """
    ok = a.dim() in (2, 3) and b.dim() in (2, 3) and a.shape[-1] == b.shape[-2]
    if ok and b.dim() == 3:
        ok = a.dim() == 3 and a.shape[0] == b.shape[0]
    if not ok:
        raise DimensionError(
            f"matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}"
        )
    return _check_finite(torch.matmul(a, b), "matmul")


def linear(
    x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None
) -> torch.Tensor:
    """x @ weight + bias with weight stored as (in, out)."""
    out = matmul(x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[-1],):
            raise DimensionError(
                f"linear: bias {tuple(bias.shape)} does not match weight {tuple(weight.shape)}"
            )
        out = out + bias
    return out


def layer_norm(
    h: torch.Tensor,
    gain: torch.Tensor,
    bias: torch.Tensor,
    eps: float = LAYER_NORM_EPS,
) -> torch.Tensor:
    """Normalize over the last dimension: (h - mean) / sqrt(var + eps) * gain + bias."""
    if eps <= 0:
        raise ConfigurationError(f"layer_norm: eps must be positive, got {eps}")
    d = h.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: input {tuple(h.shape)} with gain {tuple(gain.shape)} "
            f"and bias {tuple(bias.shape)}"
        )
    return _check_finite(F.layer_norm(h, (d,), gain, bias, eps), "layer_norm")


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    """
    Numerically stable softmax along `axis`.

    Additive -inf mask entries are allowed; a row that is entirely -inf has
    no distribution and raises NumericError.
    """
    if torch.isnan(x).any() or torch.isposinf(x).any():
        raise NumericError("softmax: input contains NaN or +inf")
    if x.numel() and torch.isneginf(x).all(dim=axis).any():
        raise NumericError("softmax: fully masked row (every entry is -inf)")
    return _check_finite(torch.softmax(x, dim=axis), "softmax")


def relu(x: torch.Tensor) -> torch.Tensor:
    return _check_finite(torch.relu(x), "relu")


def dropout(x: torch.Tensor, p: float, training: bool) -> torch.Tensor:
    if not training or p <= 0.0:
        return x
    return F.dropout(x, p=p, training=True)


def cross_entropy(
    logits: torch.Tensor, targets: torch.Tensor, ignore_mask: torch.Tensor
) -> torch.Tensor:
    """
    Mean negative log-likelihood over the positions not marked in ignore_mask.

    Args:
        logits: (..., V) unnormalized scores.
        targets: (...) token ids.
        ignore_mask: (...) bool, True where the position is excluded.

    Returns:
        Scalar tensor.
    """
    if logits.shape[:-1] != targets.shape or targets.shape != ignore_mask.shape:
        raise DimensionError(
            f"cross_entropy: logits {tuple(logits.shape)}, targets "
            f"{tuple(targets.shape)}, ignore mask {tuple(ignore_mask.shape)}"
        )
    keep = ~ignore_mask.reshape(-1)
    if not keep.any():
        raise EmptyLossError("cross_entropy: no positions left after masking")
    flat_targets = targets.reshape(-1)[keep]
    vocab = logits.shape[-1]
    if (flat_targets < 0).any() or (flat_targets >= vocab).any():
        raise DimensionError(f"cross_entropy: target id outside [0, {vocab})")
    log_probs = torch.log_softmax(logits.reshape(-1, vocab)[keep], dim=-1)
    picked = log_probs.gather(1, flat_targets.unsqueeze(1)).squeeze(1)
    return _check_finite(-picked.mean(), "cross_entropy")


def backward(
    loss: torch.Tensor, params: Optional[Iterable[torch.Tensor]] = None
) -> None:
    """
    Populate gradient buffers of every leaf reachable from `loss`.

    Tensors in `params` that require a gradient but were not reached get a
    zero gradient. A loss can be differentiated once.
    """
    if loss.dim() != 0:
        raise DimensionError(f"backward: loss must be a scalar, got {tuple(loss.shape)}")
    if getattr(loss, _BACKWARD_DONE, False):
        raise BackwardStateError("backward: loss was already differentiated")
    if not torch.isfinite(loss):
        raise NumericError("backward: loss is not finite")
    loss.backward()
    setattr(loss, _BACKWARD_DONE, True)
    if params is not None:
        for tensor in params:
            if tensor.requires_grad and tensor.grad is None:
                tensor.grad = torch.zeros_like(tensor)


def gradient_check(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    eps: float = 1e-5,
    rtol: float = 1e-3,
    atol: float = 1e-6,
) -> bool:
    """
    Compare reverse-mode gradients of `fn` with central finite differences.

    Inputs must be float64 leaves with requires_grad set.
    """
    for t in inputs:
        if t.dtype != torch.float64:
            raise ConfigurationError("gradient_check: inputs must be float64")
    return torch.autograd.gradcheck(
        fn, tuple(inputs), eps=eps, atol=atol, rtol=rtol, raise_exception=False
    )
