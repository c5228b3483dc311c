"""Differentiable kernels used by the keyword-spotting network.

All kernels take and return float64 numpy arrays. Sequence kernels accept a
single sequence shaped (T, C) or a padded batch shaped (B, T, C); the batch
form is what the training loop uses, the single form is what the public API
and the tests use.
"""

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from numerics.errors import DegenerateInputError, LabelError, ShapeError

PADDINGS = ("same", "valid")


def _as_batch(inputs: np.ndarray) -> tuple[np.ndarray, bool]:
    if inputs.ndim == 2:
        return inputs[None], True
    if inputs.ndim == 3:
        return inputs, False
    raise ShapeError(f"expected a (T, C) or (B, T, C) array, got shape {inputs.shape}")


def conv1d_geometry(
    length: int, kernel_size: int, stride: int, padding: str
) -> tuple[int, int, int]:
    """Returns (output_length, left_pad, right_pad) for a temporal convolution.

    'same' padding centres the kernel with a fixed left offset of (K - 1) // 2
    input frames, independent of the sequence length, so a batch of padded
    sequences and each sequence on its own see the same alignment.
    """
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if padding == "same":
        out_len = math.ceil(length / stride)
        left = (kernel_size - 1) // 2
        right = max((out_len - 1) * stride + kernel_size - left - length, 0)
        return out_len, left, right
    if padding == "valid":
        if kernel_size > length:
            raise ShapeError(
                f"valid convolution needs K <= T, got K={kernel_size}, T={length}"
            )
        return (length - kernel_size) // stride + 1, 0, 0
    raise ShapeError(f"unknown padding {padding!r}, expected one of {PADDINGS}")


def _windows(
    inputs: np.ndarray, kernel_size: int, stride: int, padding: str
) -> tuple[np.ndarray, int, int]:
    """Im2col view: (B, T', K * Cin) rows of the padded input."""
    batch, length, channels = inputs.shape
    out_len, left, right = conv1d_geometry(length, kernel_size, stride, padding)
    padded = np.pad(inputs, ((0, 0), (left, right), (0, 0)))
    view = sliding_window_view(padded, kernel_size, axis=1)
    view = view[:, : (out_len - 1) * stride + 1 : stride]
    cols = view.transpose(0, 1, 3, 2).reshape(batch, out_len, kernel_size * channels)
    return cols, out_len, left


def conv1d_forward(
    inputs: np.ndarray,
    weights: np.ndarray,
    bias: np.ndarray,
    stride: int = 1,
    padding: str = "same",
) -> np.ndarray:
    batch_in, single = _as_batch(inputs)
    kernel_size, c_in, c_out = weights.shape
    if batch_in.shape[2] != c_in:
        raise ShapeError(
            f"input has {batch_in.shape[2]} channels but weights expect {c_in}"
        )
    if bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} does not match Cout={c_out}")
    cols, _, _ = _windows(batch_in, kernel_size, stride, padding)
    out = cols @ weights.reshape(kernel_size * c_in, c_out) + bias
    return out[0] if single else out


def conv1d_backward(
    inputs: np.ndarray,
    weights: np.ndarray,
    upstream: np.ndarray,
    stride: int = 1,
    padding: str = "same",
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv1d_forward w.r.t. (inputs, weights, bias)."""
    batch_in, single = _as_batch(inputs)
    batch_up, _ = _as_batch(upstream)
    kernel_size, c_in, c_out = weights.shape
    if batch_in.shape[2] != c_in:
        raise ShapeError(
            f"input has {batch_in.shape[2]} channels but weights expect {c_in}"
        )
    batch, length, _ = batch_in.shape
    cols, out_len, left = _windows(batch_in, kernel_size, stride, padding)
    if batch_up.shape != (batch, out_len, c_out):
        raise ShapeError(
            f"upstream gradient shape {batch_up.shape} does not match forward "
            f"output shape {(batch, out_len, c_out)}"
        )

    flat_cols = cols.reshape(batch * out_len, kernel_size * c_in)
    flat_up = batch_up.reshape(batch * out_len, c_out)
    grad_weights = (flat_cols.T @ flat_up).reshape(kernel_size, c_in, c_out)
    grad_bias = flat_up.sum(axis=0)

    grad_cols = (flat_up @ weights.reshape(kernel_size * c_in, c_out).T).reshape(
        batch, out_len, kernel_size, c_in
    )
    _, _, right = conv1d_geometry(length, kernel_size, stride, padding)
    grad_padded = np.zeros((batch, length + left + right, c_in))
    span = (out_len - 1) * stride + 1
    for k in range(kernel_size):
        grad_padded[:, k : k + span : stride] += grad_cols[:, :, k]
    grad_inputs = grad_padded[:, left : left + length]

    if single:
        grad_inputs = grad_inputs[0]
    return grad_inputs, grad_weights, grad_bias


def dense_forward(inputs: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if inputs.shape[-1] != weights.shape[0]:
        raise ShapeError(
            f"input width {inputs.shape[-1]} does not match weights {weights.shape}"
        )
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} does not match weights {weights.shape}")
    return inputs @ weights + bias


def dense_backward(
    inputs: np.ndarray, weights: np.ndarray, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if upstream.shape != inputs.shape[:-1] + (weights.shape[1],):
        raise ShapeError(
            f"upstream gradient shape {upstream.shape} does not match forward output"
        )
    flat_in = inputs.reshape(-1, weights.shape[0])
    flat_up = upstream.reshape(-1, weights.shape[1])
    return upstream @ weights.T, flat_in.T @ flat_up, flat_up.sum(axis=0)


def relu(inputs: np.ndarray) -> np.ndarray:
    return np.maximum(inputs, 0.0)


def relu_backward(inputs: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    # derivative at exactly 0 is 0
    return np.where(inputs > 0.0, upstream, 0.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(
    logits: np.ndarray, targets: np.ndarray, frame_mask: np.ndarray | None = None
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over unmasked frames and its gradient w.r.t. logits.

    `logits` is (..., C); `targets` and `frame_mask` have the leading shape.
    Masked frames contribute neither loss nor gradient.
    """
    num_classes = logits.shape[-1]
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(
            f"targets shape {targets.shape} does not match logits {logits.shape}"
        )
    if frame_mask is None:
        frame_mask = np.ones(targets.shape, dtype=bool)
    frame_mask = np.asarray(frame_mask, dtype=bool)
    if frame_mask.shape != targets.shape:
        raise ShapeError(
            f"frame mask shape {frame_mask.shape} does not match targets {targets.shape}"
        )
    count = int(frame_mask.sum())
    if count == 0:
        raise DegenerateInputError("every frame is masked; cross-entropy is undefined")
    active = targets[frame_mask]
    if active.min() < 0 or active.max() >= num_classes:
        raise LabelError(
            f"targets must lie in [0, {num_classes}), got range "
            f"[{active.min()}, {active.max()}]"
        )

    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_norm
    safe_targets = np.where(frame_mask, targets, 0)
    picked = np.take_along_axis(log_probs, safe_targets[..., None], axis=-1)[..., 0]
    loss = float(-(picked * frame_mask).sum() / count)

    grad = np.exp(log_probs)
    np.put_along_axis(
        grad,
        safe_targets[..., None],
        np.take_along_axis(grad, safe_targets[..., None], axis=-1) - 1.0,
        axis=-1,
    )
    grad *= frame_mask[..., None] / count
    return loss, grad
