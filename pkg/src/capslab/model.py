"""Capsule classifier with a conv stem, one routed capsule layer and a
reconstruction decoder, all with hand-written backward passes.

Two transform modes: per-capsule transform matrices [N, M, d_out, d_in]
(every low-level capsule owns one matrix per class) or a single shared stack
[M, d_out, d_in] applied to all low-level capsules. The shared mode is the
affine-robust variant; it stores exactly N-fold fewer transform scalars.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .ops import (ShapeError, batched_matvec, batched_matvec_backward,
                  conv2d, conv2d_backward, relu, relu_backward, sigmoid,
                  sigmoid_backward, squash, squash_backward, vec_norm,
                  vec_norm_backward)
from .routing import (CouplingState, RoutingConfig, route_dynamic,
                      route_trainable, route_trainable_backward,
                      route_uniform, route_uniform_backward, routing_backward)

# margin-loss constants of the standard capsule classifier
MARGIN_POS = 0.9
MARGIN_NEG = 0.1
MARGIN_LAMBDA = 0.5


@dataclass
class ModelConfig:
    input_hw: int = 28
    conv1_channels: int = 256
    conv_kernel: int = 9
    primary_caps_channels: int = 32
    primary_caps_dim: int = 8       # d_in
    class_count: int = 10           # M
    class_caps_dim: int = 16        # d_out
    shared_transform: bool = False
    decoder_hidden: tuple = (512, 1024)
    recon_loss_weight: float = 0.0005
    squash_epsilon: float = 1e-8

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        for name in ("input_hw", "conv1_channels", "conv_kernel",
                     "primary_caps_channels", "primary_caps_dim",
                     "class_caps_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.conv1_out_hw < self.conv_kernel:
            raise ValueError(
                f"input_hw={self.input_hw} too small for two "
                f"{self.conv_kernel}x{self.conv_kernel} conv layers")

    @property
    def conv1_out_hw(self) -> int:
        return self.input_hw - self.conv_kernel + 1

    @property
    def primary_grid(self) -> int:
        # second conv runs at stride 2
        return (self.conv1_out_hw - self.conv_kernel) // 2 + 1

    @property
    def primary_caps_count(self) -> int:
        """N: fully determined by input size and the conv geometry."""
        return self.primary_caps_channels * self.primary_grid ** 2


def transform_param_count(config: ModelConfig) -> int:
    """Number of scalars in the capsule transform for the configured mode."""
    n = config.class_count * config.primary_caps_dim * config.class_caps_dim
    if not config.shared_transform:
        n *= config.primary_caps_count
    return n


def init_params(config: ModelConfig, routing: RoutingConfig,
                rng: np.random.Generator, dtype=np.float64) -> dict:
    """Fresh parameter tensors; uniform fan-in init, zero biases/logits."""
    k = config.conv_kernel
    d_in, d_out, M = (config.primary_caps_dim, config.class_caps_dim,
                      config.class_count)
    N = config.primary_caps_count
    conv2_ch = config.primary_caps_channels * d_in
    h1, h2 = config.decoder_hidden
    dec_in = M * d_out
    out_px = config.input_hw ** 2

    def u(shape, fan_in):
        a = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-a, a, size=shape).astype(dtype)

    params = {
        "conv1_kernels": u((config.conv1_channels, 1, k, k), k * k),
        "conv1_bias": np.zeros(config.conv1_channels, dtype=dtype),
        "conv2_kernels": u((conv2_ch, config.conv1_channels, k, k),
                           config.conv1_channels * k * k),
        "conv2_bias": np.zeros(conv2_ch, dtype=dtype),
        "transform": u((M, d_out, d_in) if config.shared_transform
                       else (N, M, d_out, d_in), d_in),
        "dec1_w": u((h1, dec_in), dec_in),
        "dec1_b": np.zeros(h1, dtype=dtype),
        "dec2_w": u((h2, h1), h1),
        "dec2_b": np.zeros(h2, dtype=dtype),
        "dec3_w": u((out_px, h2), h2),
        "dec3_b": np.zeros(out_px, dtype=dtype),
    }
    if routing.kind == "trainable":
        params["prior_logits"] = np.zeros((N, M), dtype=dtype)
    return params


# ---------------------------------------------------------------------------
# layer pieces
# ---------------------------------------------------------------------------

def primary_caps_reshape(conv_features: np.ndarray,
                         config: ModelConfig) -> np.ndarray:
    """Group conv channels into capsule vectors: [..., C, g, g] -> [..., N, d_in]."""
    d_in = config.primary_caps_dim
    pc = config.primary_caps_channels
    single = conv_features.ndim == 3
    f = conv_features[None] if single else conv_features
    B, C, g1, g2 = f.shape
    if C % d_in != 0 or C != pc * d_in:
        raise ShapeError(
            f"primary capsules: channel count {C} is not "
            f"primary_caps_channels*{d_in}={pc * d_in}")
    u = f.reshape(B, pc, d_in, g1, g2).transpose(0, 1, 3, 4, 2) \
         .reshape(B, pc * g1 * g2, d_in)
    return u[0] if single else u


def primary_caps_reshape_backward(grad_u, conv_shape, config):
    d_in = config.primary_caps_dim
    pc = config.primary_caps_channels
    single = len(conv_shape) == 3
    shape = (1,) + tuple(conv_shape) if single else tuple(conv_shape)
    B, C, g1, g2 = shape
    g = grad_u.reshape(B, pc, g1, g2, d_in).transpose(0, 1, 4, 2, 3) \
              .reshape(shape)
    return g[0] if single else g


def primary_caps_forward(conv_features: np.ndarray,
                         config: ModelConfig) -> np.ndarray:
    """Reshape the second conv layer's feature maps into squashed capsules."""
    return squash(primary_caps_reshape(conv_features, config),
                  config.squash_epsilon)


def predict_votes(u: np.ndarray, transform: np.ndarray) -> np.ndarray:
    """Votes u_hat[..., N, M, d_out] from capsules u[..., N, d_in].

    ``transform`` is [N, M, d_out, d_in] (per-capsule) or [M, d_out, d_in]
    (shared across all low-level capsules).
    """
    if transform.shape[-1] != u.shape[-1]:
        raise ShapeError(f"predict_votes: transform d_in={transform.shape[-1]} "
                         f"!= capsule dim {u.shape[-1]}")
    single = u.ndim == 2
    ub = u[None] if single else u
    B, N, d_in = ub.shape
    if transform.ndim == 4:
        if transform.shape[0] != N:
            raise ShapeError(f"predict_votes: transform N={transform.shape[0]} "
                             f"!= capsule count {N}")
        M, d_out = transform.shape[1], transform.shape[2]
        # one small GEMM per low-level capsule: [M*d_out, d_in] @ [d_in, B]
        W2 = transform.reshape(N, M * d_out, d_in)
        out = np.matmul(W2, ub.transpose(1, 2, 0))          # [N, M*d_out, B]
        out = out.transpose(2, 0, 1).reshape(B, N, M, d_out)
    elif transform.ndim == 3:
        M, d_out = transform.shape[0], transform.shape[1]
        out = (ub.reshape(B * N, d_in) @ transform.reshape(M * d_out, d_in).T)
        out = out.reshape(B, N, M, d_out)
    else:
        raise ShapeError(f"predict_votes: transform must have 3 or 4 axes, "
                         f"got shape {transform.shape}")
    if single:
        out = out[0]
    return ops.assert_finite("predict_votes", out)


def predict_votes_backward(u, transform, grad_votes):
    single = u.ndim == 2
    ub = u[None] if single else u
    gb = grad_votes[None] if single else grad_votes
    B, N, d_in = ub.shape
    if transform.ndim == 4:
        M, d_out = transform.shape[1], transform.shape[2]
        g2 = np.ascontiguousarray(gb.transpose(1, 2, 3, 0)) \
            .reshape(N, M * d_out, B)
        ut = ub.transpose(1, 0, 2)                           # [N, B, d_in]
        grad_W = np.matmul(g2, ut).reshape(transform.shape)
        W2t = transform.reshape(N, M * d_out, d_in).transpose(0, 2, 1)
        grad_u = np.matmul(W2t, g2).transpose(2, 0, 1)       # [B, N, d_in]
    else:
        M, d_out = transform.shape[0], transform.shape[1]
        g2 = gb.reshape(B * N, M * d_out)
        grad_W = (g2.T @ ub.reshape(B * N, d_in)).reshape(transform.shape)
        grad_u = (g2 @ transform.reshape(M * d_out, d_in)).reshape(B, N, d_in)
    if single:
        grad_u = grad_u[0]
    return grad_W, grad_u


def margin_loss(class_lengths: np.ndarray, target: int) -> float:
    """Two-sided margin loss over class capsule lengths for one example."""
    M = class_lengths.shape[-1]
    if not 0 <= int(target) < M:
        raise ValueError(f"target label {target} out of range [0, {M})")
    hot = np.zeros(M, dtype=class_lengths.dtype)
    hot[int(target)] = 1.0
    return float(_margin_loss_multi(class_lengths, hot))


def margin_loss_backward(class_lengths: np.ndarray, target: int) -> np.ndarray:
    M = class_lengths.shape[-1]
    if not 0 <= int(target) < M:
        raise ValueError(f"target label {target} out of range [0, {M})")
    hot = np.zeros(M, dtype=class_lengths.dtype)
    hot[int(target)] = 1.0
    return _margin_loss_multi_backward(class_lengths, hot)


def _margin_loss_multi(lengths, target_hot):
    # lengths [..., M], target_hot [..., M] in {0,1}; returns [...]
    pos = np.maximum(0.0, MARGIN_POS - lengths)
    neg = np.maximum(0.0, lengths - MARGIN_NEG)
    per_class = target_hot * pos * pos \
        + MARGIN_LAMBDA * (1.0 - target_hot) * neg * neg
    return per_class.sum(axis=-1)


def _margin_loss_multi_backward(lengths, target_hot):
    pos = np.maximum(0.0, MARGIN_POS - lengths)
    neg = np.maximum(0.0, lengths - MARGIN_NEG)
    return -2.0 * target_hot * pos + 2.0 * MARGIN_LAMBDA * (1.0 - target_hot) * neg


def one_hot(labels, M, dtype=np.float64):
    labels = np.asarray(labels)
    out = np.zeros(labels.shape + (M,), dtype=dtype)
    np.put_along_axis(out, labels[..., None].astype(np.int64), 1.0, axis=-1)
    return out


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------

def _fc(x, W, b):
    return batched_matvec(W, x) + b


def _fc_backward(x, W, grad_out):
    # einsum keeps the weight-grad contraction out of a [B, out, in] temp
    grad_W = np.einsum("...o,...i->oi", grad_out, x, optimize=True)
    grad_b = grad_out.reshape(-1, grad_out.shape[-1]).sum(axis=0)
    grad_x = np.einsum("oi,...o->...i", W, grad_out, optimize=True)
    return grad_W, grad_b, grad_x


@dataclass
class DecoderCache:
    masked: np.ndarray
    dec_in: np.ndarray
    h1_pre: np.ndarray
    h1: np.ndarray
    h2_pre: np.ndarray
    h2: np.ndarray
    recon: np.ndarray
    mask_hot: np.ndarray


def decoder_forward(v, mask_labels, params, config: ModelConfig):
    """Mask all but one class capsule, then decode to a flat [0,1] image."""
    M, d_out = config.class_count, config.class_caps_dim
    mask_hot = one_hot(mask_labels, M, dtype=v.dtype)
    masked = v * mask_hot[..., None]
    dec_in = masked.reshape(masked.shape[:-2] + (M * d_out,))
    h1_pre = _fc(dec_in, params["dec1_w"], params["dec1_b"])
    h1 = relu(h1_pre)
    h2_pre = _fc(h1, params["dec2_w"], params["dec2_b"])
    h2 = relu(h2_pre)
    out_pre = _fc(h2, params["dec3_w"], params["dec3_b"])
    recon = sigmoid(out_pre)
    return recon, DecoderCache(masked, dec_in, h1_pre, h1, h2_pre, h2,
                               recon, mask_hot)


def decoder_backward(dcache: DecoderCache, params, config: ModelConfig,
                     grad_recon):
    grads = {}
    g = sigmoid_backward(dcache.recon, grad_recon)
    grads["dec3_w"], grads["dec3_b"], g = _fc_backward(dcache.h2,
                                                       params["dec3_w"], g)
    g = relu_backward(dcache.h2_pre, g)
    grads["dec2_w"], grads["dec2_b"], g = _fc_backward(dcache.h1,
                                                       params["dec2_w"], g)
    g = relu_backward(dcache.h1_pre, g)
    grads["dec1_w"], grads["dec1_b"], g = _fc_backward(dcache.dec_in,
                                                       params["dec1_w"], g)
    M, d_out = config.class_count, config.class_caps_dim
    grad_v = g.reshape(g.shape[:-1] + (M, d_out)) * dcache.mask_hot[..., None]
    return grads, grad_v


def reconstruction_decoder(v, mask_label: int, params, config: ModelConfig,
                           input_image):
    """Decode one capsule activity vector; returns (image, sum-squared error)."""
    if not 0 <= int(mask_label) < config.class_count:
        raise ValueError(f"mask label {mask_label} out of range "
                         f"[0, {config.class_count})")
    recon, _ = decoder_forward(v, np.asarray(int(mask_label)), params, config)
    sse = float(((recon - np.asarray(input_image).reshape(-1)) ** 2).sum())
    return recon, sse


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------

@dataclass
class ForwardCache:
    """All activations the backward pass needs, for a batch of images."""
    images: np.ndarray               # [B, H, W] floats in [0, 1]
    conv1_pre: np.ndarray
    conv1_act: np.ndarray
    conv2_pre: np.ndarray
    u_pre: np.ndarray                # [B, N, d_in] before squash
    u: np.ndarray
    votes: np.ndarray                # [B, N, M, d_out]
    coupling: np.ndarray             # final coefficients [B or -, N, M]
    routing_state: CouplingState | None
    v: np.ndarray                    # [B, M, d_out]
    lengths: np.ndarray              # [B, M]
    decoder: DecoderCache | None
    mask_labels: np.ndarray | None
    targets: np.ndarray | None = None
    target_hot: np.ndarray | None = None
    margin: np.ndarray | None = None      # per example
    recon_sse: np.ndarray | None = None   # per example
    total_loss: float | None = None
    recon_enabled: bool = True


def forward_batch(images, params, config: ModelConfig, routing: RoutingConfig,
                  targets=None, targets2=None) -> ForwardCache:
    """Forward pass over a batch [B, H, W] of [0,1] images.

    With ``targets`` the decoder is masked by ground truth and the losses are
    filled in; otherwise the mask follows the argmax prediction. A second
    label array switches the margin loss to multi-target mode and disables
    the reconstruction head (overlapping-digit sets have no single source
    image to reconstruct).
    """
    if images.ndim != 3 or images.shape[1] != config.input_hw \
            or images.shape[2] != config.input_hw:
        raise ShapeError(f"forward: images shape {images.shape} does not match "
                         f"input_hw={config.input_hw}")
    x = images[:, None, :, :]
    conv1_pre = conv2d(x, params["conv1_kernels"], params["conv1_bias"], 1)
    conv1_act = relu(conv1_pre)
    conv2_pre = conv2d(conv1_act, params["conv2_kernels"],
                       params["conv2_bias"], 2)
    u_pre = primary_caps_reshape(conv2_pre, config)
    u = squash(u_pre, config.squash_epsilon)
    votes = predict_votes(u, params["transform"])

    state = None
    if routing.kind in ("dynamic", "rolled"):
        v, state = route_dynamic(votes, routing,
                                 squash_epsilon=config.squash_epsilon)
        coupling = state.coeffs[-1]
    elif routing.kind == "trainable":
        v, coupling = route_trainable(votes, params["prior_logits"],
                                      config.squash_epsilon)
    else:
        v, coupling = route_uniform(votes, config.squash_epsilon)
    lengths = vec_norm(v)

    recon_enabled = targets2 is None
    cache = ForwardCache(images=images, conv1_pre=conv1_pre,
                         conv1_act=conv1_act, conv2_pre=conv2_pre,
                         u_pre=u_pre, u=u, votes=votes, coupling=coupling,
                         routing_state=state, v=v, lengths=lengths,
                         decoder=None, mask_labels=None,
                         recon_enabled=recon_enabled)

    if targets is not None:
        targets = np.asarray(targets)
        hot = one_hot(targets, config.class_count, dtype=v.dtype)
        if targets2 is not None:
            hot = np.maximum(hot, one_hot(np.asarray(targets2),
                                          config.class_count, dtype=v.dtype))
        cache.targets = targets
        cache.target_hot = hot
        cache.margin = _margin_loss_multi(lengths, hot)
        mask_labels = targets
    else:
        mask_labels = lengths.argmax(axis=-1)
    cache.mask_labels = mask_labels

    if recon_enabled:
        recon, dcache = decoder_forward(v, mask_labels, params, config)
        cache.decoder = dcache
        flat = images.reshape(images.shape[0], -1).astype(v.dtype)
        cache.recon_sse = ((recon - flat) ** 2).sum(axis=-1)
    else:
        cache.recon_sse = np.zeros(images.shape[0], dtype=v.dtype)

    if cache.margin is not None:
        cache.total_loss = float(cache.margin.mean()
                                 + config.recon_loss_weight
                                 * cache.recon_sse.mean())
    return cache


def output_caps_gradient(cache: ForwardCache, params, config: ModelConfig):
    """Gradient of the mean total loss w.r.t. the output capsules v.

    Returns (grad_v, decoder parameter grads). Requires a cache built with
    targets (training mode).
    """
    if cache.target_hot is None:
        raise ValueError("backward requires a forward pass with targets")
    B = cache.images.shape[0]
    g_len = _margin_loss_multi_backward(cache.lengths, cache.target_hot) / B
    grad_v = vec_norm_backward(cache.v, cache.lengths, g_len)
    if cache.recon_enabled:
        flat = cache.images.reshape(B, -1).astype(cache.v.dtype)
        g_recon = (2.0 * config.recon_loss_weight / B) \
            * (cache.decoder.recon - flat)
        dec_grads, grad_v_dec = decoder_backward(cache.decoder, params,
                                                 config, g_recon)
        grad_v = grad_v + grad_v_dec
    else:
        # loss does not touch the decoder; its gradients are exactly zero
        dec_grads = {name: np.zeros_like(params[name])
                     for name in ("dec1_w", "dec1_b", "dec2_w", "dec2_b",
                                  "dec3_w", "dec3_b")}
    return grad_v, dec_grads


def backward_batch(cache: ForwardCache, params, config: ModelConfig,
                   routing: RoutingConfig) -> dict:
    """Gradients of the mean total loss w.r.t. every parameter tensor."""
    grad_v, grads = output_caps_gradient(cache, params, config)

    if routing.kind in ("dynamic", "rolled"):
        mode = "unrolled" if routing.kind == "dynamic" else "rolled"
        grad_votes = routing_backward(cache.votes, cache.routing_state,
                                      grad_v, mode)
    elif routing.kind == "trainable":
        grad_votes, grads["prior_logits"] = route_trainable_backward(
            cache.votes, params["prior_logits"], grad_v,
            config.squash_epsilon)
    else:
        grad_votes = route_uniform_backward(cache.votes, grad_v,
                                            config.squash_epsilon)

    grads["transform"], grad_u = predict_votes_backward(
        cache.u, params["transform"], grad_votes)
    grad_u_pre = squash_backward(cache.u_pre, grad_u, config.squash_epsilon)
    grad_conv2_pre = primary_caps_reshape_backward(grad_u_pre,
                                                   cache.conv2_pre.shape,
                                                   config)
    grad_c1_act, grads["conv2_kernels"], grads["conv2_bias"] = conv2d_backward(
        cache.conv1_act, params["conv2_kernels"], 2, grad_conv2_pre)
    grad_c1_pre = relu_backward(cache.conv1_pre, grad_c1_act)
    _, grads["conv1_kernels"], grads["conv1_bias"] = conv2d_backward(
        cache.images[:, None], params["conv1_kernels"], 1, grad_c1_pre)
    return grads


def model_forward(image, config: ModelConfig, params, routing: RoutingConfig,
                  target=None):
    """Single-image forward: returns (class capsule lengths [M], cache)."""
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[0] == 1:
        image = image[0]
    targets = None if target is None else np.asarray([int(target)])
    cache = forward_batch(image[None], params, config, routing,
                          targets=targets)
    return cache.lengths[0], cache


def model_backward(cache: ForwardCache, params, config: ModelConfig,
                   routing: RoutingConfig, target=None) -> dict:
    """Parameter gradients for a cache produced by model_forward."""
    if cache.target_hot is None:
        if target is None:
            raise ValueError("model_backward needs a target")
        cache = forward_batch(cache.images, params, config, routing,
                              targets=np.asarray([int(target)]))
    return backward_batch(cache, params, config, routing)
