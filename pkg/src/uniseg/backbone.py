"""Desk-scale 3D encoder-decoder producing per-voxel decoder features and a
pooled global feature, with exact analytic gradients for every parameter.

The encoder is a chain of 3x3x3 convolutions (stride 2 from the second
stage on); the decoder upsamples by nearest-neighbor, concatenates the
matching encoder stage and convolves back down. LeakyReLU everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nnops
from .errors import BadPatchShape, GradShapeMismatch

DEBUG_FINITE_CHECKS = False


def _check_finite(name: str, a: np.ndarray) -> None:
    if DEBUG_FINITE_CHECKS and not np.isfinite(a).all():
        raise FloatingPointError(f"non-finite values in {name}")


@dataclass(frozen=True)
class BackboneConfig:
    channels: tuple[int, ...] = (8, 16, 32)
    decoder_channels: int = 8
    act_slope: float = 0.01

    def __post_init__(self):
        if len(self.channels) < 1 or self.decoder_channels < 1:
            raise ValueError("need >= 1 stage and decoder_channels >= 1")

    @property
    def stages(self) -> int:
        return len(self.channels)

    @property
    def global_feature_dim(self) -> int:
        """Length of the pooled feature = bottleneck channel count."""
        return self.channels[-1]

    @property
    def divisor(self) -> int:
        return 2 ** (self.stages - 1)


def param_shapes(cfg: BackboneConfig) -> dict[str, tuple[int, ...]]:
    """Named parameter layout. Encoder stage i halves resolution for i>=1;
    decoder level i consumes concat(upsampled above, encoder skip i)."""
    ch = cfg.channels
    shapes: dict[str, tuple[int, ...]] = {}
    for i in range(cfg.stages):
        cin = 1 if i == 0 else ch[i - 1]
        shapes[f"enc{i}.w"] = (ch[i], cin, 3, 3, 3)
        shapes[f"enc{i}.b"] = (ch[i],)
    if cfg.stages == 1:
        shapes["dec0.w"] = (cfg.decoder_channels, ch[0], 3, 3, 3)
        shapes["dec0.b"] = (cfg.decoder_channels,)
    else:
        for i in range(cfg.stages - 2, -1, -1):
            cout = ch[i] if i > 0 else cfg.decoder_channels
            shapes[f"dec{i}.w"] = (cout, ch[i + 1] + ch[i], 3, 3, 3)
            shapes[f"dec{i}.b"] = (cout,)
    return shapes


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """He-normal (fan-in) weights, zero biases."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = nnops.he_normal(rng, shape, fan_in)
    return params


@dataclass
class BackboneTape:
    """Everything backward needs from one forward pass."""
    cfg: BackboneConfig
    enc_ctx: list = field(default_factory=list)
    enc_mask: list = field(default_factory=list)
    enc_act: list = field(default_factory=list)
    dec_ctx: list = field(default_factory=list)   # in decoder forward order
    dec_mask: list = field(default_factory=list)
    dec_levels: list = field(default_factory=list)
    fd_shape: tuple = ()
    bottleneck_shape: tuple = ()


def forward(x: np.ndarray, params: dict[str, np.ndarray], cfg: BackboneConfig):
    """Run the backbone on one image patch.

    ``x`` is (D, H, W) or (1, D, H, W). Returns (F_D, f, tape) where F_D is
    (decoder_channels, D, H, W) and f is the pooled bottleneck feature.
    """
    if x.ndim == 3:
        x = x[None]
    dims = x.shape[1:]
    if any(n % cfg.divisor for n in dims):
        raise BadPatchShape(f"patch dims {dims} not divisible by {cfg.divisor}")

    tape = BackboneTape(cfg=cfg)
    h = np.ascontiguousarray(x, dtype=np.float64)
    for i in range(cfg.stages):
        stride = 1 if i == 0 else 2
        z, ctx = nnops.conv3d_forward(h, params[f"enc{i}.w"], params[f"enc{i}.b"], stride)
        h, mask = nnops.leaky_relu_forward(z, cfg.act_slope)
        _check_finite(f"enc{i}", h)
        tape.enc_ctx.append(ctx)
        tape.enc_mask.append(mask)
        tape.enc_act.append(h)
    bottleneck = h
    tape.bottleneck_shape = bottleneck.shape
    f = nnops.gap_forward(bottleneck)

    if cfg.stages == 1:
        z, ctx = nnops.conv3d_forward(bottleneck, params["dec0.w"], params["dec0.b"], 1)
        h, mask = nnops.leaky_relu_forward(z, cfg.act_slope)
        tape.dec_ctx.append(ctx)
        tape.dec_mask.append(mask)
        tape.dec_levels.append(0)
    else:
        for i in range(cfg.stages - 2, -1, -1):
            up = nnops.upsample2_forward(h)
            cat = nnops.concat_forward(up, tape.enc_act[i])
            z, ctx = nnops.conv3d_forward(cat, params[f"dec{i}.w"], params[f"dec{i}.b"], 1)
            h, mask = nnops.leaky_relu_forward(z, cfg.act_slope)
            _check_finite(f"dec{i}", h)
            tape.dec_ctx.append(ctx)
            tape.dec_mask.append(mask)
            tape.dec_levels.append(i)
    fd = h
    tape.fd_shape = fd.shape
    return fd, f, tape


def backward(tape: BackboneTape, params: dict[str, np.ndarray],
             grad_fd: np.ndarray, grad_f: np.ndarray | None = None):
    """Adjoint of :func:`forward`.

    Returns (grads, grad_x): parameter gradients named like ``params`` and
    the gradient wrt the input patch. ``grad_f`` backpropagates through the
    pooled feature path when given.
    """
    cfg = tape.cfg
    if grad_fd.shape != tape.fd_shape:
        raise GradShapeMismatch(f"grad_fd {grad_fd.shape} != F_D {tape.fd_shape}")
    grads: dict[str, np.ndarray] = {}
    g_enc = [None] * cfg.stages  # accumulated grads on encoder activations

    def add_enc(i, g):
        g_enc[i] = g if g_enc[i] is None else g_enc[i] + g

    gh = grad_fd
    if cfg.stages == 1:
        gz = nnops.leaky_relu_backward(tape.dec_mask[0], gh, cfg.act_slope)
        gx_in, gw, gb = nnops.conv3d_backward(tape.dec_ctx[0], params["dec0.w"], gz)
        grads["dec0.w"], grads["dec0.b"] = gw, gb
        add_enc(0, gx_in)
    else:
        # decoder levels in reverse of forward order
        for pos in range(len(tape.dec_levels) - 1, -1, -1):
            i = tape.dec_levels[pos]
            gz = nnops.leaky_relu_backward(tape.dec_mask[pos], gh, cfg.act_slope)
            gcat, gw, gb = nnops.conv3d_backward(tape.dec_ctx[pos], params[f"dec{i}.w"], gz)
            grads[f"dec{i}.w"], grads[f"dec{i}.b"] = gw, gb
            up_ch = cfg.channels[i + 1]
            g_up, g_skip = nnops.concat_backward(gcat, up_ch)
            add_enc(i, g_skip)
            gh = nnops.upsample2_backward(g_up)
        add_enc(cfg.stages - 1, gh)

    if grad_f is not None:
        if grad_f.shape != (cfg.global_feature_dim,):
            raise GradShapeMismatch(
                f"grad_f {grad_f.shape} != ({cfg.global_feature_dim},)")
        add_enc(cfg.stages - 1, nnops.gap_backward(grad_f, tape.bottleneck_shape[1:]))

    grad_x = None
    for i in range(cfg.stages - 1, -1, -1):
        gz = nnops.leaky_relu_backward(tape.enc_mask[i], g_enc[i], cfg.act_slope)
        gx_in, gw, gb = nnops.conv3d_backward(tape.enc_ctx[i], params[f"enc{i}.w"], gz)
        grads[f"enc{i}.w"], grads[f"enc{i}.b"] = gw, gb
        if i > 0:
            add_enc(i - 1, gx_in)
        else:
            grad_x = gx_in
    return grads, grad_x
