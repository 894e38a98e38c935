"""Toy split segmentation network with hand-written gradients.

The network is cut into three sub-models, matching where each part runs
in split learning:

* front-end (client): conv3x3 C_in->8, ReLU
* server: conv3x3 8->16, ReLU, conv3x3 16->8, ReLU
* back-end (client): conv3x3 8->C, per-pixel softmax

All convolutions are stride 1 with replicate padding, so activations keep
the input's spatial size. Tensors are laid out ``(batch, channel, row, col)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import CacheError, ShapeError

STAGES = ("fe", "s", "be")
_version_counter = itertools.count(1)


@dataclass(frozen=True)
class Architecture:
    in_channels: int = 1
    n_classes: int = 3
    fe_width: int = 8
    s_width: int = 16

    def layer_shapes(self) -> dict[str, list[tuple[int, int]]]:
        """(out, in) channel pairs of every conv, per stage."""
        return {
            "fe": [(self.fe_width, self.in_channels)],
            "s": [(self.s_width, self.fe_width), (self.fe_width, self.s_width)],
            "be": [(self.n_classes, self.fe_width)],
        }


@dataclass
class SplitParams:
    """Weights of the three sub-models as flat lists ``[W0, b0, W1, b1, ...]``.

    Conv weights have shape ``(out, in, 3, 3)``. ``version`` changes whenever
    the arrays are replaced or updated in place through this module, which
    lets a backward pass detect that its forward cache went stale.
    """

    fe: list[np.ndarray]
    s: list[np.ndarray]
    be: list[np.ndarray]
    version: int = dc_field(default_factory=lambda: next(_version_counter))

    def stage(self, name: str) -> list[np.ndarray]:
        return getattr(self, name)

    def tensors(self) -> list[np.ndarray]:
        return [*self.fe, *self.s, *self.be]

    def copy(self) -> "SplitParams":
        return SplitParams([a.copy() for a in self.fe], [a.copy() for a in self.s],
                           [a.copy() for a in self.be])

    def touch(self) -> None:
        self.version = next(_version_counter)

    def map(self, fn) -> "SplitParams":
        return SplitParams([fn(a) for a in self.fe], [fn(a) for a in self.s], [fn(a) for a in self.be])

    @staticmethod
    def like(template: "SplitParams", flat: list[np.ndarray]) -> "SplitParams":
        n_fe, n_s = len(template.fe), len(template.s)
        return SplitParams(list(flat[:n_fe]), list(flat[n_fe:n_fe + n_s]), list(flat[n_fe + n_s:]))

    def allclose(self, other: "SplitParams", **kw) -> bool:
        return all(np.allclose(a, b, **kw) for a, b in zip(self.tensors(), other.tensors()))


def init_params(arch: Architecture, seed: int) -> SplitParams:
    """He-normal conv weights, zero biases."""
    rng = np.random.default_rng(seed)
    stages = {}
    for name, layers in arch.layer_shapes().items():
        tensors = []
        for c_out, c_in in layers:
            std = np.sqrt(2.0 / (9 * c_in))
            tensors += [rng.normal(0.0, std, size=(c_out, c_in, 3, 3)), np.zeros(c_out)]
        stages[name] = tensors
    return SplitParams(**stages)


def zeros_like(params: SplitParams) -> SplitParams:
    return params.map(np.zeros_like)


@dataclass
class SampleBatch:
    images: np.ndarray  # (B, C_in, H, W)
    labels: np.ndarray  # (B, H, W) integer class ids
    sample_ids: list[int]

    def __post_init__(self):
        if self.images.ndim != 4 or self.labels.ndim != 3:
            raise ShapeError("images must be (B, C, H, W) and labels (B, H, W)")
        if self.images.shape[0] != self.labels.shape[0] or self.images.shape[2:] != self.labels.shape[1:]:
            raise ShapeError(f"images {self.images.shape} and labels {self.labels.shape} are not aligned")
        if len(self.sample_ids) != self.images.shape[0]:
            raise ShapeError("one sample id per image is required")

    def __len__(self):
        return self.images.shape[0]

    def subset(self, idx) -> "SampleBatch":
        idx = list(idx)
        return SampleBatch(self.images[idx], self.labels[idx], [self.sample_ids[i] for i in idx])

    def with_labels(self, labels: np.ndarray) -> "SampleBatch":
        return SampleBatch(self.images, labels, list(self.sample_ids))


# --------------------------------------------------------------------------
# layer primitives
#
# Internally activations are channel-major, ``(channel, batch, row, col)``,
# which turns every 3x3 convolution into one matrix product over the padded
# input followed by nine shifted adds.

def _pad(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")


def _unpad_grad(dxp: np.ndarray) -> np.ndarray:
    """Adjoint of replicate padding: fold the halo back onto the border."""
    dx = dxp[:, :, 1:-1, 1:-1].copy()
    dx[:, :, 0, :] += dxp[:, :, 0, 1:-1]
    dx[:, :, -1, :] += dxp[:, :, -1, 1:-1]
    dx[:, :, :, 0] += dxp[:, :, 1:-1, 0]
    dx[:, :, :, -1] += dxp[:, :, 1:-1, -1]
    dx[:, :, 0, 0] += dxp[:, :, 0, 0]
    dx[:, :, 0, -1] += dxp[:, :, 0, -1]
    dx[:, :, -1, 0] += dxp[:, :, -1, 0]
    dx[:, :, -1, -1] += dxp[:, :, -1, -1]
    return dx


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """3x3 stride-1 cross-correlation with replicate padding.

    ``x`` is channel-major ``(C_in, B, H, W)``. Returns the output and the
    padded input, which ``conv_backward`` needs.
    """
    c_in, bsz, h, wd = x.shape
    c_out = w.shape[0]
    if w.shape[1:] != (c_in, 3, 3):
        raise ShapeError(f"weight {w.shape} does not accept {c_in} input channels")
    xp = _pad(x)
    w_all = w.transpose(2, 3, 0, 1).reshape(9 * c_out, c_in).astype(x.dtype, copy=False)
    y = (w_all @ xp.reshape(c_in, -1)).reshape(3, 3, c_out, bsz, h + 2, wd + 2)
    out = np.empty((c_out, bsz, h, wd), dtype=x.dtype)
    out[:] = b.astype(x.dtype, copy=False)[:, None, None, None]
    for ki in range(3):
        for kj in range(3):
            out += y[ki, kj, :, :, ki:ki + h, kj:kj + wd]
    return out, xp


def conv_backward(dout: np.ndarray, xp: np.ndarray, w: np.ndarray, need_dx: bool = True):
    """Gradients of ``conv_forward`` w.r.t. its input, weight and bias."""
    c_out, bsz, h, wd = dout.shape
    c_in = xp.shape[0]
    d2 = dout.reshape(c_out, -1)
    cols = np.empty((c_in, 3, 3, bsz, h, wd), dtype=xp.dtype)
    for ki in range(3):
        for kj in range(3):
            cols[:, ki, kj] = xp[:, :, ki:ki + h, kj:kj + wd]
    dw = (d2 @ cols.reshape(c_in * 9, -1).T).reshape(w.shape)
    db = d2.sum(axis=1)
    if not need_dx:
        return None, dw, db
    w_all = w.transpose(2, 3, 1, 0).reshape(9 * c_in, c_out).astype(dout.dtype, copy=False)
    z = (w_all @ d2).reshape(3, 3, c_in, bsz, h, wd)
    dxp = np.zeros((c_in, bsz, h + 2, wd + 2), dtype=dout.dtype)
    for ki in range(3):
        for kj in range(3):
            dxp[:, :, ki:ki + h, kj:kj + wd] += z[ki, kj]
    return _unpad_grad(dxp), dw, db


def softmax(z: np.ndarray, axis: int = 1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(p: np.ndarray, dp: np.ndarray, axis: int = 1) -> np.ndarray:
    return p * (dp - (p * dp).sum(axis=axis, keepdims=True))


# --------------------------------------------------------------------------
# stages

@dataclass
class StageCache:
    stage: str
    params_id: int
    version: int
    inputs: list = dc_field(default_factory=list)   # padded input of every conv
    outputs: list = dc_field(default_factory=list)  # post-activation output of every conv


def _run_stage(name: str, tensors: list[np.ndarray], x: np.ndarray, cache: StageCache | None):
    for i in range(len(tensors) // 2):
        z, xp = conv_forward(x, tensors[2 * i], tensors[2 * i + 1])
        x = softmax(z, axis=0) if name == "be" else np.maximum(z, 0)
        if cache is not None:
            cache.inputs.append(xp)
            cache.outputs.append(x)
    return x


def stage_forward(params: SplitParams, name: str, x: np.ndarray):
    """Run one sub-model on a channel-major tensor; returns ``(output, cache)``."""
    cache = StageCache(name, id(params), params.version)
    return _run_stage(name, params.stage(name), x, cache), cache


def stage_backward(params: SplitParams, cache: StageCache, dout: np.ndarray, need_dx: bool = True):
    """Gradient of one sub-model; returns ``(d_input, grads)``.

    Raises:
        CacheError: if ``params`` changed since the forward pass that built
            ``cache``.
    """
    if cache.params_id != id(params) or cache.version != params.version:
        raise CacheError(f"stale {cache.stage} cache: parameters changed after the forward pass")
    tensors = params.stage(cache.stage)
    grads = [None] * len(tensors)
    d = dout
    for i in reversed(range(len(tensors) // 2)):
        out = cache.outputs[i]
        if cache.stage == "be":
            d = softmax_backward(out, d, axis=0)
        else:
            d = d * (out > 0)
        d, dw, db = conv_backward(d, cache.inputs[i], tensors[2 * i], need_dx=need_dx or i > 0)
        grads[2 * i], grads[2 * i + 1] = dw.astype(np.float64), db.astype(np.float64)
    return d, grads


@dataclass
class ForwardCache:
    fe: StageCache
    s: StageCache
    be: StageCache


def _channel_major(images: np.ndarray) -> np.ndarray:
    if images.ndim != 4 or images.shape[0] == 0:
        raise ShapeError(f"expected a non-empty (B, C, H, W) batch, got {images.shape}")
    return np.ascontiguousarray(images.transpose(1, 0, 2, 3))


def forward_split(params: SplitParams, images: np.ndarray, link=None):
    """Front-end, server and back-end in sequence.

    ``link``, when given, is a callable applied to every activation tensor
    that crosses the client/server boundary (e.g. a wire round trip).

    Returns:
        (probabilities of shape (B, C, H, W), ForwardCache)
    """
    x = _channel_major(images)
    a_fe, c_fe = stage_forward(params, "fe", x)
    if link is not None:
        a_fe = link(a_fe)
    a_s, c_s = stage_forward(params, "s", a_fe)
    if link is not None:
        a_s = link(a_s)
    probs, c_be = stage_forward(params, "be", a_s)
    return np.ascontiguousarray(probs.transpose(1, 0, 2, 3)), ForwardCache(c_fe, c_s, c_be)


def forward_monolithic(params: SplitParams, images: np.ndarray) -> np.ndarray:
    """Same network as one loop over all layers, without stage boundaries."""
    x = _channel_major(images)
    layers = [(t, False) for t in (params.fe, params.s)] + [(params.be, True)]
    for tensors, last in layers:
        for i in range(len(tensors) // 2):
            z, _ = conv_forward(x, tensors[2 * i], tensors[2 * i + 1])
            x = softmax(z, axis=0) if last else np.maximum(z, 0)
    return np.ascontiguousarray(x.transpose(1, 0, 2, 3))


def backward_split(params: SplitParams, cache: ForwardCache, dprobs: np.ndarray, link=None) -> SplitParams:
    """Back-propagate ``dL/dprobs`` (batch-major) through back-end, server and front-end."""
    d = np.ascontiguousarray(dprobs.transpose(1, 0, 2, 3))
    d_s, g_be = stage_backward(params, cache.be, d)
    if link is not None:
        d_s = link(d_s)
    d_fe, g_s = stage_backward(params, cache.s, d_s)
    if link is not None:
        d_fe = link(d_fe)
    _, g_fe = stage_backward(params, cache.fe, d_fe, need_dx=False)
    return SplitParams(g_fe, g_s, g_be)


def add_grads(a: SplitParams, b: SplitParams) -> SplitParams:
    return SplitParams.like(a, [x + y for x, y in zip(a.tensors(), b.tensors())])


# --------------------------------------------------------------------------
# losses

def one_hot(labels: np.ndarray, n_classes: int, dtype=np.float64) -> np.ndarray:
    return (labels[:, None] == np.arange(n_classes)[None, :, None, None]).astype(dtype)


def region_loss_per_sample(probs: np.ndarray, labels: np.ndarray, smooth: float = 1.0):
    """Soft multiclass Dice loss per sample and its gradient w.r.t. ``probs``.

    ``loss_k = 1 - mean_c (2 sum(p*y) + s) / (sum(p) + sum(y) + s)``.

    Returns:
        (losses of shape (B,), dloss_k/dprobs of shape (B, C, H, W))
    """
    n_classes = probs.shape[1]
    y = one_hot(labels, n_classes, probs.dtype)
    inter = (probs * y).sum(axis=(2, 3))
    denom = probs.sum(axis=(2, 3)) + y.sum(axis=(2, 3)) + smooth
    num = 2.0 * inter + smooth
    losses = 1.0 - (num / denom).mean(axis=1)
    grad = -(2.0 * y / denom[:, :, None, None] - (num / denom ** 2)[:, :, None, None]) / n_classes
    return losses.astype(np.float64), grad


def consistency_loss(student_probs: np.ndarray, teacher_probs: np.ndarray):
    """Mean squared probability difference; the teacher side is a constant.

    Returns:
        (loss, dloss/dstudent_probs)
    """
    if student_probs.shape != teacher_probs.shape:
        raise ShapeError("student and teacher outputs differ in shape")
    diff = student_probs - teacher_probs
    return float(np.mean(diff.astype(np.float64) ** 2)), (2.0 / diff.size) * diff


def perturb(images: np.ndarray, seed, noise_frac: float = 0.05, shift: float = 0.1) -> np.ndarray:
    """Photometric perturbation: Gaussian pixel noise plus a brightness offset.

    Noise std is ``noise_frac`` times each image's value range and the
    offset is uniform in ``[-shift, shift]`` per image. Geometry is untouched
    so outputs on perturbed and original images stay pixel-aligned.
    """
    rng = np.random.default_rng(seed)
    axes = tuple(range(1, images.ndim))
    span = images.max(axis=axes, keepdims=True) - images.min(axis=axes, keepdims=True)
    noise = rng.standard_normal(images.shape) * (noise_frac * span)
    offset = rng.uniform(-shift, shift, size=(images.shape[0],) + (1,) * (images.ndim - 1))
    if noise_frac == 0 and shift == 0:
        return images.copy()
    return (images + noise + offset).astype(images.dtype)


# --------------------------------------------------------------------------
# optimisation

class Adam:
    """Adam over a list of arrays, updating them in place."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float | None = None) -> None:
        if len(params) != len(grads):
            raise ShapeError("parameter and gradient lists differ in length")
        lr = self.lr if lr is None else lr
        if self.m is None:
            self.m = [np.zeros_like(p, dtype=np.float64) for p in params]
            self.v = [np.zeros_like(p, dtype=np.float64) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if p.shape != g.shape:
                raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}


def sgd_adam_step(params: SplitParams, grads: SplitParams, opt: Adam, lr: float | None = None) -> SplitParams:
    opt.step(params.tensors(), grads.tensors(), lr)
    params.touch()
    return params


def ema_update(teacher: SplitParams, student: SplitParams, decay: float = 0.99) -> SplitParams:
    """In-place ``teacher <- decay * teacher + (1 - decay) * student``."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError("decay must lie in [0, 1]")
    for t, s in zip(teacher.tensors(), student.tensors()):
        if t.shape != s.shape:
            raise ShapeError("teacher and student shapes differ")
        t *= decay
        t += (1.0 - decay) * s
    teacher.touch()
    return teacher
