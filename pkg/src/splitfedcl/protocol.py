"""Split federated co-learning: client training, aggregation and the round loop.

Each client trains a student split network against an EMA teacher. Per
batch, samples whose student and teacher region losses both stay under the
global threshold ``tau`` count as reliable; samples above it on both sides
are unreliable and get their labels corrected where the models are
confident. The server merges client models with ratios that reward both
the amount of reliable data and its loss, and derives the next ``tau``
from the clients' loss statistics.

A plain FedAvg baseline and two ablations share the same code path.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import wire
from .errors import EmptyBatch, ShapeError
from .metrics import MetricSet, evaluate
from .nn import (Adam, Architecture, SplitParams, consistency_loss, ema_update, forward_split,
                 backward_split, init_params, perturb, region_loss_per_sample, sgd_adam_step)

log = logging.getLogger(__name__)

MODES = ("splitfed_cl", "fedavg", "no_correction", "no_consistency")
REPORT_COLUMNS = ("round", "client", "r", "d_re", "mu", "sigma", "detected_noise_ratio", "tau",
                  "gamma", "lambda", "u_un", "u_cons", "test_acc", "test_dice_loss", "test_miou")


@dataclass(frozen=True)
class ProtocolConfig:
    mode: str = "splitfed_cl"
    lr: float = 1e-4
    logit_lr: float = 1e-3
    batch_size: int = 8
    local_epochs: int = 5
    schedule_rounds: int = 50
    gamma_max: float = 5.0
    lambda_max: float = 3.0
    warmup_rounds: int = 20
    tau0: float = 10.0
    label_threshold: float = 0.9
    eta: float = 5e-4
    logit_init: float = -10.0
    ema_decay: float = 0.99
    loss_ema_decay: float = 0.9
    loss_scale_floor: float = 1e-8
    perturb_noise: float = 0.05
    perturb_shift: float = 0.1
    train_dtype: str = "float32"
    wire_activations: bool = True
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size < 1 or self.local_epochs < 1 or self.workers < 1:
            raise ValueError("batch_size, local_epochs and workers must be >= 1")
        if self.schedule_rounds < 1 or self.warmup_rounds < 1:
            raise ValueError("schedule_rounds and warmup_rounds must be >= 1")
        if not 0.0 < self.label_threshold <= 1.0:
            raise ValueError("label_threshold must lie in (0, 1]")
        if not (0.0 <= self.ema_decay <= 1.0 and 0.0 <= self.loss_ema_decay <= 1.0):
            raise ValueError("ema_decay and loss_ema_decay must lie in [0, 1]")
        if self.train_dtype not in ("float32", "float64"):
            raise ValueError("train_dtype must be float32 or float64")

    @property
    def is_fedavg(self) -> bool:
        return self.mode == "fedavg"

    @property
    def correction(self) -> bool:
        return self.mode in ("splitfed_cl", "no_consistency")

    @property
    def consistency(self) -> bool:
        return self.mode in ("splitfed_cl", "no_correction")


# --------------------------------------------------------------------------
# schedules

def warmup(t: int, warmup_rounds: int) -> float:
    """Linear ramp ``min(1, t / warmup_rounds)``."""
    if warmup_rounds < 1:
        raise ValueError("warmup_rounds must be >= 1")
    return min(1.0, t / warmup_rounds)


def schedule_step(t: int, horizon: int = 50, gamma_max: float = 5.0,
                  lambda_max: float = 3.0) -> tuple[float, float]:
    """Temperature ``gamma`` rising from 1 and slack ``lambda`` falling to 0 over ``horizon`` rounds."""
    if t < 0:
        raise ValueError("round index must be non-negative")
    frac = min(1.0, t / horizon)
    return 1.0 + (gamma_max - 1.0) * frac, lambda_max * (1.0 - frac)


def sigmoid(u: float) -> float:
    if u >= 0:
        return 1.0 / (1.0 + math.exp(-u))
    e = math.exp(u)
    return e / (1.0 + e)


# --------------------------------------------------------------------------
# per-batch pieces

def split_reliable(student_losses, teacher_losses, tau: float):
    """Partition sample indices by the threshold ``tau``.

    Returns:
        (reliable, unreliable, undecided) as sorted int arrays. A sample is
        reliable when both losses are <= tau, unreliable when both are
        > tau, and undecided when the two models disagree.
    """
    ls = np.asarray(student_losses, dtype=np.float64)
    lt = np.asarray(teacher_losses, dtype=np.float64)
    if ls.shape != lt.shape or ls.ndim != 1:
        raise ShapeError("student and teacher losses must be equal-length vectors")
    low_s, low_t = ls <= tau, lt <= tau
    reliable = np.flatnonzero(low_s & low_t)
    unreliable = np.flatnonzero(~low_s & ~low_t)
    undecided = np.flatnonzero(low_s != low_t)
    return reliable, unreliable, undecided


def difference_mask(student_pred, teacher_pred, labels) -> np.ndarray:
    """Pixels where student, teacher and given label do not all agree."""
    return (student_pred != teacher_pred) | (student_pred != labels) | (teacher_pred != labels)


def correct_labels(student_probs, teacher_probs, labels, threshold: float = 0.9) -> np.ndarray:
    """Relabel uncertain pixels with a confident model prediction.

    Inside the difference mask a pixel takes the student's class when the
    student's top probability exceeds ``threshold``, otherwise the
    teacher's class when the teacher's does, otherwise it keeps its label.
    Probabilities are ``(B, C, H, W)`` and labels ``(B, H, W)``.
    """
    ps = np.asarray(student_probs)
    pt = np.asarray(teacher_probs)
    labels = np.asarray(labels)
    if ps.shape != pt.shape or ps.shape[:1] + ps.shape[2:] != labels.shape:
        raise ShapeError("probabilities and labels are not aligned")
    pred_s, pred_t = ps.argmax(axis=1), pt.argmax(axis=1)
    region = difference_mask(pred_s, pred_t, labels)
    conf_s = ps.max(axis=1) > threshold
    conf_t = pt.max(axis=1) > threshold
    out = labels.copy()
    take_s = region & conf_s
    take_t = region & ~conf_s & conf_t
    out[take_s] = pred_s[take_s]
    out[take_t] = pred_t[take_t]
    return out


class LossScales:
    """Running scale of each loss term, used to normalise it to about 1.

    The first observation initialises a scale; later ones blend in with
    weight ``1 - decay``. Scales never drop below ``floor``.
    """

    def __init__(self, decay: float = 0.9, floor: float = 1e-8):
        self.decay, self.floor = decay, floor
        self.values: dict[str, float] = {}

    def update(self, term: str, raw: float) -> float:
        prev = self.values.get(term)
        self.values[term] = raw if prev is None else self.decay * prev + (1.0 - self.decay) * raw
        return self.get(term)

    def get(self, term: str) -> float:
        return max(self.values.get(term, 1.0), self.floor)

    def copy(self) -> "LossScales":
        out = LossScales(self.decay, self.floor)
        out.values = dict(self.values)
        return out


@dataclass
class LossWeights:
    u_un: float
    u_cons: float
    s_t: float
    use_unreliable: bool = True
    use_consistency: bool = True

    @property
    def w_re(self) -> float:
        return 1.0

    @property
    def w_un(self) -> float:
        return sigmoid(self.u_un) * self.s_t if self.use_unreliable else 0.0

    @property
    def w_cons(self) -> float:
        return sigmoid(self.u_cons) * self.s_t if self.use_consistency else 0.0


@dataclass
class TrainBatch:
    """One batch with everything the total loss needs besides the student.

    ``reliable`` is the strict reliable set; ``undecided`` samples are
    trained like reliable ones. ``corrected`` holds the labels used for the
    unreliable samples, in the order of ``unreliable``.
    """

    images: np.ndarray
    labels: np.ndarray
    reliable: np.ndarray
    unreliable: np.ndarray
    undecided: np.ndarray
    corrected: np.ndarray
    teacher_probs: np.ndarray | None = None
    perturbed: np.ndarray | None = None

    @property
    def train_reliable(self) -> np.ndarray:
        return np.union1d(self.reliable, self.undecided)


@dataclass
class TotalLoss:
    value: float
    grads: SplitParams
    grad_u_un: float
    grad_u_cons: float
    raw: dict
    normalised: dict


def compute_total_loss(params: SplitParams, batch: TrainBatch, weights: LossWeights, eta: float,
                       scales: LossScales | None = None, update_scales: bool = False,
                       forward=None, link=None) -> TotalLoss:
    """Weighted loss over reliable, corrected-unreliable and consistency terms.

    ``L = L_re / s_re + w_un * L_un / s_un + w_cons * L_cons / s_cons + eta * (u_un^2 + u_cons^2)``

    where the ``s`` are the running scales in ``scales`` (all 1 when it is
    None) and are held constant for differentiation. With
    ``update_scales`` the scales first absorb the current raw values.
    ``forward`` may carry a precomputed ``(probs, cache)`` of the student on
    the images, followed by the perturbed images when consistency is on.

    Raises:
        EmptyBatch: if the strict reliable and the unreliable set are both empty.
    """
    if len(batch.reliable) == 0 and len(batch.unreliable) == 0:
        raise EmptyBatch("no reliable and no unreliable sample in the batch")
    use_cons = weights.use_consistency and batch.perturbed is not None and batch.teacher_probs is not None
    n = len(batch.images)
    if forward is None:
        x = np.concatenate([batch.images, batch.perturbed]) if use_cons else batch.images
        forward = forward_split(params, x, link)
    probs, cache = forward
    dprobs = np.zeros_like(probs)
    raw, norm = {}, {}

    def scale(term, value):
        if scales is None:
            return 1.0
        return scales.update(term, value) if update_scales else scales.get(term)

    total = 0.0
    rel = batch.train_reliable
    if len(rel):
        losses, g = region_loss_per_sample(probs[rel], batch.labels[rel])
        raw["re"] = float(losses.mean())
        s = scale("re", raw["re"])
        norm["re"] = raw["re"] / s
        total += weights.w_re * norm["re"]
        dprobs[rel] += (weights.w_re / (s * len(rel))) * g

    un = batch.unreliable
    grad_u_un = 0.0
    if len(un):
        losses, g = region_loss_per_sample(probs[un], batch.corrected)
        raw["un"] = float(losses.mean())
        s = scale("un", raw["un"])
        norm["un"] = raw["un"] / s
        total += weights.w_un * norm["un"]
        dprobs[un] += (weights.w_un / (s * len(un))) * g
        if weights.use_unreliable:
            sg = sigmoid(weights.u_un)
            grad_u_un = sg * (1.0 - sg) * weights.s_t * norm["un"]

    grad_u_cons = 0.0
    if use_cons:
        c_loss, g = consistency_loss(probs[n:], batch.teacher_probs)
        raw["cons"] = c_loss
        s = scale("cons", c_loss)
        norm["cons"] = c_loss / s
        total += weights.w_cons * norm["cons"]
        dprobs[n:] += (weights.w_cons / s) * g
        sg = sigmoid(weights.u_cons)
        grad_u_cons = sg * (1.0 - sg) * weights.s_t * norm["cons"]

    total += eta * (weights.u_un ** 2 + weights.u_cons ** 2)
    grad_u_un += 2.0 * eta * weights.u_un
    grad_u_cons += 2.0 * eta * weights.u_cons
    grads = backward_split(params, cache, dprobs, link)
    return TotalLoss(float(total), grads, grad_u_un, grad_u_cons, raw, norm)


# --------------------------------------------------------------------------
# client side

@dataclass
class ClientState:
    """A client's data and persistent training state.

    ``corrupted`` is ground truth about injected label noise. It is kept
    for reporting only and never read by the training code.
    """

    client_id: int
    images: np.ndarray  # (n, C_in, H, W)
    labels: np.ndarray  # (n, H, W)
    sample_ids: list[int]
    corrupted: np.ndarray
    student: SplitParams | None = None
    u_un: float = -10.0
    u_cons: float = -10.0
    optimizer: Adam | None = None
    logit_optimizer: Adam | None = None
    scales: LossScales = dc_field(default_factory=LossScales)
    label_changes: int = 0

    def __len__(self):
        return len(self.images)


@dataclass
class ClientSummary:
    client_id: int
    total_samples: int
    d_re: int
    mean_reliable_loss: float  # nan when d_re == 0
    mu: float
    sigma: float
    params: SplitParams
    u_un: float
    u_cons: float
    detected_noise_ratio: float
    undecided: int = 0
    recoveries: int = 0


@dataclass
class RoundContext:
    """What the server sends each client at the start of a round."""

    round_index: int
    teacher: SplitParams
    student_init: SplitParams
    tau: float
    s_t: float
    u_un: float
    u_cons: float


def local_train(client: ClientState, ctx: RoundContext, cfg: ProtocolConfig, link=None) -> ClientSummary:
    """Run ``cfg.local_epochs`` passes over the client's data.

    The student starts from the broadcast model and a local copy of the
    teacher follows it by EMA after every step. Loss statistics come from
    the last epoch: ``mu`` and ``sigma`` over every per-sample student
    loss, ``d_re`` and the mean reliable loss over the strict reliable set,
    and the detected noise ratio as the unreliable fraction.
    """
    n = len(client)
    if n == 0:
        raise ShapeError(f"client {client.client_id} has no data")
    dtype = np.dtype(cfg.train_dtype)
    rng = np.random.default_rng([cfg.seed, 2, ctx.round_index, client.client_id])
    student = ctx.student_init.copy()
    teacher = ctx.teacher.copy()
    if client.optimizer is None:
        client.optimizer = Adam(cfg.lr)
        client.logit_optimizer = Adam(cfg.logit_lr)
        client.scales = LossScales(cfg.loss_ema_decay, cfg.loss_scale_floor)
    logits = [np.array([ctx.u_un]), np.array([ctx.u_cons])]
    fedavg = cfg.is_fedavg
    use_cons = cfg.consistency
    images = client.images.astype(dtype, copy=False)

    last_losses = np.zeros(n)
    d_re = n_un = n_und = recoveries = 0
    reliable_loss_sum = 0.0
    for epoch in range(cfg.local_epochs):
        final = epoch == cfg.local_epochs - 1
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x, y = images[idx], client.labels[idx]
            k = len(idx)
            perturbed = None
            if use_cons:
                perturbed = perturb(x, rng.integers(2 ** 63), cfg.perturb_noise, cfg.perturb_shift)
                forward = forward_split(student, np.concatenate([x, perturbed]), link)
            else:
                forward = forward_split(student, x, link)
            ps = forward[0][:k]
            ls, _ = region_loss_per_sample(ps, y)

            if fedavg:
                rel, un, und = np.arange(k), np.arange(0), np.arange(0)
                pt = None
            else:
                pt, _ = forward_split(teacher, x, link)
                lt, _ = region_loss_per_sample(pt, y)
                rel, un, und = split_reliable(ls, lt, ctx.tau)

            if len(rel) == 0 and len(un) == 0:
                log.info("client %d round %d: batch fully undecided, training it as reliable",
                         client.client_id, ctx.round_index)
                recoveries += 1
                rel, und = np.arange(k), np.arange(0)
            if len(un) and cfg.correction:
                corrected = correct_labels(ps[un], pt[un], y[un], cfg.label_threshold)
                client.label_changes += int(np.count_nonzero(corrected != y[un]))
            else:
                corrected = y[un]

            batch = TrainBatch(x, y, rel, un, und, corrected, pt, perturbed)
            weights = LossWeights(float(logits[0][0]), float(logits[1][0]), 0.0 if fedavg else ctx.s_t,
                                  use_unreliable=not fedavg, use_consistency=use_cons)
            result = compute_total_loss(student, batch, weights, 0.0 if fedavg else cfg.eta,
                                        None if fedavg else client.scales, update_scales=True,
                                        forward=forward, link=link)
            sgd_adam_step(student, result.grads, client.optimizer, cfg.lr)
            if not fedavg:
                client.logit_optimizer.step(logits, [np.array([result.grad_u_un]),
                                                     np.array([result.grad_u_cons])], cfg.logit_lr)
                ema_update(teacher, student, cfg.ema_decay)

            if final:
                last_losses[idx] = ls
                d_re += len(rel)
                reliable_loss_sum += float(ls[rel].sum())
                n_un += len(un)
                n_und += len(und)

    client.student = student
    client.u_un, client.u_cons = float(logits[0][0]), float(logits[1][0])
    return ClientSummary(
        client_id=client.client_id,
        total_samples=n,
        d_re=d_re,
        mean_reliable_loss=reliable_loss_sum / d_re if d_re else float("nan"),
        mu=float(last_losses.mean()),
        sigma=float(last_losses.std()),
        params=student,
        u_un=client.u_un,
        u_cons=client.u_cons,
        detected_noise_ratio=n_un / n,
        undecided=n_und,
        recoveries=recoveries,
    )


# --------------------------------------------------------------------------
# server side

@dataclass
class Aggregate:
    params: SplitParams
    u_un: float
    u_cons: float
    r: np.ndarray
    q: np.ndarray
    d: np.ndarray
    fallback: bool = False


def softmax_neg(losses, gamma: float) -> np.ndarray:
    z = -gamma * np.asarray(losses, dtype=np.float64)
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def weighted_params(models: list[SplitParams], r) -> SplitParams:
    """Elementwise ``sum_i r_i * theta_i`` for every tensor."""
    r = np.asarray(r, dtype=np.float64)
    flat = [sum(ri * t for ri, t in zip(r, tensors)) for tensors in zip(*(m.tensors() for m in models))]
    return SplitParams.like(models[0], flat)


def aggregate(summaries: list[ClientSummary], gamma: float, fedavg: bool = False) -> Aggregate:
    """Merge client models.

    ``d`` is each client's share of reliable samples and
    ``q = softmax(-gamma * L)`` favours low mean reliable loss ``L`` (a
    client without reliable samples uses its mean loss instead); the
    ratios are ``r = q * d / (q . d)``. FedAvg, or a round where no client
    reports a reliable sample, weights by sample counts instead.
    """
    if not summaries:
        raise ValueError("aggregation needs at least one client")
    m = np.array([s.total_samples for s in summaries], dtype=np.float64)
    counts = m / m.sum()
    d_re = np.array([s.d_re for s in summaries], dtype=np.float64)
    losses = np.array([s.mean_reliable_loss if s.d_re > 0 else s.mu for s in summaries])
    q = softmax_neg(losses, gamma)
    fallback = fedavg or d_re.sum() == 0
    if fallback:
        d = counts
        r = counts
    else:
        d = d_re / d_re.sum()
        r = q * d / np.dot(q, d)
    params = weighted_params([s.params for s in summaries], r)
    u_un = float(np.dot(r, [s.u_un for s in summaries]))
    u_cons = float(np.dot(r, [s.u_cons for s in summaries]))
    return Aggregate(params, u_un, u_cons, r, q, d, fallback=fallback and not fedavg)


def update_tau(summaries: list[ClientSummary], q, lambda_: float) -> float:
    """``tau = sum_i q_i * (mu_i + lambda * sigma_i)``."""
    b = np.array([s.mu + lambda_ * s.sigma for s in summaries])
    return float(np.dot(np.asarray(q, dtype=np.float64), b))


# --------------------------------------------------------------------------
# transport

def params_to_fields(prefix: str, params: SplitParams) -> dict:
    out = {}
    for stage in ("fe", "s", "be"):
        for i, t in enumerate(params.stage(stage)):
            out[f"{prefix}.{stage}.{i}"] = t
    return out


def params_from_fields(prefix: str, fields: dict, template: SplitParams) -> SplitParams:
    stages = {}
    for stage in ("fe", "s", "be"):
        tensors = []
        for i, t in enumerate(template.stage(stage)):
            got = fields[f"{prefix}.{stage}.{i}"]
            if got.shape != t.shape:
                raise ShapeError(f"{prefix}.{stage}.{i}: shape {got.shape} != {t.shape}")
            tensors.append(got)
        stages[stage] = tensors
    return SplitParams(**stages)


def _scalar(v: float) -> np.ndarray:
    return np.array(v, dtype=np.float64)


def encode_context(ctx: RoundContext) -> dict:
    fields = {"round": _scalar(ctx.round_index), "s_t": _scalar(ctx.s_t),
              "u_un": _scalar(ctx.u_un), "u_cons": _scalar(ctx.u_cons)}
    if math.isfinite(ctx.tau):
        fields["tau"] = _scalar(ctx.tau)
    fields.update(params_to_fields("teacher", ctx.teacher))
    fields.update(params_to_fields("student", ctx.student_init))
    return fields


def decode_context(fields: dict, template: SplitParams) -> RoundContext:
    return RoundContext(
        round_index=int(fields["round"]),
        teacher=params_from_fields("teacher", fields, template),
        student_init=params_from_fields("student", fields, template),
        tau=float(fields["tau"]) if "tau" in fields else math.inf,
        s_t=float(fields["s_t"]),
        u_un=float(fields["u_un"]),
        u_cons=float(fields["u_cons"]),
    )


def encode_summary(s: ClientSummary) -> dict:
    fields = {name: _scalar(getattr(s, name)) for name in
              ("client_id", "total_samples", "d_re", "mu", "sigma", "u_un", "u_cons",
               "detected_noise_ratio", "undecided", "recoveries")}
    if s.d_re > 0:
        fields["mean_reliable_loss"] = _scalar(s.mean_reliable_loss)
    fields.update(params_to_fields("params", s.params))
    return fields


def decode_summary(fields: dict, template: SplitParams) -> ClientSummary:
    ints = {k: int(fields[k]) for k in ("client_id", "total_samples", "d_re", "undecided", "recoveries")}
    return ClientSummary(
        mean_reliable_loss=float(fields.get("mean_reliable_loss", math.nan)),
        mu=float(fields["mu"]), sigma=float(fields["sigma"]),
        params=params_from_fields("params", fields, template),
        u_un=float(fields["u_un"]), u_cons=float(fields["u_cons"]),
        detected_noise_ratio=float(fields["detected_noise_ratio"]),
        **ints,
    )


# --------------------------------------------------------------------------
# round loop

@dataclass
class ServerState:
    teacher: SplitParams
    tau: float
    gamma: float
    lambda_: float
    round_index: int = 0
    u_un: float = -10.0
    u_cons: float = -10.0

    @property
    def global_student_init(self) -> SplitParams:
        # every round the students restart from the current global model
        return self.teacher


@dataclass
class RoundReport:
    round_index: int
    clients: list[dict]
    global_row: dict
    metrics: MetricSet | None = None

    def rows(self) -> list[dict]:
        return [*self.clients, self.global_row]

    @property
    def ratios(self) -> np.ndarray:
        return np.array([row["r"] for row in self.clients])


class Federation:
    """Server plus clients, advanced one round at a time.

    ``deterministic=True`` trains clients one after another on the calling
    thread; otherwise up to ``cfg.workers`` clients train in parallel
    threads. Both paths exchange every message through encoded channels and
    give identical results.
    """

    def __init__(self, clients: list[ClientState], cfg: ProtocolConfig, arch: Architecture,
                 test_images: np.ndarray | None = None, test_labels: np.ndarray | None = None,
                 deterministic: bool = True, init: SplitParams | None = None):
        self.cfg = cfg
        self.arch = arch
        self.clients = clients
        self.test_images, self.test_labels = test_images, test_labels
        self.deterministic = deterministic or cfg.workers == 1
        teacher = init.copy() if init is not None else init_params(arch, _seed_int(cfg.seed, 1))
        gamma, lam = schedule_step(0, cfg.schedule_rounds, cfg.gamma_max, cfg.lambda_max)
        tau = math.inf if cfg.is_fedavg else cfg.tau0
        self.server = ServerState(teacher, tau, gamma, lam, 0, cfg.logit_init, cfg.logit_init)
        for c in clients:
            c.u_un = c.u_cons = cfg.logit_init
        self.down = [wire.Channel() for _ in clients]
        self.up = [wire.Channel() for _ in clients]
        self.link = wire.roundtrip if cfg.wire_activations else None
        self.history: list[RoundReport] = []

    def _client_step(self, i: int) -> None:
        ctx = decode_context(self.down[i].recv_message(), self.server.teacher)
        summary = local_train(self.clients[i], ctx, self.cfg, self.link)
        self.up[i].send_message(encode_summary(summary))

    def run_round(self) -> RoundReport:
        cfg, srv = self.cfg, self.server
        t = srv.round_index
        srv.gamma, srv.lambda_ = schedule_step(t, cfg.schedule_rounds, cfg.gamma_max, cfg.lambda_max)
        s_t = warmup(t, cfg.warmup_rounds)
        ctx = RoundContext(t, srv.teacher, srv.global_student_init, srv.tau, s_t, srv.u_un, srv.u_cons)
        message = wire.encode_message(encode_context(ctx))
        for ch in self.down:
            ch.send(message)

        if self.deterministic:
            for i in range(len(self.clients)):
                self._client_step(i)
        else:
            with ThreadPoolExecutor(max_workers=self.cfg.workers) as pool:
                list(pool.map(self._client_step, range(len(self.clients))))
        # barrier: one summary from every client, collected in client order
        summaries = [decode_summary(ch.recv_message(), srv.teacher) for ch in self.up]

        agg = aggregate(summaries, srv.gamma, fedavg=cfg.is_fedavg)
        if agg.fallback:
            log.info("round %d: no reliable samples reported, using sample-count weights", t)
        tau_used = srv.tau
        srv.teacher = agg.params
        if not cfg.is_fedavg:
            srv.u_un, srv.u_cons = agg.u_un, agg.u_cons
            srv.tau = update_tau(summaries, agg.q, srv.lambda_)
        srv.round_index += 1

        metrics = None
        if self.test_images is not None:
            metrics = evaluate(srv.teacher, self.test_images.astype(cfg.train_dtype, copy=False),
                               self.test_labels)
        report = self._report(t, summaries, agg, tau_used, metrics)
        self.history.append(report)
        return report

    def _report(self, t, summaries, agg, tau, metrics) -> RoundReport:
        srv = self.server
        common = {"round": t, "tau": tau, "gamma": srv.gamma, "lambda": srv.lambda_}
        empty = {"test_acc": "", "test_dice_loss": "", "test_miou": ""}
        rows = []
        for s, r in zip(summaries, agg.r):
            rows.append({**common, "client": s.client_id, "r": float(r), "d_re": s.d_re, "mu": s.mu,
                         "sigma": s.sigma, "detected_noise_ratio": s.detected_noise_ratio,
                         "u_un": s.u_un, "u_cons": s.u_cons, **empty})
        n_total = sum(s.total_samples for s in summaries)
        glob = {**common, "client": "global", "r": float(agg.r.sum()),
                "d_re": sum(s.d_re for s in summaries), "mu": "", "sigma": "",
                "detected_noise_ratio": sum(s.detected_noise_ratio * s.total_samples for s in summaries) / n_total,
                "u_un": srv.u_un, "u_cons": srv.u_cons}
        if metrics is not None:
            glob.update(test_acc=metrics.accuracy, test_dice_loss=metrics.dice_loss, test_miou=metrics.mean_iou)
        else:
            glob.update(empty)
        return RoundReport(t, rows, glob, metrics)

    def run(self, rounds: int, callback=None) -> list[RoundReport]:
        for _ in range(rounds):
            report = self.run_round()
            if callback is not None:
                callback(report)
        return self.history


def _seed_int(*parts) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])
