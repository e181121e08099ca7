"""The four meta-learners: FuMI, MAML, Prototypical Networks, and AM3.

Gradient-based learners (FuMI, MAML) adapt per task by unrolled
full-batch gradient descent on the support cross-entropy and are
meta-trained on the query loss through that unroll; metric-based
learners (ProtoNet, AM3) classify queries by distance to class
prototypes and train their networks directly on query cross-entropy.

FuMI's head is generated per task by the hypernetwork from the class
text embeddings: there is no free-standing head parameter, so outer
gradients reach the head initialization only through the hypernetwork.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import fastpath
from .adam import Adam
from .diffcore import (
    GradMode,
    Graph,
    Mode,
    Tensor,
    concat,
    grad,
    narrow,
    reduce_sum,
    reshape,
    scale,
    softmax_cross_entropy,
    sub,
    transpose,
)
from .episodes import Task
from .models import (
    MixMode,
    am3_mix,
    bind_params,
    body_forward,
    head_forward,
    hyper_forward,
    init_am3_params,
    init_body_params,
    init_head_params,
    init_hyper_params,
    project_images,
)

__all__ = [
    "NonFiniteLoss",
    "EmptySupport",
    "SplitViolation",
    "InnerLoopConfig",
    "OuterLoopConfig",
    "inner_adapt",
    "fumi_init",
    "FumiLearner",
    "MamlLearner",
    "Am3Learner",
    "make_protonet",
    "protonet_predict",
    "am3_predict",
    "evaluate",
]


class NonFiniteLoss(RuntimeError):
    """An episode produced a NaN/Inf loss; the episode is aborted."""


class EmptySupport(ValueError):
    pass


class SplitViolation(ValueError):
    pass


@dataclass
class InnerLoopConfig:
    alpha: float = 0.01
    train_steps: int = 5
    test_steps_by_shot: dict[int, int] = field(
        default_factory=lambda: {1: 50, 3: 50, 5: 100, 10: 100}
    )
    grad_mode: GradMode = GradMode.SECOND_ORDER

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("inner step size must be positive")
        if self.train_steps < 1:
            raise ValueError("inner steps must be >= 1")

    def test_steps(self, shots: int) -> int:
        if shots in self.test_steps_by_shot:
            return self.test_steps_by_shot[shots]
        # fall back to the schedule entry with the nearest shot count
        keys = sorted(self.test_steps_by_shot)
        nearest = min(keys, key=lambda k: (abs(k - shots), k))
        return self.test_steps_by_shot[nearest]


@dataclass
class OuterLoopConfig:
    lr: float = 3e-5
    weight_decay: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    tasks_per_batch: int = 4

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("outer learning rate must be positive")
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1):
            raise ValueError("moment decay rates must lie in [0, 1)")


def _check_finite_loss(loss: Tensor) -> None:
    if not np.isfinite(loss.value).all():
        raise NonFiniteLoss(f"loss is not finite: {loss.value}")


def inner_adapt(
    params: Mapping[str, Tensor],
    loss_fn,
    alpha: float,
    steps: int,
    grad_mode: GradMode = GradMode.SECOND_ORDER,
) -> dict[str, Tensor]:
    """`steps` full-batch gradient-descent updates of every tensor in
    `params` on loss_fn(params), step size alpha.

    With SECOND_ORDER the adapted tensors keep graph linkage to the
    originals, so a later loss on them can be differentiated through
    the whole unroll.
    """
    if steps < 1:
        raise ValueError("adaptation requires steps >= 1")
    cur = dict(params)
    keys = list(cur.keys())
    for _ in range(steps):
        loss = loss_fn(cur)
        _check_finite_loss(loss)
        gs = grad(loss, [cur[k] for k in keys], grad_mode)
        cur = {k: sub(cur[k], scale(g, alpha)) for k, g in zip(keys, gs)}
    return cur


def fumi_init(
    hyper: Mapping[str, Tensor],
    body: Mapping[str, Tensor],
    task: Task,
    mode: Mode = Mode.EVAL,
    dropout_p: float = 0.0,
    rng=None,
) -> dict[str, Tensor]:
    """Generate the per-class head from the task's text embeddings (once
    per task) and share the body initialization unchanged."""
    g = next(iter(body.values())).graph
    rows = []
    for i in range(task.ways):
        t = g.constant(task.support_texts[i])
        part = hyper_forward(hyper, t, mode, dropout_p, rng)
        rows.append(reshape(part, (1, part.value.shape[0])))
    head = concat(rows, axis=0)
    return {"head.m": head, **{k: v for k, v in body.items() if k.startswith("body.")}}


def _support_loss_fn(task: Task, mode: Mode, dropout_p: float, rng):
    def loss_fn(params):
        graph = params["head.m"].graph
        x = graph.constant(task.support_x)
        feats = body_forward(params, x, mode, dropout_p, rng)
        logits = head_forward(params["head.m"], feats)
        return softmax_cross_entropy(logits, task.support_y)

    return loss_fn


def _query_logits(params, task: Task, mode: Mode, dropout_p: float, rng) -> Tensor:
    graph = params["head.m"].graph
    x = graph.constant(task.query_x)
    feats = body_forward(params, x, mode, dropout_p, rng)
    return head_forward(params["head.m"], feats)


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == labels).mean())


class _GradientLearner:
    """Shared training/evaluation mechanics for FuMI and MAML."""

    algo = ""

    def __init__(self, params, inner: InnerLoopConfig, outer: OuterLoopConfig, dropout_p: float):
        self.params: dict[str, np.ndarray] = params
        self.inner = inner
        self.outer = outer
        self.dropout_p = dropout_p
        self.opt = Adam(self.params, outer.lr, outer.weight_decay, outer.betas, outer.eps)

    # subclasses provide the per-task initial parameter tensors
    def _task_init(self, bound, task, mode, rng):
        raise NotImplementedError

    def _episode_query_loss(self, bound, task: Task, mode: Mode, rng) -> tuple[Tensor, float]:
        theta = self._task_init(bound, task, mode, rng)
        dropout_p = self.dropout_p if mode is Mode.TRAIN else 0.0
        loss_fn = _support_loss_fn(task, mode, dropout_p, rng)
        adapted = inner_adapt(theta, loss_fn, self.inner.alpha, self.inner.train_steps, self.inner.grad_mode)
        logits = _query_logits(adapted, task, mode, dropout_p, rng)
        q_loss = softmax_cross_entropy(logits, task.query_y)
        return q_loss, _accuracy(logits.value, task.query_y)

    def outer_step(self, tasks, rng) -> dict:
        """One optimizer step on the mean query loss over the batch,
        differentiated through the inner loops."""
        if not tasks:
            raise ValueError("task batch is empty")
        g = Graph()
        try:
            bound = bind_params(g, self.params)
            losses, accs = [], []
            for task in tasks:
                q_loss, acc = self._episode_query_loss(bound, task, Mode.TRAIN, rng)
                losses.append(q_loss)
                accs.append(acc)
            total = losses[0]
            for extra in losses[1:]:
                total = total + extra
            total = scale(total, 1.0 / len(losses))
            _check_finite_loss(total)
            keys = list(self.params.keys())
            gs = grad(total, [bound[k] for k in keys], self.inner.grad_mode)
            self.opt.step({k: t.value for k, t in zip(keys, gs)})
            return {"train_loss": float(total.value), "train_acc": float(np.mean(accs))}
        finally:
            g.release()

    def _head0_np(self, task: Task) -> np.ndarray:
        raise NotImplementedError

    def task_logits(self, task: Task, adapt_steps: int | None = None,
                    include_pre: bool = False, engine: str = "fast"):
        """Eval-mode prediction: adapt on the support set (first-order,
        no dropout) then score the query set.

        The default engine is the numpy mirror in fastpath; engine="tape"
        runs the same computation through the autodiff graph (tests pin
        the two against each other).
        """
        steps = self.inner.test_steps(task.shots) if adapt_steps is None else adapt_steps
        if engine == "fast":
            return fastpath.task_logits(
                self.params, self._head0_np(task), task, self.inner.alpha, steps, include_pre
            )
        g = Graph()
        try:
            bound = bind_params(g, self.params)
            theta = self._task_init(bound, task, Mode.EVAL, None)
            pre = _query_logits(theta, task, Mode.EVAL, 0.0, None).value if include_pre else None
            if steps > 0:
                loss_fn = _support_loss_fn(task, Mode.EVAL, 0.0, None)
                theta = inner_adapt(theta, loss_fn, self.inner.alpha, steps, GradMode.FIRST_ORDER)
            logits = _query_logits(theta, task, Mode.EVAL, 0.0, None).value
            return (logits, pre) if include_pre else logits
        finally:
            g.release()

    def validation_loss(self, tasks) -> tuple[float, float]:
        """Mean query loss/accuracy after the meta-train adaptation
        schedule, in Eval (deterministic) mode."""
        losses, accs = [], []
        for task in tasks:
            logits = fastpath.task_logits(
                self.params, self._head0_np(task), task, self.inner.alpha, self.inner.train_steps
            )
            losses.append(fastpath.cross_entropy(logits, task.query_y))
            accs.append(_accuracy(logits, task.query_y))
        return float(np.mean(losses)), float(np.mean(accs))


class FumiLearner(_GradientLearner):
    algo = "fumi"

    def __init__(self, image_dim, text_dim, rng, body_hidden=(256, 64), hyper_hidden=256,
                 dropout_p=0.25, inner: InnerLoopConfig | None = None,
                 outer: OuterLoopConfig | None = None):
        params = init_body_params(rng, image_dim, body_hidden)
        params.update(init_hyper_params(rng, text_dim, body_hidden[-1], hyper_hidden))
        super().__init__(params, inner or InnerLoopConfig(), outer or OuterLoopConfig(), dropout_p)

    def _task_init(self, bound, task, mode, rng):
        dropout_p = self.dropout_p if mode is Mode.TRAIN else 0.0
        return fumi_init(bound, bound, task, mode, dropout_p, rng)

    def _head0_np(self, task):
        return fastpath.hyper_head(self.params, task.support_texts)


class MamlLearner(_GradientLearner):
    algo = "maml"

    def __init__(self, image_dim, ways, rng, body_hidden=(256, 64), dropout_p=0.25,
                 inner: InnerLoopConfig | None = None, outer: OuterLoopConfig | None = None):
        params = init_body_params(rng, image_dim, body_hidden)
        params.update(init_head_params(rng, ways, body_hidden[-1]))
        super().__init__(params, inner or InnerLoopConfig(), outer or OuterLoopConfig(), dropout_p)

    def _task_init(self, bound, task, mode, rng):
        # the learned initialization is task-agnostic: text is never read
        return {k: v for k, v in bound.items()}

    def _head0_np(self, task):
        return self.params["head.m"]


# -- metric-based learners ---------------------------------------------------


def _class_prototypes(params, task: Task, graph: Graph) -> Tensor:
    """Per-class mean of projected support embeddings, shape (K, P)."""
    if task.shots < 1:
        raise EmptySupport("cannot build image prototypes from an empty support set")
    x = graph.constant(task.support_x)
    proj = project_images(params, x)
    k, n = task.ways, task.shots
    grouped = reshape(proj, (k, n, proj.value.shape[1]))
    return scale(reduce_sum(grouped, axis=1), 1.0 / n)


def _distance_logits(protos: Tensor, queries: Tensor) -> Tensor:
    """-||q - p||^2 for each query row and prototype row."""
    sq_q = reduce_sum(queries * queries, axis=1, keepdims=True)  # (B,1)
    sq_p = reshape(reduce_sum(protos * protos, axis=1), (1, protos.value.shape[0]))
    cross = queries @ transpose(protos)
    return scale(sq_q + sq_p - scale(cross, 2.0), -1.0)


def protonet_predict(params: Mapping[str, Tensor], task: Task) -> Tensor:
    """Nearest-prototype logits: mean projected support embedding per
    class, squared-Euclidean distance to each projected query."""
    graph = next(iter(params.values())).graph
    protos = _class_prototypes(params, task, graph)
    queries = project_images(params, graph.constant(task.query_x))
    return _distance_logits(protos, queries)


def am3_predict(
    params: Mapping[str, Tensor],
    task: Task,
    mix_mode: MixMode,
    mode: Mode = Mode.EVAL,
    dropout_p: float = 0.0,
    rng=None,
) -> Tensor:
    """Distance logits against the lambda-mixed class prototypes."""
    graph = next(iter(params.values())).graph
    image_protos = None
    if mix_mode is not MixMode.FORCE_TEXT_ONLY:
        if task.shots < 1:
            raise EmptySupport("support images required unless lambda is forced to 0")
        image_protos = _class_prototypes(params, task, graph)
    rows = []
    for i in range(task.ways):
        img_i = None
        if image_protos is not None:
            img_i = reshape(narrow(image_protos, 0, i, 1), (image_protos.value.shape[1],))
        t = graph.constant(task.support_texts[i])
        proto, _ = am3_mix(params, img_i, t, mix_mode, mode, dropout_p, rng)
        rows.append(reshape(proto, (1, proto.value.shape[0])))
    protos = concat(rows, axis=0)
    queries = project_images(params, graph.constant(task.query_x))
    return _distance_logits(protos, queries)


class Am3Learner:
    """AM3 and, via forced mixing modes, ProtoNet (lambda=1) and the
    zero-shot variant (lambda=0)."""

    def __init__(self, image_dim, text_dim, rng, mix_mode=MixMode.LEARNED, proto_dim=512,
                 hidden=512, dropout_p=0.2, outer: OuterLoopConfig | None = None, algo=None):
        self.params = init_am3_params(rng, image_dim, text_dim, proto_dim, hidden)
        self.mix_mode = mix_mode
        self.dropout_p = dropout_p
        self.outer = outer or OuterLoopConfig(lr=1e-3, tasks_per_batch=5)
        self.opt = Adam(self.params, self.outer.lr, self.outer.weight_decay,
                        self.outer.betas, self.outer.eps)
        self.algo = algo or {
            MixMode.LEARNED: "am3",
            MixMode.FORCE_IMAGE_ONLY: "protonet",
            MixMode.FORCE_TEXT_ONLY: "am3-zero",
        }[mix_mode]
        self.inner = None  # no inner loop for metric-based methods

    def _batch_loss(self, bound, tasks, mode, rng):
        losses, accs = [], []
        for task in tasks:
            dropout_p = self.dropout_p if mode is Mode.TRAIN else 0.0
            logits = am3_predict(bound, task, self.mix_mode, mode, dropout_p, rng)
            losses.append(softmax_cross_entropy(logits, task.query_y))
            accs.append(_accuracy(logits.value, task.query_y))
        total = losses[0]
        for extra in losses[1:]:
            total = total + extra
        return scale(total, 1.0 / len(losses)), float(np.mean(accs))

    def outer_step(self, tasks, rng) -> dict:
        if not tasks:
            raise ValueError("task batch is empty")
        g = Graph()
        try:
            bound = bind_params(g, self.params)
            total, acc = self._batch_loss(bound, tasks, Mode.TRAIN, rng)
            _check_finite_loss(total)
            keys = list(self.params.keys())
            gs = grad(total, [bound[k] for k in keys], GradMode.FIRST_ORDER)
            self.opt.step({k: t.value for k, t in zip(keys, gs)})
            return {"train_loss": float(total.value), "train_acc": acc}
        finally:
            g.release()

    def task_logits(self, task: Task, adapt_steps=None, include_pre=False):
        g = Graph()
        try:
            bound = bind_params(g, self.params)
            logits = am3_predict(bound, task, self.mix_mode, Mode.EVAL).value
            return (logits, logits) if include_pre else logits
        finally:
            g.release()

    def validation_loss(self, tasks) -> tuple[float, float]:
        g = Graph()
        try:
            bound = bind_params(g, self.params)
            total, acc = self._batch_loss(bound, tasks, Mode.EVAL, None)
            return float(total.value), acc
        finally:
            g.release()


def make_protonet(image_dim, text_dim, rng, **kwargs) -> Am3Learner:
    return Am3Learner(image_dim, text_dim, rng, mix_mode=MixMode.FORCE_IMAGE_ONLY, **kwargs)


def evaluate(
    learner,
    tasks,
    allowed_class_ids=None,
    adapt_steps: int | None = None,
    include_pre: bool = False,
):
    """Per-task query argmax accuracy; gradient-based learners adapt on
    the support set first (test-time schedule, Eval mode)."""
    if allowed_class_ids is not None:
        allowed = set(allowed_class_ids)
        for task in tasks:
            bad = [c for c in task.class_ids if c not in allowed]
            if bad:
                raise SplitViolation(f"task uses classes outside the eval split: {bad}")
    accs = np.empty(len(tasks))
    pre_accs = np.empty(len(tasks)) if include_pre else None
    n_scored = 0
    for i, task in enumerate(tasks):
        out = learner.task_logits(task, adapt_steps=adapt_steps, include_pre=include_pre)
        if include_pre:
            logits, pre_logits = out
            pre_accs[i] = _accuracy(pre_logits, task.query_y)
        else:
            logits = out
        accs[i] = _accuracy(logits, task.query_y)
        n_scored += logits.shape[0]
    if include_pre:
        return accs, pre_accs, n_scored
    return accs, n_scored
