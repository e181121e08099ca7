import numpy as np
import pytest

from mmfew.algorithms import (
    Am3Learner,
    EmptySupport,
    FumiLearner,
    InnerLoopConfig,
    MamlLearner,
    OuterLoopConfig,
    SplitViolation,
    am3_predict,
    evaluate,
    fumi_init,
    inner_adapt,
    protonet_predict,
)
from mmfew.adam import Adam
from mmfew.diffcore import GradMode, Graph, Mode, grad, mul, reduce_sum, scale, softmax_cross_entropy, sub
from mmfew.episodes import SyntheticConfig, Task, generate_synthetic, sample_task
from mmfew.models import MixMode, bind_params, init_am3_params
from mmfew.rng import substream


def make_task(k=3, n=2, m=4, image_dim=6, text_dim=5, seed=0):
    rng = np.random.default_rng(seed)
    return Task(
        support_images=rng.standard_normal((k, n, image_dim)),
        support_texts=rng.standard_normal((k, text_dim)),
        query_images=rng.standard_normal((k, m, image_dim)),
        class_ids=tuple(range(k)),
    )


def small_fumi(seed=0, **kwargs):
    kwargs.setdefault("body_hidden", (8, 6))
    kwargs.setdefault("hyper_hidden", 7)
    kwargs.setdefault("outer", OuterLoopConfig(lr=1e-3, tasks_per_batch=2))
    return FumiLearner(6, 5, substream(seed, "init"), **kwargs)


def small_maml(seed=0, ways=3, **kwargs):
    kwargs.setdefault("body_hidden", (8, 6))
    kwargs.setdefault("outer", OuterLoopConfig(lr=1e-3, tasks_per_batch=2))
    return MamlLearner(6, ways, substream(seed, "init"), **kwargs)


class TestInnerAdapt:
    def test_hand_computed_scalar_step(self):
        # L(t) = (t - 3)^2 / 2, alpha=0.1, t=1, one step -> 1.2
        g = Graph()
        th = g.leaf(1.0)

        def loss_fn(params):
            d = sub(params["th"], g.constant(3.0))
            return scale(mul(d, d), 0.5)

        adapted = inner_adapt({"th": th}, loss_fn, alpha=0.1, steps=1)
        assert adapted["th"].value == pytest.approx(1.2, abs=0)

    def test_zero_steps_rejected(self):
        g = Graph()
        th = g.leaf(1.0)
        with pytest.raises(ValueError):
            inner_adapt({"th": th}, lambda p: mul(p["th"], p["th"]), 0.1, 0)

    def test_step_composition_values_equal(self):
        g = Graph()
        th = g.leaf(np.array([2.0, -1.0]))

        def loss_fn(params):
            return reduce_sum(mul(params["th"], params["th"]))

        once_twice = inner_adapt(
            inner_adapt({"th": th}, loss_fn, 0.05, 1), loss_fn, 0.05, 1
        )
        twice = inner_adapt({"th": th}, loss_fn, 0.05, 2)
        assert np.array_equal(once_twice["th"].value, twice["th"].value)

    def test_support_loss_descends_on_synthetic_tasks(self):
        records = generate_synthetic(SyntheticConfig(n_classes=12, images_per_class=20))
        rng = np.random.default_rng(0)
        learner = FumiLearner(32, 24, substream(3, "init"),
                              outer=OuterLoopConfig(lr=1e-3, tasks_per_batch=2))
        from mmfew import fastpath

        worse = 0
        for i in range(100):
            task = sample_task(records, 5, 2, 2, rng)
            head0 = learner._head0_np(task)
            layers = fastpath._body_layers(learner.params)
            before = fastpath.cross_entropy(
                fastpath.forward_logits(layers, head0, task.support_x), task.support_y
            )
            plyr, phead = fastpath.adapt(layers, head0, task.support_x, task.support_y, 0.01, 5)
            after = fastpath.cross_entropy(
                fastpath.forward_logits(plyr, phead, task.support_x), task.support_y
            )
            worse += after > before
        assert worse == 0

    def test_non_finite_loss_aborts(self):
        from mmfew.algorithms import NonFiniteLoss

        g = Graph()
        th = g.leaf(1.0)

        def loss_fn(params):
            return mul(params["th"], g.constant(np.inf))

        with pytest.raises(NonFiniteLoss):
            inner_adapt({"th": th}, loss_fn, 0.1, 1)


class TestFumiInit:
    def test_identical_descriptions_identical_partitions(self):
        learner = small_fumi()
        task = make_task()
        task.support_texts[1] = task.support_texts[0]
        g = Graph()
        bound = bind_params(g, learner.params)
        theta = fumi_init(bound, bound, task)
        head = theta["head.m"].value
        assert np.array_equal(head[0], head[1])

    def test_zero_hyper_gives_uniform_predictions(self):
        learner = small_fumi()
        for k in list(learner.params):
            if k.startswith("hyper."):
                learner.params[k] = np.zeros_like(learner.params[k])
        task = make_task()
        logits = learner.task_logits(task, adapt_steps=0)
        assert np.array_equal(logits, np.zeros_like(logits))

    def test_class_order_permutes_partitions(self):
        learner = small_fumi()
        task = make_task()
        order = [2, 0, 1]
        g = Graph()
        bound = bind_params(g, learner.params)
        head_a = fumi_init(bound, bound, task)["head.m"].value
        head_b = fumi_init(bound, bound, task.permuted(order))["head.m"].value
        assert np.array_equal(head_b, head_a[order])

    def test_initialization_ignores_support_images(self):
        learner = small_fumi()
        task = make_task()
        altered = Task(
            support_images=np.random.default_rng(99).standard_normal(task.support_images.shape),
            support_texts=task.support_texts,
            query_images=task.query_images,
            class_ids=task.class_ids,
        )
        g = Graph()
        bound = bind_params(g, learner.params)
        head_a = fumi_init(bound, bound, task)["head.m"].value
        head_b = fumi_init(bound, bound, altered)["head.m"].value
        assert np.array_equal(head_a, head_b)

    def test_no_free_standing_head_parameter(self):
        learner = small_fumi()
        assert not any(k.startswith("head.") for k in learner.params)


class TestOuterSteps:
    def test_fumi_alpha_zero_matches_direct_gradient(self):
        learner = small_fumi()
        task = make_task()
        keys = [k for k in learner.params if k.startswith("hyper.")]

        def build(adapt):
            g = Graph()
            bound = bind_params(g, learner.params)
            theta = fumi_init(bound, bound, task)
            if adapt:
                from mmfew.algorithms import _support_loss_fn

                theta = inner_adapt(theta, _support_loss_fn(task, Mode.EVAL, 0.0, None),
                                    alpha=0.0, steps=1, grad_mode=GradMode.SECOND_ORDER)
            from mmfew.algorithms import _query_logits

            loss = softmax_cross_entropy(
                _query_logits(theta, task, Mode.EVAL, 0.0, None), task.query_y
            )
            return [t.value for t in grad(loss, [bound[k] for k in keys])]

        with_inner = build(adapt=True)
        direct = build(adapt=False)
        for a, b in zip(with_inner, direct):
            assert np.array_equal(a, b)

    def test_first_adam_step_is_signlike(self):
        rng = np.random.default_rng(0)
        p = {"w": rng.standard_normal(50)}
        before = p["w"].copy()
        g = {"w": rng.standard_normal(50)}
        g["w"][np.abs(g["w"]) < 0.1] = 0.5  # keep |g| >> eps
        opt = Adam(p, lr=1e-3, weight_decay=0.0)
        opt.step(g)
        delta = p["w"] - before
        assert np.allclose(delta, -1e-3 * np.sign(g["w"]), atol=1e-6)

    def test_zero_gradient_moves_only_by_weight_decay(self):
        p = {"w": np.array([1.0, -2.0, 3.0])}
        zero = {"w": np.zeros(3)}
        opt = Adam({"w": p["w"].copy()}, lr=1e-2, weight_decay=0.0)
        w0 = opt.params["w"].copy()
        opt.step(zero)
        assert np.array_equal(opt.params["w"], w0)
        opt_wd = Adam({"w": p["w"].copy()}, lr=1e-2, weight_decay=5e-4)
        opt_wd.step(zero)
        moved = opt_wd.params["w"] - p["w"]
        assert np.all(np.sign(moved) == -np.sign(p["w"]))  # shrinks toward zero

    def test_maml_ignores_text_embeddings(self):
        task = make_task()
        zeroed = Task(
            support_images=task.support_images,
            support_texts=np.zeros_like(task.support_texts),
            query_images=task.query_images,
            class_ids=task.class_ids,
        )
        results = []
        for t in (task, zeroed):
            learner = small_maml(seed=5)
            learner.outer_step([t], substream(1, "dropout"))
            results.append({k: v.copy() for k, v in learner.params.items()})
        for k in results[0]:
            assert np.array_equal(results[0][k], results[1][k])

    def test_fumi_with_constant_zero_hypernetwork_matches_maml(self):
        # zero head init on both sides, shared body: identical trajectories
        fumi = small_fumi(seed=2)
        maml = small_maml(seed=3)
        for k in list(fumi.params):
            if k.startswith("hyper."):
                fumi.params[k] = np.zeros_like(fumi.params[k])
        maml.params["head.m"] = np.zeros_like(maml.params["head.m"])
        for k in list(maml.params):
            if k.startswith("body."):
                maml.params[k] = fumi.params[k].copy()
        task = make_task()
        lf = fumi.task_logits(task, adapt_steps=7)
        lm = maml.task_logits(task, adapt_steps=7)
        assert np.array_equal(lf, lm)

    def test_adaptation_benefit_on_average(self):
        records = generate_synthetic(SyntheticConfig(n_classes=14, images_per_class=30))
        learner = MamlLearner(32, 5, substream(0, "init"),
                              outer=OuterLoopConfig(lr=1e-3, tasks_per_batch=4))
        rng_ep = substream(0, "episodes")
        rng_drop = substream(0, "dropout")
        for _ in range(40):
            tasks = [sample_task(records, 5, 1, 8, rng_ep) for _ in range(4)]
            learner.outer_step(tasks, rng_drop)
        rng_ev = substream(1, "eval")
        tasks = [sample_task(records, 5, 1, 10, rng_ev) for _ in range(200)]
        accs, pre, _ = evaluate(learner, tasks, include_pre=True)
        assert accs.mean() > pre.mean()

    def test_training_determinism(self):
        records = generate_synthetic(SyntheticConfig(n_classes=10, images_per_class=20))

        def run():
            learner = FumiLearner(32, 24, substream(1, "init"), body_hidden=(8, 6),
                                  outer=OuterLoopConfig(lr=1e-3, tasks_per_batch=2))
            rng_ep = substream(0, "episodes")
            rng_drop = substream(0, "dropout")
            for _ in range(5):
                tasks = [sample_task(records, 3, 2, 4, rng_ep) for _ in range(2)]
                learner.outer_step(tasks, rng_drop)
            return learner.params

        a, b = run(), run()
        for k in a:
            assert np.array_equal(a[k], b[k])


class TestSecondOrderSignal:
    def test_second_order_differs_from_first_order_in_training(self):
        task = make_task(seed=4)
        deltas = {}
        for mode in (GradMode.FIRST_ORDER, GradMode.SECOND_ORDER):
            learner = small_fumi(seed=6, inner=InnerLoopConfig(grad_mode=mode))
            before = {k: v.copy() for k, v in learner.params.items()}
            learner.outer_step([task], substream(0, "dropout"))
            deltas[mode] = {k: learner.params[k] - before[k] for k in before}
        diff = max(
            np.abs(deltas[GradMode.FIRST_ORDER][k] - deltas[GradMode.SECOND_ORDER][k]).max()
            for k in deltas[GradMode.FIRST_ORDER]
        )
        assert diff > 1e-12


class TestFastpathParity:
    """The numpy evaluation path must reproduce the tape computation."""

    def test_fast_and_tape_engines_agree(self):
        records = generate_synthetic(SyntheticConfig(n_classes=10, images_per_class=30))
        rng = np.random.default_rng(0)
        learners = [
            FumiLearner(32, 24, substream(0, "init"),
                        outer=OuterLoopConfig(lr=1e-3, tasks_per_batch=2)),
            MamlLearner(32, 4, substream(1, "init"),
                        outer=OuterLoopConfig(lr=1e-3, tasks_per_batch=2)),
        ]
        rng_ep = substream(2, "episodes")
        rng_drop = substream(2, "dropout")
        for learner in learners:
            for _ in range(3):
                tasks = [sample_task(records, 4, 2, 5, rng_ep) for _ in range(2)]
                learner.outer_step(tasks, rng_drop)
            for seed in range(5):
                task = sample_task(records, 4, 2, 5, np.random.default_rng(seed))
                fast, fast_pre = learner.task_logits(task, adapt_steps=9,
                                                     include_pre=True, engine="fast")
                tape, tape_pre = learner.task_logits(task, adapt_steps=9,
                                                     include_pre=True, engine="tape")
                np.testing.assert_allclose(fast, tape, rtol=1e-10, atol=1e-12)
                np.testing.assert_allclose(fast_pre, tape_pre, rtol=1e-10, atol=1e-12)
                assert np.array_equal(fast.argmax(axis=1), tape.argmax(axis=1))


class TestSupportPermutation:
    def test_within_class_reordering_tolerance(self):
        learner = small_maml(seed=8)
        task = make_task(k=3, n=4, m=3, seed=9)
        perm = np.array([2, 0, 3, 1])
        shuffled = Task(
            support_images=task.support_images[:, perm],
            support_texts=task.support_texts,
            query_images=task.query_images,
            class_ids=task.class_ids,
        )
        la = learner.task_logits(task, adapt_steps=5)
        lb = learner.task_logits(shuffled, adapt_steps=5)
        np.testing.assert_allclose(la, lb, rtol=1e-9, atol=1e-12)


class TestMetricMethods:
    def _identity_params(self, dim):
        arrays = init_am3_params(np.random.default_rng(0), dim, 5, proto_dim=dim, hidden=4)
        arrays["am3.proj.w"] = np.eye(dim)
        arrays["am3.proj.b"] = np.zeros(dim)
        return arrays

    def test_prototype_is_support_mean(self):
        arrays = self._identity_params(2)
        task = Task(
            support_images=np.array([[[1.0, 0.0], [3.0, 2.0]]]),
            support_texts=np.zeros((1, 5)),
            query_images=np.array([[[2.0, 1.0]]]),
            class_ids=(0,),
        )
        g = Graph()
        logits = protonet_predict(bind_params(g, arrays), task)
        assert logits.value[0, 0] == 0.0  # query equals the prototype (2, 1)

    def test_hand_computed_distances_and_probability(self):
        arrays = self._identity_params(2)
        task = Task(
            support_images=np.array([[[0.0, 0.0]], [[4.0, 0.0]]]),
            support_texts=np.zeros((2, 5)),
            query_images=np.array([[[1.0, 0.0]], [[1.0, 0.0]]]),
            class_ids=(0, 1),
        )
        g = Graph()
        logits = protonet_predict(bind_params(g, arrays), task).value
        assert np.allclose(logits[0], [-1.0, -9.0], atol=0)
        p0 = np.exp(logits[0][0]) / np.exp(logits[0]).sum()
        assert p0 == pytest.approx(1 / (1 + np.exp(-8)), rel=1e-9)
        assert p0 == pytest.approx(0.999665, abs=5e-7)

    def test_duplicating_support_leaves_predictions_unchanged(self):
        arrays = init_am3_params(np.random.default_rng(2), 6, 5, proto_dim=4, hidden=4)
        task = make_task(k=3, n=2, m=4)
        doubled = Task(
            support_images=np.concatenate([task.support_images, task.support_images], axis=1),
            support_texts=task.support_texts,
            query_images=task.query_images,
            class_ids=task.class_ids,
        )
        g = Graph()
        params = bind_params(g, arrays)
        a = protonet_predict(params, task).value
        b = protonet_predict(params, doubled).value
        np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-13)

    def test_am3_image_only_equals_protonet_exactly(self):
        arrays = init_am3_params(np.random.default_rng(3), 6, 5, proto_dim=4, hidden=4)
        for seed in range(10):
            task = make_task(k=3, n=2, m=4, seed=seed)
            g = Graph()
            params = bind_params(g, arrays)
            lp = protonet_predict(params, task).value
            la = am3_predict(params, task, MixMode.FORCE_IMAGE_ONLY).value
            assert np.array_equal(lp, la)

    def test_am3_text_only_invariant_to_support_images(self):
        arrays = init_am3_params(np.random.default_rng(4), 6, 5, proto_dim=4, hidden=4)
        task = make_task(k=3, n=2, m=4, seed=1)
        replaced = Task(
            support_images=np.random.default_rng(77).standard_normal(task.support_images.shape),
            support_texts=task.support_texts,
            query_images=task.query_images,
            class_ids=task.class_ids,
        )
        g = Graph()
        params = bind_params(g, arrays)
        a = am3_predict(params, task, MixMode.FORCE_TEXT_ONLY).value
        b = am3_predict(params, replaced, MixMode.FORCE_TEXT_ONLY).value
        assert np.array_equal(a, b)

    def test_zero_shot_empty_support_allowed_only_text_mode(self):
        arrays = init_am3_params(np.random.default_rng(5), 6, 5, proto_dim=4, hidden=4)
        task = Task(
            support_images=np.zeros((3, 0, 6)),
            support_texts=np.random.default_rng(6).standard_normal((3, 5)),
            query_images=np.random.default_rng(7).standard_normal((3, 4, 6)),
            class_ids=(0, 1, 2),
        )
        g = Graph()
        params = bind_params(g, arrays)
        logits = am3_predict(params, task, MixMode.FORCE_TEXT_ONLY)
        assert logits.value.shape == (12, 3)
        with pytest.raises(EmptySupport):
            am3_predict(params, task, MixMode.LEARNED)

    def test_single_class_degenerate_probability_one(self):
        arrays = init_am3_params(np.random.default_rng(8), 6, 5, proto_dim=4, hidden=4)
        task = make_task(k=1, n=2, m=3)
        g = Graph()
        logits = am3_predict(bind_params(g, arrays), task, MixMode.LEARNED).value
        assert logits.shape == (3, 1)
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        assert np.all(p / p.sum(axis=1, keepdims=True) == 1.0)

    def test_label_symmetry_under_class_relabeling(self):
        arrays = init_am3_params(np.random.default_rng(9), 6, 5, proto_dim=4, hidden=4)
        task = make_task(k=4, n=2, m=3, seed=3)
        order = np.array([2, 0, 3, 1])
        g = Graph()
        params = bind_params(g, arrays)
        base = protonet_predict(params, task).value.reshape(4, 3, 4)
        perm = protonet_predict(params, task.permuted(order)).value.reshape(4, 3, 4)
        # block j of the permuted task holds original class order[j]; its
        # column m scores original class order[m]
        for j, src in enumerate(order):
            assert np.array_equal(perm[j], base[src][:, order])

    def test_metric_training_determinism(self):
        records = generate_synthetic(SyntheticConfig(n_classes=8, images_per_class=16))

        def run():
            learner = Am3Learner(32, 24, substream(2, "init"), proto_dim=16, hidden=8)
            rng_ep = substream(0, "episodes")
            rng_drop = substream(0, "dropout")
            for _ in range(4):
                tasks = [sample_task(records, 3, 2, 4, rng_ep) for _ in range(3)]
                learner.outer_step(tasks, rng_drop)
            return learner.params

        a, b = run(), run()
        for k in a:
            assert np.array_equal(a[k], b[k])


class TestEvaluate:
    def test_split_violation(self):
        learner = small_maml()
        task = make_task()
        with pytest.raises(SplitViolation):
            evaluate(learner, [task], allowed_class_ids={7, 8, 9})

    def test_counts_and_vector_shape(self):
        arrays_learner = Am3Learner(6, 5, substream(0, "init"), proto_dim=4, hidden=4)
        tasks = [make_task(k=3, n=1, m=5, seed=s) for s in range(20)]
        accs, n = evaluate(arrays_learner, tasks)
        assert accs.shape == (20,)
        assert n == 20 * 3 * 5

    def test_zero_initialized_learner_scores_exact_chance(self):
        learner = small_maml(ways=5)
        learner.params = {k: np.zeros_like(v) for k, v in learner.params.items()}
        tasks = [make_task(k=5, n=1, m=4, seed=s) for s in range(50)]
        accs, _ = evaluate(learner, tasks)  # full test-time adaptation schedule
        assert np.all(accs == 0.2)
