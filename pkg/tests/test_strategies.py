import math
from collections import Counter

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import clone, tiny_arch
from ucl.augment import AugConfig, augment_pairs, normalize
from ucl.data import build_split_stream
from ucl.losses import simsiam_loss
from ucl.models import build_encoder_bundle, parameter_vector
from ucl.strategies import (
    Learner,
    MixingConfig,
    ReplayBuffer,
    ReplayItem,
    SiState,
    StrategyConfig,
    der_distillation_scl,
    der_distillation_ucl,
    der_step_scl,
    der_step_ucl,
    finetune_step_scl,
    finetune_step_ucl,
    lump_mix,
    lump_step,
    multitask_train,
    reservoir_insert,
    si_accumulate,
    si_consolidate,
    si_penalty,
    train_task,
    uniform_sample,
)

AUG = AugConfig(size=8)


def raw_images(seed, n=6, size=8):
    rng = np.random.default_rng(seed)
    return torch.from_numpy(rng.integers(0, 256, (n, 3, size, size), dtype=np.uint8))


def sgd(bundle, lr=0.03):
    return torch.optim.SGD(bundle.parameters(), lr=lr, momentum=0.9, weight_decay=5e-4)


def params(bundle):
    return parameter_vector(bundle).values.clone()


def item(tag):
    return ReplayItem(torch.tensor([tag]))


# -- replay buffer ----------------------------------------------------------------


def test_under_capacity_keeps_everything():
    buf, rng = ReplayBuffer(200), np.random.default_rng(0)
    for k in range(150):
        reservoir_insert(buf, item(k), rng)
    assert len(buf) == 150 and [int(i.image) for i in buf.items] == list(range(150))


def test_reservoir_uniform_retention():
    rng = np.random.default_rng(0)
    counts = Counter()
    trials = 10_000
    for _ in range(trials):
        buf = ReplayBuffer(2)
        for k in range(10):
            reservoir_insert(buf, item(k), rng)
        counts.update(int(i.image) for i in buf.items)
    for k in range(10):
        assert abs(counts[k] / trials - 0.2) <= 0.02, (k, counts[k])


def test_seen_count_counts_rejections():
    buf, rng = ReplayBuffer(1), np.random.default_rng(0)
    for k in range(5):
        reservoir_insert(buf, item(k), rng)
    assert buf.seen_count == 5 and len(buf) == 1


def test_zero_capacity_buffer_stays_empty():
    buf, rng = ReplayBuffer(0), np.random.default_rng(0)
    for k in range(4):
        reservoir_insert(buf, item(k), rng)
    assert buf.is_empty() and buf.seen_count == 4


def test_cached_tensors_are_copies():
    buf = ReplayBuffer(2)
    feat = torch.zeros(3)
    reservoir_insert(buf, ReplayItem(torch.zeros(1), features=feat), np.random.default_rng(0))
    feat += 1
    assert torch.equal(buf.items[0].features, torch.zeros(3))


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 12), st.integers(0, 60), st.integers(0, 2**32 - 1))
def test_capacity_never_exceeded(capacity, offers, seed):
    buf, rng = ReplayBuffer(capacity), np.random.default_rng(seed)
    for k in range(offers):
        reservoir_insert(buf, item(k), rng)
        assert len(buf) <= capacity
        assert len(buf) == min(k + 1, capacity)


def test_buffer_state_round_trip():
    buf, rng = ReplayBuffer(3), np.random.default_rng(0)
    for k in range(7):
        reservoir_insert(buf, ReplayItem(torch.tensor([k]), label=k, task_id=1), rng)
    back = ReplayBuffer.from_state_dict(buf.state_dict())
    assert back.seen_count == 7 and [i.label for i in back.items] == [i.label for i in buf.items]


def test_uniform_sample_single_item():
    buf = ReplayBuffer(4)
    reservoir_insert(buf, item(7), np.random.default_rng(0))
    assert [int(i.image) for i in uniform_sample(buf, 3, np.random.default_rng(0))] == [7, 7, 7]


def test_uniform_sample_frequencies():
    buf, rng = ReplayBuffer(4), np.random.default_rng(1)
    for k in range(4):
        reservoir_insert(buf, item(k), rng)
    counts = Counter(int(i.image) for i in uniform_sample(buf, 40_000, rng))
    for k in range(4):
        assert abs(counts[k] / 40_000 - 0.25) <= 0.01


def test_uniform_sample_empty():
    with pytest.raises(ValueError):
        uniform_sample(ReplayBuffer(3), 1, np.random.default_rng(0))


def test_negative_capacity():
    with pytest.raises(ValueError):
        ReplayBuffer(-1)


# -- finetune ---------------------------------------------------------------------


def test_ucl_zero_lr_unchanged(tiny_bundle):
    before = params(tiny_bundle)
    views = augment_pairs(raw_images(0), range(6), AUG, 0, 0)
    stats = finetune_step_ucl(tiny_bundle, sgd(tiny_bundle, lr=0.0), views, simsiam_loss)
    assert torch.equal(params(tiny_bundle), before)
    assert math.isfinite(stats["loss"])


def test_ucl_step_reports_simsiam_value(tiny_bundle):
    views = augment_pairs(raw_images(0), range(6), AUG, 0, 0)
    expected = float(simsiam_loss(clone(tiny_bundle), views.view1, views.view2).loss.detach())
    stats = finetune_step_ucl(tiny_bundle, sgd(tiny_bundle), views, simsiam_loss)
    assert stats["loss"] == expected


def test_ucl_loss_decreases_on_fixed_batch(tiny_bundle):
    views = augment_pairs(raw_images(1, n=16), range(16), AUG, 0, 0)
    opt = sgd(tiny_bundle, lr=0.05)
    losses = [finetune_step_ucl(tiny_bundle, opt, views, simsiam_loss)["loss"] for _ in range(50)]
    assert losses[-1] < losses[0]


def scl_bundle(num_tasks=2, k=2):
    return build_encoder_bundle(tiny_arch(supervised=True, num_tasks=num_tasks, classes_per_task=k), seed=0)


def test_scl_uniform_logits_give_ln_k():
    b = scl_bundle(k=3)
    with torch.no_grad():
        b.classifier.weight.zero_()
        b.classifier.bias.zero_()
    x = normalize(raw_images(0, n=4), AUG.mean, AUG.std)
    stats = finetune_step_scl(b, sgd(b), x, torch.tensor([0, 1, 2, 0]), task_id=1)
    assert stats["ce"] == pytest.approx(math.log(3), abs=1e-6)


def test_scl_zero_lr_and_trend():
    b = scl_bundle()
    x = normalize(raw_images(2, n=8), AUG.mean, AUG.std)
    y = torch.tensor([0, 1] * 4)
    before = params(b)
    finetune_step_scl(b, sgd(b, lr=0.0), x, y, 0)
    assert torch.equal(params(b), before)
    opt = sgd(b, lr=0.05)
    losses = [finetune_step_scl(b, opt, x, y, 0)["ce"] for _ in range(50)]
    assert losses[-1] < losses[0]


def test_scl_label_outside_slice():
    b = scl_bundle()
    x = normalize(raw_images(0, n=2), AUG.mean, AUG.std)
    with pytest.raises(ValueError):
        finetune_step_scl(b, sgd(b), x, torch.tensor([0, 2]), 0)


# -- synaptic intelligence ----------------------------------------------------------


def si_state(n=3, **kw):
    return SiState.init(torch.zeros(n, dtype=torch.float64), **kw)


def test_si_accumulate_hand_value():
    s = si_state()
    si_accumulate(s, torch.full((3,), -1.0, dtype=torch.float64), torch.full((3,), 0.1, dtype=torch.float64))
    assert torch.allclose(s.path_integral, torch.full((3,), 0.1, dtype=torch.float64))
    si_accumulate(s, torch.full((3,), -1.0, dtype=torch.float64), torch.full((3,), 0.1, dtype=torch.float64))
    assert torch.allclose(s.path_integral, torch.full((3,), 0.2, dtype=torch.float64))
    si_accumulate(s, torch.zeros(3, dtype=torch.float64), torch.ones(3, dtype=torch.float64))
    assert torch.allclose(s.path_integral, torch.full((3,), 0.2, dtype=torch.float64))


def test_si_accumulate_shape_mismatch():
    with pytest.raises(ValueError):
        si_accumulate(si_state(), torch.zeros(2), torch.zeros(2))


def test_si_consolidate_hand_value():
    s = si_state(1)
    s.path_integral = torch.tensor([0.2], dtype=torch.float64)
    si_consolidate(s, torch.tensor([1.0], dtype=torch.float64))
    assert float(s.omega) == pytest.approx(0.1)
    assert float(s.star_params) == 1.0 and float(s.path_integral) == 0.0
    si_consolidate(s, torch.tensor([1.0], dtype=torch.float64))  # zero path leaves omega alone
    assert float(s.omega) == pytest.approx(0.1)


def test_si_consolidate_clamps_negative():
    s = si_state(2)
    s.path_integral = torch.tensor([-5.0, 0.5], dtype=torch.float64)
    si_consolidate(s, torch.zeros(2, dtype=torch.float64))
    assert bool((s.omega >= 0).all()) and float(s.omega[0]) == 0.0


def test_si_penalty_hand_value_and_zero_after_consolidation():
    s = SiState(torch.ones(1, dtype=torch.float64), torch.zeros(1, dtype=torch.float64),
                torch.zeros(1, dtype=torch.float64), c=0.1)
    theta = torch.tensor([2.0], dtype=torch.float64)
    assert float(si_penalty(s, theta)) == pytest.approx(0.4)
    si_consolidate(s, theta)
    assert float(si_penalty(s, theta)) == 0.0


def test_si_xi_must_be_positive():
    with pytest.raises(ValueError):
        si_state(xi=0.0)


def test_si_training_accumulates_and_penalizes(small_synthetic):
    stream = build_split_stream("synthetic", 2, 2, 0, source=small_synthetic)
    b = build_encoder_bundle(tiny_arch(), seed=0)
    learner = Learner(b, StrategyConfig(name="si", si_c=1.0), simsiam_loss, AUG, seed=0)
    train_task(learner, small_synthetic, stream.tasks[0], epochs=1, batch_size=8, seed=0)
    assert bool((learner.si_state.omega >= 0).all()) and float(learner.si_state.omega.sum()) > 0
    assert float(learner.si_state.path_integral.abs().sum()) == 0.0
    learner.begin_task(1)
    views = augment_pairs(small_synthetic.train_images[:8], range(8), AUG, 0, 5)
    stats = learner.observe(type("B", (), {"views": views})())
    assert stats["si_penalty"] >= 0


# -- dark experience replay ----------------------------------------------------------


def test_der_ucl_hand_mse(tiny_bundle):
    tiny_bundle.eval()
    imgs = raw_images(3, n=2)
    with torch.no_grad():
        current = tiny_bundle.project(normalize(imgs, AUG.mean, AUG.std))
    offsets = torch.zeros_like(current)
    offsets[0, 0] = 1.0  # squared distance 1
    offsets[1, 1] = 2.0  # squared distance 4
    items = [ReplayItem(imgs[k], features=current[k] + offsets[k]) for k in range(2)]
    with torch.no_grad():
        assert float(der_distillation_ucl(tiny_bundle, items, AUG)) == pytest.approx(2.5, abs=1e-5)
        unchanged = [ReplayItem(imgs[k], features=current[k]) for k in range(2)]
        assert float(der_distillation_ucl(tiny_bundle, unchanged, AUG)) == pytest.approx(0.0, abs=1e-10)


def test_der_scl_hand_example():
    b = scl_bundle(num_tasks=1)
    b.eval()
    with torch.no_grad():
        b.classifier.weight.zero_()
        b.classifier.bias.copy_(torch.tensor([math.log(3), 0.0]))
    items = [ReplayItem(raw_images(0, n=1)[0], label=0, task_id=0, logits=torch.zeros(2))]
    with torch.no_grad():
        assert float(der_distillation_scl(b, items, AUG)) == pytest.approx(0.125, abs=1e-6)
        same = [ReplayItem(items[0].image, 0, 0, logits=torch.tensor([math.log(3), 0.0]))]
        assert float(der_distillation_scl(b, same, AUG)) == pytest.approx(0.0, abs=1e-12)


def test_der_scl_softmax_uses_item_task_slice():
    # logits outside the item's slice must not matter
    b = scl_bundle(num_tasks=2)
    b.eval()
    with torch.no_grad():
        b.classifier.weight.zero_()
        b.classifier.bias.copy_(torch.tensor([math.log(3), 0.0, 5.0, -5.0]))
    cached = torch.tensor([0.0, 0.0, 100.0, 100.0])
    items = [ReplayItem(raw_images(0, n=1)[0], label=0, task_id=0, logits=cached)]
    with torch.no_grad():
        assert float(der_distillation_scl(b, items, AUG)) == pytest.approx(0.125, abs=1e-6)


def test_der_step_inserts_with_cache(tiny_bundle):
    buf = ReplayBuffer(10)
    imgs = raw_images(4)
    views = augment_pairs(imgs, range(6), AUG, 0, 0)
    stats = der_step_ucl(tiny_bundle, sgd(tiny_bundle), views, buf, 0.1, simsiam_loss,
                         np.random.default_rng(0), imgs, AUG, task_id=2)
    assert len(buf) == 6 and stats["der_reg"] == 0.0
    assert all(i.features is not None and i.features.shape == (16,) and i.task_id == 2 for i in buf.items)


def test_der_negative_alpha(tiny_bundle):
    views = augment_pairs(raw_images(0), range(6), AUG, 0, 0)
    with pytest.raises(ValueError):
        der_step_ucl(tiny_bundle, sgd(tiny_bundle), views, ReplayBuffer(2), -1.0, simsiam_loss,
                     np.random.default_rng(0), raw_images(0), AUG)


def test_der_scl_alpha_zero_is_plain_step():
    a, b = scl_bundle(), scl_bundle()
    buf, rng = ReplayBuffer(20), np.random.default_rng(0)
    oa, ob = sgd(a), sgd(b)
    for step in range(5):
        raw = raw_images(step)
        x = normalize(raw, AUG.mean, AUG.std)
        y = torch.tensor([0, 1, 0, 1, 1, 0])
        finetune_step_scl(a, oa, x, y, 1)
        der_step_scl(b, ob, x, y, buf, 0.0, 1, rng, raw, AUG)
    assert torch.equal(params(a), params(b))
    assert len(buf) == 20


# -- LUMP ---------------------------------------------------------------------------


def test_lump_mix_values():
    x, m = torch.ones(2, 3), torch.zeros(2, 3)
    assert torch.equal(lump_mix(x, m, 1.0), x)
    assert torch.equal(lump_mix(x, m, 0.0), m)
    assert torch.allclose(lump_mix(x, m, 0.4), torch.full((2, 3), 0.4))


def test_lump_mix_errors():
    with pytest.raises(ValueError):
        lump_mix(torch.ones(2, 3), torch.ones(3, 3), 0.5)
    with pytest.raises(ValueError):
        lump_mix(torch.ones(2), torch.ones(2), 1.5)


def test_mixing_config():
    rng = np.random.default_rng(0)
    draws = [MixingConfig(0.4).draw(rng) for _ in range(200)]
    assert all(0.0 <= d <= 1.0 for d in draws) and len(set(draws)) > 1
    assert MixingConfig(fixed_lambda=0.3).draw(rng) == 0.3
    for bad in (dict(alpha=0.0), dict(fixed_lambda=-0.1)):
        with pytest.raises(ValueError):
            MixingConfig(**bad)


def test_lump_stores_raw_images(tiny_bundle):
    buf = ReplayBuffer(10)
    imgs = raw_images(5)
    views = augment_pairs(imgs, range(6), AUG, 0, 0)
    lump_step(tiny_bundle, sgd(tiny_bundle), views, buf, MixingConfig(), np.random.default_rng(0),
              simsiam_loss, imgs, AUG)
    assert all(i.image.dtype == torch.uint8 for i in buf.items)
    assert torch.equal(torch.stack([i.image for i in buf.items]), imgs)


# -- degeneracy chain and determinism ---------------------------------------------------


def run_chain(kind, steps=10):
    b = build_encoder_bundle(tiny_arch(), seed=3)
    opt = sgd(b)
    rng = np.random.default_rng(11)
    buf = ReplayBuffer(0 if kind == "lump_empty" else 12)
    if kind == "lump_fixed":
        for k, img in enumerate(raw_images(99, n=12)):
            reservoir_insert(buf, ReplayItem(img), rng)
    for step in range(steps):
        raw = raw_images(step)
        views = augment_pairs(raw, range(6), AUG, 0, step)
        if kind == "finetune":
            finetune_step_ucl(b, opt, views, simsiam_loss)
        elif kind == "der0":
            der_step_ucl(b, opt, views, buf, 0.0, simsiam_loss, rng, raw, AUG)
        elif kind == "lump_fixed":
            lump_step(b, opt, views, buf, MixingConfig(fixed_lambda=1.0), rng, simsiam_loss, raw, AUG)
        else:
            lump_step(b, opt, views, buf, MixingConfig(), rng, simsiam_loss, raw, AUG)
    return params(b)


def test_degeneracy_chain_bitwise():
    reference = run_chain("finetune")
    for kind in ("der0", "lump_fixed", "lump_empty"):
        assert torch.equal(run_chain(kind), reference), kind


def test_der_and_lump_steps_deterministic():
    for kind in ("der0", "lump_fixed"):
        assert torch.equal(run_chain(kind, 4), run_chain(kind, 4))


# -- learner and multitask ----------------------------------------------------------


def test_strategy_config_validation():
    for bad in (dict(name="agem"), dict(paradigm="rl"), dict(name="lump", paradigm="scl"),
                dict(der_alpha=-0.1), dict(buffer_size=-1), dict(lump_fixed_lambda=2.0)):
        with pytest.raises(ValueError):
            StrategyConfig(**bad).validate()


def fresh_learner(cfg, paradigm="ucl"):
    arch = tiny_arch(supervised=True, num_tasks=2, classes_per_task=2) if paradigm == "scl" else tiny_arch()
    cfg.paradigm = paradigm
    return Learner(build_encoder_bundle(arch, seed=0), cfg, simsiam_loss if paradigm == "ucl" else None, AUG, seed=0)


@pytest.mark.parametrize("paradigm", ["ucl", "scl"])
def test_multitask_single_task_equals_finetune(small_synthetic, paradigm):
    task = build_split_stream("synthetic", 2, 2, 0, source=small_synthetic).tasks[0]
    ft = fresh_learner(StrategyConfig(name="finetune"), paradigm)
    train_task(ft, small_synthetic, task, epochs=2, batch_size=8, seed=0)
    mt = fresh_learner(StrategyConfig(name="multitask"), paradigm)
    multitask_train(mt, small_synthetic, [task], epochs=2, batch_size=8, seed=0)
    assert torch.equal(params(ft.bundle), params(mt.bundle))


def test_multitask_zero_epochs(small_synthetic):
    tasks = build_split_stream("synthetic", 2, 2, 0, source=small_synthetic).tasks
    mt = fresh_learner(StrategyConfig(name="multitask"))
    before = params(mt.bundle)
    multitask_train(mt, small_synthetic, tasks, epochs=0, batch_size=8, seed=0)
    assert torch.equal(params(mt.bundle), before)


def test_multitask_scl_loss_decreases(small_synthetic):
    tasks = build_split_stream("synthetic", 2, 2, 0, source=small_synthetic).tasks
    arch = tiny_arch(supervised=True, num_tasks=2, classes_per_task=2)
    # fixed data: identity views
    mt = Learner(build_encoder_bundle(arch, seed=0), StrategyConfig(name="multitask", paradigm="scl", lr=0.01),
                 None, AugConfig.identity(8), seed=0)

    def ce(task):
        x = normalize(small_synthetic.train_images[task.train_ids], AUG.mean, AUG.std)
        y = torch.from_numpy(task.local_label(small_synthetic.train_labels[task.train_ids]))
        mt.bundle.train()  # batch statistics, as seen during training
        with torch.no_grad():
            logits = mt.bundle.classifier(mt.bundle.backbone(x))[:, 2 * task.task_id:2 * task.task_id + 2]
            return float(torch.nn.functional.cross_entropy(logits, y))

    start = [ce(t) for t in tasks]
    multitask_train(mt, small_synthetic, tasks, epochs=15, batch_size=8, seed=0)
    assert all(ce(t) < s for t, s in zip(tasks, start))


def test_learner_state_round_trip(small_synthetic):
    task = build_split_stream("synthetic", 2, 2, 0, source=small_synthetic).tasks[0]
    a = fresh_learner(StrategyConfig(name="der", buffer_size=5))
    train_task(a, small_synthetic, task, epochs=1, batch_size=8, seed=0)
    b = fresh_learner(StrategyConfig(name="der", buffer_size=5))
    b.load_state_dict(a.state_dict())
    assert b.buffer.seen_count == a.buffer.seen_count == 24
    assert a.rng.random() == b.rng.random()
