import dataclasses
import math

import numpy as np
import pytest

from trace_head import training as tr
from trace_head.data import gen_synthetic, reference_corpus
from trace_head.diagnostics import TOY_CONFIG
from trace_head.diffnum import no_grad
from trace_head.model import TraceModel

TOY_DATA = gen_synthetic(48, d_img=TOY_CONFIG.d_img, K=3, alpha=2.0, seed=1)
TOY_TRAIN, TOY_VAL = TOY_DATA[:32], TOY_DATA[32:]
FAST = tr.TrainConfig(batch_size=8, accum_target=16, learning_rate=1e-2, max_epochs=3, patience=5, encoder_n=1)


def test_config_validation():
    with pytest.raises(ValueError):
        tr.TrainConfig(batch_size=64, accum_target=100)
    with pytest.raises(ValueError):
        tr.TrainConfig(selection="argmax")
    with pytest.raises(ValueError):
        tr.TrainConfig(tau=0.0)
    assert tr.TrainConfig().micro_batches == 8


def test_published_defaults():
    c = tr.TrainConfig()
    assert (c.batch_size, c.accum_target, c.learning_rate, c.max_epochs, c.patience, c.min_delta) == (64, 512, 1e-4, 30, 5, 1e-4)
    assert (c.beta1, c.beta2, c.adam_eps) == (0.9, 0.999, 1e-8)


def test_adam_first_step_moves_by_learning_rate():
    store = {"w": np.array([1.0, -2.0])}

    class P:
        def __init__(self, a):
            self.data = a

    params = {"w": P(store["w"])}
    tr.Adam(0.1).step(params, {"w": np.array([3.0, -0.5])})
    # bias-corrected first step is lr * sign(g) up to eps
    np.testing.assert_allclose(store["w"], [0.9, -1.9], atol=1e-8)


def test_runs_are_deterministic():
    a = tr.train(FAST, TOY_TRAIN, TOY_VAL, TOY_CONFIG)
    b = tr.train(FAST, TOY_TRAIN, TOY_VAL, TOY_CONFIG)
    assert a.history_csv() == b.history_csv()
    for n in a.model.store.names():
        np.testing.assert_array_equal(a.model.store[n].data, b.model.store[n].data)


def test_seed_changes_run():
    a = tr.train(FAST, TOY_TRAIN, TOY_VAL, TOY_CONFIG)
    b = tr.train(dataclasses.replace(FAST, seed=1), TOY_TRAIN, TOY_VAL, TOY_CONFIG)
    assert a.history_csv() != b.history_csv()


def test_zero_rate_stops_after_patience_plus_one():
    cfg = dataclasses.replace(FAST, learning_rate=0.0, max_epochs=20, patience=3)
    run = tr.train(cfg, TOY_TRAIN, TOY_VAL, TOY_CONFIG)
    assert len(run.history) == cfg.patience + 1
    assert run.stopped_early and run.best_epoch == 1
    for n, v in run.initial_state.items():
        np.testing.assert_array_equal(run.model.store[n].data, v)


def test_steps_per_epoch_flush_remainder():
    # 32 examples, batch 8, four per step -> one step; 40 examples -> two (last partial)
    cfg = dataclasses.replace(FAST, accum_target=32, max_epochs=1)
    assert tr.train(cfg, TOY_TRAIN, TOY_VAL, TOY_CONFIG).history[0].steps == 1
    assert tr.train(cfg, TOY_DATA[:40], TOY_VAL, TOY_CONFIG).history[0].steps == 2


def test_accumulation_equals_one_concatenated_step():
    model = TraceModel.init(TOY_CONFIG, 3)
    model.apply_freeze(1)
    cfg = FAST
    full = model.make_batch(TOY_TRAIN[:24])
    parts = [full.take(slice(0, 8)), full.take(slice(8, 16)), full.take(slice(16, 24))]
    acc = tr.accumulated_gradients(model, parts, cfg)
    _, joint = tr.batch_gradients(model, full, cfg)
    for n in joint:
        np.testing.assert_allclose(acc[n], joint[n], rtol=0, atol=1e-12)

    start = model.store.snapshot()
    tr.Adam(1e-2).step(model.store.trainable(), acc)
    after_acc = model.store.snapshot()
    model.store.load(start)
    tr.Adam(1e-2).step(model.store.trainable(), joint)
    for n, v in model.store.snapshot().items():
        np.testing.assert_allclose(after_acc[n], v, rtol=0, atol=1e-10)


def test_unequal_micro_batches_are_example_weighted():
    model = TraceModel.init(TOY_CONFIG, 4)
    model.apply_freeze(1)
    full = model.make_batch(TOY_TRAIN[:12])
    acc = tr.accumulated_gradients(model, [full.take(slice(0, 9)), full.take(slice(9, 12))], FAST)
    _, joint = tr.batch_gradients(model, full, FAST)
    for n in joint:
        np.testing.assert_allclose(acc[n], joint[n], rtol=0, atol=1e-12)


def test_frozen_tensors_untouched_by_training():
    run = tr.train(FAST, TOY_TRAIN, TOY_VAL, TOY_CONFIG)
    store = run.model.store
    moved = 0
    for n, v in run.initial_state.items():
        if store[n].requires_grad:
            moved += not np.array_equal(store[n].data, v)
        else:
            np.testing.assert_array_equal(store[n].data, v)
    assert moved > 0


def test_non_finite_loss_aborts_with_diagnostics():
    model = TraceModel.init(TOY_CONFIG, 0)
    model.store["fusion.cls.b"].data[...] = np.nan
    with pytest.raises(tr.TrainingError, match=r"epoch 1, batch 0.*parameter norms"):
        tr.train(FAST, TOY_TRAIN, TOY_VAL, model=model)


def test_empty_sets_rejected():
    with pytest.raises(ValueError):
        tr.train(FAST, [], TOY_VAL, TOY_CONFIG)
    with pytest.raises(ValueError):
        tr.evaluate(TraceModel.init(TOY_CONFIG), [])


def test_history_csv_header():
    run = tr.train(dataclasses.replace(FAST, max_epochs=1), TOY_TRAIN, TOY_VAL, TOY_CONFIG)
    lines = run.history_csv().splitlines()
    assert lines[0].startswith("epoch,l_cls,l_rel,l_total")
    assert len(lines) == 2


def test_untrained_selection_is_chance():
    examples = gen_synthetic(1200, d_img=TOY_CONFIG.d_img, K=3, seed=8)
    model = TraceModel.init(TOY_CONFIG, 8)
    acc = tr.selection_accuracy(model, examples)
    se = math.sqrt((1 / 3) * (2 / 3) / 600)
    assert abs(acc - 1 / 3) < 4 * se


def test_oracle_scorer_selects_perfectly():
    from trace_head.data import SIGNAL_WORDS
    examples = gen_synthetic(60, d_img=TOY_CONFIG.d_img, K=4, seed=2)
    model = TraceModel.init(TOY_CONFIG, 0)
    by_caption = {c: sum(w in SIGNAL_WORDS for w in c.split()) for e in examples for c in e.captions}
    order = {}

    def oracle_predict(batch):
        rows = order["rows"][: len(batch)]
        del order["rows"][: len(batch)]
        return np.full(len(batch), 0.5), np.array([[by_caption[c] for c in e.captions] for e in rows], dtype=float)

    order["rows"] = [e for e in examples if e.label == 1]
    model.predict = oracle_predict
    assert tr.selection_accuracy(model, examples) == 1.0


def test_selection_accuracy_needs_ground_truth():
    ex = gen_synthetic(4, d_img=TOY_CONFIG.d_img, seed=0)
    for e in ex:
        e.signal_index = None
    with pytest.raises(ValueError):
        tr.selection_accuracy(TraceModel.init(TOY_CONFIG), ex)


def test_sweep_single_row_and_shared_init():
    rows = tr.layer_sweep(FAST, [0], TOY_TRAIN, TOY_VAL, model_config=TOY_CONFIG)
    assert len(rows) == 1 and rows[0].n == 0 and not rows[0].error
    csv_text = tr.sweep_csv(rows)
    assert csv_text.splitlines()[0] == "n,macro_f1,accuracy,trainable_params,epochs,error"
    a = tr.train(dataclasses.replace(FAST, encoder_n=0, max_epochs=1), TOY_TRAIN, TOY_VAL, TOY_CONFIG)
    b = tr.train(dataclasses.replace(FAST, encoder_n=2, max_epochs=1), TOY_TRAIN, TOY_VAL, TOY_CONFIG)
    for n in a.initial_state:
        np.testing.assert_array_equal(a.initial_state[n], b.initial_state[n])


def test_sweep_rejects_out_of_range_n():
    with pytest.raises(ValueError):
        tr.layer_sweep(FAST, [0, 9], TOY_TRAIN, TOY_VAL, model_config=TOY_CONFIG)


def test_sweep_cell_failure_is_reported(monkeypatch):
    real = tr.train

    def flaky(config, *args, **kw):
        if config.encoder_n == 1:
            raise tr.TrainingError("boom")
        return real(config, *args, **kw)

    monkeypatch.setattr(tr, "train", flaky)
    rows = tr.layer_sweep(dataclasses.replace(FAST, max_epochs=1), [0, 1, 2], TOY_TRAIN, TOY_VAL, model_config=TOY_CONFIG)
    assert [r.n for r in rows] == [0, 1, 2]
    assert rows[1].error == "boom" and math.isnan(rows[1].macro_f1)
    assert not rows[2].error


def _full_loss(model, batch):
    with no_grad():
        out = model.forward(batch, train=True)
        return model.losses(out, batch.labels, True)[2].item()


@pytest.mark.slow
def test_reference_training_halves_loss():
    train_set, val_set, _ = reference_corpus()
    run = tr.train(tr.REFERENCE_TRAIN_CONFIG, train_set, val_set, tr.REFERENCE_MODEL_CONFIG)
    batch = run.model.make_batch(train_set)
    final = _full_loss(run.model, batch)
    run.model.store.load(run.initial_state)
    initial = _full_loss(run.model, batch)
    assert final <= 0.5 * initial
