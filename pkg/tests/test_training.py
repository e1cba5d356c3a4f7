import numpy as np
import pytest

from layerslim.errors import ParameterError
from layerslim.model import ModelConfig, TokenStream, init_model, named_tensors
from layerslim.tasks import MajorityTask
from layerslim.training import batch_loss, loss_and_gradients, train_toy


def small_model(seed=11):
    cfg = ModelConfig(
        vocab_size=16, dim=8, n_layers=2, n_heads=2, mlp_hidden=10, max_seq=12, seed=seed
    )
    return init_model(cfg)


def small_batch():
    task = MajorityTask(vocab_size=16, visual_len=5)
    return task.generate(6, seed=3)


def _grad_lookup(grads, name):
    parts = name.split(".")
    if parts[0] == "layers":
        return grads["layers"][int(parts[1])][parts[2]]
    key = {"embed": "embed", "pos_embed": "pos", "out_norm_gain": "out_gain", "unembed": "unembed"}
    return grads[key[name]]


def test_loss_matches_batch_loss():
    m = small_model()
    batch = small_batch()
    loss, _ = loss_and_gradients(m, batch)
    assert abs(loss - batch_loss(m, batch)) < 1e-10


def test_gradient_check_against_finite_differences():
    # central finite differences on randomly chosen scalar parameters
    m = small_model()
    batch = small_batch()
    _, grads = loss_and_gradients(m, batch)
    tensors = named_tensors(m)
    rng = np.random.default_rng(99)
    checked = 0
    worst = 0.0
    while checked < 25:
        tname, tarr = tensors[int(rng.integers(0, len(tensors)))]
        flat = int(rng.integers(0, tarr.size))
        g = float(_grad_lookup(grads, tname).reshape(-1)[flat])
        w0 = float(tarr.reshape(-1)[flat])
        h = max(1e-4, 1e-3 * abs(w0))
        wp = np.float32(w0 + h)
        wm = np.float32(w0 - h)
        if wp == wm:
            continue
        tarr.reshape(-1)[flat] = wp
        lp = batch_loss(m, batch)
        tarr.reshape(-1)[flat] = wm
        lm = batch_loss(m, batch)
        tarr.reshape(-1)[flat] = np.float32(w0)
        fd = (lp - lm) / (float(wp) - float(wm))
        rel = abs(fd - g) / max(abs(fd), abs(g), 1e-6)
        worst = max(worst, rel)
        checked += 1
    assert worst < 1e-3, f"worst relative gradient error {worst:.2e}"


def test_lr_zero_is_bit_exact_noop():
    m = small_model()
    before = {n: t.copy() for n, t in named_tensors(m)}
    task = MajorityTask(vocab_size=16, visual_len=5)
    trained = train_toy(m, task, steps=3, lr=0.0, batch_size=4, n_train=32, seed=1)
    for n, t in named_tensors(trained):
        assert np.array_equal(before[n], t), f"{n} changed under lr=0"


def test_training_reduces_held_out_loss():
    m = small_model()
    task = MajorityTask(vocab_size=16, visual_len=5)
    held_out = task.generate(64, seed=777)
    loss0 = batch_loss(m, held_out)
    trained = train_toy(m, task, steps=60, lr=3e-3, batch_size=16, n_train=512, seed=2)
    loss1 = batch_loss(trained, held_out)
    assert loss1 < loss0


def test_training_determinism():
    task = MajorityTask(vocab_size=16, visual_len=5)
    a = train_toy(small_model(), task, steps=5, lr=1e-3, batch_size=4, n_train=64, seed=4)
    b = train_toy(small_model(), task, steps=5, lr=1e-3, batch_size=4, n_train=64, seed=4)
    for (na, ta), (_, tb) in zip(named_tensors(a), named_tensors(b)):
        assert np.array_equal(ta, tb), na


def test_original_model_untouched_by_training():
    m = small_model()
    snap = m.embed.copy()
    task = MajorityTask(vocab_size=16, visual_len=5)
    train_toy(m, task, steps=2, lr=1e-3, batch_size=4, n_train=32, seed=5)
    assert np.array_equal(m.embed, snap)


def test_unlabeled_sample_rejected():
    m = small_model()
    s = TokenStream(visual=(4, 5, 6, 7, 8), text=(9, 2), label=None)
    with pytest.raises(ParameterError):
        loss_and_gradients(m, [s])


def test_mixed_length_batch_rejected():
    m = small_model()
    a = TokenStream(visual=(4, 5, 6, 7, 8), text=(9, 2), label=0)
    b = TokenStream(visual=(4, 5, 6), text=(9, 2), label=1)
    with pytest.raises(ParameterError):
        loss_and_gradients(m, [a, b])


class TestMajorityTask:
    def test_balanced_and_consistent(self):
        task = MajorityTask(vocab_size=32, visual_len=9)
        samples = task.generate(500, seed=8)
        labels = np.array([s.label for s in samples])
        assert 0.4 < labels.mean() < 0.6
        for s in samples:
            query = s.text[0]
            count = sum(1 for t in s.visual if t == query)
            assert (count > task.visual_len // 2) == bool(s.label)

    def test_determinism(self):
        task = MajorityTask()
        a = task.generate(20, seed=1)
        b = task.generate(20, seed=1)
        assert a == b

    def test_even_visual_len_rejected(self):
        with pytest.raises(ParameterError):
            MajorityTask(visual_len=4)
