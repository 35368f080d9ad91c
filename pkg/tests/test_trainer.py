import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from poisonbrew import datapipe as data, nn
from poisonbrew import trainer as tr
from poisonbrew.rng import stream

from conftest import blob_mlp, blobs


def _blobs(n_per=60, seed=0, split="train"):
    return blobs(n_per, seed, split)


def _mlp_spec():
    return blob_mlp()


def test_desk_schedule():
    cfg = tr.TrainConfig()
    assert cfg.run_epochs == 10
    assert cfg.run_drop_epochs == (4, 6, 9)
    assert [cfg.lr_at(e) for e in (0, 3, 4, 5, 6, 8, 9)] == pytest.approx(
        [0.01, 0.01, 1e-3, 1e-3, 1e-4, 1e-4, 1e-5])


def test_full_schedule():
    cfg = tr.TrainConfig(epoch_scale=1.0)
    assert cfg.run_epochs == 40 and cfg.run_drop_epochs == (14, 24, 35)


def test_drop_collisions_merge():
    cfg = tr.TrainConfig(epochs=8, drop_epochs=(2, 3, 6), epoch_scale=0.25)
    assert cfg.run_epochs == 2
    assert cfg.run_drop_epochs == (1,)


def test_config_errors():
    with pytest.raises(ValueError):
        tr.TrainConfig(drop_epochs=(5, 5))
    with pytest.raises(ValueError):
        tr.TrainConfig(epochs=10, drop_epochs=(12,))
    with pytest.raises(ValueError):
        tr.TrainConfig(keep_fraction=0.0)
    with pytest.raises(ValueError):
        tr.DPConfig(clip=0.0)


def test_dp_clip_examples():
    dp = tr.DPConfig(clip=1.0, sigma=0.0, enabled=True)
    gen = np.random.default_rng(0)
    assert np.allclose(tr.dp_sgd_step(np.array([3.0, 4.0]), dp, gen), [0.6, 0.8])
    assert np.array_equal(tr.dp_sgd_step(np.array([0.3, 0.4]), dp, gen), [0.3, 0.4])


def test_dp_noise_distribution():
    dp = tr.DPConfig(clip=2.0, sigma=0.5, enabled=True)
    out = tr.dp_sgd_step(np.zeros(20000), dp, np.random.default_rng(1))
    assert stats.kstest(out / (0.5 * 2.0), "norm").pvalue > 1e-3


def test_zero_epochs_returns_init():
    ds = _blobs()
    trace = tr.train_victim(ds, _mlp_spec(), tr.TrainConfig(epochs=0, drop_epochs=(), seed=3))
    assert np.array_equal(trace.params.flat, nn.build(_mlp_spec(), 3).flat)
    assert trace.train_loss == []


def test_mlp_learns_blobs_and_is_deterministic():
    ds, val = _blobs(), _blobs(split="validation", seed=1)
    cfg = tr.TrainConfig(epochs=5, drop_epochs=(), epoch_scale=1.0, lr=0.05, augment=False, seed=2)
    a = tr.train_victim(ds, _mlp_spec(), cfg, validation=val)
    b = tr.train_victim(ds, _mlp_spec(), cfg, validation=val)
    assert a.val_acc[-1] > 0.9
    assert a.params.flat.tobytes() == b.params.flat.tobytes()
    assert a.train_loss[-1] < a.train_loss[0]


def test_zero_delta_poison_is_clean_training():
    ds = _blobs()
    poisoned = data.apply_poison(ds, ds.ids[:5], np.zeros((5, 1, 1, 2)))
    cfg = tr.TrainConfig(epochs=2, drop_epochs=(), epoch_scale=1.0, augment=False)
    assert np.array_equal(tr.train_victim(ds, _mlp_spec(), cfg).params.flat,
                          tr.train_victim(poisoned, _mlp_spec(), cfg).params.flat)


def test_keep_fraction_subsamples():
    cfg = tr.TrainConfig(epochs=1, drop_epochs=(), epoch_scale=1.0, keep_fraction=0.5, augment=False)
    assert tr.train_victim(_blobs(), _mlp_spec(), cfg).train_size == 90


def test_nesterov_step_by_hand():
    ds = _blobs(n_per=4)
    spec = _mlp_spec()
    cfg = tr.TrainConfig(epochs=1, drop_epochs=(), epoch_scale=1.0, batch_size=len(ds), augment=False,
                         lr=0.1, weight_decay=0.01, momentum=0.9, seed=5)
    theta = nn.build(spec, 5).flat
    order = stream(5, "shuffle", 0).permutation(len(ds))
    _, g = tr.batch_gradient(spec, theta, ds.images[order], ds.labels[order])
    g = g + 0.01 * theta
    v = g
    expect = theta - 0.1 * (g + 0.9 * v)
    got = tr.train_victim(ds, spec, cfg).params.flat
    assert np.allclose(got, expect, rtol=0, atol=1e-15)


def test_hooks_see_every_batch():
    class Count:
        def __init__(self):
            self.batches, self.epochs = 0, 0

        def on_batch(self, epoch, flat, grad, lr):
            self.batches += 1

        def on_epoch_end(self, epoch):
            self.epochs += 1

        def export(self):
            return {"batches": [float(self.batches)] * self.epochs}

    c = Count()
    cfg = tr.TrainConfig(epochs=2, drop_epochs=(), epoch_scale=1.0, batch_size=50, augment=False)
    trace = tr.train_victim(_blobs(), _mlp_spec(), cfg, hooks=[c])
    assert c.batches == 2 * 4 and c.epochs == 2
    assert trace.monitors["batches"] == [8.0, 8.0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    cfg = tr.TrainConfig(epochs=3, drop_epochs=(), epoch_scale=1.0, lr=1e300, augment=False, weight_decay=0)
    with pytest.raises(tr.TrainingDiverged):
        tr.train_victim(_blobs(), _mlp_spec(), cfg)


def test_trace_csv(tmp_path):
    cfg = tr.TrainConfig(epochs=2, drop_epochs=(1,), epoch_scale=1.0, augment=False)
    trace = tr.train_victim(_blobs(), _mlp_spec(), cfg, validation=_blobs(split="validation"))
    trace.write_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "epoch,lr,train_loss,val_acc" and len(lines) == 3


@settings(max_examples=20, deadline=None)
@given(st.floats(0.1, 10), st.floats(0, 2), st.integers(0, 1000))
def test_dp_clipped_norm_bound(clip, scale, seed):
    g = np.random.default_rng(seed).normal(size=7) * scale
    out = tr.dp_sgd_step(g, tr.DPConfig(clip=clip), np.random.default_rng(0))
    assert np.linalg.norm(out) <= clip * (1 + 1e-12)
