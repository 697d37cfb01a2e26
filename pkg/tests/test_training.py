import math

import pytest
import torch

from helpers import tiny_model_config
from retouchgan.data import BlemishSpec, synth_pair
from retouchgan.errors import CheckpointError, ConfigError, NumericError
from retouchgan.losses import RandomConvPyramid
from retouchgan.training import (LossWeights, TrainConfig, Trainer, _batch_indices, load_model,
                                 load_training_state, save_model, save_training_state)

EXTRACTOR = RandomConvPyramid(channels=(4, 8))


def toy_data(n=6, levels=4):
    res = 2 ** (levels + 1)
    pairs = [synth_pair(k, BlemishSpec(), res) for k in range(n)]
    return torch.stack([p.raw for p in pairs]), torch.stack([p.clean for p in pairs])


def toy_trainer(seed=0, **kw):
    cfg = TrainConfig(steps=kw.pop("steps", 10), batch_size=kw.pop("batch_size", 2), seed=seed,
                      r1_interval=kw.pop("r1_interval", 3), disc_channel_base=4, disc_channel_max=8, **kw)
    return Trainer(tiny_model_config(), cfg, extractor=EXTRACTOR)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(steps=0)
    with pytest.raises(ConfigError):
        TrainConfig(lr_schedule="step")
    with pytest.raises(ConfigError):
        LossWeights(w_l1=-1)
    with pytest.raises(ConfigError):
        LossWeights(0, 0, 0)
    cfg = TrainConfig(seed=3, losses=LossWeights(w_adv=0.1))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_batch_indices_cover_each_epoch():
    n, b = 10, 3
    seen = torch.cat([_batch_indices(n, b, s, seed=1) for s in range(3)])
    assert len(set(seen.tolist())) == 9
    assert torch.equal(_batch_indices(n, b, 4, 1), _batch_indices(n, b, 4, 1))


def test_zero_learning_rate_leaves_parameters_bit_identical():
    raw, clean = toy_data()
    t = toy_trainer(lr_g=0.0, lr_d=0.0)
    before = {k: v.clone() for k, v in t.model.state_dict().items()}
    before_d = {k: v.clone() for k, v in t.disc.state_dict().items()}
    t.fit(raw, clean, steps=3)
    assert all(torch.equal(before[k], v) for k, v in t.model.state_dict().items())
    assert all(torch.equal(before_d[k], v) for k, v in t.disc.state_dict().items())


def test_same_seed_same_trace():
    raw, clean = toy_data()
    a = toy_trainer(seed=5).fit(raw, clean, steps=4)
    b = toy_trainer(seed=5).fit(raw, clean, steps=4)
    assert a == b
    c = toy_trainer(seed=6).fit(raw, clean, steps=4)
    assert a != c


def test_total_loss_is_weighted_sum_and_finite():
    raw, clean = toy_data()
    t = toy_trainer(losses=LossWeights(0.7, 0.3, 0.2))
    rec = t.train_step(*t.make_batch(raw, clean))
    w = t.cfg.losses
    expected = w.w_l1 * rec["l1"] + w.w_perc * rec["perc"] + w.w_adv * rec["adv_g"]
    assert rec["g_total"] == pytest.approx(expected, rel=1e-5)
    assert all(math.isfinite(v) for v in rec.values())
    for p in list(t.model.parameters()) + list(t.disc.parameters()):
        if p.grad is not None:
            assert torch.isfinite(p.grad).all()


def test_adversarial_off_skips_discriminator():
    raw, clean = toy_data()
    t = toy_trainer(losses=LossWeights(1.0, 0.0, 0.0))
    before = {k: v.clone() for k, v in t.disc.state_dict().items()}
    rec = t.train_step(*t.make_batch(raw, clean))
    assert rec["adv_g"] == 0 and rec["perc"] == 0
    assert all(torch.equal(before[k], v) for k, v in t.disc.state_dict().items())


def test_nan_input_raises_numeric_error():
    raw, clean = toy_data()
    raw[0, 0, 0, 0] = float("nan")
    t = toy_trainer(augment=False, batch_size=6)
    with pytest.raises(NumericError):
        t.train_step(raw, clean)


def test_training_state_round_trip_is_byte_identical(tmp_path):
    raw, clean = toy_data()
    t = toy_trainer()
    t.fit(raw, clean, steps=2)
    p1, p2 = tmp_path / "a.safetensors", tmp_path / "b.safetensors"
    save_training_state(t, p1)
    save_training_state(load_training_state(p1, extractor=EXTRACTOR), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_wrong_config_is_refused(tmp_path):
    t = toy_trainer()
    path = tmp_path / "state.safetensors"
    save_training_state(t, path)
    other = tiny_model_config(channel_base=8, channel_max=16)
    with pytest.raises(CheckpointError) as err:
        load_training_state(path, model_cfg=other, extractor=EXTRACTOR)
    assert err.value.problems
    save_model(t.model, tmp_path / "model.safetensors")
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "model.safetensors", other)


def test_model_archive_round_trip(tmp_path):
    t = toy_trainer()
    save_model(t.model, tmp_path / "m.safetensors")
    loaded = load_model(tmp_path / "m.safetensors")
    x = toy_data(2)[0]
    t.model.eval()
    with torch.no_grad():
        assert torch.equal(loaded(x), t.model(x))
    from_state = tmp_path / "s.safetensors"
    save_training_state(t, from_state)
    with torch.no_grad():
        assert torch.equal(load_model(from_state)(x), t.model(x))


def test_resume_matches_uninterrupted_run(tmp_path):
    raw, clean = toy_data()
    full = toy_trainer(seed=2)
    ref = full.fit(raw, clean, steps=10)

    first = toy_trainer(seed=2)
    head = first.fit(raw, clean, steps=4)
    save_training_state(first, tmp_path / "mid.safetensors")
    resumed = load_training_state(tmp_path / "mid.safetensors", extractor=EXTRACTOR)
    tail = resumed.fit(raw, clean, steps=10)

    assert len(head) + len(tail) == len(ref)
    for a, b in zip(head + tail, ref):
        for k in a:
            assert abs(a[k] - b[k]) <= 1e-6, (k, a, b)


def test_fit_writes_log_and_checkpoints(tmp_path):
    import json

    raw, clean = toy_data()
    t = toy_trainer(checkpoint_every=2)
    t.fit(raw, clean, steps=4, log_path=tmp_path / "log.jsonl", checkpoint_dir=tmp_path)
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert [json.loads(x)["step"] for x in lines] == [0, 1, 2, 3]
    assert sorted(p.name for p in tmp_path.glob("step*")) == ["step000002.safetensors", "step000004.safetensors"]
