import json

import numpy as np
import pytest
import torch

from scaf import config as config_mod
from scaf.config import RunConfig, toy_config
from scaf.fixture import make_authentic, make_samples
from scaf.losses import ramp_weight
from scaf.trainer import (Batch, NonFiniteLossError, Trainer, build_discriminator, load_checkpoint,
                          lr_at, model_from_checkpoint, to_tensor_images)


def small_config(tmp_path, epochs=2, deterministic=True):
    cfg = toy_config(out_dir=str(tmp_path / "run"), epochs=epochs)
    cfg.backbone.widths = (8, 16, 16, 32)
    cfg.train.image_size = 64
    cfg.train.checkpoint_every = 1
    cfg.train.deterministic = deterministic
    return cfg


def small_setup(tmp_path, epochs=2, n=8, deterministic=True):
    cfg = small_config(tmp_path, epochs, deterministic)
    samples = make_samples(n, 0, size=64)
    auth = to_tensor_images(make_authentic(n, 0, size=64))
    md = build_discriminator(cfg, auth, to_tensor_images([s.image for s in samples]))
    return cfg, samples, md


def _log(path):
    return [json.loads(line) for line in open(path)]


def test_lr_table():
    t = RunConfig().train
    assert [lr_at(e, t.lr_init, t.lr_decay_factor, t.lr_decay_every) for e in (0, 49, 50, 69)] == \
        [1e-4, 1e-4, 1e-4 * 0.1, 1e-4 * 0.1]
    assert lr_at(49, 1e-4, 0.1, 50) == 1e-4
    assert lr_at(50, 1e-4, 0.1, 50) == pytest.approx(1e-5, rel=1e-15)


def test_frozen_parameters_unchanged(tmp_path):
    cfg, samples, md = small_setup(tmp_path)
    tr = Trainer(cfg, md)
    tr.model.requires_grad_(False)
    before = {k: v.clone() for k, v in tr.model.state_dict().items() if v.is_floating_point()}
    tr.train_step(tr.make_batch(samples[:4]), 0)
    after = tr.model.state_dict()
    for k, v in before.items():
        if "running" in k:  # batch-norm statistics are buffers, not parameters
            continue
        assert torch.equal(v, after[k]), k


def test_first_step_deterministic(tmp_path):
    reports = []
    for _ in range(2):
        cfg, samples, md = small_setup(tmp_path)
        tr = Trainer(cfg, md)
        reports.append(tr.train_step(tr.make_batch(samples[:4]), 0).as_dict())
    assert reports[0] == reports[1]


def test_lambda_matches_ramp(tmp_path):
    cfg, samples, md = small_setup(tmp_path)
    tr = Trainer(cfg, md)
    batch = tr.make_batch(samples[:2])
    for epoch in (0, 7, 25):
        assert tr.train_step(batch, epoch).lambda_t == ramp_weight(epoch, 0.1, 20)


def test_descent(tmp_path):
    cfg, samples, md = small_setup(tmp_path)
    tr = Trainer(cfg, md)
    batch = tr.make_batch(samples[:4])
    first = tr.train_step(batch, 0).total
    for _ in range(49):
        last = tr.train_step(batch, 0).total
    assert last < first


def test_fit_one_epoch(tmp_path):
    cfg, samples, md = small_setup(tmp_path, epochs=1)
    final = Trainer(cfg, md).fit(samples)
    out = final.parent
    assert final.name == "checkpoint_final.pt"
    assert sorted(p.name for p in out.glob("*.pt")) == ["checkpoint_final.pt"]
    records = _log(out / "train_log.jsonl")
    assert len(records) == 2  # 8 images, batch 4
    assert {"step", "epoch", "lr", "pce", "ca", "sc", "cem_un", "cem_la", "lambda_t", "total"} <= set(records[0])


def test_fit_empty(tmp_path):
    cfg, _, md = small_setup(tmp_path)
    with pytest.raises(ValueError, match="empty"):
        Trainer(cfg, md).fit([])


def test_resume_equivalence(tmp_path):
    cfg, samples, md = small_setup(tmp_path, epochs=2)
    Trainer(cfg, md).fit(samples)
    full = _log(tmp_path / "run" / "train_log.jsonl")
    resumed = Trainer.resume(tmp_path / "run" / "checkpoint_epoch0001.pt")
    assert resumed.epoch == 1
    resumed.fit(samples, out_dir=tmp_path / "resumed")
    tail = _log(tmp_path / "resumed" / "train_log.jsonl")
    assert tail == [r for r in full if r["epoch"] == 1]


def test_checkpoint_contents(tmp_path):
    cfg, samples, md = small_setup(tmp_path, epochs=1)
    path = Trainer(cfg, md).fit(samples)
    state = load_checkpoint(path)
    assert state["config_hash"] == config_mod.config_hash(cfg)
    assert {"model", "optimizer", "epoch", "rng", "discriminator"} <= set(state)
    model, md2, cfg2 = model_from_checkpoint(path)
    assert config_mod.to_dict(cfg2) == config_mod.to_dict(cfg)
    x = to_tensor_images([samples[0].image])
    torch.testing.assert_close(md2.prior_map(x).mp, md.prior_map(x).mp, rtol=0, atol=0)


def test_bad_checkpoint(tmp_path):
    bogus = tmp_path / "x.pt"
    torch.save({"hello": 1}, bogus)
    with pytest.raises(ValueError):
        load_checkpoint(bogus)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.pt")


def test_nonfinite_loss_named(tmp_path):
    cfg, samples, md = small_setup(tmp_path)
    tr = Trainer(cfg, md)
    b = tr.make_batch(samples[:2])
    with torch.no_grad():
        tr.model.heads[0].conv.bias.fill_(float("nan"))
    with pytest.raises(NonFiniteLossError, match="pce"):
        tr.train_step(b, 0)
