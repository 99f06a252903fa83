import json
import time

import numpy as np
import pytest
import torch

from focuscir.data import HyperConfig
from focuscir.model import Retriever
from focuscir.objective import LossBundle
from focuscir.trainer import (
    NonFiniteLoss, fit, load_checkpoint, new_state, read_checkpoint_meta, save_checkpoint, set_determinism,
    train_steps,
)

from conftest import prepared


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    set_determinism(True)
    return prepared(20, 7, tmp_path_factory.mktemp("cache"), reuse=0.5)


def stub(**kw):
    return HyperConfig.for_profile("stub", **kw)


def test_loss_trend_over_fifty_steps(tmp_path):
    manifest, cache = prepared(8, 1, tmp_path, fractions=(1, 0, 0))
    retriever = Retriever(stub(), manifest, cache)
    _, bundles = train_steps(retriever, manifest.split("train"), stub(), 50)
    losses = np.array([b.total.item() for b in bundles])
    moving = np.convolve(losses, np.ones(10) / 10, mode="valid")
    slope = np.polyfit(np.arange(len(moving)), moving, 1)[0]
    assert slope < 0
    assert moving[-10:].mean() < moving[:10].mean()


def test_zero_learning_rates_leave_parameters(world):
    manifest, cache = world
    cfg = stub(lr_head=0.0, lr_backbone=0.0)
    retriever = Retriever(cfg, manifest, cache)
    before = retriever.model.fingerprint()
    train_steps(retriever, manifest.split("train"), cfg, 3)
    assert retriever.model.fingerprint() == before


def test_checkpoint_round_trip_bitwise(world, tmp_path):
    manifest, cache = world
    cfg = stub()
    retriever = Retriever(cfg, manifest, cache)
    state, _ = train_steps(retriever, manifest.split("train"), cfg, 4)
    ids = [t.ref_image_id for t in manifest.split("test")]
    texts = [t.mod_text for t in manifest.split("test")]
    before = retriever.query_embeddings(ids, texts)
    path = save_checkpoint(tmp_path / "c.npz", state, retriever, cfg)
    other = Retriever(cfg, manifest, cache)
    restored = load_checkpoint(path, other, cfg)
    assert np.array_equal(other.query_embeddings(ids, texts), before)
    assert other.model.fingerprint() == retriever.model.fingerprint()
    assert (restored.step, restored.epoch, restored.batch_index) == (state.step, state.epoch, state.batch_index)
    for p_old, p_new in zip(state.optimizer.param_groups[0]["params"], restored.optimizer.param_groups[0]["params"]):
        assert torch.equal(state.optimizer.state[p_old]["exp_avg_sq"], restored.optimizer.state[p_new]["exp_avg_sq"])
    assert read_checkpoint_meta(path)["fingerprint"] == retriever.model.fingerprint()


def test_checkpoint_shape_mismatch(world, tmp_path):
    manifest, cache = world
    retriever = Retriever(stub(), manifest, cache)
    path = save_checkpoint(tmp_path / "c.npz", new_state(retriever, stub()), retriever, stub())
    with pytest.raises(ValueError):
        load_checkpoint(path, Retriever(stub(P=3), manifest, cache), stub(P=3))


def test_epochs_zero_writes_initial_checkpoint_only(world, tmp_path):
    manifest, cache = world
    result = fit(manifest, stub(epochs=0), cache, tmp_path)
    assert result.steps == 0 and result.log_path.read_text() == ""
    assert read_checkpoint_meta(result.checkpoint)["step"] == 0
    assert result.last_checkpoint.exists()


def test_resume_continues_identically(world, tmp_path):
    manifest, cache = world
    cfg = stub(epochs=3)
    whole = fit(manifest, cfg, cache, tmp_path / "whole")
    first = fit(manifest, cfg, cache, tmp_path / "split", max_steps=5)
    assert first.steps == 5
    rest = fit(manifest, cfg, cache, tmp_path / "split", resume=True)
    assert rest.steps == whole.steps and rest.losses[0]["step"] == 6
    assert (tmp_path / "split" / "train_log.jsonl").read_text() == whole.log_path.read_text()
    assert read_checkpoint_meta(rest.last_checkpoint)["fingerprint"] == \
        read_checkpoint_meta(whole.last_checkpoint)["fingerprint"]


def test_seeded_fits_identical(world, tmp_path):
    manifest, cache = world
    cfg = stub(epochs=2, seed=4)
    a = fit(manifest, cfg, cache, tmp_path / "a")
    b = fit(manifest, cfg, cache, tmp_path / "b")
    assert a.log_path.read_bytes() == b.log_path.read_bytes()
    assert a.val_path.read_bytes() == b.val_path.read_bytes()
    c = fit(manifest, cfg.replace(seed=5), cache, tmp_path / "c")
    assert c.log_path.read_bytes() != a.log_path.read_bytes()


def test_nonfinite_loss_aborts_with_dump(world, tmp_path, monkeypatch):
    manifest, cache = world

    def poisoned(self, triplets):
        nan = torch.tensor(float("nan"), dtype=torch.float64, requires_grad=True)
        return LossBundle(nan, nan, nan, 0.1, 0.5)

    monkeypatch.setattr(Retriever, "batch_loss", poisoned)
    with pytest.raises(NonFiniteLoss):
        fit(manifest, stub(), cache, tmp_path)
    dump = json.loads((tmp_path / "nonfinite_batch.json").read_text())
    assert len(dump["query_ids"]) == 4 and dump["step"] == 0


def test_missing_cache_is_instructive(tmp_path):
    from focuscir.preprocess import PreprocessMissing, SegmentationCache
    from focuscir.synthetic import gen_synthetic

    manifest = gen_synthetic(10, seed=0)
    with pytest.raises(PreprocessMissing, match="preprocess"):
        fit(manifest, stub(), SegmentationCache(tmp_path / "empty"), tmp_path / "run")


def test_sixty_four_triplet_fit_under_five_minutes(tmp_path):
    manifest, cache = prepared(64, 2, tmp_path / "cache", reuse=0.5)
    started = time.perf_counter()
    result = fit(manifest, stub(), cache, tmp_path / "run")
    elapsed = time.perf_counter() - started
    assert result.steps == 10 * (len(manifest.split("train")) // 4)
    assert elapsed < 300
