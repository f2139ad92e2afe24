import json

import numpy as np
import pytest

from umi.benchgen import BenchmarkConfig, ModalitySpec, default_split_spec, generate, split
from umi.harness.ablate import ablate, expand_grid
from umi.harness.baselines import run_baseline
from umi.harness.checkpoint import load_model, load_pretrained, save_model, save_pretrained
from umi.harness.config import Config, preset
from umi.harness.gap import class_gap, measure_modality_gap
from umi.harness.models import VanillaTransformer
from umi.harness.report import read_csv, to_csv, write_csv
from umi.harness.train import (evaluate, late_fusion_predict, predict, predict_unimodal,
                               pretrain_unimodal, train)
from umi.supervision import MissingPretrainingError

CFG = Config(k_star=4, d_star=16, d_hidden=16, proj_layers=1, pred_layers=1, heads=2, enc_hidden=16,
             epochs=3, pretrain_epochs=3, batch_size=32, window=2)


def bench(task="classification", sets=((0, 1), (2, 3)), **kw):
    mods = [ModalitySpec(0, "a", 3, 8, 12), ModalitySpec(1, "b", 4, 6, 12, discriminability=0.5),
            ModalitySpec(2, "c", 2, 10, 12, discriminability=0.5), ModalitySpec(3, "d", 5, 4, 12)]
    cfg = BenchmarkConfig(task=task, n_classes=4, latent_dim=8, n_train=96, n_val=8, n_test=40,
                          modalities=mods, **kw)
    parts = split(generate(cfg), default_split_spec(cfg, sets))
    return [parts[n] for n in sorted(parts) if n.startswith("train")], parts["test"]


@pytest.fixture(scope="module")
def cls():
    tr, te = bench()
    return tr, te, pretrain_unimodal(tr, CFG)


def test_pretrain_store(cls):
    tr, _, pre = cls
    assert sorted(pre.models) == [0, 1, 2, 3]
    for m in range(4):
        assert pre.store.depth(m) == 2
    ids = np.concatenate([s.ids for s in tr])
    sel = pre.store.selected(ids)
    assert sel.shape == (96, 4)
    np.testing.assert_allclose(sel.sum(axis=1), 1.0, atol=1e-6)
    assert (sel >= 0).all()


def test_pretrain_depth_below_window():
    tr, _ = bench()
    pre = pretrain_unimodal(tr, CFG.with_(pretrain_epochs=1, window=5))
    assert pre.store.depth(0) == 1


def test_train_requires_pretraining(cls):
    tr, _, _ = cls
    with pytest.raises(MissingPretrainingError):
        train(tr, CFG, None)


def test_train_rejects_task_mismatch(cls):
    tr, _, pre = cls
    with pytest.raises(ValueError):
        train(tr, CFG.with_(task="regression"), pre)


def test_train_is_deterministic(cls):
    tr, te, pre = cls
    m1, r1 = train(tr, CFG, pre)
    m2, r2 = train(tr, CFG, pre)
    assert r1.epoch_losses == r2.epoch_losses
    np.testing.assert_array_equal(predict(m1, te, range(4)), predict(m2, te, range(4)))


def test_loss_decreases_on_separable_data():
    tr, _ = bench(cluster_spread=0.1)
    cfg = CFG.with_(epochs=20)
    _, rec = train(tr, cfg, pretrain_unimodal(tr, cfg))
    assert rec.epoch_losses[-1]["total"] < rec.epoch_losses[0]["total"]
    assert set(rec.epoch_losses[0]) == {"align", "supervised", "pseudo", "total"}


def test_three_single_modality_splits():
    tr, te = bench(sets=((0,), (1,), (2, 3)))
    model, _ = train(tr, CFG.with_(epochs=1), pretrain_unimodal(tr, CFG.with_(pretrain_epochs=1)))
    assert evaluate(model, te, range(4)).top1 is not None


@pytest.mark.parametrize("task", ["regression", "retrieval"])
def test_other_tasks_train_and_evaluate(task):
    tr, te = bench(task)
    cfg = CFG.with_(task=task, epochs=2, pretrain_epochs=2)
    model, rec = train(tr, cfg, pretrain_unimodal(tr, cfg))
    m = evaluate(model, te, [0, 2])
    assert np.isfinite(m.primary)
    if task == "retrieval":
        assert m.retrieval["v2t"]["mnr"] >= 1


@pytest.mark.parametrize("variant", ["projection_only", "vanilla"])
def test_variants_train(cls, variant):
    tr, te, pre = cls
    model, rec = train(tr, CFG.with_(variant=variant, epochs=1), pre)
    assert rec.epoch_losses[0]["pseudo"] == 0.0
    assert evaluate(model, te, [1, 3]).n == len(te)


def test_every_subset_is_predictable(cls):
    from itertools import combinations
    tr, te, pre = cls
    model, _ = train(tr, CFG.with_(epochs=1), pre)
    for r in range(1, 5):
        for sub in combinations(range(4), r):
            p = predict(model, te, sub)
            np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-5)
    with pytest.raises(ValueError):
        predict(model, te, [])


def test_vanilla_input_length():
    tr, _ = bench()
    v = VanillaTransformer(tr[0].config.modalities, CFG, 4, np.random.default_rng(0))
    assert v.input_length() == 3 + 4 + 2 + 5


def test_late_fusion(cls):
    tr, te, pre = cls
    one = late_fusion_predict(pre, te, [2])
    np.testing.assert_array_equal(one, predict_unimodal(pre.models[2], te.raw(2), te.task))
    two = late_fusion_predict(pre, te, [1, 2])
    np.testing.assert_allclose(two, 0.5 * (one + predict_unimodal(pre.models[1], te.raw(1), te.task)))


def test_late_fusion_is_idempotent_for_identical_predictors(cls):
    tr, te, pre = cls
    import copy
    same = copy.copy(pre)
    same.models = {0: pre.models[0], 1: pre.models[0]}
    data = te.with_raw({0: te.raw(0), 1: te.raw(0)})
    np.testing.assert_allclose(late_fusion_predict(same, data, [0, 1]), late_fusion_predict(same, data, [0]))


def test_baselines(cls):
    tr, te, pre = cls
    assert run_baseline("unimodal", tr, CFG, te, [0], pre).top1 is not None
    with pytest.raises(ValueError):
        run_baseline("unimodal", tr, CFG, te, [0, 1], pre)
    with pytest.raises(ValueError):
        run_baseline("oracle", tr, CFG, te, [0], pre)


def test_gap_examples():
    f = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 2.0]])
    assert class_gap({0: f, 1: f}, np.array([0, 0, 1])) == {(0, 1): 0.0}
    g = f + np.array([[3.0, 4.0], [3.0, 4.0], [0.0, 1.0]])
    # class 0 means shift by (3,4), class 1 by (0,1)
    assert class_gap({0: f, 1: g}, np.array([0, 0, 1]))[(0, 1)] == pytest.approx(3.0)
    gaps = class_gap({0: f, 1: g, 2: 2 * f}, np.array([0, 0, 1]))
    assert set(gaps) == {(0, 1), (0, 2), (1, 2)}
    assert class_gap({1: g, 0: f}, np.array([0, 0, 1]))[(0, 1)] == gaps[(0, 1)]


def test_measure_gap_rejects_other_tasks(cls):
    tr, te, pre = cls
    model, _ = train(tr, CFG.with_(epochs=1), pre)
    assert len(measure_modality_gap(model, te)) == 6
    with pytest.raises(ValueError):
        rtr, rte = bench("regression")
        measure_modality_gap(model, rte)


def test_checkpoint_round_trips(cls, tmp_path):
    tr, te, pre = cls
    model, _ = train(tr, CFG.with_(epochs=1), pre)
    bcfg = tr[0].config
    save_model(tmp_path / "m", model, CFG.with_(epochs=1), bcfg)
    model2, cfg2, bcfg2 = load_model(tmp_path / "m")
    assert cfg2 == CFG.with_(epochs=1) and bcfg2 == bcfg
    np.testing.assert_array_equal(predict(model, te, range(4)), predict(model2, te, range(4)))
    save_pretrained(tmp_path / "p", pre, CFG, bcfg)
    pre2, _, _ = load_pretrained(tmp_path / "p")
    ids = np.concatenate([s.ids for s in tr])
    np.testing.assert_allclose(pre2.store.selected(ids), pre.store.selected(ids), atol=1e-7)
    np.testing.assert_array_equal(late_fusion_predict(pre2, te, [0, 3]), late_fusion_predict(pre, te, [0, 3]))
    with pytest.raises(MissingPretrainingError):
        load_pretrained(tmp_path / "nothing")


def test_ablate_rows(cls):
    tr, te, _ = cls
    cfg = CFG.with_(epochs=1, pretrain_epochs=1)
    rows = ablate({"lam": [0.0, 1e-3]}, cfg, range(5), tr, te)
    assert len(rows) == 10
    assert {r["config_hash"] for r in rows} == {cfg.with_(lam=0.0).hash(), cfg.with_(lam=1e-3).hash()}
    again = ablate({"lam": [1e-3]}, cfg, [2], tr, te)
    assert again[0] == next(r for r in rows if r["seed"] == "2" and json.loads(r["point"]) == {"lam": 1e-3})
    with pytest.raises(ValueError):
        expand_grid({})


def test_expand_grid_cardinality():
    pts = expand_grid({"k_star": [4, 8], "lam": [0, 1, 2]})
    assert len(pts) == 6 and pts[0] == {"k_star": 4, "lam": 0}


def test_csv_round_trip(tmp_path):
    rows = [{"config_hash": "abc", "seed": "0", "top1": "91.25"}]
    text = to_csv(rows)
    assert text.splitlines()[0].startswith("config_hash,seed")
    assert read_csv(write_csv(rows, tmp_path / "x.csv"))[0]["top1"] == "91.25"


def test_config_presets_and_validation(tmp_path):
    p = preset("large-classification")
    assert (p.k_star, p.n_u, p.alpha, p.lam, p.window, p.batch_size) == (512, 3806, 3000.0, 1e-3, 10, 96)
    r = preset("large-regression")
    assert (r.k_star, r.n_u, r.alpha, r.window) == (16, 128, 1.0, 20)
    CFG.save(tmp_path / "c.json")
    assert Config.load(tmp_path / "c.json") == CFG
    assert CFG.hash() == CFG.with_(seed=9).hash() != CFG.with_(lam=0.5).hash()
    for bad in (dict(ratio=1.0), dict(k_star=0), dict(variant="x"), dict(lam=-1.0)):
        with pytest.raises(ValueError):
            Config(**bad)
    with pytest.raises(ValueError):
        Config.from_dict({"unknown": 1})
