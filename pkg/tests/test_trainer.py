import csv
import dataclasses
import math

import numpy as np
import pytest
import yaml
from hypothesis import given
from hypothesis import strategies as st

from acn.ablation import synthetic_cases
from acn.data import labels_to_classes
from acn.losses import NonFiniteLossError, ramp_up
from acn.trainer import (
    COMPONENTS,
    CheckpointError,
    CoTrainer,
    TrainConfig,
    checkpoint_load,
    checkpoint_save,
    evaluate,
    fit,
    make_batch,
    poly_lr,
    score_labels,
)

SMALL = dict(patch_size=(32, 32), base_lr=1e-3, epoch_max=10, steps_per_epoch=5)
PATHS = ("multimodal", "unimodal", "mmi_heads")
DISCS = ("d_en", "d_kn")


@pytest.fixture(scope="module")
def cases():
    return synthetic_cases(3, (32, 32), seed=0, wt_radius=(6, 8), tc_radius=(4, 5), et_radius=(2, 3))


def batch_for(trainer, cases):
    cfg = trainer.cfg
    return make_batch(cases, cfg.modality_mask, cfg.patch_size, trainer.rng, cfg.batch_size, cfg.levels)


def run_steps(cfg, cases, n):
    trainer = CoTrainer(cfg)
    return trainer, [trainer.train_step(batch_for(trainer, cases)) for _ in range(n)]


# -- schedule and defaults ---------------------------------------------------------------------

def test_poly_lr_examples():
    cfg = TrainConfig()
    assert poly_lr(0, cfg) == 1e-4
    assert poly_lr(cfg.epoch_max, cfg) == 0.0
    assert poly_lr(150, cfg) == pytest.approx(1e-4 * 0.5**0.9, rel=1e-12)
    assert poly_lr(150, cfg) == pytest.approx(5.359e-5, abs=1e-8)


@pytest.mark.parametrize("epoch", [-1, 301])
def test_poly_lr_out_of_range(epoch):
    with pytest.raises(ValueError):
        poly_lr(epoch, TrainConfig())


@given(st.integers(1, 500), st.data())
def test_poly_lr_non_increasing(epoch_max, data):
    cfg = TrainConfig(epoch_max=epoch_max)
    a = data.draw(st.integers(0, epoch_max))
    b = data.draw(st.integers(a, epoch_max))
    assert poly_lr(b, cfg) <= poly_lr(a, cfg)


def test_config_defaults_snapshot():
    cfg = TrainConfig()
    w = cfg.weights
    assert (w.multi, w.uni, w.entropy_adv, w.knowledge_adv, w.mutual_info) == (0.2, 0.8, 0.001, 0.0002, 0.5)
    assert ramp_up(cfg.resolved_ramp_length, cfg.resolved_ramp_length) == 0.1
    assert cfg.base_lr == 1e-4 and cfg.poly_power == 0.9 and cfg.betas == (0.9, 0.999)
    assert cfg.resolved_ramp_length == pytest.approx(0.4 * cfg.total_steps)
    assert cfg.use_ena and cfg.use_kna and cfg.use_mmi


def test_config_round_trip_and_hash():
    cfg = TrainConfig(**SMALL)
    again = TrainConfig.from_dict(cfg.to_dict())
    assert again == cfg and again.config_hash() == cfg.config_hash()
    assert dataclasses.replace(cfg, seed=1).config_hash() != cfg.config_hash()
    with pytest.raises(ValueError, match="bogus"):
        TrainConfig.from_dict({**cfg.to_dict(), "bogus": 1})


@pytest.mark.parametrize("kwargs", [dict(base_lr=0), dict(epoch_max=0), dict(patch_size=(36, 36)), dict(mask="dwi")])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_unimodal_input_channels():
    trainer = CoTrainer(TrainConfig(mask="fl,t2", **SMALL))
    assert trainer.unimodal.cfg.in_channels == 2
    assert trainer.multimodal.cfg.in_channels == 4


# -- term gating -------------------------------------------------------------------------------------

def test_all_flags_off_total(cases):
    cfg = TrainConfig(use_ena=False, use_kna=False, use_mmi=False, **SMALL)
    trainer, logs = run_steps(cfg, cases, 3)
    for step, r in enumerate(logs):
        omega = ramp_up(step, cfg.resolved_ramp_length)
        expected = 0.2 * r["raw_dice_multi"] + 0.8 * r["raw_dice_uni"] + omega * r["raw_con"]
        assert r["total"] == pytest.approx(expected, rel=1e-6)
        assert not {"raw_en_adv", "raw_kn_adv", "raw_mi", "d_en", "d_kn"} & set(r)


@pytest.mark.parametrize("flag,term,coef", [("use_ena", "en_adv", 0.001), ("use_kna", "kn_adv", 0.0002), ("use_mmi", "mi", 0.5)])
def test_each_flag_removes_exactly_its_term(cases, flag, term, coef):
    cfg = TrainConfig(**SMALL)
    on = run_steps(cfg, cases, 1)[1][0]
    off = run_steps(dataclasses.replace(cfg, **{flag: False}), cases, 1)[1][0]
    assert f"w_{term}" not in off
    assert on[f"w_{term}"] == pytest.approx(coef * on[f"raw_{term}"], rel=1e-6)
    w_on = {k: v for k, v in on.items() if k.startswith("w_")}
    w_off = {k: v for k, v in off.items() if k.startswith("w_")}
    assert set(w_on) - set(w_off) == {f"w_{term}"}
    # same init and batch on the first step, so every other weighted term is unchanged
    for k in w_off:
        assert w_on[k] == w_off[k]
    for r in (on, off):
        assert r["total"] == pytest.approx(sum(v for k, v in r.items() if k.startswith("w_")), rel=1e-6)


def test_disabled_discriminators_not_updated(cases):
    cfg = TrainConfig(use_ena=False, use_kna=False, **SMALL)
    trainer = CoTrainer(cfg)
    before = trainer.checksums()
    for _ in range(3):
        trainer.train_step(batch_for(trainer, cases))
    after = trainer.checksums()
    assert after["d_en"] == before["d_en"] and after["d_kn"] == before["d_kn"]
    assert after["unimodal"] != before["unimodal"]


# -- phase isolation -----------------------------------------------------------------------------

def test_phase_isolation(cases):
    trainer = CoTrainer(TrainConfig(**SMALL))
    for _ in range(10):
        before = trainer.checksums()
        _, cache = trainer.generator_step(batch_for(trainer, cases))
        mid = trainer.checksums()
        trainer.discriminator_step(cache)
        after = trainer.checksums()
        trainer.step += 1
        for name in DISCS:
            assert mid[name] == before[name]
            assert after[name] != mid[name]
        for name in PATHS:
            assert mid[name] != before[name]
            assert after[name] == mid[name]


def test_generator_phase_does_not_accumulate_discriminator_grads(cases):
    trainer = CoTrainer(TrainConfig(**SMALL))
    trainer.generator_step(batch_for(trainer, cases))
    for name in DISCS:
        assert all(p.grad is None for p in trainer.modules[name].parameters())
        assert all(p.requires_grad for p in trainer.modules[name].parameters())


# -- determinism and resume -----------------------------------------------------------------------------

def test_determinism_50_steps(cases):
    cfg = TrainConfig(**SMALL)
    _, a = run_steps(cfg, cases, 50)
    _, b = run_steps(cfg, cases, 50)
    assert a == b


def test_resume_bitwise(cases, tmp_path):
    cfg = TrainConfig(**SMALL)
    trainer, _ = run_steps(cfg, cases, 4)
    checkpoint_save(trainer, tmp_path / "ck")
    expected = [trainer.train_step(batch_for(trainer, cases)) for _ in range(2)]
    resumed = checkpoint_load(tmp_path / "ck", cfg)
    assert resumed.step == 4
    got = [resumed.train_step(batch_for(resumed, cases)) for _ in range(2)]
    assert got == expected
    assert resumed.checksums() == trainer.checksums()


@pytest.fixture
def saved(cases, tmp_path):
    trainer, _ = run_steps(TrainConfig(**SMALL), cases, 1)
    return checkpoint_save(trainer, tmp_path / "ck")


def test_missing_d_kn_blob_named(saved):
    (saved / "d_kn.pt").unlink()
    with pytest.raises(CheckpointError, match="D_kn"):
        checkpoint_load(saved)


def test_corrupt_blob_named(saved):
    blob = saved / "d_en.pt"
    blob.write_bytes(blob.read_bytes()[:100])
    with pytest.raises(CheckpointError, match="corrupt D_en"):
        checkpoint_load(saved)


def test_edited_config_hash_mismatch(saved):
    manifest = yaml.safe_load((saved / "manifest.yaml").read_text())
    recorded = manifest["config_hash"]
    manifest["config"]["base_lr"] = 0.5
    (saved / "manifest.yaml").write_text(yaml.safe_dump(manifest))
    with pytest.raises(CheckpointError, match="hash mismatch") as err:
        checkpoint_load(saved)
    assert recorded in str(err.value)
    assert TrainConfig.from_dict(manifest["config"]).config_hash() in str(err.value)


def test_requested_config_hash_mismatch(saved):
    other = TrainConfig(**{**SMALL, "seed": 9})
    with pytest.raises(CheckpointError, match=other.config_hash()):
        checkpoint_load(saved, other)


def test_checkpoint_has_every_component(saved):
    manifest = yaml.safe_load((saved / "manifest.yaml").read_text())
    for name in COMPONENTS:
        assert name in manifest["blobs"] and f"opt_{name}" in manifest["blobs"]
    assert manifest["step"] == 1


# -- non-finite ----------------------------------------------------------------------------------------

def test_non_finite_loss_aborts_with_breakdown(cases):
    trainer = CoTrainer(TrainConfig(**SMALL))
    batch = batch_for(trainer, cases)
    batch["x_uni"][0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteLossError) as err:
        trainer.train_step(batch)
    assert err.value.term in {"dice_uni", "con", "en_adv", "kn_adv", "mi"}
    assert "dice_multi" in err.value.breakdown


# -- evaluation ----------------------------------------------------------------------------------------

def one_hot_probs(labels, c=4):
    return np.eye(c)[labels_to_classes(labels)].transpose(2, 0, 1)


def test_ground_truth_scores_perfect(cases, monkeypatch):
    trainer = CoTrainer(TrainConfig(**SMALL))
    lookup = {c.case_id: c for c in cases}
    monkeypatch.setattr(trainer, "predict_case", lambda case, path="unimodal": one_hot_probs(lookup[case.case_id].labels))
    report = evaluate(trainer, cases)
    assert len(report.per_case) * 3 * 2 == len(cases) * 6
    for region in ("ET", "TC", "WT"):
        assert report.means[f"{region}_dsc"] == 1.0
        assert report.means[f"{region}_hd95"] == 0.0


def test_empty_et_prediction_gives_sentinel(cases):
    truth = cases[0].labels
    pred = np.where(truth == 4, 1, truth)
    row = score_labels(pred, truth)
    assert row["ET_dsc"] == 0.0
    assert row["ET_hd95_sentinel"] is True
    assert row["ET_hd95"] == pytest.approx(math.sqrt(2 * 32**2))
    assert row["WT_dsc"] == 1.0


def test_evaluate_mask_mismatch(cases):
    trainer = CoTrainer(TrainConfig(**SMALL))
    with pytest.raises(ValueError, match="t1c"):
        evaluate(trainer, cases, mask="fl,t2")


def test_sliding_window_probabilities_normalized(cases):
    trainer = CoTrainer(TrainConfig(**SMALL))
    big = synthetic_cases(1, (48, 64), seed=3)[0]
    probs = trainer.predict_case(big)
    assert probs.shape == (4, 48, 64)
    np.testing.assert_allclose(probs.sum(0), 1.0, atol=1e-6)


# -- fit ----------------------------------------------------------------------------------------------

def test_fit_smoke_writes_loadable_checkpoint(cases, tmp_path):
    cfg = TrainConfig(**{**SMALL, "epoch_max": 1, "steps_per_epoch": 1})
    result = fit(cfg, cases[:2], cases[2:], out_dir=tmp_path)
    assert len(result.history) == 1
    loaded = checkpoint_load(result.best_dir)
    assert loaded.step == 1 and loaded.checksums() == result.trainer.checksums()
    rows = list(csv.DictReader((tmp_path / "metrics.csv").open()))
    assert [r["subregion"] for r in rows] == ["ET", "TC", "WT"]
    assert set(rows[0]) == {"epoch", "subregion", "dsc", "hd95"}


def test_history_length_matches_eval_events(cases):
    cfg = TrainConfig(**{**SMALL, "epoch_max": 5, "steps_per_epoch": 1, "eval_interval": 2})
    result = fit(cfg, cases[:2], cases[2:])
    assert [e["epoch"] for e in result.history] == [2, 4, 5]


def test_fit_rejects_empty_training_set():
    with pytest.raises(ValueError):
        fit(TrainConfig(**SMALL), [])
