import numpy as np
import pytest

from editprobe.adapters import AdapterConfig, AdapterSet
from editprobe.backbone import Backbone, BackboneConfig, EditSample
from editprobe.correlations import srcc
from editprobe.errors import ContractError, DataError
from editprobe.probe import (
    ProbeConfig,
    ProbeModel,
    build_feature,
    finetune_probe,
    split_indices,
    train_probe,
)
from editprobe.synthetic import ImageSynthConfig, SynthConfig, gen_cohort, gen_image_pairs
from editprobe.layer_select import pooled_layer_features

TINY_BB = BackboneConfig(
    image_side=16, patch=8, d_v=24, d=48, heads=4, encoder_depth=1, lm_depth=3, max_text_len=24
)


def linear_dataset(rng, n=200, d=32, noise=0.3):
    ids = [f"s{i:04d}" for i in range(n)]
    direction = rng.normal(size=d)
    direction /= np.linalg.norm(direction)
    q = rng.uniform(-1.0, 1.0, size=n)
    feats = noise * rng.normal(size=(n, d)) + 3.0 * q[:, None] * direction
    targets = 50.0 + 25.0 * q
    return ids, feats.astype(np.float32), targets


def image_samples(seed, n=128, config=TINY_BB):
    ids, sources, editeds, instructions, mos = gen_image_pairs(
        ImageSynthConfig(n_samples=n, side=config.image_side, seed=seed)
    )
    samples = [
        EditSample(sources[i], editeds[i], instructions[i][: config.max_text_len])
        for i in range(n)
    ]
    return ids, samples, mos


# ---------------------------------------------------------------------------
# feature construction
# ---------------------------------------------------------------------------


def test_build_feature_idempotent_average():
    v = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(build_feature(v, v), v)


def test_build_feature_cancellation():
    v = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(build_feature(v, -v), np.zeros(3))


def test_build_feature_componentwise():
    np.testing.assert_array_equal(build_feature([1.0, 3.0], [3.0, 1.0]), [2.0, 2.0])


def test_build_feature_length_mismatch():
    with pytest.raises(ContractError):
        build_feature([1.0, 2.0], [1.0])


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


def test_zero_final_layer_predicts_target_mean():
    rng = np.random.default_rng(0)
    ids, feats, targets = linear_dataset(rng)
    model, _ = train_probe(feats, targets, ids, 1, ProbeConfig(seed=0, epochs=1))
    for name in ("w3", "b3"):
        model.weights[name] = np.zeros_like(model.weights[name])
    if hasattr(model, "_tensors"):
        del model._tensors
    preds = model.predict(feats[:16])
    np.testing.assert_allclose(preds, model.target_mean, atol=1e-4)


def test_identical_features_identical_predictions():
    rng = np.random.default_rng(1)
    ids, feats, targets = linear_dataset(rng)
    model, _ = train_probe(feats, targets, ids, 1, ProbeConfig(seed=1))
    a = model.predict(feats[3])
    b = model.predict(feats[3].copy())
    assert a == b


def test_noiseless_benchmark_heldout_srcc():
    cfg = SynthConfig(seed=5, n_samples=256, dim=64, n_layers=4, planted_layer=2).zero_noise()
    cohort = gen_cohort(cfg)
    feats = pooled_layer_features(cohort.features)[:, 1, :].astype(np.float32)
    y = np.array([cohort.planted_mos[s]["mos_q"] for s in cohort.sample_ids])
    pcfg = ProbeConfig(seed=5, dimension="quality")
    model, _ = train_probe(feats, y, cohort.sample_ids, 2, pcfg)
    test_idx = split_indices(cohort.sample_ids, 5, pcfg.fractions)["test"]
    preds = model.predict(feats[test_idx])
    assert srcc(preds, y[test_idx]) >= 0.99


# ---------------------------------------------------------------------------
# training behavior
# ---------------------------------------------------------------------------


def test_constant_features_converge_to_target_mean_mse():
    rng = np.random.default_rng(2)
    n = 120
    ids = [f"s{i:04d}" for i in range(n)]
    feats = np.ones((n, 8), dtype=np.float32)
    targets = rng.uniform(20.0, 80.0, size=n)
    pcfg = ProbeConfig(seed=2, epochs=5)
    model, report = train_probe(feats, targets, ids, 1, pcfg)
    # uninformative features: optimum is the standardized mean, loss -> variance (=1)
    assert report.epoch_losses[-1] == pytest.approx(1.0, rel=0.05)


def test_initial_loss_near_unit_variance_across_seeds():
    rng = np.random.default_rng(3)
    for seed in range(6):
        ids, feats, targets = linear_dataset(rng, n=150)
        _, report = train_probe(feats, targets, ids, 1, ProbeConfig(seed=seed, epochs=1))
        assert 0.8 <= report.init_loss <= 1.2, f"seed {seed}: {report.init_loss}"


def test_equal_seeds_identical_traces_and_weights():
    rng = np.random.default_rng(4)
    ids, feats, targets = linear_dataset(rng)
    m1, r1 = train_probe(feats, targets, ids, 1, ProbeConfig(seed=7))
    m2, r2 = train_probe(feats, targets, ids, 1, ProbeConfig(seed=7))
    assert r1.epoch_losses == r2.epoch_losses
    assert r1.val_srcc == r2.val_srcc
    for k in m1.weights:
        assert m1.weights[k].tobytes() == m2.weights[k].tobytes()


def test_zero_target_variance_is_error():
    ids = [f"s{i:04d}" for i in range(60)]
    feats = np.random.default_rng(5).normal(size=(60, 4)).astype(np.float32)
    with pytest.raises(DataError):
        train_probe(feats, np.full(60, 42.0), ids, 1, ProbeConfig(seed=0))


def test_too_few_training_samples_is_error():
    ids = [f"s{i:04d}" for i in range(20)]
    feats = np.zeros((20, 4), dtype=np.float32)
    with pytest.raises(DataError):
        train_probe(feats, np.arange(20.0), ids, 1, ProbeConfig(seed=0))


def test_standardization_round_trip():
    rng = np.random.default_rng(6)
    ids, feats, targets = linear_dataset(rng)
    model, _ = train_probe(feats, targets, ids, 1, ProbeConfig(seed=3))
    y = np.array([10.0, 55.5, 90.0])
    std = (y - model.target_mean) / model.target_std
    back = std * model.target_std + model.target_mean
    np.testing.assert_allclose(back, y, atol=1e-6)


def test_linear_head_trains():
    rng = np.random.default_rng(7)
    ids, feats, targets = linear_dataset(rng)
    model, report = train_probe(feats, targets, ids, 1, ProbeConfig(seed=0, head="linear"))
    assert model.head == "linear"
    assert set(model.weights) == {"w", "b"}
    assert report.epoch_losses[-1] < report.init_loss


# ---------------------------------------------------------------------------
# model files and dimension independence
# ---------------------------------------------------------------------------


def test_model_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    ids, feats, targets = linear_dataset(rng)
    model, _ = train_probe(feats, targets, ids, 3, ProbeConfig(seed=0, dimension="alignment"))
    path = str(tmp_path / "model.epm")
    model.save(path)
    loaded = ProbeModel.load(path)
    assert loaded.dimension == "alignment"
    assert loaded.layer_index == 3
    assert loaded.head == "mlp"
    assert loaded.target_mean == pytest.approx(model.target_mean)
    np.testing.assert_array_equal(loaded.predict(feats[:5]), model.predict(feats[:5]))


def test_dimension_models_are_independent_files(tmp_path):
    rng = np.random.default_rng(9)
    cohort = gen_cohort(SynthConfig(seed=9, n_samples=128, dim=32, n_layers=3, planted_layer=2))
    feats = pooled_layer_features(cohort.features)[:, 1, :].astype(np.float32)
    paths = {}
    for dim, key in (("quality", "mos_q"), ("preservation", "mos_p")):
        y = np.array([cohort.planted_mos[s][key] for s in cohort.sample_ids])
        model, _ = train_probe(feats, y, cohort.sample_ids, 2, ProbeConfig(seed=1, dimension=dim))
        paths[dim] = str(tmp_path / f"{dim}.epm")
        model.save(paths[dim])
    before = ProbeModel.load(paths["quality"]).predict(feats[:7])
    import os

    os.remove(paths["preservation"])
    after = ProbeModel.load(paths["quality"]).predict(feats[:7])
    np.testing.assert_array_equal(before, after)


# ---------------------------------------------------------------------------
# end-to-end fine-tuning
# ---------------------------------------------------------------------------


def test_finetune_without_adapters_equals_frozen_training():
    ids, samples, mos = image_samples(seed=10, n=96)
    pcfg = ProbeConfig(seed=2, epochs=3, dimension="overall")
    bb = Backbone(TINY_BB)
    model_ft, _, report_ft = finetune_probe(samples, mos, ids, bb, None, 2, pcfg)

    feats = []
    for s in samples:
        hs = bb.forward_all_layers(s)
        feats.append(build_feature(hs.h_s(2), hs.h_e(2)))
    feats = np.stack(feats).astype(np.float32)
    model_ref, report_ref = train_probe(feats, mos, ids, 2, pcfg)

    np.testing.assert_allclose(report_ft.epoch_losses, report_ref.epoch_losses, atol=1e-5)
    for k in model_ref.weights:
        np.testing.assert_allclose(model_ft.weights[k], model_ref.weights[k], atol=1e-5)


def test_finetune_keeps_base_weights_bit_identical():
    ids, samples, mos = image_samples(seed=11, n=64)
    bb = Backbone(TINY_BB)
    snapshot = {n: bb.store[n].data.copy() for n in bb.store.names()}
    adapters = AdapterSet.attach(bb, AdapterConfig(rank=4, seed=0))
    finetune_probe(samples, mos, ids, bb, adapters, 2, ProbeConfig(seed=0, epochs=2))
    for name, value in snapshot.items():
        assert bb.store[name].data.tobytes() == value.tobytes(), name


def test_finetune_validation_srcc_not_worse_than_frozen():
    wins = 0
    seeds = range(5)
    for seed in seeds:
        ids, samples, mos = image_samples(seed=seed, n=128)
        pcfg = ProbeConfig(
            seed=seed, epochs=5, lr=3e-3, dimension="overall", fractions=(0.6, 0.25, 0.15)
        )
        bb = Backbone(TINY_BB)
        _, _, rep_frozen = finetune_probe(samples, mos, ids, bb, None, 2, pcfg)
        bb2 = Backbone(TINY_BB)
        adapters = AdapterSet.attach(bb2, AdapterConfig(rank=4, targets="both", seed=seed))
        _, _, rep_adapted = finetune_probe(samples, mos, ids, bb2, adapters, 2, pcfg)
        v_frozen = rep_frozen.val_srcc[rep_frozen.best_epoch]
        v_adapted = rep_adapted.val_srcc[rep_adapted.best_epoch]
        wins += v_adapted >= v_frozen - 0.02
    assert wins == len(list(seeds)), f"adapters hurt validation SRCC in {5 - wins}/5 seeds"


def test_finetune_model_carries_adapter_checkpoint(tmp_path):
    ids, samples, mos = image_samples(seed=12, n=64)
    bb = Backbone(TINY_BB)
    adapters = AdapterSet.attach(bb, AdapterConfig(rank=3, targets="llm", seed=1))
    model, _, _ = finetune_probe(samples, mos, ids, bb, adapters, 2, ProbeConfig(seed=1, epochs=2))
    path = str(tmp_path / "ft.epm")
    model.save(path)
    loaded = ProbeModel.load(path)
    restored = loaded.adapters()
    assert restored is not None
    assert set(restored.triplets) == set(adapters.triplets)
    for name in adapters.triplets:
        np.testing.assert_array_equal(
            restored.triplets[name].lam.data, adapters.triplets[name].lam.data
        )
