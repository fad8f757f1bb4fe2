"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line (run with `pytest tests/test_acceptance.py -v -s`).

The quantitative thresholds are fixed here and are not tunable: synthetic
cohorts must match the brute-force rating reference to 1e-9 with the planted
erratic rater always rejected, correlation metrics must match O(n^2) oracles
to 1e-10, layer selection must recover the planted layer in at least 95/100
seeds, probes must reach held-out SRCC 0.90 (default noise) and 0.99 (zero
noise) under the 5-epoch/batch-8 recipe, ablation directions must hold in at
least 80/100 seeds, adapter and numeric gradients must match finite
differences to 1e-4, AdamW must match its closed form to 1e-10, planted
distortion must give |SRCC| >= 0.9 for the MSE baseline, and the full file
chain must be byte-identical across reruns.
"""

import json
import subprocess
import sys
import time

import numpy as np
import pytest

from editprobe import mos as mos_mod
from editprobe import numerics as nm
from editprobe.adapters import AdapterConfig, AdapterSet
from editprobe.backbone import Backbone, BackboneConfig, EditSample
from editprobe.baselines import mse_image, psnr, ssim
from editprobe.correlations import krcc, plcc, srcc
from editprobe.layer_select import analyze_layers, pooled_layer_features
from editprobe.probe import ProbeConfig, finetune_probe, split_indices, train_probe
from editprobe.synthetic import ImageSynthConfig, SynthConfig, gen_cohort, gen_image_pairs, gen_ratings

from oracle_corr import kendall_tau_b_bruteforce, pearson_direct, spearman_bruteforce
from oracle_mos import reference_mos


def report(name: str, ok: bool, detail: str = "") -> None:
    line = f"[ACCEPTANCE] {name}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f" ({detail})"
    print(line, flush=True)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. MOS oracle equivalence
# ---------------------------------------------------------------------------


def test_mos_oracle_equivalence():
    start = time.perf_counter()
    erratic_rejected = 0
    max_gap = 0.0
    for seed in range(100):
        cohort = gen_ratings(SynthConfig(n_samples=100, n_subjects=20, seed=seed))
        result = mos_mod.process_ratings(cohort.records)
        rows = [(r.subject_id, r.sample_id, r.dimension, r.score) for r in cohort.records]
        ref_samples, ref_rejected, ref_excluded, ref_fraction = reference_mos(rows)

        assert result.rejected_subjects == ref_rejected
        assert result.excluded_samples == ref_excluded
        assert abs(result.outlier_fraction - ref_fraction) < 1e-12
        assert set(result.per_sample) == set(ref_samples)
        for sid, ref in ref_samples.items():
            got = result.per_sample[sid]
            for got_key, ref_key in (
                ("mos_q", "quality"),
                ("mos_e", "alignment"),
                ("mos_p", "preservation"),
                ("mos_o", "overall"),
            ):
                gap = abs(got[got_key] - ref[ref_key])
                max_gap = max(max_gap, gap)
                assert gap < 1e-9
        erratic_rejected += set(result.rejected_subjects) == {cohort.erratic_subject}
    elapsed = time.perf_counter() - start
    ok = erratic_rejected == 100 and elapsed < 10.0
    report(
        "MOS oracle equivalence",
        ok,
        f"100 cohorts, max gap {max_gap:.2e}, erratic rejected {erratic_rejected}/100, {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# 2. correlation oracle equivalence
# ---------------------------------------------------------------------------


def test_correlation_oracle_equivalence():
    rng = np.random.default_rng(20240501)
    worst = 0.0
    for trial in range(200):
        n = int(rng.integers(5, 80))
        x = rng.integers(0, max(2, n // 3), size=n).astype(float)
        y = np.round(0.4 * x + rng.normal(size=n), 1)
        pairs = [
            (srcc(x, y), spearman_bruteforce(list(x), list(y))),
            (plcc(x, y), pearson_direct(list(x), list(y))),
            (krcc(x, y), kendall_tau_b_bruteforce(list(x), list(y))),
        ]
        for fast, brute in pairs:
            assert (fast is None) == (brute is None), f"trial {trial}"
            if fast is not None:
                worst = max(worst, abs(fast - brute))
                assert abs(fast - brute) < 1e-10, f"trial {trial}"
    exact_third = krcc([1, 2, 3], [1, 3, 2])
    ok = worst < 1e-10 and exact_third == 1.0 / 3.0
    report("Correlation oracle equivalence", ok, f"200 vectors, worst gap {worst:.2e}, tau-b tie case exact")


# ---------------------------------------------------------------------------
# 3. layer selection
# ---------------------------------------------------------------------------


def test_layer_selection_recovers_planted_layer():
    hits = 0
    interior = 0
    for seed in range(100):
        config = SynthConfig(seed=seed)  # N=512, L=8, d=128, planted layer 4
        cohort = gen_cohort(config)
        labels = np.array([cohort.planted_mos[s]["mos_o"] for s in cohort.sample_ids])
        stats = analyze_layers(cohort.features, labels, cohort.sample_ids)
        hits += stats.selected_layer == config.planted_layer
        peak = int(np.argmax(stats.saliency)) + 1
        interior += 1 < peak < config.n_layers
    ok = hits >= 95 and interior >= 95
    report("Layer selection", ok, f"l* = k* in {hits}/100 seeds, interior peak in {interior}/100")


# ---------------------------------------------------------------------------
# 4. probe quality
# ---------------------------------------------------------------------------


def _heldout_srcc(config: SynthConfig, dimension: str, layer: int, seed: int, head="mlp") -> float:
    cohort = gen_cohort(config)
    feats = pooled_layer_features(cohort.features)[:, layer - 1, :].astype(np.float32)
    key = {"quality": "mos_q", "alignment": "mos_e", "preservation": "mos_p", "overall": "mos_o"}[dimension]
    labels = np.array([cohort.planted_mos[s][key] for s in cohort.sample_ids])
    pcfg = ProbeConfig(seed=seed, dimension=dimension, head=head)  # 5 epochs, batch 8
    model, _ = train_probe(feats, labels, cohort.sample_ids, layer, pcfg)
    test_idx = split_indices(cohort.sample_ids, seed, pcfg.fractions)["test"]
    return srcc(model.predict(feats[test_idx]), labels[test_idx])


def test_probe_quality():
    start = time.perf_counter()
    default_cfg = SynthConfig(seed=909)
    s_default = _heldout_srcc(default_cfg, "overall", default_cfg.planted_layer, seed=909)
    zero_cfg = SynthConfig(seed=909).zero_noise()
    s_zero = _heldout_srcc(zero_cfg, "overall", zero_cfg.planted_layer, seed=909)
    elapsed = time.perf_counter() - start
    ok = s_default >= 0.90 and s_zero >= 0.99 and elapsed < 300.0
    report(
        "Probe quality",
        ok,
        f"held-out SRCC {s_default:.4f} (default noise), {s_zero:.4f} (zero noise), {elapsed:.0f}s",
    )


# ---------------------------------------------------------------------------
# 5. ablation directionality
# ---------------------------------------------------------------------------


def test_ablation_selected_layer_beats_final_layer():
    wins = 0
    for seed in range(100):
        config = SynthConfig(seed=seed)
        cohort = gen_cohort(config)
        labels = np.array([cohort.planted_mos[s]["mos_o"] for s in cohort.sample_ids])
        selected = analyze_layers(cohort.features, labels, cohort.sample_ids).selected_layer
        pooled = pooled_layer_features(cohort.features).astype(np.float32)
        pcfg = ProbeConfig(seed=seed, dimension="overall")
        test_idx = split_indices(sorted(cohort.sample_ids), seed, pcfg.fractions)["test"]
        scores = {}
        for tag, layer in (("selected", selected), ("final", config.n_layers)):
            feats = pooled[:, layer - 1, :]
            model, _ = train_probe(feats, labels, cohort.sample_ids, layer, pcfg)
            scores[tag] = srcc(model.predict(feats[test_idx]), labels[test_idx])
        wins += scores["selected"] >= scores["final"]
    report("Ablation: selected vs final layer", wins >= 80, f"selected >= final in {wins}/100 seeds")


def test_ablation_mlp_beats_linear_on_nonlinear_variant():
    wins = 0
    for seed in range(100):
        config = SynthConfig(seed=seed, nonlinear=True)
        s_mlp = _heldout_srcc(config, "overall", config.planted_layer, seed, head="mlp")
        s_lin = _heldout_srcc(config, "overall", config.planted_layer, seed, head="linear")
        wins += s_mlp >= s_lin
    report("Ablation: MLP vs linear head", wins >= 80, f"mlp >= linear in {wins}/100 seeds")


# ---------------------------------------------------------------------------
# 6. adapter contracts
# ---------------------------------------------------------------------------

TINY = BackboneConfig(
    image_side=8, patch=4, d_v=16, d=24, heads=2, encoder_depth=1, lm_depth=2, max_text_len=16
)


def _tiny_samples(rng, n):
    ids, sources, editeds, instructions, mos = gen_image_pairs(
        ImageSynthConfig(n_samples=n, side=TINY.image_side, seed=17)
    )
    samples = [EditSample(sources[i], editeds[i], instructions[i][:16]) for i in range(n)]
    return ids, samples, mos


def test_adapter_contracts():
    rng = np.random.default_rng(0)

    # zero-init forward equivalence, exact
    bb = Backbone(TINY)
    sample = EditSample(
        rng.random((8, 8, 3)).astype(np.float32),
        rng.random((8, 8, 3)).astype(np.float32),
        "tint the walls",
    )
    base = bb.forward_all_layers(sample)
    adapters = AdapterSet.attach(bb, AdapterConfig(rank=4))
    adapted = bb.forward_all_layers(sample, adapters=adapters)
    zero_gap = max(np.max(np.abs(a - b)) for a, b in zip(base.layers, adapted.layers))

    # frozen-base bit-identity through an actual training run
    ids, samples, mos = _tiny_samples(rng, 64)
    bb2 = Backbone(TINY)
    snapshot = {n_: bb2.store[n_].data.tobytes() for n_ in bb2.store.names()}
    adapters2 = AdapterSet.attach(bb2, AdapterConfig(rank=4, seed=1))
    finetune_probe(samples, mos, ids, bb2, adapters2, 2, ProbeConfig(seed=1, epochs=2))
    frozen_ok = all(bb2.store[n_].data.tobytes() == snapshot[n_] for n_ in snapshot)

    # gradient check against central differences (float64)
    bb3 = Backbone(TINY, dtype=np.float64)
    adapters3 = AdapterSet.attach(
        bb3, AdapterConfig(rank=2, targets=("lm.b0.attn.wq", "lm.b1.attn.wo"), dropout=0.0)
    )
    for t in adapters3.triplets.values():
        t.lam.data[:] = rng.normal(0.0, 0.5, size=t.rank)
    store = nm.ParamStore()
    adapters3.register_params(store)

    def loss_fn():
        hs = bb3.forward_all_layers(sample, adapters=adapters3, grad_layer=2, up_to_layer=2)
        h_s, h_e = hs.graph_rows
        z = nm.mul(nm.add(h_s, h_e), 0.5)
        return nm.tmean(nm.mul(z, z))

    nm.backward(loss_fn(), store)
    grads = {k: v.copy() for k, v in store.grads.items()}
    worst_rel = 0.0
    coord_rng = np.random.default_rng(3)
    for name in store.names():
        param = store[name]
        coords = list(np.ndindex(param.data.shape))
        if len(coords) > 8:
            coords = [coords[i] for i in coord_rng.choice(len(coords), 8, replace=False)]
        for coord in coords:
            keep = param.data[coord]
            param.data[coord] = keep + 1e-5
            up = loss_fn().item()
            param.data[coord] = keep - 1e-5
            down = loss_fn().item()
            param.data[coord] = keep
            fd = (up - down) / 2e-5
            an = grads[name][coord]
            worst_rel = max(worst_rel, abs(an - fd) / max(1.0, abs(fd), abs(an)))

    # budget schedule reaches the target average rank exactly
    bb4 = Backbone(TINY)
    adapters4 = AdapterSet.attach(bb4, AdapterConfig(rank=8, target_rank=3, seed=2))
    for t in adapters4.triplets.values():
        t.lam.data[:] = 1.0
    g_rng = np.random.default_rng(4)
    total_steps = 300
    history = []
    for step in range(total_steps + 1):
        grads4 = {
            f"adapter.{name}.lam": g_rng.normal(size=t.rank)
            for name, t in adapters4.triplets.items()
        }
        adapters4.update_importance_and_prune(grads4, step, total_steps)
        history.append(adapters4.active_total())
    monotone = all(a >= b for a, b in zip(history, history[1:]))
    budget_ok = adapters4.average_active_rank() == 3.0 and monotone

    ok = zero_gap == 0.0 and frozen_ok and worst_rel < 1e-4 and budget_ok
    report(
        "Adapter contracts",
        ok,
        f"zero-init gap {zero_gap}, frozen base {frozen_ok}, grad rel err {worst_rel:.2e}, "
        f"avg rank {adapters4.average_active_rank()}",
    )


# ---------------------------------------------------------------------------
# 7. numerics
# ---------------------------------------------------------------------------


def test_numerics_gradients_and_adamw():
    from test_numerics import check_gradients, closed_form_adamw, rand64

    rng = np.random.default_rng(5)
    cases = [
        (lambda ts: nm.tsum(nm.mul(nm.matmul(ts[0], ts[1]), nm.matmul(ts[0], ts[1]))), [(3, 4), (4, 2)]),
        (lambda ts: nm.tsum(nm.mul(nm.relu(ts[0]), nm.relu(ts[0]))), [(6, 6)]),
        (lambda ts: nm.tsum(nm.mul(nm.softmax(ts[0]), ts[1])), [(4, 5), (4, 5)]),
        (lambda ts: nm.tsum(nm.mul(nm.layer_norm(ts[0], ts[1], ts[2]), nm.layer_norm(ts[0], ts[1], ts[2]))), [(4, 6), (6,), (6,)]),
        (lambda ts: nm.tmean(nm.mul(nm.add(ts[0], ts[1]), nm.sub(ts[0], ts[1]))), [(5, 3), (3,)]),
    ]
    for build, shapes in cases:
        arrays = [rand64(rng, *s) for s in shapes]
        arrays[0][np.abs(arrays[0]) < 1e-2] += 0.05
        check_gradients(build, arrays, rel_tol=1e-4)

    # two-layer network, every coordinate, fd step 1e-3 as specified
    x, w1, b1, w2 = rand64(rng, 3, 4), rand64(rng, 4, 5), rand64(rng, 5), rand64(rng, 5, 2)

    def network(ts):
        h = nm.relu(nm.add(nm.matmul(ts[0], ts[1]), ts[2]))
        return nm.tmean(nm.mul(nm.matmul(h, ts[3]), nm.matmul(h, ts[3])))

    check_gradients(network, [x, w1, b1, w2], rel_tol=1e-4, step=1e-3)

    # AdamW closed-form single step to 1e-10
    store = nm.ParamStore()
    store.add("theta", np.zeros(3), dtype=np.float64)
    store.grads = {"theta": np.array([1.0, -2.0, 0.5])}
    state = nm.OptimizerState(weight_decay=0.0)
    nm.adamw_step(store, state, 1e-3)
    expected, _, _ = closed_form_adamw(
        np.zeros(3), np.array([1.0, -2.0, 0.5]), 1e-3, 1, np.zeros(3), np.zeros(3)
    )
    gap = np.max(np.abs(store["theta"].data - expected))
    ok = gap < 1e-10
    report("Numerics", ok, f"gradient checks < 1e-4, AdamW closed-form gap {gap:.2e}")


# ---------------------------------------------------------------------------
# 8. baselines
# ---------------------------------------------------------------------------


def test_baseline_metrics():
    rng = np.random.default_rng(6)
    img = rng.random((32, 32, 3))
    ssim_self = ssim(img, img)
    psnr_identical = psnr(img, img)
    zeros, ones = np.zeros((8, 8, 3)), np.ones((8, 8, 3))
    mse_closed = mse_image(zeros, ones)
    psnr_zero_db = psnr(zeros, ones)

    ids, sources, editeds, _, mos = gen_image_pairs(ImageSynthConfig(n_samples=64, seed=7))
    mse_values = [mse_image(sources[i], editeds[i]) for i in range(64)]
    mse_srcc = srcc(np.array(mse_values), mos)

    ok = (
        ssim_self == pytest.approx(1.0, abs=1e-12)
        and psnr_identical is None
        and mse_closed == 1.0
        and psnr_zero_db == pytest.approx(0.0, abs=1e-12)
        and abs(mse_srcc) >= 0.9
    )
    report(
        "Baselines",
        ok,
        f"ssim(x,x)={ssim_self}, psnr identical -> marker, mse(0,1)={mse_closed}, "
        f"|SRCC(MSE, planted)| = {abs(mse_srcc):.4f}",
    )


# ---------------------------------------------------------------------------
# 9. pipeline determinism
# ---------------------------------------------------------------------------


def _run_chain(root) -> dict[str, bytes]:
    cli = [sys.executable, "-m", "editprobe.cli"]
    steps = [
        ["synth", "--out", "data", "--seed", "21"],
        ["mos", "--ratings", "data/ratings.csv", "--out", "mos.json"],
        ["layers", "--dump", "data/features.ephs", "--manifest", "data/manifest.json",
         "--mos", "mos.json", "--out", "layers.json"],
        ["train", "--dump", "data/features.ephs", "--manifest", "data/manifest.json",
         "--mos", "mos.json", "--layer", "auto", "--layer-stats", "layers.json",
         "--out", "models", "--seed", "21"],
        ["eval", "--models", "models", "--dump", "data/features.ephs",
         "--manifest", "data/manifest.json", "--mos", "mos.json", "--out", "report.json"],
    ]
    for step in steps:
        result = subprocess.run(cli + step, cwd=root, capture_output=True, text=True)
        assert result.returncode == 0, f"{step[0]}: {result.stderr}"
    outputs = {}
    for rel in (
        "data/ratings.csv",
        "data/features.ephs",
        "data/manifest.json",
        "mos.json",
        "layers.json",
        "models/quality.epm",
        "models/alignment.epm",
        "models/preservation.epm",
        "models/overall.epm",
        "models/train_report.json",
        "report.json",
    ):
        outputs[rel] = (root / rel).read_bytes()
    return outputs


def test_pipeline_determinism(tmp_path):
    first = _run_chain(tmp_path / "run1")
    second = _run_chain(tmp_path / "run2")
    differing = [rel for rel in first if first[rel] != second[rel]]
    report("Pipeline determinism", not differing, f"{len(first)} artifacts compared, diffs: {differing}")


@pytest.fixture(autouse=True)
def _mkdirs(tmp_path):
    (tmp_path / "run1").mkdir(exist_ok=True)
    (tmp_path / "run2").mkdir(exist_ok=True)
    yield
