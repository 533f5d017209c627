"""Acceptance criteria, one test each.

Every test reports a single ``[PASS]``/``[FAIL]`` line through the
``criterion`` fixture; the lines are repeated in the pytest summary.
Criteria 5 to 7 train real models and take several minutes in total.
"""

import json
import shutil
import time

import numpy as np
import pytest

from stagenet import autodiff as ad
from stagenet.cli import main
from stagenet.data import (GeneratorConfig, fit_normalizer, forward_fill_and_normalize,
                           generate_synthetic, split)
from stagenet.evaluation import (adjusted_rand, auprc, auroc, calinski_harabasz,
                                 cluster_agreement, kmeans, min_re_p, risk_band_stage_table)
from stagenet.model import (ModelConfig, check_gradients, checkpoint_bytes, evaluate_traces,
                            load_checkpoint, save_checkpoint, train)
from stagenet.stage_conv import (StageWindow, init_conv_params, progression_theme, stage_conv,
                                 stage_weights)
from stagenet.stage_lstm import (StageCellState, cell_step, combine_cell, init_cell_params,
                                 master_from_distributions, stage_variation)
from stagenet.subtyping import prepare, raw_last_visit, subtype

from oracles import (loop_conv, loop_stage_weights, loop_theme, naive_ch, pairwise_auroc,
                     sweep_ap, sweep_min_rp)


# 1 ---------------------------------------------------------------------------------

def test_criterion_1_full_model_gradient_check(criterion):
    tic = time.perf_counter()
    rep = check_gradients(n_features=4, hidden=8, chunk=2, window=3, n_patients=2, n_steps=6,
                          seed=0, tol_rel=1e-4)
    elapsed = time.perf_counter() - tic
    worst_name = max(rep.max_rel_err, key=rep.max_rel_err.get)
    criterion(1, "full-model gradient check", rep.passed and elapsed < 60,
              f"max rel-err {rep.worst:.2e} at {worst_name} over {len(rep.max_rel_err)} "
              f"parameters, {elapsed:.1f} s")


# 2 ---------------------------------------------------------------------------------

def test_criterion_2_gate_invariants(criterion):
    failures = []
    n_evals = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n_v = int(rng.integers(1, 5))
        chunk = int(rng.integers(1, 4))
        n_m = int(rng.integers(2, 7))
        hidden = chunk * n_m
        params = init_cell_params(n_v, hidden, chunk, rng)
        scale = rng.uniform(0.1, 3.0)
        for w in params.weights.values():
            w.data[...] = rng.normal(0, scale, w.shape)
        for _ in range(10):
            state = StageCellState(ad.constant(rng.uniform(-1, 1, (1, hidden))),
                                   ad.constant(rng.normal(size=(1, hidden))),
                                   ad.constant(np.ones((1, 1))), ad.constant(np.zeros((1, 1))))
            st = cell_step(rng.normal(0, 2, n_v), rng.exponential(2.0), state, params)
            f, i, s = st.master_forget.data[0], st.master_input.data[0], st.s.data.item()
            n_evals += 1
            ok = (np.all(np.diff(f) >= 0) and np.all(np.diff(i) <= 0)
                  and abs(f[-1] - 1) <= 1e-12 and abs(i[0] - 1) <= 1e-12
                  and 1 <= s < n_m + 1)
            if not ok:
                failures.append(seed)

    # p_f on the first slot and p_i on the last opens every slot to the overlap
    rng = np.random.default_rng(0)
    n_m = 6
    f_m, i_m = master_from_distributions(np.eye(n_m)[0], np.eye(n_m)[-1])
    f, i, c_prev, c_hat = (ad.constant(rng.normal(size=(1, n_m))) for _ in range(4))
    cell = combine_cell(f_m, i_m, f, i, c_prev, c_hat).data
    exact = bool(np.array_equal(cell, f.data * c_prev.data + i.data * c_hat.data))

    criterion(2, "gate invariants", not failures and exact and n_evals == 1000,
              f"{n_evals} evaluations, {len(failures)} violations, "
              f"degenerate case bit-exact: {exact}")


# 3 ---------------------------------------------------------------------------------

def test_criterion_3_worked_example(criterion):
    f_m, i_m = master_from_distributions([0, 0, 1, 0, 0], [0, 0, 0, 1, 0])
    w = (f_m * i_m).data[0]
    s, _ = stage_variation(f_m)
    ok = (f_m.data[0].tolist() == [0, 0, 1, 1, 1] and i_m.data[0].tolist() == [1, 1, 1, 1, 0]
          and w.tolist() == [0, 0, 1, 1, 0] and s.data.item() == 3.0)
    criterion(3, "worked example masks and stage variation", ok,
              f"f={f_m.data[0].tolist()} i={i_m.data[0].tolist()} w={w.tolist()} "
              f"s={s.data.item()}")


# 4 ---------------------------------------------------------------------------------

def _conv_errors(rng):
    n_h, k = int(rng.integers(2, 7)), int(rng.integers(1, 6))
    H = rng.normal(size=(k, n_h))
    S = rng.uniform(0, 1, k)
    params = init_conv_params(n_h, k, rng)
    params.kernel.data[...] = rng.normal(size=params.kernel.shape)
    win = StageWindow.from_arrays(H, S)
    ds = stage_weights(S)
    ds_ref = loop_stage_weights(S)
    u = stage_conv(win, ds, params.kernel).data[0]
    z = progression_theme(win, ds).data[0]
    return (max(np.max(np.abs(ds.data[0] - ds_ref)),
                np.max(np.abs(u - loop_conv(H, ds_ref, params.kernel_tensor())))),
            np.max(np.abs(z - loop_theme(H, ds_ref))))


def _metric_errors(rng):
    n = int(rng.integers(4, 60))
    s = rng.integers(0, 6, n) / 6.0 if rng.random() < 0.5 else rng.random(n)
    y = (rng.random(n) < 0.4).astype(float)
    y[0], y[1] = 1.0, 0.0
    return (abs(auroc(s, y) - pairwise_auroc(s, y)), abs(auprc(s, y) - sweep_ap(s, y)),
            abs(min_re_p(s, y) - sweep_min_rp(s, y)))


def _ch_error(rng):
    k = int(rng.integers(2, 5))
    X = rng.normal(size=(int(rng.integers(k + 2, 40)), int(rng.integers(1, 5))))
    labels = np.concatenate([np.arange(k), rng.integers(0, k, len(X) - k)])
    ref = naive_ch(X, labels)
    return abs(calinski_harabasz(X, labels) - ref) / abs(ref)


def test_criterion_4_oracle_equivalence(criterion):
    worst = dict.fromkeys(("stage_conv", "progression_theme", "auroc", "auprc", "min_re_p",
                           "calinski_harabasz (rel)"), 0.0)
    n = 100
    for seed in range(n):
        rng = np.random.default_rng(seed)
        errs = _conv_errors(rng) + _metric_errors(rng) + (_ch_error(rng),)
        for key, e in zip(worst, errs):
            worst[key] = max(worst[key], float(e))
    hand = calinski_harabasz(np.array([[0, 0], [0, 1], [10, 10], [10, 11]], dtype=float),
                             [0, 0, 1, 1])
    ok = all(e <= 1e-9 for e in worst.values()) and hand == 400.0
    criterion(4, "oracle equivalence", ok,
              f"{n} instances each, worst " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
              + f"; hand C-H {hand!r}")


# shared protocol for 5 and 6 --------------------------------------------------------

# planted boundaries: 3-sigma jumps, a longer pause before each new stage and
# raised risk for three visits after it
STAGE_SET = dict(n_patients=300, jump_magnitude=3.0, boundary_gap_scale=8.0,
                 instability_window=3, seed=0)
TRAIN = dict(hidden=16, chunk=2, window=10, epochs=20, batch_size=16, learning_rate=1e-2,
             dropout_p=0.1, dropconnect_p=0.1)
ABLATION_SEEDS = range(5)


@pytest.fixture(scope="module")
def stage_set():
    gen = GeneratorConfig(**STAGE_SET)
    train_raw, valid_raw, test_raw = split(generate_synthetic(gen), [0.7, 0.15, 0.15], seed=0)
    stats = fit_normalizer(train_raw)
    return gen, [forward_fill_and_normalize(d, stats) for d in (train_raw, valid_raw, test_raw)]


@pytest.fixture(scope="module")
def trained(stage_set):
    """Train lazily and cache by (variant, seed); returns (checkpoint, seconds)."""
    gen, (train_set, valid_set, _) = stage_set
    cache = {}

    def get(variant, seed):
        if (variant, seed) not in cache:
            tic = time.perf_counter()
            cfg = ModelConfig(n_features=gen.n_features, variant=variant, seed=seed, **TRAIN)
            ckpt, _ = train(cfg, train_set, valid_set)
            cache[variant, seed] = ckpt, time.perf_counter() - tic
        return cache[variant, seed]
    return get


def boundary_offsets(traces, dataset):
    """Signed distance from every valid visit to its nearest planted boundary."""
    out = []
    for trace, seq in zip(traces, dataset):
        cps = np.asarray(seq.change_points, dtype=int)
        for t in trace.steps:
            d = t - cps
            out.append(d[np.argmin(np.abs(d))] if len(cps) else np.iinfo(int).max)
    return np.array(out)


# 5 ---------------------------------------------------------------------------------

def test_criterion_5_stage_detection(criterion, stage_set, trained):
    tic = time.perf_counter()
    _, (_, _, test_set) = stage_set
    ckpt, _ = trained("stagenet", 0)
    traces = ckpt.build_model().predict(test_set)
    s_norm = np.concatenate([t.s_norm for t in traces])
    offsets = boundary_offsets(traces, test_set)
    near = (np.abs(offsets) <= 2).astype(float)
    score = auroc(s_norm, near)

    bands = risk_band_stage_table(np.concatenate([t.y_hat for t in traces]),
                                  np.concatenate([t.s for t in traces]))
    means = [bands[b]["mean"] if bands[b] else float("nan") for b in ("low", "medium", "high")]
    ordered = bool(np.all(np.isfinite(means)) and means[0] <= means[1] <= means[2])
    elapsed = time.perf_counter() - tic + trained("stagenet", 0)[1]
    profile = " ".join(f"{k:+d}:{s_norm[offsets == k].mean():.3f}" for k in range(-2, 4))

    criterion(5, "stage detection", score >= 0.7 and ordered and elapsed < 900,
              f"s_norm AUROC {score:.3f} (need >= 0.7) on {len(s_norm)} test visits; "
              f"band means low/medium/high {means[0]:.3f}/{means[1]:.3f}/{means[2]:.3f} "
              f"nondecreasing: {ordered}; mean s_norm by offset {profile}; {elapsed:.0f} s")


# 6 ---------------------------------------------------------------------------------

def test_criterion_6_ablation_ordering(criterion, stage_set, trained):
    _, (_, _, test_set) = stage_set
    scores = {}
    for variant in ("stagenet", "lstm"):
        for seed in ABLATION_SEEDS:
            ckpt, _ = trained(variant, seed)
            traces = ckpt.build_model().predict(test_set)
            scores.setdefault(variant, []).append(evaluate_traces(traces)["auprc"])
    mean = {v: float(np.mean(s)) for v, s in scores.items()}
    criterion(6, "ablation ordering", mean["stagenet"] >= mean["lstm"],
              f"test AUPRC over seeds {list(ABLATION_SEEDS)}: StageNet "
              f"{[round(x, 4) for x in scores['stagenet']]} mean {mean['stagenet']:.4f}; "
              f"LSTM {[round(x, 4) for x in scores['lstm']]} mean {mean['lstm']:.4f}")


# 7 ---------------------------------------------------------------------------------

# two archetypes that differ in how they progress, plus a modest baseline offset
SUBTYPE_SET = dict(n_patients=200, n_archetypes=2, archetype_offset=1.0,
                   archetype_deteriorate=(0.9, 0.1), boundary_gap_scale=8.0,
                   instability_window=3, seed=0)


def test_criterion_7_subtyping(criterion):
    gen = GeneratorConfig(**SUBTYPE_SET)
    cohort = generate_synthetic(gen)
    train_raw, valid_raw, _ = split(cohort, [0.7, 0.15, 0.15], seed=0)
    stats = fit_normalizer(train_raw)
    cfg = ModelConfig(n_features=gen.n_features, seed=0, **TRAIN)
    ckpt, _ = train(cfg, *(forward_fill_and_normalize(d, stats) for d in (train_raw, valid_raw)),
                    normalizer=stats)

    truth = np.array([s.archetype for s in cohort])
    learned = subtype(ckpt, cohort, k=2, seed=0)
    ch_u = calinski_harabasz(learned.representations, learned.clusters.assignments)
    raw = raw_last_visit(prepare(ckpt, cohort))
    raw_km = kmeans(raw, 2, seed=0)
    ch_raw = calinski_harabasz(raw, raw_km.assignments)
    agree = cluster_agreement(learned.clusters.assignments, truth)
    ari = adjusted_rand(learned.clusters.assignments, truth)

    criterion(7, "subtyping", ch_u > ch_raw and agree > 0.8,
              f"{len(cohort)} patients; C-H on u~ {ch_u:.1f} vs last visit {ch_raw:.1f}; "
              f"archetype agreement {agree:.3f} (ARI {ari:.3f}); "
              f"last-visit agreement {cluster_agreement(raw_km.assignments, truth):.3f}")


# 8 ---------------------------------------------------------------------------------

def _run(*argv):
    code = main([str(a) for a in argv])
    assert code == 0, f"{argv[0]} exited with {code}"


def _metric_rows(path):
    return [{k: v for k, v in json.loads(line).items() if k != "wall_time"}
            for line in path.read_text().splitlines()]


def _snapshot(d):
    return {str(p.relative_to(d)):
            _metric_rows(p) if p.name == "metrics.jsonl" else p.read_bytes()
            for p in sorted(d.rglob("*")) if p.is_file()}


def _seeded_commands(d):
    _run("generate", "--out", d / "tr.jsonl", "--n-patients", 12, "--seed", 3,
         "--n-features", 4, "--n-archetypes", 2, "--missing-rate", 0.1)
    _run("generate", "--out", d / "va.jsonl", "--n-patients", 6, "--seed", 4,
         "--n-features", 4, "--n-archetypes", 2, "--missing-rate", 0.1)
    _run("train", "--train", d / "tr.jsonl", "--valid", d / "va.jsonl", "--out", d / "run",
         "--epochs", 2, "--hidden", 8, "--window", 3, "--batch-size", 4, "--seed", 5)
    ck = d / "run" / "checkpoint.json"
    _run("predict", "--checkpoint", ck, "--data", d / "va.jsonl", "--out", d / "pred.jsonl")
    _run("evaluate", "--predictions", d / "pred.jsonl", "--data", d / "va.jsonl",
         "--bootstrap", 50, "--seed", 6, "--out", d / "eval.json")
    _run("subtype", "--checkpoint", ck, "--data", d / "tr.jsonl", "--k", 2, "--seed", 7,
         "--out", d / "sub.json")
    _run("gradcheck", "--dims", "2,4,2,2", "--patients", 1, "--steps", 3, "--seed", 8,
         "--out", d / "gc.json")


def test_criterion_8_reproducibility(criterion, tmp_path):
    # sidecars record paths, so both runs write to the same directory
    d = tmp_path / "work"
    d.mkdir()
    _seeded_commands(d)
    first = _snapshot(d)
    shutil.rmtree(d)
    d.mkdir()
    _seeded_commands(d)
    second = _snapshot(d)
    differing = sorted(k for k in first.keys() | second.keys() if first.get(k) != second.get(k))

    ck_path = d / "run" / "checkpoint.json"
    resaved = tmp_path / "resaved.json"
    save_checkpoint(load_checkpoint(ck_path), resaved)
    roundtrip = (resaved.read_bytes() == ck_path.read_bytes()
                 and checkpoint_bytes(load_checkpoint(resaved)) == ck_path.read_bytes())

    criterion(8, "reproducibility", not differing and roundtrip,
              f"{len(first)} outputs of 7 commands compared (metrics ignoring wall_time), "
              f"differing: {differing or 'none'}; checkpoint round-trip byte-exact: {roundtrip}")
