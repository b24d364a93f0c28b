"""Acceptance checks. Each test prints one ``PASS``/``FAIL`` line.

The three ablation-trend checks share a single training run of roughly
half an hour on one CPU core. Deselect them with ``-m "not slow"``.
"""

import time

import numpy as np
import pytest

from mga.attention import AttentionKind, channel_weights, init_attention_params, mga_m, mga_tm
from mga.cli import main
from mga.gradcheck import network_gradcheck, run_suite
from mga.metrics import j_mean, mae, max_f, s_measure
from mga.network import build_network
from mga.synth import ClipParams, gen_dataset, gen_stills
from mga.tensor import Tensor, no_grad
from mga.training import AblationData, TrainingScheme, median_by_variant, run_ablation, write_ablation_csv

from test_metrics import brute_iou, brute_mae, brute_max_f, oracle_s_measure, random_pair


@pytest.fixture
def verdict(capsys):
    def emit(name, ok, detail=""):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'}: {name}" + (f" ({detail})" if detail else ""))
        assert ok, f"{name}: {detail}"
    return emit


# ---- 1. gradients


def test_gradient_suite(verdict):
    t0 = time.perf_counter()
    errs = run_suite(trials=100, seed=0)
    net_err = network_gradcheck(seed=0, entries=20, size=16)
    elapsed = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    ok = errs[worst] <= 1e-4 and net_err <= 1e-3 and elapsed <= 120
    verdict("gradient suite", ok, f"{len(errs)} ops, worst {worst} {errs[worst]:.2e}; "
                                  f"network {net_err:.2e}; {elapsed:.0f}s")


# ---- 2. residual bounds


def test_residual_bounds(verdict):
    rng = np.random.default_rng(11)
    violations = 0
    for trial in range(1000):
        n, c, cp, h, w = rng.integers(1, 3), rng.integers(1, 5), rng.integers(1, 5), rng.integers(1, 5), rng.integers(1, 5)
        f_a = rng.uniform(0, 3, (n, c, h, w)) * (rng.uniform(size=(n, c, h, w)) > 0.2)
        lo, hi = f_a, 2 * f_a
        out_m = mga_m(Tensor(f_a), Tensor(rng.uniform(0, 1, (n, 1, h, w)))).data
        params = init_attention_params(AttentionKind.MGA_TM, c, cp, rng)
        params.h_weight.data[...] = rng.normal(scale=3, size=params.h_weight.shape)
        params.h_bias.data[...] = rng.normal(scale=3, size=params.h_bias.shape)
        out_tm = mga_tm(Tensor(f_a), Tensor(rng.normal(size=(n, cp, h, w))), params).data
        for out in (out_m, out_tm):
            violations += int(np.sum((out < lo) | (out > hi)))
    verdict("residual bounds of mga_m and mga_tm", violations == 0, f"{violations} violations in 1000 trials")


# ---- 3. channel-weight normalization


def test_channel_weight_normalization(verdict):
    rng = np.random.default_rng(12)
    worst = 0.0
    for _ in range(1000):
        n, c, h, w = rng.integers(1, 3), rng.integers(1, 9), rng.integers(1, 6), rng.integers(1, 6)
        params = init_attention_params(AttentionKind.MGA_TMC, c, 2, rng)
        params.hp_weight.data[...] = rng.normal(scale=2, size=params.hp_weight.shape)
        params.hp_bias.data[...] = rng.normal(scale=2, size=params.hp_bias.shape)
        wts = channel_weights(Tensor(rng.normal(scale=5, size=(n, c, h, w))), params).data
        worst = max(worst, float(np.max(np.abs(wts.sum(axis=1) - c))))
    verdict("channel weights sum to C", worst <= 1e-9, f"max deviation {worst:.1e}")


# ---- 4. metric oracles


def test_metric_oracles(verdict):
    rng = np.random.default_rng(13)
    worst_exact, worst_s = 0.0, 0.0
    for i in range(200):
        p, g = random_pair(rng, i % 4)
        best, pr, _ = max_f(p, g)
        ob, ops_, ors = brute_max_f([p], [g])
        worst_exact = max(worst_exact, abs(mae(p, g) - brute_mae(p, g)), abs(j_mean(p, g) - brute_iou(p, g)),
                          abs(best - ob), float(np.max(np.abs(pr[:, 0] - ops_))), float(np.max(np.abs(pr[:, 1] - ors))))
        worst_s = max(worst_s, abs(s_measure(p, g) - oracle_s_measure(p, g)))
    verdict("metric oracle equivalence", worst_exact <= 1e-12 and worst_s <= 1e-9,
            f"mae/max_f/j_mean {worst_exact:.1e}, s_measure {worst_s:.1e}")


# ---- 5-7. ablation trends

BENCH = ClipParams(height=32, width=32, frames=4, distractor_prob=0.5, min_size=0.1, max_size=0.2)
SCHEME = TrainingScheme(pretrain_epochs=6, joint_epochs=8)
SEEDS = (0, 1, 2)
SUITE = ["appearance-only", "motion-only", "MGA-D", "MGA-E", "full", "E-Add", "E-Mul", "E-MGA-t", "E-MGA-tm",
         "E-MGA-tmc", "D-Mul", "D-MGA-m", "T0", "Tma"]
BUDGET_S = 45 * 60


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    data = AblationData(gen_dataset(1, 200, BENCH), gen_dataset(2, 50, BENCH, prefix="eval"), gen_stills(3, 400, BENCH))
    t0 = time.perf_counter()
    rows = run_ablation(SUITE, data, scheme=SCHEME, seeds=SEEDS)
    elapsed = time.perf_counter() - t0
    write_ablation_csv(tmp_path_factory.mktemp("ablation") / "ablation.csv", rows)
    return median_by_variant(rows), elapsed


def _table(med, names):
    return "; ".join(f"{n} MAE {med[n]['mae']:.4f} maxF {med[n]['max_f']:.4f}" for n in names)


@pytest.mark.slow
def test_branch_trend(ablation, verdict):
    med, elapsed = ablation
    full = med["full"]
    ok = all(full["mae"] < med[b]["mae"] and full["max_f"] > med[b]["max_f"] for b in ("appearance-only", "motion-only"))
    ok &= all(full["max_f"] >= med[b]["max_f"] for b in ("MGA-D", "MGA-E"))
    ok &= elapsed <= BUDGET_S
    verdict("branch ablation trend", ok,
            _table(med, ["appearance-only", "motion-only", "MGA-D", "MGA-E", "full"]) + f"; {elapsed / 60:.1f} min")


@pytest.mark.slow
def test_fusion_trend(ablation, verdict):
    med, elapsed = ablation
    f = {k: med[k]["max_f"] for k in med}
    ok = f["E-MGA-tmc"] >= f["E-Add"]
    ok &= all(f[k] >= f["E-Mul"] for k in ("E-MGA-t", "E-MGA-tm", "E-MGA-tmc"))
    ok &= f["D-MGA-m"] >= f["D-Mul"] and elapsed <= BUDGET_S
    verdict("fusion ablation trend", ok,
            "; ".join(f"{k} maxF {f[k]:.4f}" for k in ("E-Add", "E-Mul", "E-MGA-t", "E-MGA-tm", "E-MGA-tmc",
                                                        "D-Mul", "D-MGA-m")))


@pytest.mark.slow
def test_scheme_trend(ablation, verdict):
    med, elapsed = ablation
    ok = med["Tma"]["mae"] < med["T0"]["mae"] and elapsed <= BUDGET_S
    verdict("training scheme trend", ok, _table(med, ["T0", "Tma"]))


# ---- 8. determinism


def test_cli_determinism(tmp_path, verdict):
    tiny = ["--threads", "1", "--height", "16", "--width", "16", "--frames", "3", "--train-clips", "2",
            "--eval-clips", "1", "--still-count", "4", "--min-size", "0.15", "--max-size", "0.25",
            "--pretrain-epochs", "1", "--joint-epochs", "1"]
    data = str(tmp_path / "data")
    assert main(["synth", "--out", data, *tiny]) == 0

    def run(tag):
        r = tmp_path / tag
        common = ["--data", data, *tiny]
        codes = [main(["pretrain-appearance", "--out", str(r / "pa"), *common]),
                 main(["pretrain-motion", "--out", str(r / "pm"), *common]),
                 main(["train", "--out", str(r / "tr"), *common]),
                 main(["eval", "--checkpoint", str(r / "tr" / "model.mgac"), "--out", str(r / "ev"), *common]),
                 main(["export-pred", "--checkpoint", str(r / "tr" / "model.mgac"), "--out", str(r / "xp"), *common]),
                 main(["ablate", "--suite", "appearance-only,full", "--seeds", "0", "--out", str(r / "ab"), *common]),
                 main(["synth", "--out", str(r / "sy"), *tiny])]
        assert codes == [0] * len(codes)
        return {p.relative_to(r).as_posix(): p.read_bytes() for p in sorted(r.rglob("*"))
                if p.is_file() and not p.name.endswith("config.txt")}

    a, b = run("a"), run("b")
    same = a == b
    kinds = sorted({k.rsplit(".", 1)[-1] for k in a})
    verdict("bit-identical reruns", same and len(a) > 0, f"{len(a)} files ({', '.join(kinds)})")


# ---- 9. zero-motion contract


def test_zero_motion_contract(verdict):
    net = build_network(seed=5)
    rng = np.random.default_rng(5)
    frames = rng.uniform(0, 1, (2, 3, 32, 32))
    with no_grad():
        out = net.forward_joint(frames, None, training=True)
    completes = out.motion is None and np.all(np.isfinite(out.saliency.data)) and not out.motion_map.data.any()
    site5_identity = np.array_equal(out.conv3_input.data, out.fused.data)
    biases_zero = all(not p.data.any() for n, p in net.named_parameters()
                      if n.startswith("mga") and n.rsplit(".", 1)[-1] in ("g_bias", "h_bias"))
    f = rng.normal(size=(1, 4, 3, 3))
    fixture = np.array_equal(mga_m(Tensor(f), Tensor(np.zeros((1, 1, 3, 3)))).data, f)
    verdict("zero-motion contract", completes and site5_identity and biases_zero and fixture,
            f"absent flow ok={bool(completes)}, site-5 identity={site5_identity}, zero g/h biases={biases_zero}")
