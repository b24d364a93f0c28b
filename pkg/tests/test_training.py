import math

import numpy as np
import pytest

from mga.attention import AttentionKind
from mga.errors import ValidationError
from mga.network import build_network
from mga.synth import ClipParams, gen_dataset, gen_stills
from mga.training import (AblationData, Batch, TrainingScheme, joint_loss, median_by_variant, predict,
                          pretrain_appearance, resolve_suite, run_ablation, set_input_stats, train_joint,
                          train_scheme, write_ablation_csv)
from mga.optim import zero_grad
from mga.tensor import backward, no_grad

TINY = ClipParams(height=16, width=16, frames=3, min_size=0.15, max_size=0.25)


@pytest.fixture(scope="module")
def data():
    return gen_dataset(0, 3, TINY), gen_stills(1, 6, TINY)


def fresh(data, seed=0):
    net = build_network(seed=seed)
    set_input_stats(net, *data)
    return net


def state(net):
    return {k: v.copy() for k, v in net.state_items()}


def test_zero_epochs_is_a_no_op(data):
    net = fresh(data)
    before = state(net)
    train_scheme(net, *data, TrainingScheme(pretrain_epochs=0, joint_epochs=0))
    after = state(net)
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_one_epoch_is_deterministic(data, tmp_path):
    runs = []
    for _ in range(2):
        net = fresh(data)
        train_scheme(net, *data, TrainingScheme(pretrain_epochs=1, joint_epochs=1))
        runs.append(state(net))
    assert all(runs[0][k].tobytes() == runs[1][k].tobytes() for k in runs[0])


def test_checkpoint_every_epoch(data, tmp_path):
    net = fresh(data)
    hist = train_joint(net, *data, TrainingScheme(joint_epochs=2), checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["epoch_001.mgac", "epoch_002.mgac"]
    assert all(math.isfinite(h.train_loss) for h in hist)


@pytest.mark.parametrize("ratio", [0.0, 1.0])
def test_still_ratio_extremes(data, ratio):
    net = fresh(data)
    hist = train_joint(net, *data, TrainingScheme(joint_epochs=1, still_ratio=ratio))
    assert len(hist) == 1 and math.isfinite(hist[0].train_loss)


def test_loss_drops_by_a_third_in_twenty_epochs(data):
    videos, stills = data
    net = fresh(data)
    scheme = TrainingScheme(joint_epochs=20)
    first = train_joint(net, videos, stills, scheme, epochs=1)[0].train_loss
    last = train_joint(net, videos, stills, scheme, epochs=19)[-1].train_loss
    assert last <= 0.7 * first


def test_gradient_step_decreases_loss_for_small_lr(data):
    # Along the negative gradient, shrinking the step eventually lowers the loss.
    videos, _ = data
    net = fresh(data)
    batch = Batch.of(videos[:4])
    params = list(net.parameters())
    zero_grad(params)
    loss = joint_loss(net, batch, training=True)
    backward(loss)
    base = float(loss.data)
    grads = [p.grad.copy() for p in params]
    origin = [p.data.copy() for p in params]
    lr, improved = 1e-1, False
    for _ in range(12):
        for p, g, o in zip(params, grads, origin):
            p.data[...] = o - lr * g
        with no_grad():
            trial = float(joint_loss(net, batch, training=True).data)
        if trial < base:
            improved = True
            break
        lr /= 2
    assert improved


def test_scheme_validation():
    with pytest.raises(ValidationError):
        TrainingScheme(variant="T5").validate()
    with pytest.raises(ValidationError):
        TrainingScheme(still_ratio=1.5).validate()
    with pytest.raises(ValidationError):
        TrainingScheme(lr=float("nan")).validate()


def test_appearance_pretraining_leaves_motion_branch_alone(data):
    net = fresh(data)
    before = state(net)
    pretrain_appearance(net, data[1], TrainingScheme(pretrain_epochs=1))
    after = state(net)
    changed = {k for k in before if not np.array_equal(before[k], after[k])}
    assert changed and all(k.startswith("appearance.") for k in changed)


def test_predict_modes(data):
    net = fresh(data)
    for mode in ("joint", "appearance", "motion"):
        maps = predict(net, data[0], mode)
        assert len(maps) == len(data[0])
    with pytest.raises(ValidationError):
        predict(net, data[0], "fused")


# ---- ablation plumbing


def test_suites_resolve_to_expected_kinds():
    enc = {v.name: v for v in resolve_suite("encoder")}
    assert enc["E-MGA-tmc"].encoder is AttentionKind.MGA_TMC and enc["E-Add"].decoder is AttentionKind.MGA_M
    dec = {v.name: v for v in resolve_suite("decoder")}
    assert dec["D-Mul"].decoder is AttentionKind.MUL and dec["D-Mul"].encoder is AttentionKind.MGA_TMC
    assert [v.name for v in resolve_suite("full,T0")] == ["full", "T0"]
    with pytest.raises(ValidationError):
        resolve_suite("nonexistent")


def test_ablation_rows_and_csv(data, tmp_path):
    videos, stills = data
    ab = AblationData(videos, gen_dataset(5, 1, TINY, prefix="eval"), stills)
    scheme = TrainingScheme(pretrain_epochs=1, joint_epochs=1)
    rows = run_ablation("appearance-only,full", ab, scheme=scheme, seeds=[0, 1])
    assert [(r.variant, r.seed) for r in rows] == [("appearance-only", 0), ("full", 0),
                                                    ("appearance-only", 1), ("full", 1)]
    med = median_by_variant(rows)
    assert set(med) == {"appearance-only", "full"}
    write_ablation_csv(tmp_path / "a.csv", rows)
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "variant,seed,MAE,S-m,maxF,J" and len(lines) == 1 + 4 + 2
    single = run_ablation("full", ab, scheme=scheme, seeds=[0])
    assert single[0].mae == rows[1].mae
