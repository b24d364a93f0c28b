import math
from dataclasses import replace

import numpy as np
import pytest

from mga.errors import FormatError, ValidationError
from mga.synth import (BORDER, ClipParams, flow_to_color, gen_clip, gen_dataset, gen_stills, read_dataset,
                       read_flo2, read_pgm, read_ppm, wheel_position, write_dataset, write_flo2, write_pgm,
                       write_ppm)

SMALL = ClipParams(height=32, width=32, frames=4)


def test_same_seed_bit_identical():
    a, b = gen_clip(replace(SMALL, seed=3)), gen_clip(replace(SMALL, seed=3))
    for x, y in zip(a, b):
        for field in ("frame", "flow", "flow_image", "mask"):
            assert getattr(x, field).tobytes() == getattr(y, field).tobytes()


def test_static_shape_static_background():
    p = replace(SMALL, seed=1, fg_speed=(0, 0), bg_speed=0, distractor_prob=0.0)
    for s in gen_clip(p):
        assert not s.flow.any()
        assert s.mask.sum() > 0


def test_shape_moving_right_on_static_background():
    # Speed exactly 2 in a direction that rounds to (dx, dy) = (2, 0) for some seed.
    for seed in range(200):
        clip = gen_clip(replace(SMALL, seed=seed, fg_speed=(2, 2), bg_speed=0, min_shapes=1, max_shapes=1,
                                still_prob=0.0, distractor_prob=0.0))
        s = clip[1]
        m = s.mask[0] > 0
        if np.all(s.flow[0][m] == 2) and np.all(s.flow[1][m] == 0):
            break
    else:
        pytest.fail("no clip with a (2, 0) trajectory in 200 seeds")
    for s in clip[1:]:
        m = s.mask[0] > 0
        assert np.all(s.flow[0][m] == 2) and np.all(s.flow[1][m] == 0)
        assert not s.flow[:, ~m].any()


def test_first_frame_has_zero_flow_and_white_flow_image():
    for seed in range(5):
        s0 = gen_clip(replace(SMALL, seed=seed))[0]
        assert not s0.flow.any() and not s0.has_motion
        assert np.all(s0.flow_image == 1.0)


def test_mask_is_union_of_foreground_shapes():
    for seed in range(10):
        for s in gen_clip(replace(SMALL, seed=seed, distractor_prob=1.0)):
            assert set(np.unique(s.mask)) <= {0.0, 1.0}
            assert np.all(s.owner[s.mask[0] > 0] >= 0)


def test_shapes_stay_inside_border():
    for seed in range(20):
        for s in gen_clip(replace(SMALL, seed=seed, fg_speed=(3, 3))):
            occupied = s.owner >= 0
            assert not occupied[:BORDER].any() and not occupied[-BORDER:].any()
            assert not occupied[:, :BORDER].any() and not occupied[:, -BORDER:].any()


def test_flow_consistency_on_visible_surfaces():
    worst = 0.0
    for seed in range(10):
        clip = gen_clip(ClipParams(seed=seed, distractor_prob=1.0))
        for prev, cur in zip(clip, clip[1:]):
            h, w = cur.owner.shape
            yy, xx = np.mgrid[:h, :w]
            sy = (yy - cur.flow[1].astype(int)) % h
            sx = (xx - cur.flow[0].astype(int)) % w
            same = prev.owner[sy, sx] == cur.owner
            err = np.abs(prev.frame[:, sy, sx] - cur.frame)[:, same].mean()
            worst = max(worst, err)
    assert worst <= 2 / 255


def test_still_but_salient_frames_exist():
    found = False
    for seed in range(20):
        clip = gen_clip(replace(SMALL, seed=seed, still_prob=0.5, bg_speed=1))
        for s in clip[1:]:
            m = s.mask[0] > 0
            bg = s.owner < 0
            if m.any() and bg.any() and np.all(s.flow[:, m] == s.flow[:, bg][:, :1]):
                found = True
    assert found


def test_distractor_disagrees_with_motion():
    # A distractor: owned pixels outside the mask whose flow equals the background's.
    hits = 0
    for seed in range(10):
        clip = gen_clip(replace(SMALL, seed=seed, distractor_prob=1.0))
        s = clip[2]
        distractor = (s.owner >= 0) & (s.mask[0] == 0)
        bg = s.owner < 0
        if distractor.any() and np.all(s.flow[:, distractor] == s.flow[:, bg][:, :1]):
            hits += 1
    assert hits >= 1


def test_impossible_geometry():
    with pytest.raises(ValidationError):
        gen_clip(ClipParams(height=16, width=16, max_size=0.9))
    with pytest.raises(ValidationError):
        gen_clip(ClipParams(height=30, width=32))
    with pytest.raises(ValidationError):
        gen_clip(ClipParams(min_shapes=0))


def test_stills_have_no_distractors_or_motion():
    for s in gen_stills(0, 5, SMALL):
        assert s.index == 0 and not s.has_motion
        assert np.array_equal(s.owner >= 0, s.mask[0] > 0)


# ---- flow rendering

def test_zero_flow_is_white():
    assert np.all(flow_to_color(np.zeros((2, 4, 5))) == 1.0)


def test_opposite_directions_half_a_wheel_apart():
    for m in (0.5, 1.0, 3.0):
        f = np.zeros((2, 1, 2))
        f[0, 0, 0], f[0, 0, 1] = m, -m
        pos = wheel_position(f)[0]
        assert abs(abs(pos[0] - pos[1]) - 0.5) < 1e-12


def _oracle_wheel():
    # Segment lengths of the Middlebury wheel: R-Y, Y-G, G-C, C-B, B-M, M-R.
    segs = [(15, lambda i, n: (255, 255 * i // n, 0)), (6, lambda i, n: (255 - 255 * i // n, 255, 0)),
            (4, lambda i, n: (0, 255, 255 * i // n)), (11, lambda i, n: (0, 255 - 255 * i // n, 255)),
            (13, lambda i, n: (255 * i // n, 0, 255)), (6, lambda i, n: (255, 0, 255 - 255 * i // n))]
    wheel = []
    for n, fn in segs:
        wheel += [fn(i, n) for i in range(n)]
    return wheel


def _oracle_pixel(u, v, maxrad, wheel):
    rad = math.hypot(u, v) / max(maxrad, 1e-6)
    a = math.atan2(-v, -u) / math.pi
    fk = (a + 1) / 2 * (len(wheel) - 1)
    k0 = int(math.floor(fk))
    k1 = (k0 + 1) % len(wheel)
    f = fk - k0
    rgb = []
    for c in range(3):
        col = ((1 - f) * wheel[k0][c] + f * wheel[k1][c]) / 255
        rgb.append(1 - rad * (1 - col) if rad <= 1 else col * 0.75)
    return rgb


def test_flow_rendering_matches_per_pixel_oracle():
    rng = np.random.default_rng(0)
    flow = rng.normal(scale=3, size=(2, 9, 11))
    flow[:, 0, 0] = 0
    maxrad = float(np.hypot(flow[0], flow[1]).max())
    got = flow_to_color(flow)
    wheel = _oracle_wheel()
    for y in range(9):
        for x in range(11):
            expect = _oracle_pixel(flow[0, y, x], flow[1, y, x], maxrad, wheel)
            assert np.max(np.abs(got[:, y, x] - expect)) <= 1 / 255
    # A smaller normaliser saturates and darkens.
    assert np.all(flow_to_color(flow, max_magnitude=1e-9)[:, 1:, 1:] <= 0.75 + 1e-12)


# ---- files

def test_dataset_round_trip(tmp_path):
    samples = gen_dataset(4, 2, SMALL)
    write_dataset(samples, tmp_path)
    back = read_dataset(tmp_path)
    assert [(s.clip_id, s.index) for s in back] == [(s.clip_id, s.index) for s in samples]
    for a, b in zip(samples, back):
        assert np.array_equal(a.mask, b.mask)
        assert a.flow.tobytes() == b.flow.tobytes()
        assert np.max(np.abs(a.frame - b.frame)) <= 0.5 / 255 + 1e-12
        assert np.max(np.abs(a.flow_image - b.flow_image)) <= 0.5 / 255 + 1e-12
    assert sorted(p.name for p in (tmp_path / samples[0].clip_id).iterdir())[:4] == [
        "flow_00000.flo2", "flow_00001.flo2", "flow_00002.flo2", "flow_00003.flo2"]


def test_flo2_bit_exact_with_fractional_values(tmp_path):
    f = np.random.default_rng(1).normal(size=(2, 5, 7)).astype(np.float32)
    write_flo2(tmp_path / "a.flo2", f)
    assert read_flo2(tmp_path / "a.flo2").tobytes() == f.tobytes()
    raw = (tmp_path / "a.flo2").read_bytes()
    assert raw[:4] == b"FLO2" and len(raw) == 12 + 5 * 7 * 8


def test_truncated_flo2(tmp_path):
    write_flo2(tmp_path / "a.flo2", np.zeros((2, 4, 4), np.float32))
    raw = (tmp_path / "a.flo2").read_bytes()
    (tmp_path / "b.flo2").write_bytes(raw[:-5])
    with pytest.raises(FormatError, match="b.flo2"):
        read_flo2(tmp_path / "b.flo2")
    (tmp_path / "c.flo2").write_bytes(b"PIEH" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        read_flo2(tmp_path / "c.flo2")


def test_netpbm_round_trip_and_errors(tmp_path):
    img = np.random.default_rng(2).uniform(size=(3, 4, 6))
    write_ppm(tmp_path / "a.ppm", img)
    assert np.max(np.abs(read_ppm(tmp_path / "a.ppm") - img)) <= 0.5 / 255 + 1e-12
    m = (np.random.default_rng(3).uniform(size=(1, 4, 6)) > 0.5) * 1.0
    write_pgm(tmp_path / "m.pgm", m)
    assert np.array_equal(read_pgm(tmp_path / "m.pgm"), m)
    with pytest.raises(FormatError):
        read_pgm(tmp_path / "a.ppm")
    (tmp_path / "t.ppm").write_bytes((tmp_path / "a.ppm").read_bytes()[:-4])
    with pytest.raises(FormatError):
        read_ppm(tmp_path / "t.ppm")


def test_missing_file_names_path(tmp_path):
    samples = gen_dataset(5, 1, SMALL)
    write_dataset(samples, tmp_path)
    (tmp_path / samples[0].clip_id / "mask_00002.pgm").unlink()
    with pytest.raises(FileNotFoundError, match="mask_00002.pgm"):
        read_dataset(tmp_path)
