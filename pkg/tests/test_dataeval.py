import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from arflow import dataeval as de
from arflow import flowcore as fc


def scene(bg=((1.0, 0, 0), (0, 1.0, 0)), fg=(), **kw):
    spec = de.SceneSpec(height=kw.pop("h", 32), width=kw.pop("w", 32), **kw)
    return de.generate_scene(spec, np.random.default_rng(0), background=np.array(bg), foreground=list(fg))


def test_static_scene():
    s = de.static_scene(de.SceneSpec(height=24, width=24, fg_size=(4, 8)), np.random.default_rng(1))
    np.testing.assert_array_equal(s.frame1, s.frame2)
    assert not s.flow.any() and not s.occlusion.any()


def test_background_translation():
    s = scene(bg=((1.0, 0, 3.0), (0, 1.0, 0)))
    np.testing.assert_array_equal(s.flow, np.broadcast_to([3.0, 0.0], s.flow.shape))
    expected = np.zeros((32, 32), np.uint8)
    expected[:, -3:] = 1
    np.testing.assert_array_equal(s.occlusion, expected)


def test_foreground_occlusion_matches_coverage():
    rect, shift = (12, 8, 22, 18), (-4, 0)
    s = scene(fg=[rect + tuple(map(float, shift))])
    np.testing.assert_array_equal(s.occlusion, oracles.layer_coverage_occlusion(32, 32, rect, shift))
    # the covered background band lies just ahead of the moving square
    band = np.zeros((32, 32), np.uint8)
    band[8:18, 8:12] = 1
    np.testing.assert_array_equal(s.occlusion, band)


def test_foreground_occlusion_random_cases():
    rng = np.random.default_rng(5)
    for _ in range(10):
        x0, y0 = rng.integers(6, 14, 2)
        rect = (int(x0), int(y0), int(x0) + int(rng.integers(4, 10)), int(y0) + int(rng.integers(4, 10)))
        shift = tuple(int(v) for v in rng.integers(-4, 5, 2))
        bg = tuple(int(v) for v in rng.integers(-2, 3, 2))
        s = scene(bg=((1.0, 0, bg[0]), (0, 1.0, bg[1])), fg=[rect + tuple(map(float, shift))])
        np.testing.assert_array_equal(s.occlusion, oracles.layer_coverage_occlusion(32, 32, rect, shift, bg))


def test_photometric_consistency():
    for s in de.make_scenes(20, de.SceneSpec(), seed=0):
        warped, _ = fc.warp(s.frame2, s.flow)
        keep = s.occlusion == 0
        assert np.abs(warped - s.frame1)[keep].max() < 2e-2


def test_scene_generation_is_seeded():
    a = de.make_scenes(2, de.SceneSpec(height=16, width=16, fg_size=(4, 8)), seed=9)
    b = de.make_scenes(2, de.SceneSpec(height=16, width=16, fg_size=(4, 8)), seed=9)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.frame1, y.frame1)
        np.testing.assert_array_equal(x.flow, y.flow)


@pytest.mark.parametrize("kw", [dict(height=8), dict(channels=2), dict(foreground=(3, 1)),
                                dict(fg_size=(40, 70)), dict(bg_zoom=(0.0, 1.0)), dict(texture_sigma=-1.0)])
def test_invalid_spec(kw):
    with pytest.raises(de.ConfigError):
        de.generate_scene(de.SceneSpec(**kw), np.random.default_rng(0))


def test_aepe_basics(rng):
    gt = rng.standard_normal((5, 6, 2))
    assert de.aepe(gt, gt) == 0.0
    assert de.aepe(gt + [3.0, 4.0], gt) == pytest.approx(5.0, abs=1e-12)
    with pytest.raises(de.UndefinedMetricError):
        de.aepe(gt, gt, np.zeros((5, 6), bool))


def test_aepe_matches_scalar_oracle(rng):
    pred, gt = rng.standard_normal((2, 4, 4, 2))
    mask = rng.uniform(size=(4, 4)) < 0.6
    mask[0, 0] = True
    assert de.aepe(pred, gt, mask) == pytest.approx(oracles.epe_mean(pred, gt, mask), abs=1e-12)


def test_fl_rate():
    gt = np.full((4, 4, 2), [100.0, 0.0])
    assert de.fl_rate(gt, gt) == 0.0
    assert de.fl_rate(np.zeros_like(gt), gt) == 1.0
    ten = np.full((2, 2, 2), [10.0, 0.0])
    assert de.fl_rate(ten + [3.0, 0.0], ten) == 0.0
    assert de.fl_rate(ten + [3.5, 0.0], ten) == 1.0
    with pytest.raises(de.UndefinedMetricError):
        de.fl_rate(gt, gt, np.zeros((4, 4)))


def test_speed_bins_left_closed():
    gt = np.array([[[9.999, 0], [10.0, 0], [0, 40.0], [30.0, 40.0]]])
    bins = de.speed_bins(gt)
    assert bins["s0-10"].tolist() == [[True, False, False, False]]
    assert bins["s10-40"].tolist() == [[False, True, False, False]]
    assert bins["s40+"].tolist() == [[False, False, True, True]]


@given(st.integers(0, 2 ** 31 - 1))
def test_speed_bins_partition(seed):
    gt = np.random.default_rng(seed).uniform(-60, 60, (6, 7, 2))
    total = sum(m.astype(int) for m in de.speed_bins(gt).values())
    assert np.all(total == 1)


@given(st.integers(0, 2 ** 31 - 1))
def test_aepe_flip_invariant(seed):
    r = np.random.default_rng(seed)
    pred, gt = r.standard_normal((2, 5, 6, 2))
    mask = r.uniform(size=(5, 6)) < 0.7
    mask[2, 3] = True

    def flip(f):
        f = f[:, ::-1].copy()
        f[..., 0] *= -1
        return f

    assert de.aepe(pred, gt, mask) == pytest.approx(de.aepe(flip(pred), flip(gt), mask[:, ::-1]), abs=1e-12)


def test_report_oracle_predictor():
    scenes = de.make_scenes(3, de.SceneSpec(height=32, width=32, fg_size=(6, 12)), seed=4)
    rep = de.evaluate(lambda a, b: np.stack([s.flow for s in scenes]), scenes)
    for k in ("ALL", "NOC", "OCC", "s0-10", "Fl"):
        assert rep[k] == 0.0
    assert rep["s40+"] is None


def test_report_matches_scalar_recomputation(rng):
    s = de.make_scenes(1, de.SceneSpec(height=16, width=16, fg_size=(4, 8)), seed=2)[0]
    pred = s.flow + rng.normal(0, 2, s.flow.shape)
    pred[0, 0] = s.flow[0, 0] + [25.0, 0.0]
    rep = de.report_from_predictions([pred], [s])
    occ = s.occlusion.astype(bool)
    assert rep["ALL"] == pytest.approx(oracles.epe_mean(pred, s.flow), abs=1e-12)
    assert rep["NOC"] == pytest.approx(oracles.epe_mean(pred, s.flow, ~occ), abs=1e-12)
    assert rep["OCC"] == pytest.approx(oracles.epe_mean(pred, s.flow, occ), abs=1e-12)
    errs = [np.hypot(*(pred[y, x] - s.flow[y, x])) for y in range(16) for x in range(16)]
    mags = [np.hypot(*s.flow[y, x]) for y in range(16) for x in range(16)]
    assert rep["Fl"] == pytest.approx(np.mean([e > 3 and e > 0.05 * m for e, m in zip(errs, mags)]), abs=1e-12)
    lo, hi = min(rep["NOC"], rep["OCC"]), max(rep["NOC"], rep["OCC"])
    assert lo <= rep["ALL"] <= hi
    assert rep.pixels["s0-10"] + rep.pixels["s10-40"] + rep.pixels["s40+"] == 256


def test_report_csv_and_table(tmp_path):
    rep = de.EvalReport({"ALL": 1.5, "NOC": 1.0, "OCC": None, "s0-10": 1.5, "s10-40": None, "s40+": None,
                         "Fl": 0.25}, {k: 4 for k in de.REPORT_FIELDS})
    text = rep.to_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text() == text
    assert text.splitlines()[0] == "metric,value,pixels"
    assert "OCC,,4" in text and "ALL,1.500000,4" in text
    assert "-" in rep.table().splitlines()[1]


def test_flo_round_trip(tmp_path, rng):
    flow = rng.standard_normal((7, 5, 2)).astype(np.float32)
    de.write_flo(tmp_path / "a.flo", flow)
    assert de.read_flo(tmp_path / "a.flo").tobytes() == flow.tobytes()


def test_flo_known_bytes(tmp_path):
    de.write_flo(tmp_path / "b.flo", np.array([[[1.5, -2.0]]]))
    data = (tmp_path / "b.flo").read_bytes()
    assert data.hex() == "50494548" "01000000" "01000000" "0000c03f" "000000c0"


def test_flo_rejects_corruption(tmp_path):
    p = tmp_path / "c.flo"
    p.write_bytes(b"\x00" * 20)
    with pytest.raises(de.FloFormatError) as e:
        de.read_flo(p)
    assert e.value.offset == 0
    de.write_flo(p, np.zeros((2, 2, 2)))
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(de.FloFormatError) as e:
        de.read_flo(p)
    assert e.value.offset == 41


def test_flow_color_wheel():
    assert np.allclose(de.flow_to_color(np.zeros((3, 3, 2))), 1.0)
    red = de.flow_to_color(np.array([[[2.0, 0.0]]]), max_magnitude=2.0)[0, 0]
    np.testing.assert_allclose(red, [1.0, 0.0, 0.0], atol=1e-12)
    import colorsys
    for ang in np.linspace(0, 2 * np.pi, 7, endpoint=False):
        v = np.array([[[np.cos(ang), np.sin(ang)], [-np.cos(ang), -np.sin(ang)]]])
        c = de.flow_to_color(v, 1.0)[0]
        h1 = colorsys.rgb_to_hsv(*c[0])[0]
        h2 = colorsys.rgb_to_hsv(*c[1])[0]
        assert min(abs(h1 - h2 - 0.5), abs(h1 - h2 + 0.5)) < 1e-9


def test_png_round_trip(tmp_path, rng):
    img = np.round(rng.uniform(size=(4, 5, 3)) * 255) / 255
    de.save_png(tmp_path / "x.png", img)
    np.testing.assert_allclose(de.load_png(tmp_path / "x.png"), img, atol=1e-12)
