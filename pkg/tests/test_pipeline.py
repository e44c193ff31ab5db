import json
import os

import numpy as np
import pytest

from neurocam import cli
from neurocam import pipeline as pl
from neurocam import spatial as sp
from neurocam.core import Frame, RngStream, TimeSeries


def small_config():
    c = pl.default_config()
    c["reservoir"].update(n=60, connectivity=0.2, washout=60,
                          train_len=600, test_len=300)
    c["scene"]["frames"] = 120
    return c


class TestConfig:
    def test_default_validates(self):
        assert pl.validate_config(pl.default_config())

    def test_default_is_a_copy(self):
        c = pl.default_config()
        c["seed"] = 99
        assert pl.default_config()["seed"] == 1234

    def test_missing_top_level_key_named(self):
        c = pl.default_config()
        del c["temporal"]
        with pytest.raises(pl.ConfigError, match="temporal"):
            pl.validate_config(c)

    def test_missing_motion_var_named(self):
        c = pl.default_config()
        del c["scene"]["vars"]["theta"]
        with pytest.raises(pl.ConfigError, match="theta"):
            pl.validate_config(c)

    def test_shipped_config_round_trips(self):
        path = os.path.join(os.path.dirname(__file__), os.pardir,
                            "configs", "default.json")
        assert pl.load_config(path) == pl.default_config()


class TestTrajectory:
    def test_value_closed_form(self):
        spec = pl.TrajectorySpec(pl.default_config()["scene"])
        t = 17
        expect = 32.0 + 12.0 * np.sin(2 * np.pi * t / 100.0)
        assert spec.value("x", t) == pytest.approx(expect, abs=1e-12)

    def test_constant_variable(self):
        spec = pl.TrajectorySpec(pl.default_config()["scene"])
        assert all(spec.value("h", t) == 13.0 for t in range(10))

    def test_trajectory_shape(self):
        spec = pl.TrajectorySpec(pl.default_config()["scene"])
        assert spec.trajectory(25).shape == (25, 7)

    def test_tuple_is_ground_truth(self):
        spec = pl.TrajectorySpec(pl.default_config()["scene"])
        tp = spec.tuple_at(3)
        assert tp.tag == "square" and tp.p == 1.0

    def test_zero_frames_rejected(self):
        c = pl.default_config()["scene"]
        c["frames"] = 0
        with pytest.raises(ValueError):
            pl.TrajectorySpec(c)


class TestScene:
    def test_constant_trajectory_identical_frames(self):
        c = pl.default_config()["scene"]
        c["frames"] = 5
        for v in c["vars"].values():
            v["terms"] = []
        frames, truths = pl.generate_scene(pl.TrajectorySpec(c))
        assert len(frames) == len(truths) == 5
        for fr in frames[1:]:
            assert np.array_equal(fr.pixels, frames[0].pixels)

    def test_rendered_centroid_matches_truth(self):
        c = pl.default_config()["scene"]
        c["frames"] = 1
        c["vars"]["x"] = {"const": 20.0, "terms": []}
        c["vars"]["y"] = {"const": 30.0, "terms": []}
        for v in ("theta", "phi_x", "phi_y"):
            c["vars"][v] = {"const": 0.0, "terms": []}
        frames, _ = pl.generate_scene(pl.TrajectorySpec(c))
        img = frames[0].pixels
        ys, xs = np.mgrid[0:img.shape[0], 0:img.shape[1]]
        total = img.sum()
        cx = (xs * img).sum() / total
        cy = (ys * img).sum() / total
        assert abs(cx - 20.0) <= 1.0
        assert abs(cy - 30.0) <= 1.0

    def test_out_of_frame_rejected(self):
        c = pl.default_config()["scene"]
        c["frames"] = 1
        c["vars"]["x"] = {"const": 3.0, "terms": []}
        with pytest.raises(ValueError):
            pl.generate_scene(pl.TrajectorySpec(c))


class TestChannel:
    def test_identity(self):
        ch = pl.ChannelSpec([1.0], [0.0, 1.0])
        x = RngStream(1).uniform(-1, 1, 100)
        assert np.allclose(pl.apply_channel(x, ch).samples, x, atol=1e-15)

    def test_fir_impulse_response(self):
        ch = pl.ChannelSpec([0.5, 0.25, 0.1], [0.0, 1.0])
        d = np.zeros(6)
        d[0] = 1.0
        out = pl.apply_channel(d, ch).samples
        assert np.allclose(out, [0.5, 0.25, 0.1, 0, 0, 0], atol=1e-15)

    def test_polynomial_pointwise(self):
        ch = pl.ChannelSpec([1.0], [1.0, 0.0, 2.0])
        out = pl.apply_channel(np.array([0.0, 1.0, 2.0]), ch).samples
        assert np.allclose(out, [1.0, 3.0, 9.0], atol=1e-15)

    def test_time_series_keeps_dt(self):
        ch = pl.ChannelSpec([1.0], [0.0, 1.0])
        out = pl.apply_channel(TimeSeries(np.ones(5), dt=0.25), ch)
        assert out.dt == 0.25

    def test_measured_snr(self):
        ch = pl.ChannelSpec([1.0], [0.0, 1.0], snr_db=30.0)
        x = np.sin(2 * np.pi * np.arange(20000) / 37.0)
        out = pl.apply_channel(x, ch, RngStream(2)).samples
        noise = out - x
        snr = 10 * np.log10(np.mean(x ** 2) / np.mean(noise ** 2))
        assert abs(snr - 30.0) <= 1.0

    def test_noise_requires_rng(self):
        ch = pl.ChannelSpec([1.0], [0.0, 1.0], snr_db=30.0)
        with pytest.raises(ValueError):
            pl.apply_channel(np.ones(10), ch)

    def test_invalid_specs(self):
        with pytest.raises(ValueError):
            pl.ChannelSpec([], [0.0, 1.0])
        with pytest.raises(ValueError):
            pl.ChannelSpec([1.0], [0, 1, 0, 0, 1])
        with pytest.raises(ValueError):
            pl.ChannelSpec([1.0], [0.0, 1.0], snr_db=-5.0)

    def test_make_bipolar(self):
        s = pl.make_bipolar(RngStream(3), 500, amplitude=0.5)
        assert len(s) == 500
        assert set(np.unique(s.samples)) == {-0.5, 0.5}


class TestEqualizerStage:
    def test_deterministic_fragment(self):
        c = small_config()

        def run():
            _, frag = pl.run_filter_stage(c, RngStream(11))
            return frag
        assert run() == run()

    def test_fragment_keys_and_improvement(self):
        c = small_config()
        series, frag = pl.run_filter_stage(c, RngStream(11))
        assert set(series) == {"clean", "distorted", "recovered"}
        assert frag["test_nrmse"] < frag["baseline_nrmse"]
        assert frag["snr_db"] is None


class TestFilterFrames:
    def test_per_pixel_smoke(self):
        c = small_config()
        trained, _, _ = pl.build_equalizer(c, RngStream(11))
        ch = pl.ChannelSpec(c["channel"]["taps"], c["channel"]["poly"])
        rng = RngStream(4)
        frames = [Frame(rng.uniform(0, 1, (6, 6))) for _ in range(12)]
        dist, rec = pl.filter_frames(trained, frames, ch, rng)
        assert len(dist) == len(rec) == 12
        for fr in dist + rec:
            assert fr.pixels.shape == (6, 6)
            assert fr.pixels.min() >= 0.0 and fr.pixels.max() <= 1.0


def constant_tuples(n):
    return [sp.SpatialTuple(tag="square", x=32.0, y=30.0, h=13.0, w=13.0,
                            theta=5.0, phi_x=0.0, phi_y=0.0, p=1.0)
            for _ in range(n)]


class TestTemporalStage:
    def test_too_few_tuples_rejected(self):
        with pytest.raises(ValueError):
            pl.run_temporal_stage(constant_tuples(99), pl.default_config(),
                                  RngStream(5))

    def test_constant_tuples_quiet(self):
        traces, events, frag = pl.run_temporal_stage(
            constant_tuples(120), pl.default_config(), RngStream(5))
        assert set(traces) == set(pl.MOTION_VARS)
        for var in pl.MOTION_VARS:
            assert frag["per_variable"][var]["mean_anomaly_last_quartile"] \
                < 0.05
            assert events[var] == []

    def test_deterministic(self):
        def run():
            _, _, frag = pl.run_temporal_stage(
                constant_tuples(120), pl.default_config(), RngStream(5))
            return frag
        assert run() == run()


class TestSeriesCsv:
    def test_schema_and_round_trip(self, tmp_path):
        path = str(tmp_path / "s.csv")
        pl._write_series_csv(path, {"t": np.arange(3),
                                    "v": np.array([0.5, -1.25, 1e-9])})
        with open(path) as f:
            lines = f.read().splitlines()
        assert lines[0] == "t,v"
        vals = [float(l.split(",")[1]) for l in lines[1:]]
        assert vals == [0.5, -1.25, 1e-9]


class TestPipelineAtomicity:
    def test_failed_run_leaves_nothing(self, tmp_path):
        c = small_config()
        c["scene"]["vars"]["x"] = {"const": 3.0, "terms": []}
        out = str(tmp_path / "run")
        with pytest.raises(pl.StageError) as e:
            pl.run_pipeline(c, out)
        assert e.value.stage == "scene"
        assert not os.path.exists(out)
        assert os.listdir(str(tmp_path)) == []

    def test_nonempty_out_dir_rejected(self, tmp_path):
        out = tmp_path / "run"
        out.mkdir()
        (out / "stale.txt").write_text("x")
        with pytest.raises(ValueError):
            pl.run_pipeline(small_config(), str(out))


class TestCli:
    def test_hw_retention(self, tmp_path):
        out = str(tmp_path)
        assert cli.main(["hw", "--demo", "retention", "--out", out]) == 0
        with open(os.path.join(out, "retention.csv")) as f:
            lines = f.read().splitlines()
        assert lines[0] == "u_over_kt,tau_s"
        row = dict(zip(("u", "tau"), lines[2].split(",")))
        assert float(row["u"]) == 5.0
        assert float(row["tau"]) == pytest.approx(np.exp(5.0) * 1e-9,
                                                  rel=1e-12)

    def test_hw_mtj(self, tmp_path):
        out = str(tmp_path)
        assert cli.main(["hw", "--demo", "mtj", "--out", out]) == 0
        with open(os.path.join(out, "mtj_transfer.csv")) as f:
            header = f.readline().strip()
        assert header == "input,mean,stderr"
        with open(os.path.join(out, "mtj_meta.json")) as f:
            meta = json.load(f)
        assert meta["kappa"] == 1.0
        assert meta["samples_per_point"] == 10000

    def test_hw_crossbar(self, tmp_path):
        out = str(tmp_path)
        assert cli.main(["hw", "--demo", "crossbar", "--out", out]) == 0
        with open(os.path.join(out, "crossbar_error.csv")) as f:
            lines = f.read().splitlines()
        assert lines[0] == "quant_bits,max_decode_error,max_matvec_error"
        assert len(lines) == 5
        assert float(lines[1].split(",")[1]) <= 1e-9

    def test_hw_digital(self, tmp_path):
        out = str(tmp_path)
        assert cli.main(["hw", "--demo", "digital", "--out", out]) == 0
        with open(os.path.join(out, "digital_neuron.csv")) as f:
            lines = f.read().splitlines()
        assert lines[0] == "case,n_inputs,fixed_point,float64,abs_error"
        assert len(lines) == 21

    def test_error_json_on_stderr(self, tmp_path, capsys):
        rc = cli.main(["track", "--frames", str(tmp_path / "nope"),
                       "--model", str(tmp_path / "nope.json"),
                       "--out", str(tmp_path / "out")])
        assert rc == 1
        doc = json.loads(capsys.readouterr().err)
        assert doc["error"] and doc["message"]

    def test_gen_scene_then_predict(self, tmp_path):
        cfg_path = str(tmp_path / "config.json")
        with open(cfg_path, "w") as f:
            json.dump(small_config(), f)
        scene_dir = str(tmp_path / "scene")
        assert cli.main(["gen-scene", "--config", cfg_path,
                         "--out", scene_dir]) == 0
        pgms = [p for p in os.listdir(os.path.join(scene_dir, "frames"))
                if p.endswith(".pgm")]
        assert len(pgms) == 120
        assert os.path.exists(os.path.join(scene_dir, "ground_truth.csv"))

        pred_dir = str(tmp_path / "pred")
        assert cli.main(["predict", "--config", cfg_path,
                         "--tuples",
                         os.path.join(scene_dir, "ground_truth.csv"),
                         "--out", pred_dir]) == 0
        for var in pl.MOTION_VARS:
            assert os.path.exists(os.path.join(pred_dir,
                                               "temporal_%s.csv" % var))
        with open(os.path.join(pred_dir, "temporal_report.json")) as f:
            assert "per_variable" in json.load(f)

    def test_filter_command(self, tmp_path):
        cfg_path = str(tmp_path / "config.json")
        with open(cfg_path, "w") as f:
            json.dump(small_config(), f)
        out = str(tmp_path / "filt")
        assert cli.main(["filter", "--config", cfg_path, "--out", out]) == 0
        assert os.path.exists(os.path.join(out, "filter_recovery.csv"))
        with open(os.path.join(out, "filter_report.json")) as f:
            frag = json.load(f)
        assert frag["test_nrmse"] < frag["baseline_nrmse"]


class TestRunFigures:
    def test_render_from_csvs(self, tmp_path):
        run_dir = str(tmp_path)
        t = np.arange(300)
        pl._write_series_csv(os.path.join(run_dir, "filter_recovery.csv"), {
            "t": t, "clean": np.sin(t / 9.0),
            "distorted": np.sin(t / 9.0) * 0.7,
            "recovered": np.sin(t / 9.0) * 0.98,
        })
        for var in pl.MOTION_VARS:
            pl._write_series_csv(
                os.path.join(run_dir, "temporal_%s.csv" % var), {
                    "t": t, "actual": np.cos(t / 11.0),
                    "predicted": np.cos(t / 11.0) * 0.9,
                    "anomaly": np.abs(np.sin(t / 30.0)),
                })
        cli._render_run_figures(run_dir)
        for name in ("filter_recovery.png", "trajectory.png", "anomaly.png"):
            assert os.path.getsize(os.path.join(run_dir, "figures",
                                                name)) > 0
