import numpy as np
import pytest

from posetta import diffmodel as dm
from posetta.harness.ablate import arm_setup, read_ablation_csv
from posetta.harness.cli import EXIT_ABORT, EXIT_OK, EXIT_USAGE, main
from posetta.harness.config import ConfigError, ExperimentConfig, dump_config, load_config
from posetta.harness.pretrain import DivergenceError, PretrainConfig, pretrain
from posetta.engine import EngineConfig, PipelineMode
from posetta.streamgen import StreamConfig

SMALL_INI = """
[stream]
video_count = 2
frames_per_video = 12
source_size = 800

[pretrain]
hidden_dims = 16, 16
steps_per_eval = 40
max_evals = 2
"""


@pytest.fixture
def small_ini(tmp_path):
    p = tmp_path / "small.ini"
    p.write_text(SMALL_INI)
    return p


@pytest.fixture
def workdir(tmp_path, small_ini):
    out = tmp_path / "out"
    args = ["--config", str(small_ini), "--out", str(out)]
    assert main(["pretrain", *args]) == EXIT_OK
    assert main(["gen-streams", *args, "--seed", "3"]) == EXIT_OK
    return out, args


# --- config ----------------------------------------------------------------

def test_defaults_without_file():
    cfg = load_config()
    assert cfg.seed == 22 and cfg.mode == "full"
    assert cfg.engine.n_v == 160 and cfg.engine.n_clusters == 15 and cfg.engine.window == 5
    assert cfg.engine.weights.lambda1 == 1e-4 and cfg.engine.weights.lambda2 == 10
    assert cfg.engine.batch_agg == 8 and cfg.engine.momentum_stream == 0.5 and cfg.engine.momentum_agg == 0.7


def test_sections_parse(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[experiment]\nseed = 7\nmode = single\nseeds = 1, 2\n[engine]\nwindow = 3\n"
                 "[two_stage]\nstage2_epe_threshold_px = 30\n[weights]\nlambda2 = 0\n"
                 "[switches]\nlocal_aug = no\nsampling = uniform\n[stream]\nevent_rate = 0.1\n")
    cfg = load_config(p)
    assert (cfg.seed, cfg.mode, cfg.seeds) == (7, "single", (1, 2))
    assert cfg.engine.window == 3 and cfg.engine.two_stage.stage2_epe_threshold_px == 30.0
    assert cfg.engine.weights.lambda2 == 0.0 and cfg.stream.event_rate == 0.1
    mode = cfg.pipeline_mode("full")
    assert not mode.local_aug and mode.sampling == "uniform" and mode.aggregation


@pytest.mark.parametrize("text", [
    "[stream]\nnot_a_key = 1\n",
    "[mystery]\na = 1\n",
    "[engine]\nwindow = five\n",
    "[switches]\nlocal_aug = perhaps\n",
    "[switches]\nsampling = random\n",
    "[experiment]\nmode = sometimes\n",
    "[stream]\nevent_rate = 3\n",
    "[engine]\nweights = 1\n",
])
def test_bad_config_rejected(tmp_path, text):
    p = tmp_path / "c.ini"
    p.write_text(text)
    with pytest.raises(ConfigError):
        load_config(p)


def test_cli_overrides_file(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[experiment]\nseed = 7\nmode = single\n")
    cfg = load_config(p, {"seed": 9, "mode": None})
    assert cfg.seed == 9 and cfg.mode == "single"


def test_dump_reloads_equal(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[engine]\nlr_stream = 0.00031\n[switches]\ntwo_stage = false\n[pretrain]\nhidden_dims = 8, 4\n")
    cfg = load_config(p)
    q = tmp_path / "d.ini"
    q.write_text(dump_config(cfg))
    again = load_config(q)
    assert again == cfg


# --- arms ------------------------------------------------------------------

def test_arm_names():
    base = EngineConfig()
    assert arm_setup("pervideo", base)[0] == PipelineMode.preset("pervideo")
    m, c = arm_setup("thr10_off", base)
    assert not m.two_stage and c.two_stage.stage2_epe_threshold_px == 10.0
    m, _ = arm_setup("+local_aug", base)
    assert m.local_aug and not m.aggregation and not m.two_stage
    _, c = arm_setup("noadapt", base)
    assert c.two_stage.stage2_max_iters == 0
    for bad in ("fulll", "+magic", "thrx_on", "thr10_maybe"):
        with pytest.raises(ValueError):
            arm_setup(bad, base)


# --- pretraining -------------------------------------------------------------

def test_pretrain_deterministic():
    cfg = PretrainConfig(hidden_dims=(8,), steps_per_eval=30, max_evals=2)
    sc = StreamConfig(source_size=500)
    a, ha = pretrain(sc, cfg)
    b, hb = pretrain(sc, cfg)
    assert a.flat.tobytes() == b.flat.tobytes() and repr(ha) == repr(hb)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_pretrain_divergence():
    with pytest.raises(DivergenceError):
        pretrain(StreamConfig(source_size=300), PretrainConfig(hidden_dims=(8,), learning_rate=1e200,
                                                               steps_per_eval=5, max_evals=2))


def test_pretrain_beats_untrained_fivefold(pretrained_default):
    state, history = pretrained_default
    untrained, best = history[0][2], min(h[2] for h in history)
    assert best * 5 <= untrained


def test_checkpoint_roundtrip_predictions(pretrained_default, tmp_path):
    state, _ = pretrained_default
    dm.save_checkpoint(tmp_path / "m.ckpt", state)
    x = np.random.default_rng(0).standard_normal((5, 45))
    np.testing.assert_array_equal(dm.predict(dm.load_checkpoint(tmp_path / "m.ckpt"), x).vector(),
                                  dm.predict(state, x).vector())


# --- command line --------------------------------------------------------------

def test_usage_errors(tmp_path, small_ini, capsys):
    assert main([]) == EXIT_USAGE
    assert main(["fly"]) == EXIT_USAGE
    assert main(["run", "--bogus"]) == EXIT_USAGE
    assert main(["run", "--mode", "sideways"]) == EXIT_USAGE
    assert main(["run", "--config", str(tmp_path / "none.ini")]) == EXIT_USAGE
    missing = tmp_path / "nope.ckpt"
    assert main(["run", "--config", str(small_ini), "--checkpoint", str(missing)]) == EXIT_USAGE
    assert str(missing) in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_runtime_abort_codes(tmp_path, small_ini):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    streams = tmp_path / "s.txt"
    streams.write_text("x")
    assert main(["run", "--config", str(small_ini), "--checkpoint", str(bad), "--streams", str(streams)]) == EXIT_ABORT
    div = tmp_path / "div.ini"
    div.write_text(SMALL_INI.replace("max_evals = 2", "max_evals = 2\nlearning_rate = 1e200"))
    assert main(["pretrain", "--config", str(div), "--out", str(tmp_path / "o")]) == EXIT_ABORT


def test_pretrain_command_outputs(workdir):
    out, _ = workdir
    assert (out / "model.ckpt").exists() and (out / "streams.txt").exists()
    log = (out / "pretrain_log.csv").read_text().splitlines()
    assert log[0] == "step,train_loss,val_mpjpe_mm" and len(log) >= 3


def test_run_and_truncated_streams(workdir, tmp_path):
    out, args = workdir
    assert main(["run", *args, "--mode", "single"]) == EXIT_OK
    text = (out / "run_single.csv").read_text()
    assert text.startswith("video_id,frame_id,confident,mpjpe_mm")
    assert "# aggregate" in text
    cut = tmp_path / "cut.txt"
    s = (out / "streams.txt").read_text()
    cut.write_text(s[: len(s) // 2])
    assert main(["run", *args, "--streams", str(cut)]) == EXIT_ABORT


def test_ablate_all_off_reproduces_pervideo_run(workdir):
    out, args = workdir
    assert main(["run", *args, "--mode", "pervideo", "--seed", "3"]) == EXIT_OK
    assert main(["ablate", *args, "--arms", "all_off,pervideo", "--seeds", "3"]) == EXIT_OK
    run = (out / "run_pervideo.csv").read_text()
    for arm in ("all_off", "pervideo"):
        assert (out / "arms" / arm / "seed3.csv").read_text() == run
    res = read_ablation_csv(out / "ablation.csv")
    assert res["all_off"][0]["mpjpe_all"] == res["pervideo"][0]["mpjpe_all"]
    assert main(["ablate", *args, "--arms", "pervideo,wat"]) == EXIT_USAGE


def test_report_renders(workdir):
    out, args = workdir
    assert main(["run", *args, "--mode", "full"]) == EXIT_OK
    assert main(["ablate", *args, "--arms", "pervideo,+two_stage,thr10_on,thr30_on", "--seeds", "1"]) == EXIT_OK
    assert main(["report", *args, str(out)]) == EXIT_OK
    rep = out / "report"
    md = (rep / "report.md").read_text()
    assert "| run_full |" in md and "+two_stage" in md and "Confident keypoints" in md
    for name in ("runs_mpjpe.png", "ablation_mpjpe.png", "threshold_sweep.png", "confidence_vs_epe.png",
                 "confidence_vs_mpjpe.png"):
        assert (rep / name).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert (rep / "confidence_vs_epe.csv").read_text().startswith("confident_keypoints,frames,epe2d_px")


def test_report_without_inputs(tmp_path):
    assert main(["report", "--out", str(tmp_path)]) == EXIT_USAGE
