"""Config parsing, serialization identity, and the command line surface."""
import json
import subprocess
import sys

import numpy as np
import pytest

from flowtrack import cli
from flowtrack import config as cf
from flowtrack import images
from flowtrack import synth_bench as sb
from flowtrack.errors import ConfigError

MICRO = [
    "geometry.template_size=16", "geometry.search_size=32",
    "geometry.dynamic_size=32", "geometry.patch=8",
    "encoder.n_layers=2", "encoder.d=16", "encoder.h=2",
    "flow.partition_layer=1", "flow.k_top=4", "flow.elimination=",
    "synth.frame_size=64", "synth.n_frames=3", "synth.target_size=10",
    "synth.n_distractors=1", "train.steps=2", "train.lr=0.01",
    "train.sequences=1",
]


def _micro_args(command, run_dir, *extra):
    args = [command, "--set", f"paths.run_dir={run_dir}"]
    for item in (*MICRO, *extra):
        args += ["--set", item]
    return args


# -- config parsing ------------------------------------------------------


def test_empty_config_gives_paper_defaults():
    cfg = cf.parse_config("")
    assert cfg["flow.k_top"] == 64
    assert cfg["flow.partition_layer"] == 10
    assert cfg["encoder.n_layers"] == 12
    assert cfg["encoder.h"] == 12
    assert cfg["geometry.template_size"] == 128
    assert cfg["geometry.search_size"] == 256
    assert cfg["geometry.dynamic_size"] == 192
    assert cfg["geometry.patch"] == 16
    assert cfg["loss.lambda_iou"] == 2.0
    assert cfg["loss.lambda_l1"] == 5.0
    assert cfg["flow.elimination"] == ((7, 64),)
    assert cfg["flow.variant"] == "full"


def test_variant_a_selects_reduced_policy():
    cfg = cf.parse_config("flow.variant = A\n")
    policy = cfg.flow_policy()
    assert policy.variant == "A"
    assert not policy.uses_partition


def test_malformed_int_names_the_key():
    with pytest.raises(ConfigError) as err:
        cf.parse_config("flow.k_top = sixty\n")
    assert err.value.key == "flow.k_top"
    assert "flow.k_top" in str(err.value)


def test_unknown_key_rejected_with_path():
    with pytest.raises(ConfigError) as err:
        cf.parse_config("flow.bogus = 3\n")
    assert err.value.key == "flow.bogus"
    with pytest.raises(ConfigError) as err:
        cf.parse_config("[flow]\nbogus = 3\n")
    assert err.value.key == "flow.bogus"


def test_sections_and_absolute_keys_mix():
    cfg = cf.parse_config("[geometry]\ntemplate_size = 64\n"
                          "search_size = 128\ndynamic_size = 96\n"
                          "encoder.d = 48\n")
    assert cfg["geometry.template_size"] == 64
    assert cfg["encoder.d"] == 48


def test_parse_serialize_parse_is_identity():
    text = ("# comment\nseed = 3\n[flow]\nvariant = D\nk_top = 16\n"
            "elimination = 2:8\n[geometry]\ntemplate_size = 64\n"
            "search_size = 128\ndynamic_size = 96\n"
            "[encoder]\nn_layers = 4\nd = 64\nh = 4\n"
            "flow.partition_layer = 3\nsynth.occlusion = true\n")
    cfg = cf.parse_config(text)
    canonical = cfg.to_text()
    again = cf.parse_config(canonical)
    assert again.to_text() == canonical
    assert again["flow.elimination"] == ((2, 8),)
    assert again["synth.occlusion"] is True
    assert again["flow.variant"] == "D"


def test_overrides_win_over_file_values():
    cfg = cf.parse_config("encoder.d = 64\nencoder.h = 4\n"
                          "encoder.n_layers = 4\nflow.partition_layer = 3\n"
                          "flow.elimination =\n",
                          overrides=["encoder.d=32"])
    assert cfg["encoder.d"] == 32
    with pytest.raises(ConfigError):
        cf.parse_config("", overrides=["no-equals-sign"])


def test_invariant_violations_name_keys():
    with pytest.raises(ConfigError) as err:
        cf.parse_config("encoder.d = 72\n")
    assert err.value.key == "encoder.d"
    with pytest.raises(ConfigError) as err:
        cf.parse_config("run.update_threshold = 1.5\n")
    assert err.value.key == "run.update_threshold"
    with pytest.raises(ConfigError):
        cf.parse_config("flow.variant = Z\n")


def test_elimination_schedule_forms():
    assert cf.parse_config("flow.elimination =\n")["flow.elimination"] == ()
    multi = cf.parse_config("encoder.n_layers = 8\n"
                            "flow.partition_layer = 6\n"
                            "flow.elimination = 5:16,3:8\n")
    assert multi["flow.elimination"] == ((3, 8), (5, 16))
    with pytest.raises(ConfigError):
        cf.parse_config("flow.elimination = 5\n")


def test_load_config_from_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 9\nflow.k_top = 32\n", encoding="utf-8")
    cfg = cf.load_config(path, overrides=["seed=11"])
    assert cfg["seed"] == 11
    assert cfg["flow.k_top"] == 32
    with pytest.raises(ConfigError):
        cf.load_config(tmp_path / "missing.cfg")


def test_config_builders_are_consistent():
    cfg = cf.parse_config("\n".join(MICRO).replace("=", " = "))
    geo = cfg.geometry()
    assert (geo.template_size, geo.patch) == (16, 8)
    run = cfg.run_config()
    assert run.geometry == geo
    enc_cfg = cfg.encoder_config()
    assert enc_cfg.d == 16 and enc_cfg.policy.k_top == 4
    synth = cfg.synth_config(seed=77)
    assert synth.frame_size == 64 and synth.seed == 77


# -- command line --------------------------------------------------------


def test_usage_errors_exit_one(capsys):
    with pytest.raises(SystemExit) as err:
        cli.main([])
    assert err.value.code == 1
    with pytest.raises(SystemExit) as err:
        cli.main(["not-a-command"])
    assert err.value.code == 1


def test_bad_config_key_exits_one(capsys):
    rc = cli.main(["train-toy", "--set", "bogus.key=1"])
    assert rc == 1
    assert "bogus.key" in capsys.readouterr().err


def test_mask_dump_grids_and_snapshot(tmp_path, capsys):
    rc = cli.main(_micro_args("mask-dump", tmp_path))
    assert rc == 0
    mask_dir = tmp_path / "mask-dump" / "masks"
    files = sorted(p.name for p in mask_dir.iterdir())
    assert len(files) == 14    # 7 variants x 2 layers
    assert "baseline_layer01.txt" in files and "full_layer02.txt" in files
    baseline = (mask_dir / "baseline_layer01.txt").read_text()
    rows = baseline.splitlines()
    assert set("".join(rows)) == {"1"}    # nothing blocked in the baseline
    assert len(rows) == 20 and all(len(r) == 20 for r in rows)
    full_deep = (mask_dir / "full_layer02.txt").read_text().splitlines()
    assert len(full_deep) == 36
    assert set("".join(full_deep)) == {"0", "1"}
    # the run directory snapshot reparses to the exact same config
    snapshot = (tmp_path / "mask-dump" / "config.txt").read_text()
    assert cf.parse_config(snapshot).to_text() == snapshot


def test_train_track_eval_round_trip(tmp_path, capsys):
    rc = cli.main(_micro_args("train-toy", tmp_path))
    assert rc == 0
    ckpt = tmp_path / "train-toy" / "model.ckpt"
    assert ckpt.is_file()
    assert (tmp_path / "train-toy" / "losses.txt").read_text().count("\n") == 2

    seq_dir = tmp_path / "seq"
    seq_dir.mkdir()
    cfg = cf.parse_config("\n".join(MICRO).replace("=", " = "))
    frames, boxes = sb.gen_sequence(cfg.synth_config())
    for i, frame in enumerate(frames):
        images.write_ppm(seq_dir / f"{i:04d}.ppm", frame)
    with open(seq_dir / "groundtruth.txt", "w", encoding="ascii") as fh:
        for box in boxes:
            fh.write(",".join(repr(float(v)) for v in box) + "\n")

    rc = cli.main(_micro_args("track", tmp_path,
                              f"paths.sequence={seq_dir}",
                              f"paths.checkpoint={ckpt}"))
    assert rc == 0
    pred_path = tmp_path / "track" / "predictions.txt"
    pred_lines = pred_path.read_text().splitlines()
    assert len(pred_lines) == len(frames)
    assert all(len(ln.split(",")) == 5 for ln in pred_lines)
    metrics = (tmp_path / "track" / "metrics.jsonl").read_text().splitlines()
    assert json.loads(metrics[-1])["kind"] == "aggregate"
    capsys.readouterr()

    # scoring the ground truth against itself must report a perfect run
    rc = cli.main(["eval", "--set", f"paths.run_dir={tmp_path}",
                   "--set", f"paths.predictions={seq_dir}/groundtruth.txt",
                   "--set", f"paths.boxes={seq_dir}/groundtruth.txt"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "AO = 100.00%" in out
    assert "SR50 = 100.00%" in out


def test_eval_requires_paths(capsys):
    assert cli.main(["eval"]) == 1
    assert "paths" in capsys.readouterr().err


def test_track_requires_sequence_and_checkpoint(tmp_path, capsys):
    assert cli.main(_micro_args("track", tmp_path)) == 1
    assert cli.main(_micro_args("track", tmp_path,
                                "paths.sequence=/nonexistent",
                                "paths.checkpoint=also-missing")) == 2


def test_ablate_micro_run(tmp_path, capsys):
    rc = cli.main(_micro_args("ablate", tmp_path,
                              "ablate.variants=baseline,C",
                              "ablate.seeds=0",
                              "ablate.train_sequences=2",
                              "ablate.eval_sequences=1"))
    assert rc == 0
    table = (tmp_path / "ablate" / "table.txt").read_text()
    assert table.splitlines()[0].startswith("variant")
    assert "baseline" in table and "C" in table
    csv = (tmp_path / "ablate" / "table.csv").read_text().splitlines()
    assert csv[0].startswith("variant,")
    assert len(csv) == 3
    out = capsys.readouterr().out
    assert "baseline" in out


def test_emit_heatmap_writes_images(tmp_path, capsys):
    rc = cli.main(_micro_args("emit-heatmap", tmp_path))
    assert rc == 0
    heat = (tmp_path / "emit-heatmap" / "heatmap.pgm").read_bytes()
    assert heat.startswith(b"P5\n4 4\n255\n")
    assert (tmp_path / "emit-heatmap" / "overlay.ppm").read_bytes() \
        .startswith(b"P6\n32 32\n255\n")


def test_grad_check_exit_codes(tmp_path, capsys, monkeypatch):
    monkeypatch.setattr(sb, "grad_fidelity", lambda seed=0: 5e-7)
    rc = cli.main(["grad-check", "--set", f"paths.run_dir={tmp_path}"])
    assert rc == 0
    report = (tmp_path / "grad-check" / "gradcheck.txt").read_text()
    assert "pass" in report and "5.0" in report
    monkeypatch.setattr(sb, "grad_fidelity", lambda seed=0: 2e-3)
    rc = cli.main(["grad-check", "--set", f"paths.run_dir={tmp_path}"])
    assert rc == 3
    assert "FAIL" in (tmp_path / "grad-check" / "gradcheck.txt").read_text()


def test_cli_outputs_are_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        rc = cli.main(_micro_args("train-toy", tmp_path / name))
        assert rc == 0
        rc = cli.main(_micro_args("mask-dump", tmp_path / name))
        assert rc == 0
    for rel in ("train-toy/model.ckpt", "train-toy/losses.txt",
                "mask-dump/masks/full_layer01.txt"):
        assert (tmp_path / "a" / rel).read_bytes() == \
            (tmp_path / "b" / rel).read_bytes()


def test_module_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "flowtrack.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "mask-dump" in proc.stdout
