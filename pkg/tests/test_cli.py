"""Command-line behavior: exit codes, artifact layout, determinism,
and config precedence."""

import json
import os
import shutil
import subprocess
import sys

import numpy as np
import pytest

from foley_adapter import diffusion, evaluate, synth, training
from foley_adapter.adapter import CONDITIONAL, InjectionBundle, adapter_forward
from foley_adapter.backbone import backbone_forward
from foley_adapter.cli import main
from foley_adapter.config import (
    DEFAULTS,
    deep_merge,
    load_config_file,
    resolve_config,
)
from foley_adapter.diffusion import GuidanceParams
from foley_adapter.errors import ConfigError
from foley_adapter.tensor_store import read_tensors

N_SCENES = 18


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ds = str(root / "ds")
    bb = str(root / "bb.ckpt")
    ad = str(root / "ad.ckpt")
    assert main(["gen-data", "--out", ds, "--n", str(N_SCENES),
                 "--conflict-ratio", "0.5", "--seed", "4"]) == 0
    assert main(["train", "--phase", "backbone", "--data", ds,
                 "--steps", "2", "--seed", "1", "--out", bb]) == 0
    assert main(["train", "--phase", "adapter", "--data", ds,
                 "--backbone", bb, "--steps", "2", "--seed", "1",
                 "--out", ad]) == 0
    return {"root": root, "ds": ds, "bb": bb, "ad": ad}


def _tree_bytes(path):
    out = {}
    for base, _, files in os.walk(path):
        for name in files:
            full = os.path.join(base, name)
            with open(full, "rb") as fh:
                out[os.path.relpath(full, path)] = fh.read()
    return out


class TestConfig:
    def test_deep_merge_nested(self):
        base = {"a": {"x": 1, "y": 2}, "b": 3, "c": [1, 2]}
        merged = deep_merge(base, {"a": {"y": 9}, "c": [7]})
        assert merged == {"a": {"x": 1, "y": 9}, "b": 3, "c": [7]}
        assert base["a"]["y"] == 2

    def test_precedence_defaults_file_flags(self, tmp_path):
        cfg_file = tmp_path / "run.json"
        cfg_file.write_text(json.dumps({"seed": 3, "train": {"steps": 7}}))
        merged = resolve_config(str(cfg_file))
        assert merged["seed"] == 3
        assert merged["train"]["steps"] == 7
        assert merged["train"]["batch_size"] == 16
        merged = resolve_config(str(cfg_file), {"train": {"steps": 2}})
        assert merged["train"]["steps"] == 2
        assert merged["seed"] == 3

    def test_defaults_untouched(self):
        resolve_config(None, {"train": {"steps": 1}})
        assert DEFAULTS["train"]["steps"] == 3000

    def test_bad_json_rejected(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ConfigError):
            load_config_file(str(bad))

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config_file(str(tmp_path / "absent.json"))

    def test_non_object_rejected(self, tmp_path):
        bad = tmp_path / "list.json"
        bad.write_text("[1, 2]")
        with pytest.raises(ConfigError):
            load_config_file(str(bad))

    def test_unknown_section_rejected(self, tmp_path):
        bad = tmp_path / "typo.json"
        bad.write_text(json.dumps({"trian": {"steps": 1}}))
        with pytest.raises(ConfigError):
            load_config_file(str(bad))


class TestGenData:
    def test_dataset_written_with_provenance(self, workspace):
        manifest = json.load(open(os.path.join(workspace["ds"],
                                               "manifest.json")))
        assert manifest["n"] == N_SCENES
        run = json.load(open(os.path.join(workspace["ds"],
                                          "run_config.json")))
        assert run["command"] == "gen-data"
        assert run["run_config"]["gen_data"]["n"] == N_SCENES
        assert run["run_config"]["seed"] == 4

    def test_rerun_byte_identical(self, workspace, tmp_path):
        again = str(tmp_path / "ds2")
        assert main(["gen-data", "--out", again, "--n", str(N_SCENES),
                     "--conflict-ratio", "0.5", "--seed", "4"]) == 0
        assert _tree_bytes(again) == _tree_bytes(workspace["ds"])

    def test_conflict_ratio_out_of_range(self, tmp_path, capsys):
        rc = main(["gen-data", "--out", str(tmp_path / "x"),
                   "--n", "2", "--conflict-ratio", "1.5"])
        assert rc == 2
        assert "[0, 1]" in capsys.readouterr().err

    def test_nonpositive_n(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path / "x"),
                     "--n", "0"]) == 2

    def test_unwritable_out(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        rc = main(["gen-data", "--out", str(blocker / "ds"), "--n", "2"])
        assert rc == 3


class TestTrain:
    def test_loss_csv_logged(self, workspace):
        lines = open(workspace["bb"] + ".loss.csv").read().splitlines()
        assert lines[0] == "step,loss"
        assert [ln.split(",")[0] for ln in lines[1:]] == ["0", "1"]
        float(lines[1].split(",")[1])

    def test_adapter_embeds_backbone_fingerprint(self, workspace):
        bb = training.load_checkpoint(workspace["bb"])
        ad = training.load_checkpoint(workspace["ad"])
        assert ad.backbone_fingerprint == bb.backbone_fingerprint
        assert ad.config["phase"] == "adapter"

    def test_run_config_embedded(self, workspace):
        ad = training.load_checkpoint(workspace["ad"])
        run = ad.config["run"]
        assert run["command"] == "train"
        assert run["run_config"]["train"]["steps"] == 2
        assert run["run_config"]["seed"] == 1

    def test_adapter_without_backbone(self, workspace, capsys):
        rc = main(["train", "--phase", "adapter", "--data", workspace["ds"],
                   "--steps", "1", "--out", "/tmp/nope.ckpt"])
        assert rc == 2
        assert "--backbone" in capsys.readouterr().err

    def test_zero_steps_smoke(self, workspace, tmp_path):
        out = str(tmp_path / "smoke.ckpt")
        assert main(["train", "--phase", "backbone",
                     "--data", workspace["ds"], "--steps", "0",
                     "--seed", "8", "--out", out]) == 0
        assert training.load_checkpoint(out).step_count == 0

    def test_rerun_identical_checkpoint_and_log(self, workspace, tmp_path):
        out = str(tmp_path / "re.ckpt")
        assert main(["train", "--phase", "backbone",
                     "--data", workspace["ds"], "--steps", "2",
                     "--seed", "1", "--out", out]) == 0
        assert open(out, "rb").read() == open(workspace["bb"], "rb").read()
        assert (open(out + ".loss.csv").read()
                == open(workspace["bb"] + ".loss.csv").read())

    def test_config_file_supplies_steps(self, workspace, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"train": {"steps": 3}}))
        out = str(tmp_path / "cfg.ckpt")
        assert main(["train", "--config", str(cfg), "--phase", "backbone",
                     "--data", workspace["ds"], "--seed", "1",
                     "--out", out]) == 0
        assert training.load_checkpoint(out).step_count == 3
        out2 = str(tmp_path / "flag.ckpt")
        assert main(["train", "--config", str(cfg), "--phase", "backbone",
                     "--data", workspace["ds"], "--steps", "1",
                     "--seed", "1", "--out", out2]) == 0
        assert training.load_checkpoint(out2).step_count == 1

    def test_missing_dataset(self, tmp_path):
        rc = main(["train", "--phase", "backbone",
                   "--data", str(tmp_path / "void"), "--steps", "1",
                   "--out", str(tmp_path / "x.ckpt")])
        assert rc == 3

    def test_bad_steps_from_config_file(self, workspace, tmp_path):
        cfg = tmp_path / "neg.json"
        cfg.write_text(json.dumps({"train": {"steps": -5}}))
        rc = main(["train", "--config", str(cfg), "--phase", "backbone",
                   "--data", workspace["ds"],
                   "--out", str(tmp_path / "x.ckpt")])
        assert rc == 2


class TestGenerate:
    def _scene_path(self, workspace, index=3):
        return os.path.join(workspace["ds"], "scene_%05d.caft" % index)

    def test_artifacts_and_defaults(self, workspace, tmp_path):
        out = str(tmp_path / "lat.caft")
        assert main(["generate", "--ckpt", workspace["ad"],
                     "--scene-file", self._scene_path(workspace),
                     "--text-class", "2", "--seed", "9",
                     "--out", out]) == 0
        tensors, meta = read_tensors(out)
        assert tensors["latent"].shape == (216, 8)
        assert tensors["latent"].dtype == np.float32
        assert meta["guide"] == {"gamma": 7.0, "alpha_asym": 0.5}
        assert meta["steps"] == 50
        assert meta["text_class"] == 2
        assert meta["temporal_offset_s"] is not None
        sidecar = json.load(open(out + ".json"))
        meta.pop("_tensor_sha256", None)
        assert sidecar == meta
        assert sidecar["run_config"]["generate"]["gamma"] == 7.0

    def test_same_seed_bit_identical(self, workspace, tmp_path):
        args = ["generate", "--ckpt", workspace["ad"],
                "--scene-file", self._scene_path(workspace),
                "--text-class", "5", "--steps", "4", "--seed", "11"]
        a, b = str(tmp_path / "a.caft"), str(tmp_path / "b.caft")
        assert main(args + ["--out", a]) == 0
        assert main(args + ["--out", b]) == 0
        assert open(a, "rb").read() == open(b, "rb").read()

    def test_text_class_defaults_to_audio_class(self, workspace, tmp_path):
        scene = self._scene_path(workspace, 1)
        out = str(tmp_path / "d.caft")
        assert main(["generate", "--ckpt", workspace["ad"],
                     "--scene-file", scene, "--steps", "2",
                     "--out", out]) == 0
        _, scene_meta = read_tensors(scene)
        _, out_meta = read_tensors(out)
        assert out_meta["text_class"] == scene_meta["audio_class"]

    def test_class_out_of_range(self, workspace, tmp_path, capsys):
        rc = main(["generate", "--ckpt", workspace["ad"],
                   "--scene-file", self._scene_path(workspace),
                   "--text-class", "99", "--steps", "2",
                   "--out", str(tmp_path / "x.caft")])
        assert rc == 2
        assert "text-class" in capsys.readouterr().err

    def test_backbone_checkpoint_rejected(self, workspace, tmp_path):
        rc = main(["generate", "--ckpt", workspace["bb"],
                   "--scene-file", self._scene_path(workspace),
                   "--steps", "2", "--out", str(tmp_path / "x.caft")])
        assert rc == 2

    def test_missing_scene_file(self, workspace, tmp_path):
        rc = main(["generate", "--ckpt", workspace["ad"],
                   "--scene-file", str(tmp_path / "void.caft"),
                   "--steps", "2", "--out", str(tmp_path / "x.caft")])
        assert rc == 3

    def test_alpha_one_equals_unscaled_path(self, workspace, tmp_path):
        """--alpha 1 reproduces sampling with the attenuation machinery
        absent altogether."""
        scene = self._scene_path(workspace, 2)
        out = str(tmp_path / "one.caft")
        assert main(["generate", "--ckpt", workspace["ad"],
                     "--scene-file", scene, "--text-class", "7",
                     "--gamma", "3.0", "--alpha", "1.0", "--steps", "4",
                     "--seed", "6", "--out", out]) == 0
        ckpt = training.load_checkpoint(workspace["ad"])
        system = training.restore_system(ckpt)
        sched = training.schedule_from_config(ckpt.config)
        record = synth.load_scene_file(scene)
        e_v = system.features_for(record.avclip, record.clip)

        def pair(z, t, path):
            cond = 7 if path == CONDITIONAL else None
            ad_out = adapter_forward(system.adapter, z, t, cond, e_v,
                                     path=path)
            inj = InjectionBundle(ad_out.input_injection,
                                  ad_out.block_injections)
            return backbone_forward(system.backbone, z, t, cond, inj).data

        want = diffusion.sample(pair, sched, GuidanceParams(3.0, 1.0),
                                4, record.latent.shape, 6)
        got, _ = read_tensors(out)
        assert np.array_equal(got["latent"], want)


class TestEval:
    def test_disentangle_report(self, workspace, tmp_path):
        out = str(tmp_path / "rep")
        assert main(["eval", "--ckpt", workspace["ad"],
                     "--data", workspace["ds"], "--mode", "disentangle",
                     "--steps", "3", "--batch-size", "7", "--seed", "2",
                     "--out", out]) == 0
        lines = open(os.path.join(out, "report.csv")).read().splitlines()
        assert lines[0] == ",".join(evaluate.REPORT_CSV_HEADER)
        assert len(lines) == 1 + N_SCENES
        report = json.load(open(os.path.join(out, "report.json")))
        assert report["command"] == "eval"
        assert report["mode"] == "disentangle"
        assert report["n"] == N_SCENES
        assert 0.0 <= report["accuracy"] <= 1.0
        assert report["run_config"]["eval"]["steps"] == 3

    def test_rerun_identical_report(self, workspace, tmp_path):
        args = ["eval", "--ckpt", workspace["ad"], "--data", workspace["ds"],
                "--mode", "disentangle", "--steps", "3", "--batch-size", "7",
                "--seed", "2"]
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        assert main(args + ["--out", a]) == 0
        assert main(args + ["--out", b]) == 0
        for name in ("report.csv", "report.json"):
            assert (open(os.path.join(a, name), "rb").read()
                    == open(os.path.join(b, name), "rb").read())

    def test_aligned_mode(self, workspace, tmp_path):
        out = str(tmp_path / "rep")
        assert main(["eval", "--ckpt", workspace["ad"],
                     "--data", workspace["ds"], "--mode", "aligned",
                     "--steps", "2", "--batch-size", "9", "--out", out]) == 0
        report = json.load(open(os.path.join(out, "report.json")))
        assert report["mode"] == "aligned"
        assert report["frechet_distance"] >= 0.0

    def test_alpha_sweep_artifacts(self, workspace, tmp_path):
        out = str(tmp_path / "sweep")
        assert main(["eval", "--ckpt", workspace["ad"],
                     "--data", workspace["ds"], "--mode", "alpha-sweep",
                     "--alphas", "0,1", "--steps", "2", "--batch-size", "9",
                     "--out", out]) == 0
        lines = open(os.path.join(out, "sweep.csv")).read().splitlines()
        assert lines[0] == ",".join(evaluate.SWEEP_CSV_HEADER)
        assert len(lines) == 3
        assert [float(ln.split(",")[0]) for ln in lines[1:]] == [0.0, 1.0]
        with open(os.path.join(out, "sweep.png"), "rb") as fh:
            assert fh.read(8) == b"\x89PNG\r\n\x1a\n"
        summary = json.load(open(os.path.join(out, "sweep.json")))
        assert len(summary["rows"]) == 2
        assert summary["header"] == list(evaluate.SWEEP_CSV_HEADER)

    def test_unknown_mode_flag(self, workspace):
        with pytest.raises(SystemExit) as err:
            main(["eval", "--ckpt", workspace["ad"],
                  "--data", workspace["ds"], "--mode", "bogus",
                  "--out", "/tmp/x"])
        assert err.value.code == 2

    def test_unknown_mode_from_config_file(self, workspace, tmp_path):
        cfg = tmp_path / "m.json"
        cfg.write_text(json.dumps({"eval": {"mode": "bogus"}}))
        rc = main(["eval", "--config", str(cfg), "--ckpt", workspace["ad"],
                   "--data", workspace["ds"], "--out", str(tmp_path / "x")])
        assert rc == 2

    def test_bad_alphas_string(self, workspace, tmp_path):
        rc = main(["eval", "--ckpt", workspace["ad"],
                   "--data", workspace["ds"], "--mode", "alpha-sweep",
                   "--alphas", "0,abc", "--out", str(tmp_path / "x")])
        assert rc == 2

    def test_corrupt_checkpoint(self, workspace, tmp_path):
        fake = tmp_path / "fake.ckpt"
        fake.write_text("not a checkpoint")
        rc = main(["eval", "--ckpt", str(fake), "--data", workspace["ds"],
                   "--mode", "disentangle", "--out", str(tmp_path / "x")])
        assert rc == 3


class TestEntryPoint:
    def test_help_exits_zero(self):
        with pytest.raises(SystemExit) as err:
            main(["--help"])
        assert err.value.code == 0

    def test_missing_subcommand(self):
        with pytest.raises(SystemExit) as err:
            main([])
        assert err.value.code == 2

    def test_console_script_installed(self):
        exe = shutil.which("foley-adapter")
        if exe is None:
            pytest.skip("console script not on PATH")
        proc = subprocess.run([exe, "--help"], capture_output=True)
        assert proc.returncode == 0
        assert b"gen-data" in proc.stdout

    def test_module_invocation(self):
        proc = subprocess.run(
            [sys.executable, "-m", "foley_adapter.cli", "--help"],
            capture_output=True)
        assert proc.returncode == 0
