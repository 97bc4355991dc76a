"""End-to-end exporter tests against the installed levnet CLI.

The level counts asserted here ({P2: 78, ..., P2FRT: 20} for rn20 at its
native 8x8 input, P4: 97 for the degree-4 form) are the analyzer's
published values for these variants, so a mapping or serialization slip
shows up as a changed row, not just a load failure.
"""

import json
import sys

import numpy as np
import pytest

from levnet_exporter import (ExportError, export_checkpoint, make_fixture,
                             weight_hash_of_file)
from levnet_exporter.exporting import export_state

from exphelpers import (EXPORTER_DIR, levnet, model_tensor, read_model,
                        save_torch, torch_style_state)

RN20_ROW = {"P2": 78, "P2F": 59, "P2R": 39, "P2FR": 39, "P2FRT": 20}


@pytest.fixture(scope="module")
def exported(tmp_path_factory):
    """One torch checkpoint exported once: (state dict, ckpt path, manifest,
    model path)."""
    tmp = tmp_path_factory.mktemp("exported")
    sd = torch_style_state("rn20", seed=11)
    ckpt = tmp / "rn20.pt"
    save_torch(sd, ckpt)
    out = tmp / "rn20.json"
    manifest = export_checkpoint(str(ckpt), "rn20", str(out))
    return sd, ckpt, manifest, out


class TestCheckpointExport:
    def test_manifest_records_the_export(self, exported):
        _, ckpt, manifest, out = exported
        assert manifest.ckpt == str(ckpt)
        assert manifest.variant == "rn20"
        assert manifest.act_source == "fitted:poly2"
        assert manifest.out == str(out)
        assert manifest.weight_hash == weight_hash_of_file(out)

    def test_level_row_matches_published_table(self, exported):
        _, _, _, out = exported
        res = levnet("levels", "--model", str(out), "--json")
        assert res.returncode == 0, res.stderr
        assert json.loads(res.stdout) == RN20_ROW

    def test_degree4_export_reports_p4(self, exported, tmp_path):
        sd, _, _, _ = exported
        ckpt = tmp_path / "rn20.npz"
        np.savez(ckpt, **sd)
        export_checkpoint(str(ckpt), "rn20", str(tmp_path / "p4.json"),
                          act="poly4")
        res = levnet("levels", "--model", str(tmp_path / "p4.json"), "--json")
        assert res.returncode == 0, res.stderr
        assert json.loads(res.stdout) == {"P4": 97}

    def test_round_trip_preserves_weight_hash(self, exported, tmp_path):
        # load + re-save through the consumer must keep the blob bit-exact
        _, _, manifest, out = exported
        back = tmp_path / "roundtrip.json"
        res = levnet("compile", "--model", str(out), "--strategy", "p2",
                     "--out", str(back))
        assert res.returncode == 0, res.stderr
        assert weight_hash_of_file(back) == manifest.weight_hash
        # stronger: the writer mirrors the consumer's serialization exactly
        assert back.read_bytes() == out.read_bytes()

    def test_batchnorm_exported_raw(self, exported):
        sd, _, _, out = exported
        doc, blob = read_model(out)
        np.testing.assert_array_equal(
            model_tensor(doc, blob, "s2b1.bnd", "gamma"),
            sd["layer2.0.downsample.1.weight"])
        np.testing.assert_allclose(
            model_tensor(doc, blob, "s2b1.bnd", "std"),
            np.sqrt(sd["layer2.0.downsample.1.running_var"] + 1e-5),
            rtol=0, atol=0)

    def test_missing_conv_bias_becomes_zero(self, exported):
        _, _, _, out = exported
        doc, blob = read_model(out)
        assert np.all(model_tensor(doc, blob, "conv1", "bias") == 0.0)

    def test_npz_and_torch_agree(self, exported, tmp_path):
        sd, _, manifest, _ = exported
        ckpt = tmp_path / "same.npz"
        np.savez(ckpt, **sd)
        again = export_checkpoint(str(ckpt), "rn20", str(tmp_path / "same.json"))
        assert again.weight_hash == manifest.weight_hash

    def test_trainer_wrapper_unwrapped(self, tmp_path):
        import torch

        sd = torch_style_state("rn20", seed=2)
        ckpt = tmp_path / "wrapped.pt"
        torch.save({"epoch": 40, "best_acc": 0.91,
                    "state_dict": {k: torch.as_tensor(v) for k, v in sd.items()}},
                   ckpt)
        manifest = export_checkpoint(str(ckpt), "rn20", str(tmp_path / "w.json"))
        assert manifest.weight_hash == weight_hash_of_file(tmp_path / "w.json")

    def test_input_hw_override(self, exported, tmp_path):
        sd, _, _, _ = exported
        out = tmp_path / "hw16.json"
        export_state(sd, "rn20", str(out), ckpt_label="mem", input_hw=16)
        doc, _ = read_model(out)
        assert doc["nodes"][0]["params"] == {"channels": 3, "height": 16,
                                             "width": 16}


class TestCheckpointErrors:
    def export(self, sd, tmp_path, **kw):
        return export_state(sd, "rn20", str(tmp_path / "x.json"),
                            ckpt_label="mem", validate=False, **kw)

    def test_missing_running_var_names_the_key(self, tmp_path):
        sd = torch_style_state("rn20")
        del sd["layer1.0.bn1.running_var"]
        with pytest.raises(ExportError, match=r"layer1\.0\.bn1\.running_var"):
            self.export(sd, tmp_path)

    def test_missing_stem_names_the_key(self, tmp_path):
        sd = torch_style_state("rn20")
        del sd["conv1.weight"]
        with pytest.raises(ExportError, match=r"conv1\.weight"):
            self.export(sd, tmp_path)

    def test_unmapped_key_names_the_key(self, tmp_path):
        sd = torch_style_state("rn20")
        sd["layer4.0.conv1.weight"] = np.zeros((8, 8, 3, 3))
        with pytest.raises(ExportError,
                           match=r"layer4\.0\.conv1\.weight.*does not map"):
            self.export(sd, tmp_path)

    def test_shape_mismatch_reports_both_shapes(self, tmp_path):
        sd = torch_style_state("rn20")
        sd["layer1.1.conv2.weight"] = np.zeros((4, 4, 5, 5))
        with pytest.raises(ExportError,
                           match=r"layer1\.1\.conv2\.weight.*\(4, 4, 5, 5\).*\(4, 4, 3, 3\)"):
            self.export(sd, tmp_path)

    def test_fc_bias_required(self, tmp_path):
        sd = torch_style_state("rn20")
        del sd["fc.bias"]
        with pytest.raises(ExportError, match=r"fc\.bias"):
            self.export(sd, tmp_path)

    def test_partially_embedded_coefficients_rejected(self, tmp_path):
        sd = torch_style_state("rn20")
        sd["act1.coeffs"] = np.array([0.1, 0.5, 0.25])
        with pytest.raises(ExportError, match=r"layer1\.0\.act1\.coeffs"):
            self.export(sd, tmp_path)

    def test_unusable_variance_rejected(self, tmp_path):
        sd = torch_style_state("rn20")
        sd["bn1.running_var"] = np.full(4, -1.0)
        with pytest.raises(ExportError, match=r"bn1\.running_var"):
            self.export(sd, tmp_path)

    def test_wrong_variant_names_first_divergence(self, tmp_path):
        # rn18 has two blocks per stage where rn20 wants three; the first
        # key rn20 expects and rn18 lacks is named outright
        sd = torch_style_state("rn18")
        with pytest.raises(ExportError, match=r"layer1\.2\.conv1\.weight"):
            self.export(sd, tmp_path)


class TestActivationSources:
    def test_embedded_coefficients_land_in_the_file(self, tmp_path):
        sd = torch_style_state("rn20", coeffs=[0.125, 0.5, 0.25])
        out = tmp_path / "emb.json"
        manifest = export_state(sd, "rn20", str(out), ckpt_label="mem")
        assert manifest.act_source == "embedded"
        doc, blob = read_model(out)
        assert model_tensor(doc, blob, "s3b2.actj", "c0") == 0.125
        assert model_tensor(doc, blob, "act1", "c2") == 0.25

    def test_coefficients_from_fitted_file(self, tmp_path):
        report = tmp_path / "fit.json"
        res = levnet("fit-poly", "--degree", "2", "--out", str(report))
        assert res.returncode == 0, res.stderr
        sd = torch_style_state("rn20")
        out = tmp_path / "file.json"
        manifest = export_state(sd, "rn20", str(out), ckpt_label="mem",
                                coeffs_file=str(report))
        assert manifest.act_source == f"file:{report}"
        doc, blob = read_model(out)
        fitted = json.loads(report.read_text())["real_coeffs"]
        got = [float(model_tensor(doc, blob, "act1", f"c{k}")) for k in range(3)]
        assert got == fitted

    def test_fitted_fallback_matches_the_cli(self, exported):
        _, _, manifest, out = exported
        assert manifest.act_source == "fitted:poly2"
        doc, blob = read_model(out)
        fitted = json.loads(levnet("fit-poly", "--degree", "2").stdout)["real_coeffs"]
        got = [float(model_tensor(doc, blob, "s1b1.acta", f"c{k}"))
               for k in range(3)]
        assert got == fitted


class TestFixtures:
    def test_same_seed_same_bytes(self, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        ma = make_fixture("rn18", 7, str(a))
        mb = make_fixture("rn18", 7, str(b))
        assert a.read_bytes() == b.read_bytes()
        assert ma.weight_hash == mb.weight_hash

    def test_different_seeds_differ(self, tmp_path):
        ma = make_fixture("rn20", 1, str(tmp_path / "s1.json"))
        mb = make_fixture("rn20", 2, str(tmp_path / "s2.json"))
        assert ma.weight_hash != mb.weight_hash

    def test_sigma_positive_everywhere(self, tmp_path):
        out = tmp_path / "fx.json"
        make_fixture("rn20", 5, str(out))
        doc, blob = read_model(out)
        bn_ids = [n["id"] for n in doc["nodes"] if n["kind"] == "batchnorm"]
        assert len(bn_ids) == 21
        for nid in bn_ids:
            assert np.all(model_tensor(doc, blob, nid, "std") > 0)

    def test_fixture_runs_under_the_simulator(self, tmp_path):
        fx = tmp_path / "fx.json"
        make_fixture("rn20", 3, str(fx))
        compiled = tmp_path / "c.json"
        plan = tmp_path / "p.json"
        assert levnet("compile", "--model", str(fx), "--strategy", "p2fr",
                      "--out", str(compiled)).returncode == 0
        assert levnet("plan", "--model", str(fx), "--out", str(plan)).returncode == 0
        image = np.random.default_rng(0).uniform(-1, 1, (3, 8, 8))
        x = tmp_path / "x.bin"
        with open(x, "wb") as f:
            f.write((json.dumps({"shape": [3, 8, 8], "dtype": "<f8"}) + "\n")
                    .encode())
            f.write(np.ascontiguousarray(image, dtype="<f8").tobytes())
        res = levnet("run", "--model", str(compiled), "--plan", str(plan),
                     "--input", str(x))
        assert res.returncode == 0, res.stderr
        payload = json.loads(res.stdout)
        assert len(payload["logits"]) == 4
        assert np.all(np.isfinite(payload["logits"]))
        assert payload["rescales_used"] == payload["levels"]


class TestScripts:
    def run_script(self, name, *args, cwd=None):
        import subprocess

        return subprocess.run([sys.executable, str(EXPORTER_DIR / name), *args],
                              capture_output=True, text=True, cwd=cwd)

    def test_export_script(self, tmp_path):
        ckpt = tmp_path / "ck.npz"
        np.savez(ckpt, **torch_style_state("rn20", seed=9))
        out = tmp_path / "m.json"
        mpath = tmp_path / "m.manifest.json"
        res = self.run_script("export.py", "--ckpt", str(ckpt),
                              "--variant", "rn20", "--out", str(out),
                              "--manifest", str(mpath))
        assert res.returncode == 0, res.stderr
        manifest = json.loads(res.stdout)
        assert manifest == json.loads(mpath.read_text())
        assert manifest["weight_hash"] == weight_hash_of_file(out)

    def test_export_script_reports_errors(self, tmp_path):
        sd = torch_style_state("rn20")
        del sd["layer2.1.bn2.running_mean"]
        ckpt = tmp_path / "bad.npz"
        np.savez(ckpt, **sd)
        res = self.run_script("export.py", "--ckpt", str(ckpt),
                              "--variant", "rn20", "--out", str(tmp_path / "x.json"))
        assert res.returncode == 1
        assert "layer2.1.bn2.running_mean" in res.stderr

    def test_fixtures_script(self, tmp_path):
        res = self.run_script("fixtures.py", "--variant", "rn20", "--seed", "5",
                              cwd=str(tmp_path))
        assert res.returncode == 0, res.stderr
        manifest = json.loads(res.stdout)
        assert manifest["variant"] == "rn20"
        assert (tmp_path / "rn20.json").exists()
        assert weight_hash_of_file(tmp_path / "rn20.json") == manifest["weight_hash"]
