"""CLI commands: determinism, artifacts, exit codes, verify plumbing."""

import csv
import json
import os

import numpy as np
import pytest

from hflow import cli, data, model, verify
from hflow.errors import DegenerateReflector
from hflow.linalg import householder_apply


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture()
def synth(tmp_path):
    out = tmp_path / "ds"
    assert run("gen-synth", "--out", out, "--seed", 5, "--classes", 4, "--dim", 6,
               "--samples-per-class", 12, "--covariance", "full") == 0
    return out / "synth.hfemb"


class TestGenSynth:
    def test_output_loadable(self, synth):
        ds = data.load_embeddings(synth)
        assert ds.dim == 6 and len(ds.class_names) == 4
        assert len(ds.records) == 48

    def test_byte_identical_given_seed(self, tmp_path):
        for sub in ("a", "b"):
            assert run("gen-synth", "--out", tmp_path / sub, "--seed", 7,
                       "--classes", 3, "--dim", 4, "--samples-per-class", 5) == 0
        a = (tmp_path / "a" / "synth.hfemb").read_bytes()
        b = (tmp_path / "b" / "synth.hfemb").read_bytes()
        assert a == b

    def test_manifest_written(self, synth):
        manifest = json.loads((synth.parent / "synth.manifest.json").read_text())
        assert manifest["command"] == "gen-synth"
        assert manifest["seed"] == 5
        assert manifest["config"]["covariance_mode"] == "full"


class TestTrainAdapter:
    def test_trains_and_writes_artifacts(self, tmp_path, synth):
        out = tmp_path / "run"
        assert run("train-adapter", "--dataset", synth, "--out", out, "--seed", 1,
                   "--flow-length", 2, "--epochs", 12, "--n-way", 4, "--k-shot", 3,
                   "--n-query", 4, "--latent-dim", 6, "--hidden-dim", 8) == 0
        m, header = model.load_adapter(out / "adapter.hflow")
        assert int(header["flow_length"]) == 2 and m.class_count == 4
        log = (out / "train_log.csv").read_text().splitlines()
        assert log[0] == "epoch,step,ce,kl,beta,total,lr"
        assert len(log) == 1 + 12 * 3  # 12 records / batch 4 -> 3 steps per epoch

    def test_flow_length_zero_baseline(self, tmp_path, synth):
        out = tmp_path / "run0"
        assert run("train-adapter", "--dataset", synth, "--out", out, "--seed", 1,
                   "--flow-length", 0, "--epochs", 5, "--n-way", 4, "--k-shot", 2,
                   "--n-query", 2, "--latent-dim", 6, "--hidden-dim", 8) == 0
        m, _ = model.load_adapter(out / "adapter.hflow")
        assert m.flow.length_T == 0

    def test_one_shot_training_progress(self, tmp_path):
        out = tmp_path / "prog"
        assert run("gen-synth", "--out", out, "--seed", 11, "--classes", 5,
                   "--dim", 8, "--samples-per-class", 30) == 0
        assert run("train-adapter", "--dataset", out / "synth.hfemb", "--out", out,
                   "--seed", 11, "--flow-length", 3, "--epochs", 50, "--n-way", 5,
                   "--k-shot", 1, "--n-query", 5, "--latent-dim", 16,
                   "--hidden-dim", 12) == 0
        with open(out / "train_log.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        first_epoch = [float(r["ce"]) for r in rows if r["epoch"] == "0"]
        last_epoch = [float(r["ce"]) for r in rows if r["epoch"] == "49"]
        assert np.mean(last_epoch) < np.mean(first_epoch)
        assert float(rows[-1]["ce"]) < float(rows[0]["ce"])

    def test_invalid_k_shot_usage_error(self, tmp_path, synth):
        assert run("train-adapter", "--dataset", synth, "--out", tmp_path / "x",
                   "--k-shot", 0) == 1

    def test_missing_dataset_usage_error(self, tmp_path):
        assert run("train-adapter", "--out", tmp_path / "x") == 1


class TestEval:
    def make_checkpoint(self, tmp_path, synth):
        out = tmp_path / "ck"
        assert run("train-adapter", "--dataset", synth, "--out", out, "--seed", 2,
                   "--flow-length", 1, "--epochs", 8, "--n-way", 4, "--k-shot", 3,
                   "--n-query", 4, "--latent-dim", 6, "--hidden-dim", 8) == 0
        return out / "adapter.hflow"

    def test_deterministic_report_bytes(self, tmp_path, synth):
        ckpt = self.make_checkpoint(tmp_path, synth)
        outputs = []
        for sub in ("e1", "e2"):
            out = tmp_path / sub
            assert run("eval", "--dataset", synth, "--checkpoint", ckpt, "--out", out,
                       "--seed", 3, "--episodes", 3, "--n-way", 4, "--k-shot", 3,
                       "--n-query", 4, "--finetune-epochs", 6) == 0
            outputs.append((out / "eval.csv").read_bytes())
        assert outputs[0] == outputs[1]

    def test_top5_is_one_for_small_n_way(self, tmp_path, synth):
        ckpt = self.make_checkpoint(tmp_path, synth)
        out = tmp_path / "e3"
        assert run("eval", "--dataset", synth, "--checkpoint", ckpt, "--out", out,
                   "--seed", 3, "--episodes", 2, "--n-way", 4, "--k-shot", 3,
                   "--n-query", 4, "--finetune-epochs", 4) == 0
        rows = (out / "eval.csv").read_text().splitlines()[1:]
        for row in rows[:2]:
            assert row.split(",")[2] == "1.000000"

    def test_dim_mismatch_exits_one(self, tmp_path, synth):
        ckpt = self.make_checkpoint(tmp_path, synth)
        assert run("eval", "--dataset", synth, "--checkpoint", ckpt,
                   "--out", tmp_path / "e4", "--seed", 3, "--episodes", 1,
                   "--n-way", 3, "--k-shot", 3, "--n-query", 4) == 1

    def test_separable_two_way_is_perfect(self, tmp_path):
        # widely separated clusters, tiny noise: one episode must score 1.0
        out = tmp_path / "sep"
        assert run("gen-synth", "--out", out, "--seed", 9, "--classes", 2, "--dim", 4,
                   "--samples-per-class", 10, "--covariance", "isotropic",
                   "--noise-scale", 0.05, "--mean-scale", 10.0) == 0
        dsp = out / "synth.hfemb"
        assert run("train-adapter", "--dataset", dsp, "--out", out, "--seed", 9,
                   "--flow-length", 1, "--epochs", 30, "--n-way", 2, "--k-shot", 3,
                   "--n-query", 3, "--latent-dim", 4, "--hidden-dim", 6) == 0
        assert run("eval", "--dataset", dsp, "--checkpoint", out / "adapter.hflow",
                   "--out", out, "--seed", 9, "--episodes", 1, "--n-way", 2,
                   "--k-shot", 3, "--n-query", 3, "--finetune-epochs", 30,
                   "--latent-dim", 4, "--hidden-dim", 6) == 0
        rows = (out / "eval.csv").read_text().splitlines()
        assert rows[1].split(",")[1] == "1.000000"


class TestBasePipeline:
    def test_train_base_then_extract(self, tmp_path):
        out = tmp_path / "base"
        assert run("gen-synth", "--out", out, "--seed", 4, "--classes", 3, "--dim", 5,
                   "--samples-per-class", 30, "--covariance", "isotropic",
                   "--mean-scale", 4.0, "--split-tag", "seen") == 0
        dsp = out / "synth.hfemb"
        assert run("train-base", "--dataset", dsp, "--out", out, "--seed", 4,
                   "--epochs", 15, "--batch", 16, "--base-hidden", 16,
                   "--embed-dim", 8) == 0
        assert run("extract", "--dataset", dsp, "--base", out / "base.hflow",
                   "--out", out, "--seed", 4, "--name", "emb") == 0
        emb = data.load_embeddings(out / "emb.hfemb")
        assert emb.dim == 8 and len(emb.records) == 90
        # embeddings are post-ReLU activations
        xs, _ = emb.matrix()
        assert np.all(xs >= 0.0)


class TestAblate:
    def test_tiny_grid_writes_rows(self, tmp_path, synth):
        out = tmp_path / "grid"
        assert run("ablate-length", "--dataset", synth, "--out", out, "--seed", 6,
                   "--episodes", 2, "--n-way", 4, "--k-shot", 2, "--n-query", 2,
                   "--epochs", 4, "--t-list", "0,1", "--k-list", "1,2",
                   "--latent-dim", 6, "--hidden-dim", 8) == 0
        rows = (out / "ablation.csv").read_text().splitlines()
        assert rows[0].startswith("flow_length,k_shot,status")
        assert len(rows) == 5
        assert all(r.split(",")[2] == "ok" for r in rows[1:])

    def test_single_cell_equals_train_plus_eval(self, tmp_path, synth):
        # composition law: one grid cell with T=0 reproduces an explicit
        # cmd_train_adapter + cmd_eval pair run with the same seed/flags
        shared = ["--seed", "8", "--n-way", "4", "--n-query", "2", "--epochs", "6",
                  "--latent-dim", "6", "--hidden-dim", "8"]
        grid_out = tmp_path / "cell"
        assert run("ablate-length", "--dataset", synth, "--out", grid_out,
                   "--episodes", "3", "--t-list", "0", "--k-list", "2",
                   "--k-shot", "2", *shared) == 0
        with open(grid_out / "ablation.csv", newline="") as fh:
            cell = list(csv.DictReader(fh))[0]

        pair_out = tmp_path / "pair"
        assert run("train-adapter", "--dataset", synth, "--out", pair_out,
                   "--flow-length", "0", "--k-shot", "2", *shared) == 0
        assert run("eval", "--dataset", synth, "--checkpoint",
                   pair_out / "adapter.hflow", "--out", pair_out, "--episodes", "3",
                   "--k-shot", "2", "--finetune-epochs", "6", *shared) == 0
        rows = (pair_out / "eval.csv").read_text().splitlines()
        mean_row = [r for r in rows if r.startswith("mean,")][0]
        assert float(cell["top1_mean"]) == float(mean_row.split(",")[1])
        assert float(cell["top5_mean"]) == float(mean_row.split(",")[2])

    def test_cell_failure_recorded_grid_continues(self, tmp_path, synth):
        out = tmp_path / "grid2"
        # k=11 is unsatisfiable with 12 records/class and 2 queries
        assert run("ablate-length", "--dataset", synth, "--out", out, "--seed", 6,
                   "--episodes", 2, "--n-way", 4, "--k-shot", 2, "--n-query", 2,
                   "--epochs", 4, "--t-list", "0", "--k-list", "11,2",
                   "--latent-dim", 6, "--hidden-dim", 8) == 2
        with open(out / "ablation.csv", newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        assert len(rows) == 2
        assert rows[0][2].startswith("error")
        assert rows[1][2] == "ok"


class TestVerifyCommand:
    def test_single_suite_passes(self, capsys):
        assert run("verify", "--suite", "theorem2") == 0
        out = capsys.readouterr().out
        assert "[PASS] theorem2" in out and "involution" not in out

    def test_unknown_suite_rejected(self):
        assert run("verify", "--suite", "nonsense") == 2

    def test_mutation_canary_sign_bug_caught(self):
        # a sign bug in the reflection must trip the involution and
        # determinant suites (H built by applying the reflection)
        def buggy_apply(v, z):
            v = np.asarray(v, dtype=np.float64)
            z = np.asarray(z, dtype=np.float64)
            return z + (2.0 * (v @ z) / (v @ v)) * v

        good = verify.suite_involution(cases=50)
        assert good.passed
        bad = verify.suite_involution(apply_fn=buggy_apply, cases=50)
        assert not bad.passed
        bad_det = verify.suite_determinant(apply_fn=buggy_apply, cases=50)
        assert not bad_det.passed
        bad_iso = verify.suite_isometry(apply_fn=buggy_apply, cases=50)
        assert not bad_iso.passed

    def test_degenerate_reflector_propagates(self):
        with pytest.raises(DegenerateReflector):
            householder_apply(np.zeros(3), np.ones(3))


class TestThreads:
    def test_worker_count_env(self, monkeypatch):
        monkeypatch.delenv("HFLOW_THREADS", raising=False)
        assert cli.worker_count() == 1
        monkeypatch.setenv("HFLOW_THREADS", "4")
        assert cli.worker_count() == 4

    def test_threaded_eval_matches_sequential(self, tmp_path, synth):
        ds = data.load_embeddings(synth)
        espec = data.EpisodeSpec(n_way=4, k_shot=2, n_query=2, episode_count=4, seed=0)
        cfg = model.TrainConfig(flow_length_T=1, latent_dim=6, hidden_dim=8,
                                max_epochs=4, seed=0)
        seq = cli.run_episodes(None, ds, espec, cfg, threads=1)
        par = cli.run_episodes(None, ds, espec, cfg, threads=3)
        assert seq.top1 == par.top1 and seq.top5 == par.top5


class TestEvalReportInvariants:
    def test_bounds_and_top5_dominates(self, synth):
        ds = data.load_embeddings(synth)
        espec = data.EpisodeSpec(n_way=4, k_shot=2, n_query=3, episode_count=5, seed=1)
        cfg = model.TrainConfig(flow_length_T=1, latent_dim=6, hidden_dim=8,
                                max_epochs=3, seed=1)
        rep = cli.run_episodes(None, ds, espec, cfg)
        assert rep.episode_count == 5
        for t1, t5 in zip(rep.top1, rep.top5):
            assert 0.0 <= t1 <= t5 <= 1.0
        for mean, half in (rep.mean_top1(), rep.mean_top5()):
            assert 0.0 <= mean <= 1.0 and half >= 0.0


class TestOutputsConfinement:
    def test_only_out_dir_is_written(self, tmp_path, synth):
        before = set(os.listdir(synth.parent))
        out = tmp_path / "confined"
        assert run("train-adapter", "--dataset", synth, "--out", out, "--seed", 1,
                   "--epochs", 3, "--n-way", 4, "--k-shot", 2, "--n-query", 2,
                   "--latent-dim", 6, "--hidden-dim", 8) == 0
        assert set(os.listdir(synth.parent)) == before
        assert (synth.parent != out) and out.is_dir()
