import csv

import pytest

from evlf.cli import COMMANDS, main
from evlf.config import RunConfig
from evlf.io import load_checkpoint


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def run(tmp_path, tiny_config):
    cfg_path = tmp_path / "tiny.cfg"
    cfg_path.write_text(tiny_config.to_text())
    out = tmp_path / "out"

    def invoke(*argv, out_dir=out):
        return main(["--config", str(cfg_path), "--out-dir", str(out_dir), *argv])

    invoke.out = out
    invoke.config_path = cfg_path
    return invoke


class TestUsage:
    def test_help_lists_subcommands(self, capsys):
        assert main(["--help"]) == 0
        text = capsys.readouterr().out
        assert all(name in text for name in COMMANDS)

    def test_unknown_subcommand(self):
        assert main(["frobnicate"]) == 1

    def test_no_subcommand(self):
        assert main([]) == 1

    def test_bad_set_pair(self, run):
        assert run("train-ae", "--set", "ipc") == 1
        assert run("train-ae", "--set", "ipc=0") == 1

    def test_missing_config_file(self, tmp_path):
        assert main(["--config", str(tmp_path / "nope.cfg"), "train-ae"]) == 2


class TestWorkflow:
    def test_distill_then_eval(self, run, tiny_config):
        assert run("distill") == 0
        synthetic = run.out / "synthetic"
        labels = rows(synthetic / "labels.csv")
        assert len(labels) == tiny_config.num_classes * tiny_config.ipc
        assert run("eval") == 0
        acc = rows(run.out / "accuracy.csv")
        assert len(acc) == tiny_config.num_seeds
        assert all(0.0 <= float(r["accuracy"]) <= 1.0 for r in acc)
        assert {r["variant"] for r in acc} == {"+CA+FT"}

    def test_stage_reports(self, run):
        assert run("train-ae") == 0
        assert len(rows(run.out / "ae_loss.csv")) == 2
        assert run("train-fusion") == 0
        assert {"total", "infonce", "mse", "lambda2"} <= set(rows(run.out / "fusion_loss.csv")[0])
        assert run("finetune-denoiser") == 0
        phases = {r["phase"] for r in rows(run.out / "denoiser_loss.csv")}
        assert phases == {"pretrain", "finetune"}

    def test_resolved_config_reproduces_checksums(self, run, tmp_path):
        assert run("train-ae", "--seed", "3") == 0
        resolved = (run.out / "resolved_config").read_text()
        assert RunConfig.from_text(resolved).seed == 3
        again = tmp_path / "again"
        assert main(["--config", str(run.out / "resolved_config"), "--out-dir", str(again), "train-ae"]) == 0
        a, b = load_checkpoint(run.out / "ae.evlc"), load_checkpoint(again / "ae.evlc")
        assert a.config_hash == b.config_hash
        assert all(a.tensors[k].tobytes() == b.tensors[k].tobytes() for k in a.tensors)

    def test_coverage_and_embeddings(self, run):
        assert run("distill") == 0
        assert run("coverage") == 0
        assert [r["space"] for r in rows(run.out / "coverage.csv")] == ["pixel"]
        assert run("coverage", "--set", "coverage_space=latent") == 0
        assert [r["space"] for r in rows(run.out / "coverage.csv")] == ["latent"]
        assert run("export-embeddings", "--real-per-class", "5") == 0
        emb = rows(run.out / "embedding2d.csv")
        assert {r["source"] for r in emb} == {"real", "synthetic"}

    def test_ablate(self, run, tiny_config):
        assert run("ablate", "--set", "num_seeds=1") == 0
        variants = [r["variant"] for r in rows(run.out / "accuracy.csv")]
        assert variants == ["-CA-FT", "-CA+FT", "+CA-FT", "+CA+FT", "random"]


class TestDataErrors:
    def test_eval_without_synthetic_set(self, run):
        assert run("eval") == 2

    def test_corrupt_checkpoint(self, run):
        assert run("train-ae") == 0
        path = run.out / "ae.evlc"
        data = bytearray(path.read_bytes())
        data[30] ^= 0xFF
        path.write_bytes(bytes(data))
        assert run("train-fusion") == 2

    def test_cifar_without_data_dir(self, run):
        assert run("train-ae", "--set", "dataset=cifar10", "--set", "data_dir=/nonexistent/evlf") == 2
