"""Command-line interface: subcommands, exit codes, determinism."""

import json

import pytest

from cpcompress.cli import EXIT_ARGS, EXIT_FILE, EXIT_OK, main
from cpcompress.network import load
from cpcompress.presets import toy_cnn
from cpcompress.network import save


FAST_TRAIN = [
    "--baseline-epochs", "2",
    "--epochs-per-stage", "1",
    "--rank-fraction", "0.5",
]


@pytest.fixture
def toy_model_path(tmp_path):
    path = tmp_path / "toy.cpnet"
    save(toy_cnn(seed=0), path)
    return path


class TestDecompose:
    def test_alexnet_preset_report(self, capsys):
        code = main(["decompose", "--arch", "alexnet", "--analytic-only"])
        out = capsys.readouterr().out
        assert code == EXIT_OK
        assert "compressed_weights\t8898392" in out
        assert "weight_ratio\t6.8501" in out
        assert "mult_ratio\t3.4236" in out

    def test_alexnet_instrumented(self, capsys):
        code = main(["decompose", "--arch", "alexnet"])
        out = capsys.readouterr().out
        assert code == EXIT_OK
        assert "instrumented_mult_ratio\t3.4236" in out

    def test_missing_model_file(self, capsys):
        code = main(["decompose", "--model-in", "/nope/missing.cpnet",
                     "--rank-budget", "conv=8,fc=8"])
        err = capsys.readouterr().err
        assert code == EXIT_FILE
        assert "/nope/missing.cpnet" in err

    def test_empty_ranks_leaves_ratios_at_one(self, toy_model_path, tmp_path, capsys):
        ranks = tmp_path / "ranks.tsv"
        ranks.write_text("layer\trank\n")
        code = main([
            "decompose", "--model-in", str(toy_model_path),
            "--ranks-file", str(ranks), "--analytic-only",
        ])
        out = capsys.readouterr().out
        assert code == EXIT_OK
        for line in out.splitlines():
            if line.startswith(("conv", "fc", "TOTAL")):
                fields = line.split("\t")
                assert fields[4] == "1.0000"
                assert fields[7] == "1.0000"
        assert "weight_ratio\t1.0000" in out

    def test_decompose_writes_loadable_model(self, toy_model_path, tmp_path, capsys):
        ranks = tmp_path / "ranks.tsv"
        ranks.write_text("layer\trank\nconv2\t6\nfc1\t8\n")
        out_path = tmp_path / "compressed.cpnet"
        code = main([
            "decompose", "--model-in", str(toy_model_path),
            "--ranks-file", str(ranks), "--model-out", str(out_path),
            "--analytic-only",
        ])
        capsys.readouterr()
        assert code == EXIT_OK
        net = load(out_path)
        kinds = {l.name: type(l).__name__ for l in net.layers}
        assert kinds["conv2"] == "DecomposedConv"
        assert kinds["fc1"] == "DecomposedFc"
        assert kinds["conv1"] == "Conv"

    def test_invalid_rank_exit_code(self, toy_model_path, tmp_path, capsys):
        ranks = tmp_path / "ranks.tsv"
        ranks.write_text("layer\trank\nfc2\t99\n")  # above min(10, 48)
        code = main([
            "decompose", "--model-in", str(toy_model_path),
            "--ranks-file", str(ranks), "--analytic-only",
        ])
        capsys.readouterr()
        assert code == EXIT_ARGS

    def test_unknown_layer_in_ranks_file(self, toy_model_path, tmp_path, capsys):
        ranks = tmp_path / "ranks.tsv"
        ranks.write_text("layer\trank\nmystery\t4\n")
        code = main([
            "decompose", "--model-in", str(toy_model_path),
            "--ranks-file", str(ranks), "--analytic-only",
        ])
        capsys.readouterr()
        assert code == EXIT_ARGS

    def test_rank_budget_uniform_split(self, toy_model_path, capsys):
        code = main([
            "decompose", "--model-in", str(toy_model_path),
            "--rank-budget", "conv=8,fc=9", "--analytic-only",
        ])
        out = capsys.readouterr().out
        assert code == EXIT_OK
        rows = {ln.split("\t")[0]: ln.split("\t") for ln in out.splitlines() if "\t" in ln}
        assert rows["conv1"][1] == "decomposed_conv"
        assert rows["fc1"][1] == "decomposed_fc"


class TestAllocate:
    def test_reference_fc_split(self, tmp_path, capsys):
        report = tmp_path / "report.tsv"
        report.write_text(
            "# baseline_accuracy\t0.7995\n"
            "group\tlayer\tprobe_accuracy\taccuracy_loss\n"
            "fc\tfc6\t0.5136\t28.59\n"
            "fc\tfc7\t0.5845\t21.50\n"
            "fc\tfc8\t0.5964\t20.31\n"
        )
        code = main(["allocate", "--report", str(report), "--budget", "fc=900"])
        out = capsys.readouterr().out
        assert code == EXIT_OK
        assert "fc6\t365" in out
        assert "fc7\t275" in out
        assert "fc8\t260" in out

    def test_bad_budget_exit(self, tmp_path, capsys):
        report = tmp_path / "report.tsv"
        report.write_text(
            "group\tlayer\tprobe_accuracy\taccuracy_loss\nfc\tfc6\t0.5\t1.0\n"
        )
        code = main(["allocate", "--report", str(report), "--budget", "fc"])
        capsys.readouterr()
        assert code == EXIT_ARGS

    def test_missing_report_exit(self, capsys):
        code = main(["allocate", "--report", "/nope.tsv", "--budget", "fc=10"])
        capsys.readouterr()
        assert code == EXIT_FILE


class TestProbe:
    def test_probe_emits_parseable_report(self, tmp_path, capsys):
        code = main([
            "probe", "--seed", "0", "--baseline-epochs", "2",
            "--probe-epochs", "0", "--probe-rank", "4",
        ])
        out = capsys.readouterr().out
        assert code == EXIT_OK
        from cpcompress.allocator import SensitivityReport

        report = SensitivityReport.from_table(out)
        assert [e.name for e in report.entries] == ["conv1", "conv2", "fc1", "fc2"]
        assert {e.group for e in report.entries} == {"conv", "fc"}

        # The emitted table feeds straight into allocate.
        report_path = tmp_path / "probe.tsv"
        report_path.write_text(out)
        code = main([
            "allocate", "--report", str(report_path), "--budget", "conv=40,fc=20",
        ])
        ranks_out = capsys.readouterr().out
        assert code == EXIT_OK
        ranks = {
            line.split("\t")[0]: int(line.split("\t")[1])
            for line in ranks_out.splitlines()[1:]
        }
        assert sum(ranks[n] for n in ("conv1", "conv2")) == 40
        assert sum(ranks[n] for n in ("fc1", "fc2")) == 20


class TestTrain:
    def test_iterative_deterministic_output(self, capsys):
        args = ["train", "--schedule", "iterative", "--seed", "7"] + FAST_TRAIN
        code1 = main(args)
        out1 = capsys.readouterr().out
        code2 = main(args)
        out2 = capsys.readouterr().out
        assert code1 == code2 == EXIT_OK
        assert out1 == out2
        assert "layer=conv1" in out1
        assert "final_accuracy" in out1

    def test_oneshot_schedule_runs(self, capsys):
        code = main(["train", "--schedule", "oneshot", "--seed", "3"] + FAST_TRAIN)
        out = capsys.readouterr().out
        assert code == EXIT_OK
        assert "layer=finetune" in out

    def test_ranks_file_override(self, tmp_path, capsys):
        ranks = tmp_path / "ranks.tsv"
        ranks.write_text(
            "layer\trank\nconv1\t4\nconv2\t8\nfc1\t8\nfc2\t4\n"
        )
        code = main([
            "train", "--schedule", "iterative", "--seed", "1",
            "--ranks-file", str(ranks),
        ] + FAST_TRAIN)
        out = capsys.readouterr().out
        assert code == EXIT_OK
        assert "rank=8" in out


class TestVerify:
    def test_verify_passes_on_healthy_build(self, capsys):
        code = main(["verify", "--verify-cases", "40", "--verify-trips", "10"])
        out = capsys.readouterr().out
        assert code == EXIT_OK
        assert "equivalence" in out and "ok" in out


class TestConfigOverlay:
    def test_config_changes_defaults(self, tmp_path, capsys):
        cfg = tmp_path / "config.json"
        cfg.write_text(json.dumps({"verify_cases": 25, "verify_trips": 5}))
        code = main(["--config", str(cfg), "verify"])
        out = capsys.readouterr().out
        assert code == EXIT_OK
        assert "25 cases" in out

    def test_flags_override_config(self, tmp_path, capsys):
        cfg = tmp_path / "config.json"
        cfg.write_text(json.dumps({"verify_cases": 25, "verify_trips": 5}))
        code = main(["--config", str(cfg), "verify", "--verify-cases", "30"])
        out = capsys.readouterr().out
        assert code == EXIT_OK
        assert "30 cases" in out

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "config.json"
        cfg.write_text(json.dumps({"mystery_knob": 1}))
        code = main(["--config", str(cfg), "verify"])
        capsys.readouterr()
        assert code == EXIT_ARGS

    def test_unknown_flag_rejected(self, capsys):
        code = main(["verify", "--mystery"])
        capsys.readouterr()
        assert code == EXIT_ARGS
