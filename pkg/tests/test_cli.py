"""Command-line interface: subcommands, exit codes and the seed override."""

import numpy as np
import pytest

import flowmat.evalharness as eh
from flowmat.cli import (EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE, EXIT_OK,
                         main)
from flowmat.dataio import read_records
from flowmat.model import FlowMatModel


SMOKE = """
n_samples = 10
n_sub = 8
n_subband = 4
n_tx = 2
n_rx = 1
d_model = 8
n_heads = 2
encoder_depth = 1
decoder_depth = 1
d_latent = 4
keep_count = 4
steps = 4
batch_size = 4
finetune_steps = 0
budgets = 64,128
eval_snrs_db = 10
"""


@pytest.fixture
def smoke_cfg(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(SMOKE)
    return path


class TestGenData:
    def test_writes_readable_container(self, smoke_cfg, tmp_path):
        out = tmp_path / "eigen.fmc"
        code = main(["gen-data", "--config", str(smoke_cfg),
                     "--out", str(out), "--kind", "eigen"])
        assert code == EXIT_OK
        _, samples = read_records(out)
        assert len(samples) == 10

    def test_fmat_seed_changes_dataset(self, smoke_cfg, tmp_path,
                                       monkeypatch):
        outs = []
        for seed in ("5", "5", "6"):
            out = tmp_path / f"d{len(outs)}.fmc"
            monkeypatch.setenv("FMAT_SEED", seed)
            assert main(["gen-data", "--config", str(smoke_cfg),
                         "--out", str(out)]) == EXIT_OK
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]
        assert outs[0] != outs[2]

    def test_bad_fmat_seed_is_config_error(self, smoke_cfg, tmp_path,
                                           monkeypatch):
        monkeypatch.setenv("FMAT_SEED", "lots")
        code = main(["gen-data", "--config", str(smoke_cfg),
                     "--out", str(tmp_path / "x.fmc")])
        assert code == EXIT_CONFIG


class TestExitCodes:
    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("warp_factor=9\n")
        assert main(["gen-data", "--config", str(cfg),
                     "--out", str(tmp_path / "x.fmc")]) == EXIT_CONFIG

    def test_missing_config_file(self, tmp_path):
        assert main(["gen-data", "--config", str(tmp_path / "nope.cfg"),
                     "--out", str(tmp_path / "x.fmc")]) == EXIT_DATA

    def test_missing_checkpoint(self, smoke_cfg, tmp_path):
        assert main(["eval", "--config", str(smoke_cfg),
                     "--checkpoint", str(tmp_path / "nope.fmw")]) == EXIT_DATA

    def test_report_without_results(self, tmp_path):
        assert main(["report", "--out-dir", str(tmp_path)]) == EXIT_DATA

    def test_divergence_aborts_with_4(self, tmp_path):
        cfg = tmp_path / "div.cfg"
        cfg.write_text(SMOKE + "task = estimate\nsteps = 400\nlr = 1e5\n")
        assert main(["train", "--config", str(cfg),
                     "--out-dir", str(tmp_path / "run")]) == EXIT_DIVERGENCE


class TestTrainEval:
    def test_train_then_report(self, smoke_cfg, tmp_path, capsys):
        out_dir = tmp_path / "run"
        assert main(["train", "--config", str(smoke_cfg),
                     "--out-dir", str(out_dir)]) == EXIT_OK
        assert main(["report", "--out-dir", str(out_dir)]) == EXIT_OK
        printed = capsys.readouterr().out
        assert "task,method,bit_budget" in printed

    def test_eval_feedback_checkpoint(self, smoke_cfg, tmp_path, capsys):
        cfg = eh.parse_config(smoke_cfg)
        model = FlowMatModel(eh.feedback_model_config(cfg))
        ckpt = tmp_path / "model.fmw"
        model.save(ckpt)
        assert main(["eval", "--config", str(smoke_cfg),
                     "--checkpoint", str(ckpt)]) == EXIT_OK
        assert "rho=" in capsys.readouterr().out

    def test_eval_budget_requires_calibration(self, smoke_cfg, tmp_path):
        cfg = eh.parse_config(smoke_cfg)
        model = FlowMatModel(eh.feedback_model_config(cfg))
        ckpt = tmp_path / "model.fmw"
        model.save(ckpt)
        assert main(["eval", "--config", str(smoke_cfg),
                     "--checkpoint", str(ckpt), "--budget", "64"]) == EXIT_DATA

    def test_analyze_corr(self, smoke_cfg, tmp_path):
        out = tmp_path / "corr.csv"
        assert main(["analyze-corr", "--config", str(smoke_cfg),
                     "--out", str(out)]) == EXIT_OK
        rows = out.read_text().splitlines()
        assert len(rows) == 8
        first = np.array([float(v) for v in rows[0].split(",")])
        assert abs(first[0] - 1.0) < 1e-12
