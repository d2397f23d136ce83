import json

import numpy as np
import pytest

from centermix.caseio import read_dataset
from centermix.cli import main
from centermix.workflows import TrainConfig


@pytest.fixture(scope="module")
def data_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_data")
    dirs = {}
    for center, n in (("A", 6), ("B", 8), ("C", 8)):
        out = root / center
        main(["gen-data", "--center", center, "--n", str(n),
              "--seed", str(ord(center)), "--out-dir", str(out)])
        dirs[center] = str(out)
    return dirs


@pytest.fixture(scope="module")
def cli_config(tmp_path_factory, data_dirs):
    cfg = TrainConfig(
        epochs_train=1, epochs_finetune=1, batch_size=2, top_k=2, n_experts=4,
        seed=5, channels=(4, 8, 8, 8), context_dim=8, prompt_tokens=2,
        grid=(32, 32, 16), fewshot_oversample=1, weight_decay=0.0,
        data_dirs=data_dirs,
    )
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    path.write_text(cfg.to_json())
    return str(path)


class TestGenData:
    def test_dataset_written(self, data_dirs):
        cases = read_dataset(data_dirs["A"])
        assert len(cases) == 6
        assert cases[0]["center"] == "A"

    def test_manifest_records_policy(self, data_dirs):
        from centermix.caseio import read_dataset_meta
        meta = read_dataset_meta(data_dirs["A"])
        assert meta["center"] == "A"
        assert meta["policy"]["ptv_margin_voxels"] == 3
        assert meta["seed"] == ord("A")


class TestTrainEvalRoundTrip:
    @pytest.fixture(scope="class")
    def trained(self, cli_config, data_dirs, tmp_path_factory):
        out = tmp_path_factory.mktemp("run")
        main(["train", "--config", cli_config, "--out-dir", str(out)])
        return out / "mome.ckpt"

    def test_checkpoint_exists(self, trained):
        assert trained.exists()

    def test_eval_writes_reports(self, trained, cli_config, data_dirs, tmp_path_factory):
        out = tmp_path_factory.mktemp("eval")
        main(["eval", "--config", cli_config, "--model", str(trained),
              "--data", data_dirs["C"], "--center", "C", "--out-dir", str(out)])
        summary = json.loads((out / "eval_summary.json").read_text())
        assert "dice" in summary and 0.0 <= summary["dice"]["mean"] <= 1.0
        assert (out / "eval.csv").exists()

    def test_route_select_outputs_table(self, trained, data_dirs, capsys):
        main(["route-select", "--model", str(trained),
              "--samples", data_dirs["C"], "--n", "2"])
        table = json.loads(capsys.readouterr().out)
        assert table["selected"] in {"A", "B", "C"}
        assert set(table["scores"]) == {"A", "B", "C"}

    def test_finetune_registers_center(self, trained, cli_config, data_dirs,
                                       tmp_path_factory):
        out = tmp_path_factory.mktemp("ft")
        main(["finetune", "--config", cli_config, "--model", str(trained),
              "--data", data_dirs["C"], "--center", "E", "--shots", "1",
              "--out-dir", str(out)])
        from centermix.segnet import SegModel
        model = SegModel.load(out / "finetune_E.ckpt")
        assert "E" in model.registered_centers()

    def test_report_renders_markdown(self, trained, cli_config, data_dirs,
                                     tmp_path_factory, capsys):
        out = tmp_path_factory.mktemp("eval2")
        main(["eval", "--config", cli_config, "--model", str(trained),
              "--data", data_dirs["B"], "--center", "B", "--out-dir", str(out)])
        capsys.readouterr()
        main(["report", str(out / "eval.csv")])
        text = capsys.readouterr().out
        assert text.startswith("| source | metric |")
        assert "dice" in text
