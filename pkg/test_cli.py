"""
CLI Test Script - exit codes and an end-to-end generate, train, predict, evaluate, plot run
"""

import json
import sys
from pathlib import Path

import numpy as np
import pytest

project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

from physnet3d import cli as cli_module  # noqa: E402
from physnet3d.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, load_config, main, parse_condition  # noqa: E402
from physnet3d.errors import ConfigError  # noqa: E402
from physnet3d.physnet import PhysNet  # noqa: E402
from physnet3d.trainer import MetricLog  # noqa: E402
from physnet3d.voxel import CameraPose, VoxelGrid, load_grid, render_depth, save_depth, save_grid  # noqa: E402

GENERATE = ["generate", "--objects", "block", "--resolution", "8", "--e-count", "4", "--nu-count", "1",
            "--force-count", "3", "--locations", "1", "--workers", "1"]


def block_grid(n=8):
    mask = np.zeros((n, n, n), dtype=bool)
    mask[2:6, 2:6, 0:4] = True
    return VoxelGrid.from_mask(mask, 0.01)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One generated dataset and one trained checkpoint shared by the end-to-end tests"""
    root = tmp_path_factory.mktemp("cli")
    assert main(GENERATE + ["--out", str(root / "data")]) == EXIT_OK
    assert main(["train", "--dataset", str(root / "data"), "--out", str(root / "run"), "--iterations", "2",
                 "--eval-interval", "1", "--batch-size", "2", "--base-channels", "2", "--device", "cpu"]) == EXIT_OK
    save_grid(block_grid(), root / "input.vxg")
    return root


def test_parse_condition():
    material, force = parse_condition("0.01, 0.3, 2.5, 0")
    assert material.youngs_modulus == pytest.approx(0.01)
    assert material.poissons_ratio == pytest.approx(0.3)
    assert force.magnitude == pytest.approx(2.5)
    assert force.location_index == 0
    with pytest.raises(ConfigError):
        parse_condition("0.01,0.3,2.5")
    with pytest.raises(ConfigError):
        parse_condition("a,0.3,2.5,0")


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.json"))
    broken = tmp_path / "broken.json"
    broken.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(str(broken))
    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"extras": {}}), encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(str(unknown))
    bad_key = tmp_path / "bad_key.json"
    bad_key.write_text(json.dumps({"sampling": {"e_cnt": 3}}), encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(str(bad_key))
    assert load_config(None).seed == 0


def test_usage_errors_exit_two(tmp_path, capsys):
    assert main([]) == EXIT_USAGE
    assert main(["experiment", "no_such_experiment", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["generate", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["generate", "--preset", "nope", "--out", str(tmp_path / "p")]) == EXIT_USAGE
    assert "❌" in capsys.readouterr().err


def test_bad_magic_input_exits_two(tmp_path, capsys):
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"JUNK" + bytes(32))
    code = main(["predict", "--model", str(tmp_path / "model.pnw"), "--input", str(junk),
                 "--out", str(tmp_path / "out.vxg")])
    assert code == EXIT_USAGE
    assert "bad magic" in capsys.readouterr().err


def test_predict_needs_exactly_one_model_source(tmp_path):
    save_grid(block_grid(), tmp_path / "input.vxg")
    assert main(["predict", "--input", str(tmp_path / "input.vxg"), "--out", str(tmp_path / "o.vxg")]) == EXIT_USAGE


def test_missing_input_file_is_runtime_failure(tmp_path):
    code = main(["predict", "--model", "m.pnw", "--input", str(tmp_path / "absent.vxg"),
                 "--out", str(tmp_path / "o.vxg")])
    assert code == EXIT_RUNTIME


def test_generate_refuses_to_overwrite(workspace):
    data = str(workspace / "data")
    assert main(GENERATE + ["--out", data]) == EXIT_USAGE
    resolved = json.loads((workspace / "data" / "resolved_config.json").read_text(encoding="utf-8"))
    assert resolved["resolved"]["resolution"] == 8
    assert resolved["resolved"]["plan"]["e_count"] == 4


def test_train_writes_checkpoint_and_metrics(workspace):
    run = workspace / "run"
    assert (run / "best.pnw").exists()
    assert (run / "metrics.csv").read_text(encoding="utf-8").startswith("iteration,")
    assert (run / "resolved_config.json").exists()


def test_train_encoding_flag(workspace, monkeypatch):
    """--encoding is rejected for the reconstructor and reaches the direct-partial trainer"""
    code = main(["train", "--dataset", str(workspace / "data"), "--out", str(workspace / "recon"),
                 "--variant", "reconstructor", "--encoding", "real"])
    assert code == EXIT_USAGE

    seen = {}

    def fake_direct_partial(manifest, net_cfg, train_cfg, out_dir=None, encoding_mode=None):
        seen["encoding"] = encoding_mode
        seen["condition_length"] = net_cfg.condition_length
        return PhysNet(net_cfg), MetricLog([])

    monkeypatch.setattr(cli_module, "train_direct_partial", fake_direct_partial)
    code = main(["train", "--dataset", str(workspace / "data"), "--out", str(workspace / "direct"),
                 "--variant", "direct-partial", "--encoding", "one_hot", "--base-channels", "2",
                 "--iterations", "0", "--device", "cpu"])
    assert code == EXIT_OK
    assert seen == {"encoding": "one_hot", "condition_length": 3 + 1}


def test_predict_from_grid_and_depth(workspace, capsys):
    out = workspace / "pred" / "deformed.vxg"
    code = main(["predict", "--model", str(workspace / "run" / "best.pnw"), "--input",
                 str(workspace / "input.vxg"), "--condition", "0.01,0.3,0,0", "--out", str(out),
                 "--target", str(workspace / "input.vxg")])
    assert code == EXIT_OK
    assert load_grid(out).resolution == 8
    binary = load_grid(workspace / "pred" / "deformed_binary.vxg")
    assert set(np.unique(binary.values)) <= {0.0, 1.0}
    assert "IOU vs target" in capsys.readouterr().out

    save_depth(render_depth(block_grid(), CameraPose()), workspace / "view.vxd")
    code = main(["predict", "--model", str(workspace / "run" / "best.pnw"), "--input",
                 str(workspace / "view.vxd"), "--condition", "0.01,0.3,0,0",
                 "--out", str(workspace / "pred" / "from_depth.vxg"),
                 "--preview", str(workspace / "pred" / "preview.png")])
    assert code == EXIT_OK
    assert (workspace / "pred" / "preview.png").exists()


def test_predict_without_condition_is_usage_error(workspace):
    code = main(["predict", "--model", str(workspace / "run" / "best.pnw"), "--input",
                 str(workspace / "input.vxg"), "--out", str(workspace / "pred" / "x.vxg")])
    assert code == EXIT_USAGE


def test_evaluate_writes_per_record_csv(workspace, capsys):
    out = workspace / "eval" / "train.csv"
    code = main(["evaluate", "--model", str(workspace / "run" / "best.pnw"), "--dataset",
                 str(workspace / "data"), "--split", "train", "--out", str(out)])
    assert code == EXIT_OK
    lines = out.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "record,iou"
    assert len(lines) > 1
    assert "Mean IOU on train" in capsys.readouterr().out


def test_plot_metrics(workspace):
    image = workspace / "plots" / "metrics.png"
    assert main(["plot", "--curves", str(workspace / "run" / "metrics.csv"), "--out", str(image)]) == EXIT_OK
    assert image.exists()
    other = workspace / "plots" / "other.csv"
    other.write_text("a,b\n1,2\n", encoding="utf-8")
    assert main(["plot", "--curves", str(other), "--out", str(workspace / "plots" / "x.png")]) == EXIT_USAGE


def test_experiment_without_datasets_names_the_generation_command(tmp_path, capsys):
    code = main(["experiment", "encoding_comparison", "--out", str(tmp_path / "exp"), "--data-dir",
                 str(tmp_path / "none"), "--resolution", "8", "--iterations", "1", "--seeds", "1"])
    assert code == EXIT_RUNTIME
    assert "python app.py generate --preset" in capsys.readouterr().err


def main_script():
    print("🧪 Command-Line Interface Test")
    print("=" * 60)
    sys.exit(pytest.main([__file__, "-q"]))


if __name__ == "__main__":
    main_script()
