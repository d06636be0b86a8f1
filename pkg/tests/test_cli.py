import json

import numpy as np
import pytest
import yaml

from voxsync import CONVENTION_VERSION
from voxsync.cli import main, write_prediction
from voxsync.mv_decoder import occupancy_to_box_mesh
from voxsync.synthetic_data import load_dataset, sample_dirname


def tiny_config(tmp_path, train=(0, 1), eval_=(), **sections):
    cfg = {
        "synthetic_data": {"N": 8, "V": 32, "complexity": 3, "train_seeds": list(train), "eval_seeds": list(eval_),
                           "root": str(tmp_path / "data")},
        "dual_branch": {"latent_channels": 2, "d_u": 8, "unet_channels": [8, 8, 8], "heads": 2, "voxel_blocks": 2,
                        "sync_after": [1, 2], "d_c": 8, "steps": 2, "ae_steps": 2, "sample_steps": 2,
                        "batch_size": 2},
        "mv_decoder": {"d_z": 4, "feat_dim": 4, "encoder_channels": [4, 4, 4, 4], "width": 16, "blocks": 1,
                       "heads": 2, "steps": 2, "latent_blocks": 1, "latent_width": 16, "latent_steps": 2,
                       "sample_steps": 2},
        "metrics": {"n_samples": 1000},
    }
    for name, values in sections.items():
        cfg[name].update(values)
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def run_files(run_dir):
    assert (run_dir / "config.yaml").exists() and (run_dir / "log.jsonl").exists()
    info = json.loads((run_dir / "run.json").read_text())
    assert info["convention"] == CONVENTION_VERSION
    return info


def test_gen_data_writes_every_seed(tmp_path):
    cfg = tiny_config(tmp_path, train=range(10))
    assert main(["gen-data", "--config", cfg, "--run-dir", str(tmp_path / "run")]) == 0
    dirs = sorted(p.name for p in (tmp_path / "data").iterdir() if p.is_dir())
    assert dirs == [sample_dirname(s) for s in range(10)]
    assert (tmp_path / "data" / "dataset.json").exists()
    info = run_files(tmp_path / "run")
    assert info["data_seeds"]["train"] == list(range(10))


def test_sync_ablation_table_has_both_runs(tmp_path):
    cfg = tiny_config(tmp_path)
    main(["gen-data", "--config", cfg, "--run-dir", str(tmp_path / "gen")])
    run = tmp_path / "ablate"
    assert main(["ablate", "--config", cfg, "--run-dir", str(run), "--seed", "3"]) == 0
    table = (run / "ablation.md").read_text().splitlines()
    rows = [r for r in table if r.startswith("| on") or r.startswith("| off")]
    assert len(rows) == 2
    for row in rows:
        iou = float(row.split("|")[2])
        assert 0 <= iou <= 1
    assert run_files(run)["seed"] == 3


def test_decoder_ablation_table(tmp_path):
    cfg = tiny_config(tmp_path, train=(0,), eval_=(5,))
    main(["gen-data", "--config", cfg, "--run-dir", str(tmp_path / "gen")])
    run = tmp_path / "ablate"
    assert main(["ablate", "--config", cfg, "--run-dir", str(run), "--study", "mvgd"]) == 0
    text = (run / "ablation.md").read_text()
    assert "injection" in text and "| on" in text and "| off" in text


def test_evaluate_prediction_equal_to_ground_truth(tmp_path):
    cfg = tiny_config(tmp_path, train=(0, 1), eval_=(1,))
    main(["gen-data", "--config", cfg, "--run-dir", str(tmp_path / "gen")])
    for shape, views in load_dataset(tmp_path / "data", "eval"):
        write_prediction(tmp_path / "pred" / sample_dirname(shape.seed), shape.occupancy, views.color,
                         occupancy_to_box_mesh(shape.occupancy))
    run = tmp_path / "eval"
    assert main(["evaluate", "--config", cfg, "--run-dir", str(run), "--pred", str(tmp_path / "pred")]) == 0
    rows = [json.loads(line) for line in (run / "report.jsonl").read_text().splitlines()]
    mean = rows[-1]
    assert mean["sample"] == "mean"
    assert mean["chamfer"] == 0 and mean["iou"] == 1 and mean["psnr"] == 99
    assert (run / "report.csv").exists()


def test_full_pipeline_writes_samples(tmp_path):
    cfg = tiny_config(tmp_path, train=(0, 1), eval_=(1,))
    main(["gen-data", "--config", cfg, "--run-dir", str(tmp_path / "gen")])
    assert main(["train-stage1", "--config", cfg, "--run-dir", str(tmp_path / "s1")]) == 0
    assert main(["train-decoder", "--config", cfg, "--run-dir", str(tmp_path / "dec")]) == 0
    args = ["sample", "--config", cfg, "--run-dir", str(tmp_path / "smp"), "--stage1", str(tmp_path / "s1/stage1.pt"),
            "--latent", str(tmp_path / "dec/latent.pt"), "--decoder", str(tmp_path / "dec/decoder.pt")]
    assert main(args) == 0
    out = tmp_path / "smp" / "samples" / sample_dirname(1)
    assert (out / "occupancy.npy").exists() and (out / "front_color.png").exists()
    assert np.load(out / "occupancy.npy").shape == (8, 8, 8)


def test_failures_exit_nonzero(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code != 0
    bad = tmp_path / "bad.yaml"
    bad.write_text("dual_branch: {not_a_key: 1}\n")
    assert main(["gen-data", "--config", str(bad), "--run-dir", str(tmp_path / "r")]) == 2
    cfg = tiny_config(tmp_path)
    assert main(["train-stage1", "--config", cfg, "--run-dir", str(tmp_path / "r2")]) == 2
    assert "error" in capsys.readouterr().err
