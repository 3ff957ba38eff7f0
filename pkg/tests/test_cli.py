import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from semflow import fileio, synthdata
from semflow.cli import main


def _hash_tree(root: Path) -> str:
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(str(path.relative_to(root)).encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


@pytest.fixture(scope="module")
def scene_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("scenes")
    images, masks = root / "images", root / "masks"
    images.mkdir(), masks.mkdir()
    rng = np.random.default_rng(0)
    for i in range(3):
        image, mask = synthdata.make_toy_scene(rng, 64, 64)
        fileio.write_image(images / f"scene_{i}.ppm", image)
        fileio.write_image(masks / f"scene_{i}.pgm", mask * 255)
    return images, masks


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory, scene_dirs):
    images, masks = scene_dirs
    out = tmp_path_factory.mktemp("data") / "ds"
    code = main(["gen", "--images", str(images), "--masks", str(masks),
                 "--out", str(out), "--count", "6", "--seed", "3"])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory, dataset_dir):
    out = tmp_path_factory.mktemp("run") / "train"
    config = out.parent / "config.json"
    config.write_text(json.dumps({"iterations": 3, "batch_size": 2, "seed": 1}))
    code = main(["train", "--data", str(dataset_dir), "--config", str(config),
                 "--out", str(out)])
    assert code == 0
    return out


class TestGen:
    def test_writes_exactly_count_pair_directories(self, dataset_dir):
        pairs = [p for p in dataset_dir.iterdir() if p.is_dir()]
        assert len(pairs) == 6
        manifest = json.loads((dataset_dir / "manifest.json").read_text())
        assert manifest["count"] == 6
        assert (dataset_dir / "effective_config.json").exists()

    def test_fixed_seed_reproduces_identical_output(self, scene_dirs, tmp_path):
        images, masks = scene_dirs
        args = ["gen", "--images", str(images), "--masks", str(masks),
                "--count", "3", "--seed", "9"]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        assert _hash_tree(tmp_path / "a") == _hash_tree(tmp_path / "b")

    def test_identity_ranges_reproduce_inputs(self, scene_dirs, tmp_path):
        images, masks = scene_dirs
        ranges = tmp_path / "ranges.json"
        ranges.write_text(json.dumps(synthdata.AffineRanges.identity().to_json()))
        out = tmp_path / "ident"
        assert main(["gen", "--images", str(images), "--masks", str(masks),
                     "--out", str(out), "--count", "2", "--seed", "1",
                     "--ranges", str(ranges)]) == 0
        pair = synthdata.load_pair(out / "pair_0000")
        assert np.array_equal(pair.source_image, pair.target_image)
        assert np.allclose(pair.grid_flow, 0.0)

    def test_missing_inputs_exit_2(self, tmp_path):
        assert main(["gen", "--images", str(tmp_path / "nope"), "--masks",
                     str(tmp_path / "nope"), "--out", str(tmp_path / "o"),
                     "--count", "1"]) == 2


class TestTrain:
    def test_outputs_checkpoint_loss_log_and_config_echo(self, trained_dir):
        assert (trained_dir / "checkpoint" / "manifest.json").exists()
        assert (trained_dir / "effective_config.json").exists()
        log = (trained_dir / "loss_log.csv").read_text().strip().splitlines()
        assert log[0].startswith("iteration,")
        assert len(log) == 1 + 3

    def test_unknown_config_key_rejected_before_compute(self, dataset_dir, tmp_path):
        config = tmp_path / "bad.json"
        config.write_text(json.dumps({"iterations": 2, "bogus_key": True}))
        assert main(["train", "--data", str(dataset_dir), "--config", str(config),
                     "--out", str(tmp_path / "out")]) == 1
        assert not (tmp_path / "out" / "checkpoint").exists()

    def test_zero_lr_checkpoint_equals_fresh_init(self, dataset_dir, tmp_path):
        from semflow.pipeline import Matcher
        config = tmp_path / "c.json"
        config.write_text(json.dumps({"iterations": 2, "batch_size": 2, "lr": 0.0}))
        out = tmp_path / "zero"
        assert main(["train", "--data", str(dataset_dir), "--config", str(config),
                     "--out", str(out)]) == 0
        loaded, _ = Matcher.load_checkpoint(out / "checkpoint")
        fresh = Matcher.create(seed=0)
        for name, arr in loaded.param_arrays().items():
            # equality up to the float32 serialization of the checkpoint
            assert np.array_equal(arr, fresh.param_arrays()[name].astype(np.float32)), name

    def test_resume_continues_numbering(self, dataset_dir, trained_dir, tmp_path):
        config = tmp_path / "c.json"
        config.write_text(json.dumps({"iterations": 2, "batch_size": 2, "seed": 1}))
        out = tmp_path / "resumed"
        assert main(["train", "--data", str(dataset_dir), "--config", str(config),
                     "--out", str(out), "--resume", str(trained_dir / "checkpoint")]) == 0
        rows = (out / "loss_log.csv").read_text().strip().splitlines()[1:]
        assert [int(r.split(",")[0]) for r in rows] == [4, 5]

    def test_missing_dataset_exits_2(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "missing"),
                     "--out", str(tmp_path / "o")]) == 2


class TestMatch:
    def test_self_matching_produces_near_neutral_visualization(self, dataset_dir,
                                                               trained_dir, tmp_path):
        image = next(dataset_dir.glob("pair_*/source.ppm"))
        out = tmp_path / "self"
        # the discrete argmax of a self-correlation is the location itself
        assert main(["match", "--checkpoint", str(trained_dir / "checkpoint"),
                     "--source", str(image), "--target", str(image),
                     "--out", str(out), "--argmax", "hard"]) == 0
        flow = fileio.load_flow(out / "flow.sfg")
        assert np.abs(flow).max() == 0.0
        rgb = fileio.read_image(out / "flow_rgb.ppm")
        assert rgb.min() >= 250  # uniform neutral (white) frame
        assert (out / "match_summary.json").exists()
        assert (out / "warped_target.ppm").exists()

    def test_flow_file_roundtrips(self, dataset_dir, trained_dir, tmp_path):
        pair = dataset_dir / "pair_0000"
        out = tmp_path / "m"
        assert main(["match", "--checkpoint", str(trained_dir / "checkpoint"),
                     "--source", str(pair / "source.ppm"),
                     "--target", str(pair / "target.ppm"),
                     "--out", str(out)]) == 0
        flow = fileio.load_flow(out / "flow.sfg")
        fileio.save_grid(tmp_path / "again.sfg", flow)
        assert (tmp_path / "again.sfg").read_bytes() == (out / "flow.sfg").read_bytes()

    def test_argmax_variants_disagree_on_a_bimodal_pair(self, trained_dir, tmp_path):
        # two identical objects: plain softmax averages the two modes
        image = np.full((64, 64, 3), 40, dtype=np.uint8)
        image[8:24, 8:24] = 230
        image[40:56, 40:56] = 230
        fileio.write_image(tmp_path / "bimodal.ppm", image)
        flows = {}
        for variant in ("soft", "kernel"):
            out = tmp_path / variant
            assert main(["match", "--checkpoint", str(trained_dir / "checkpoint"),
                         "--source", str(tmp_path / "bimodal.ppm"),
                         "--target", str(tmp_path / "bimodal.ppm"),
                         "--out", str(out), "--argmax", variant]) == 0
            flows[variant] = fileio.load_flow(out / "flow.sfg")
        assert np.abs(flows["soft"] - flows["kernel"]).max() > 0.5

    def test_shape_mismatch_exits_2(self, dataset_dir, trained_dir, tmp_path):
        small = np.zeros((32, 32, 3), dtype=np.uint8)
        fileio.write_image(tmp_path / "small.ppm", small)
        assert main(["match", "--checkpoint", str(trained_dir / "checkpoint"),
                     "--source", str(next(dataset_dir.glob("pair_*/source.ppm"))),
                     "--target", str(tmp_path / "small.ppm"),
                     "--out", str(tmp_path / "o")]) == 2


class TestEval:
    def test_ground_truth_flows_score_perfect_pck(self, dataset_dir, capsys):
        assert main(["eval", "--flow", "gt", "--pairs", str(dataset_dir),
                     "--metric", "pck", "--alpha", "0.1"]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["mean"] == 1.0

    def test_alpha_monotonicity_through_checkpoint(self, dataset_dir, trained_dir, capsys):
        means = []
        for alpha in ("0.05", "0.1", "0.15"):
            assert main(["eval", "--checkpoint", str(trained_dir / "checkpoint"),
                         "--pairs", str(dataset_dir), "--metric", "pck",
                         "--alpha", alpha]) == 0
            means.append(json.loads(capsys.readouterr().out)["mean"])
        assert means[0] <= means[1] <= means[2]

    def test_report_mean_is_arithmetic_mean_and_file_written(self, dataset_dir,
                                                             tmp_path, capsys):
        out = tmp_path / "report.json"
        assert main(["eval", "--flow", "gt", "--pairs", str(dataset_dir),
                     "--metric", "iou", "--out", str(out)]) == 0
        report = json.loads(out.read_text())
        assert report["mean"] == pytest.approx(
            np.mean(list(report["per_pair"].values())))
        assert report["mean"] >= 0.95  # ground truth aligns the masks

    def test_requires_exactly_one_flow_source(self, dataset_dir):
        assert main(["eval", "--pairs", str(dataset_dir), "--metric", "pck"]) == 1

    def test_threads_flag_reproduces_sequential_results(self, dataset_dir, capsys):
        assert main(["eval", "--flow", "gt", "--pairs", str(dataset_dir),
                     "--metric", "ltacc"]) == 0
        sequential = json.loads(capsys.readouterr().out)
        assert main(["eval", "--flow", "gt", "--pairs", str(dataset_dir),
                     "--metric", "ltacc", "--threads", "4"]) == 0
        threaded = json.loads(capsys.readouterr().out)
        assert sequential["per_pair"] == threaded["per_pair"]


class TestGradcheck:
    def test_default_fixture_passes_and_reports_worst_coordinate(self, capsys):
        assert main(["gradcheck", "--fixture", "6", "--seed", "0"]) == 0
        out = capsys.readouterr().out
        report = json.loads(out[:out.rindex("}") + 1])
        assert report["passed"]
        for entry in report["checks"].values():
            assert "worst" in entry and "index" in entry["worst"]

    def test_unreachable_tolerance_exits_3(self, capsys):
        assert main(["gradcheck", "--fixture", "5", "--seed", "0",
                     "--tolerance", "1e-12"]) == 3


class TestUsage:
    def test_unknown_subcommand_exits_1(self):
        assert main(["frobnicate"]) == 1

    def test_missing_required_flag_exits_1(self):
        assert main(["match", "--source", "x.ppm"]) == 1
