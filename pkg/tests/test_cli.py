import csv
import hashlib

import numpy as np
import pytest

from randviews.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from randviews.config import ConfigError, PipelineConfig, parse_text, to_text
from randviews.formats import PatchWriter, read_patch_file, write_candidates
from randviews.views import Candidate
from randviews.volume import Volume, save_volume

TINY = """
seed = 7
architecture = conv:4:5,relu,pool:2,fc:8,relu,dcfc:2
cohort.n_patients = 4
phantom.dims = 48,48,32
phantom.n_nodes = 2
phantom.n_distractors = 2
phantom.negatives_per_distractor = 1
phantom.count_jitter = 0
sampler.scales_mm = 30
sampler.n_translations = 2
sampler.n_rotations = 2
sampler.patch_pixels = 16
train.epochs = 2
train.batch_size = 16
eval.k_folds = 2
eval.n_views_list = 1,2,4,9
"""


def write_cfg(tmp_path, root, extra=""):
    path = tmp_path / f"{root}.cfg"
    path.write_text(TINY + f"paths.root = {tmp_path / root}\n" + extra)
    return str(path)


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def tree_digests(root):
    return {str(p.relative_to(root)): digest(p) for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(tmp, "run")
    assert main(["all", "--config", cfg]) == EXIT_OK
    return tmp, cfg


class TestConfig:
    def test_round_trip(self):
        cfg = parse_text(TINY)
        text = to_text(cfg)
        assert parse_text(text) == cfg
        assert to_text(parse_text(text)) == text

    def test_defaults_round_trip(self):
        assert parse_text(to_text(PipelineConfig())) == PipelineConfig()

    def test_values(self):
        cfg = parse_text(TINY)
        assert cfg.sampler.scales_mm == (30.0,)
        assert cfg.sampler_config().seed == 7
        assert cfg.sampler_config().n_views == 4
        assert cfg.eval.n_views_list == (1, 2, 4, 9)
        assert cfg.train.weight_init_stddev is None
        assert parse_text("train.weight_init_stddev = 0.01").train.weight_init_stddev == 0.01

    @pytest.mark.parametrize("text", ["nonsense", "bogus.key = 1", "train.epochs = many", "sampler.n_rotations = 0"])
    def test_errors(self, text):
        with pytest.raises(ConfigError):
            parse_text(text)

    def test_config_command(self, tmp_path, capsys):
        assert main(["config", "--config", write_cfg(tmp_path, "x"), "--seed", "3"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "seed = 3" in out.splitlines()
        assert parse_text(out).seed == 3


class TestFormats:
    def test_patch_file(self, tmp_path):
        rng = np.random.default_rng(0)
        patches = rng.random((5, 8, 8, 3)).astype(np.float32)
        with PatchWriter(tmp_path / "p.bin", 8) as w:
            w.write(3, 1, patches[:2])
            w.write(4, 0, patches[2:])
        rec = read_patch_file(tmp_path / "p.bin")
        assert rec["index"].tolist() == [3, 3, 4, 4, 4]
        assert rec["label"].tolist() == [1, 1, 0, 0, 0]
        assert np.array_equal(rec["pixels"], patches)

    def test_truncated_patch_file(self, tmp_path):
        with PatchWriter(tmp_path / "p.bin", 8) as w:
            w.write(0, 1, np.zeros((2, 8, 8, 3)))
        blob = (tmp_path / "p.bin").read_bytes()
        (tmp_path / "p.bin").write_bytes(blob[:-4])
        with pytest.raises(ValueError, match="size mismatch"):
            read_patch_file(tmp_path / "p.bin")


class TestCommands:
    def test_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == EXIT_USAGE
        assert main(["phantom", "--set", "nope"]) == EXIT_USAGE

    def test_phantom_outputs_and_determinism(self, tmp_path):
        cfg = write_cfg(tmp_path, "a")
        assert main(["phantom", "--config", cfg]) == EXIT_OK
        first = tree_digests(tmp_path / "a")
        assert "candidates.csv" in first and "volumes/P000.vol" in first and "volumes/P003.raw" in first
        assert main(["phantom", "--config", cfg]) == EXIT_OK
        assert tree_digests(tmp_path / "a") == first

    def test_unwritable_output(self, tmp_path, capsys):
        blocker = tmp_path / "blocker"
        blocker.write_text("not a directory")
        cfg = write_cfg(tmp_path, "b", f"paths.volumes = {blocker / 'vols'}\n")
        assert main(["phantom", "--config", cfg]) == EXIT_DATA
        assert "data error" in capsys.readouterr().err

    def test_extract_single_candidate_default_views(self, tmp_path):
        root = tmp_path / "one"
        (root / "volumes").mkdir(parents=True)
        save_volume(Volume(np.full((40, 40, 40), 60.0, np.float32)), root / "volumes" / "P9.vol")
        write_candidates(root / "candidates.csv", [Candidate("P9", (20.0, 20.0, 20.0), 1)])
        assert main(["extract", "--set", f"paths.root={root}"]) == EXIT_OK
        rec = read_patch_file(root / "patches.bin")
        assert len(rec) == 100
        assert rec["pixels"].shape[1:] == (32, 32, 3)

    def test_extract_missing_candidates(self, tmp_path):
        assert main(["extract", "--set", f"paths.root={tmp_path / 'none'}"]) == EXIT_DATA

    def test_train_single_class(self, tmp_path):
        root = tmp_path / "neg"
        (root / "volumes").mkdir(parents=True)
        for pid in ("P0", "P1"):
            save_volume(Volume(np.full((40, 40, 40), 0.0, np.float32)), root / "volumes" / f"{pid}.vol")
        write_candidates(root / "candidates.csv",
                         [Candidate(p, (20.0, 20.0, 20.0), 0) for p in ("P0", "P1")])
        cfg = write_cfg(tmp_path, "neg")
        assert main(["extract", "--config", cfg]) == EXIT_OK
        assert main(["train", "--config", cfg]) == EXIT_DATA

    def test_pipeline_outputs(self, finished_run):
        tmp, _ = finished_run
        root = tmp / "run"
        cands = list(csv.DictReader(open(root / "candidates.csv")))
        rec = read_patch_file(root / "patches.bin")
        assert len(rec) == len(cands) * 4
        for name in ("models/fold0.model", "models/fold1.model", "models/fold0_train_log.csv",
                     "scores/scores.csv", "scores/view_scores.csv", "reports/summary.txt",
                     "reports/cv_report.csv", "reports/froc_pooled.csv", "reports/roc_pooled.csv",
                     "reports/froc_n_views.svg", "reports/froc_fold0.csv"):
            assert (root / name).is_file(), name
        log = (root / "models/fold0_train_log.csv").read_text().splitlines()
        assert len(log) == 3
        scores = list(csv.DictReader(open(root / "scores/scores.csv")))
        assert list(scores[0]) == ["patient_id", "candidate_index", "label", "n_views", "probability"]
        assert len(scores) == len(cands) and all(s["n_views"] == "4" for s in scores)
        # N list entries beyond the scored views are skipped
        assert sorted(p.name for p in (root / "reports").glob("froc_pooled_n*.csv")) == [
            "froc_pooled_n1.csv", "froc_pooled_n2.csv", "froc_pooled_n4.csv"]
        svg = (root / "reports/froc_n_views.svg").read_text()
        assert svg.count("<polyline") == 3 and "FP per volume" in svg

    def test_train_checksum_and_rerun_identical(self, finished_run, capsys):
        tmp, cfg = finished_run
        root = tmp / "run"
        before = tree_digests(root)
        capsys.readouterr()
        assert main(["train", "--config", cfg]) == EXIT_OK
        printed = capsys.readouterr().out.split()
        assert printed[2] == before["models/fold0.model"] or len(printed[2]) == 64
        assert main(["score", "--config", cfg]) == EXIT_OK
        assert main(["eval", "--config", cfg]) == EXIT_OK
        assert tree_digests(root) == before

    def test_threads_do_not_change_results(self, finished_run, tmp_path):
        tmp, _ = finished_run
        cfg = write_cfg(tmp_path, "threaded")
        assert main(["all", "--config", cfg, "--threads", "3"]) == EXIT_OK
        a = tree_digests(tmp / "run")
        b = tree_digests(tmp_path / "threaded")
        assert a == b

    def test_eval_perfect_scores(self, tmp_path):
        root = tmp_path / "perfect"
        (root / "scores").mkdir(parents=True)
        cands = [Candidate(f"P{i % 3}", (0.0, 0.0, 0.0), int(i < 3)) for i in range(9)]
        write_candidates(root / "candidates.csv", cands)
        with open(root / "scores/scores.csv", "w") as fh:
            fh.write("patient_id,candidate_index,label,n_views,probability\n")
            for i, c in enumerate(cands):
                fh.write(f"{c.patient_id},{i},{c.label},100,{0.9 if c.label else 0.1}\n")
        with open(root / "scores/view_scores.csv", "w") as fh:
            fh.write("candidate_index,view_probabilities\n")
            for i, c in enumerate(cands):
                fh.write(f"{i}," + " ".join([str(0.9 if c.label else 0.1)] * 100) + "\n")
        argv = ["eval", "--set", f"paths.root={root}", "--set", "eval.n_views_list=1,5,100"]
        assert main(argv) == EXIT_OK
        froc = list(csv.DictReader(open(root / "reports/froc_pooled.csv")))
        assert any(float(r["sensitivity"]) == 1.0 and float(r["fp_per_volume"]) == 0.0 for r in froc)
        assert (root / "reports/froc_n_views.svg").read_text().count("<polyline") == 3
        first = tree_digests(root / "reports")
        assert main(argv) == EXIT_OK
        assert tree_digests(root / "reports") == first
        summary = (root / "reports/summary.txt").read_text()
        assert "pooled_sensitivity_at_3_fp = 1.0" in summary
