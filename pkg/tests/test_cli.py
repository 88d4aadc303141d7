"""End-to-end command-line tests driving main() in-process."""

import os

import pytest

from mmbert.cli import _configure_threads, main
from mmbert.corpus import load_corpus

MICRO_CONFIG = """\
# micro run for CLI tests
n_samples = 40
min_len = 4
max_len = 5
d_model = 8
n_layers = 2
n_heads = 2
d_ff = 8
d_vision_feat = 6
d_speech_feat = 6
d_aligner_hidden = 6
dropout_rate = 0.0
batch_size = 8
stage0_epochs = 1
stage1_epochs = 1
stage2_epochs = 1
stage3_epochs = 1
patience = 2
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.cfg"
    cfg.write_text(MICRO_CONFIG, encoding="utf-8")
    data = root / "corpus.tsv"
    rc = main(["gen-data", "--config", str(cfg), "--out", str(data)])
    assert rc == 0
    out_dir = root / "ckpt"
    rc = main(["train", "--config", str(cfg), "--data", str(data),
               "--stage", "all", "--out", str(out_dir)])
    assert rc == 0
    return root, cfg, data, out_dir


class TestGenData:
    def test_corpus_round_trip(self, workdir):
        _, _, data, _ = workdir
        corpus = load_corpus(str(data))
        assert len(corpus) >= 40
        assert {s.label for s in corpus} == {0, 1}

    def test_split_manifests(self, workdir):
        root, _, data, _ = workdir
        corpus = load_corpus(str(data))
        counts = {}
        for name in ("train", "val", "test"):
            path = root / f"corpus.{name}.ids"
            assert path.exists()
            counts[name] = len(path.read_text(encoding="utf-8").splitlines())
        assert sum(counts.values()) == len(corpus)
        # 8:1:1 split, up to rounding
        assert abs(counts["train"] - 0.8 * len(corpus)) <= 2
        assert abs(counts["val"] - 0.1 * len(corpus)) <= 2

    def test_balance_override(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("n_samples = 60\nmin_len = 4\nmax_len = 5\n",
                       encoding="utf-8")
        out = tmp_path / "skewed.tsv"
        assert main(["gen-data", "--config", str(cfg), "--balance", "0.3",
                     "--out", str(out)]) == 0
        corpus = load_corpus(str(out))
        base = [s for s in corpus if s.tag == "none" and s.sample_id == s.base_id]
        frac = sum(s.label for s in base) / len(base)
        assert frac == pytest.approx(0.3, abs=0.05)

    def test_message_mentions_counts(self, workdir, tmp_path, capsys):
        _, cfg, _, _ = workdir
        out = tmp_path / "again.tsv"
        assert main(["gen-data", "--config", str(cfg), "--out", str(out)]) == 0
        stdout = capsys.readouterr().out
        assert "wrote" in stdout and "positive" in stdout

    def test_same_seed_same_bytes(self, workdir, tmp_path):
        _, cfg, data, _ = workdir
        out = tmp_path / "again.tsv"
        assert main(["gen-data", "--config", str(cfg), "--out", str(out)]) == 0
        assert out.read_bytes() == data.read_bytes()


class TestTrain:
    def test_stage_all_outputs(self, workdir):
        _, _, _, out_dir = workdir
        for n in range(4):
            assert (out_dir / f"stage{n}.ckpt").exists()
        log = (out_dir / "trainlog.csv").read_text(encoding="utf-8")
        lines = log.strip().split("\n")
        assert lines[0] == "epoch,stage,split,loss,acc,aux,lr"
        stages = {line.split(",")[1] for line in lines[1:]}
        assert {"0", "1", "3"} <= stages
        assert any(s.startswith("2-") for s in stages)

    def test_missing_prerequisite_fails(self, workdir, tmp_path, capsys):
        _, cfg, data, _ = workdir
        rc = main(["train", "--config", str(cfg), "--data", str(data),
                   "--stage", "3", "--out", str(tmp_path / "fresh")])
        err = capsys.readouterr().err
        assert rc == 2
        assert err.startswith("error: StageDependencyError:")

    def test_single_stage_after_prerequisite(self, workdir, tmp_path, capsys):
        _, cfg, data, _ = workdir
        out_dir = tmp_path / "staged"
        for stage in ("0", "1", "2"):
            rc = main(["train", "--config", str(cfg), "--data", str(data),
                       "--stage", stage, "--out", str(out_dir)])
            assert rc == 0, capsys.readouterr().err
        assert (out_dir / "stage2.ckpt").exists()
        rc = main(["train", "--config", str(cfg), "--data", str(data),
                   "--stage", "3", "--out", str(out_dir)])
        assert rc == 0
        assert (out_dir / "stage3.ckpt").exists()


class TestEvalAndRouting:
    def test_eval_csv(self, workdir, tmp_path):
        _, _, data, out_dir = workdir
        out = tmp_path / "metrics.csv"
        rc = main(["eval", "--ckpt", str(out_dir / "stage3.ckpt"),
                   "--data", str(data), "--split", "all", "--out", str(out)])
        assert rc == 0
        lines = out.read_text(encoding="utf-8").strip().split("\n")
        assert lines[0] == "run,dataset,slice,acc,prec,rec,f1"
        slices = [line.split(",")[2] for line in lines[1:]]
        assert slices[0] == "overall"
        assert "none" in slices
        for line in lines[1:]:
            acc = float(line.split(",")[3])
            assert 0.0 <= acc <= 1.0

    def test_eval_single_slice(self, workdir, capsys):
        _, _, data, out_dir = workdir
        rc = main(["eval", "--ckpt", str(out_dir / "stage3.ckpt"),
                   "--data", str(data), "--split", "all",
                   "--slice", "homophone"])
        assert rc == 0
        lines = capsys.readouterr().out.strip().split("\n")
        assert [line.split(",")[2] for line in lines[1:]] == ["homophone"]

    def test_eval_to_stdout(self, workdir, capsys):
        _, _, data, out_dir = workdir
        rc = main(["eval", "--ckpt", str(out_dir / "stage3.ckpt"),
                   "--data", str(data)])
        assert rc == 0
        assert capsys.readouterr().out.startswith("run,dataset,slice")

    def test_route_analyze_rows_normalised(self, workdir, tmp_path):
        _, _, data, out_dir = workdir
        out = tmp_path / "routes.csv"
        rc = main(["route-analyze", "--ckpt", str(out_dir / "stage3.ckpt"),
                   "--data", str(data), "--split", "all", "--out", str(out)])
        assert rc == 0
        lines = out.read_text(encoding="utf-8").strip().split("\n")
        assert lines[0] == "tag,layer,expert,mean_gate"
        sums = {}
        for line in lines[1:]:
            tag, layer, expert, gate = line.split(",")
            sums[(tag, layer)] = sums.get((tag, layer), 0.0) + float(gate)
        assert sums
        for total in sums.values():
            assert total == pytest.approx(1.0, abs=1e-4)


class TestErrorsAndMisc:
    def test_unknown_config_key(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("not_a_real_knob = 3\n", encoding="utf-8")
        rc = main(["gen-data", "--config", str(bad), "--out",
                   str(tmp_path / "x.tsv")])
        err = capsys.readouterr().err
        assert rc == 2
        assert err.startswith("error: ConfigError:")

    def test_missing_checkpoint_file(self, workdir, tmp_path, capsys):
        _, _, data, _ = workdir
        rc = main(["eval", "--ckpt", str(tmp_path / "nope.ckpt"),
                   "--data", str(data)])
        assert rc == 2
        assert "error:" in capsys.readouterr().err

    def test_corrupt_checkpoint_reported(self, workdir, tmp_path, capsys):
        _, _, data, out_dir = workdir
        raw = bytearray((out_dir / "stage3.ckpt").read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        bad = tmp_path / "corrupt.ckpt"
        bad.write_bytes(bytes(raw))
        rc = main(["eval", "--ckpt", str(bad), "--data", str(data)])
        assert rc == 2
        assert capsys.readouterr().err.startswith("error: CheckpointError:")

    def test_gradcheck_command(self, capsys):
        rc = main(["gradcheck", "--size", "tiny", "--coords", "2"])
        out = capsys.readouterr().out
        assert rc == 0
        assert "max relative error" in out
        assert "PASS" in out

    def test_thread_pinning(self, monkeypatch):
        monkeypatch.setenv("MMBERT_THREADS", "3")
        monkeypatch.delenv("OMP_NUM_THREADS", raising=False)
        monkeypatch.setenv("MKL_NUM_THREADS", "7")
        _configure_threads()
        assert os.environ["OMP_NUM_THREADS"] == "3"
        # an explicit user setting is left alone
        assert os.environ["MKL_NUM_THREADS"] == "7"

    def test_no_pinning_without_request(self, monkeypatch):
        monkeypatch.delenv("MMBERT_THREADS", raising=False)
        monkeypatch.delenv("OMP_NUM_THREADS", raising=False)
        _configure_threads()
        assert "OMP_NUM_THREADS" not in os.environ
