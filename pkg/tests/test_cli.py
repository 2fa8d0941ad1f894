import json
import os

import pytest

from emotts import cli
from emotts.dataset import read_manifest


def run(argv):
    return cli.main([str(a) for a in argv])


class TestGenData:
    def test_tiny_manifest_written(self, tmp_path, capsys):
        out = tmp_path / "run"
        assert run(["gen-data", "--kind", "tiny", "--tiny-utterances", "14", "--seed", "3", "--out-dir", out]) == 0
        entries = read_manifest(str(out / "manifest.jsonl"))
        assert len(entries) == 14
        stats = json.loads((out / "stats.json").read_text())
        assert stats["seed"] == 3
        printed = capsys.readouterr().out
        assert "Emotion" in printed and "total" in printed

    def test_pipeline_has_all_categories(self, tmp_path, capsys):
        out = tmp_path / "run"
        assert run([
            "gen-data", "--per-emotion", "4", "--test-per-emotion", "1",
            "--val-per-emotion", "1", "--seed", "0", "--out-dir", out,
        ]) == 0
        table = json.loads((out / "stats.json").read_text())["stats"]
        labels = [k for k in table if k != "total"]
        assert len(labels) == 7
        assert all(table[k]["count"] == 4 for k in labels)

    def test_deterministic_manifests(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run(["gen-data", "--per-emotion", "3", "--test-per-emotion", "1",
                        "--val-per-emotion", "1", "--seed", "7", "--out-dir", out]) == 0
        assert (a / "manifest.jsonl").read_bytes() == (b / "manifest.jsonl").read_bytes()

    def test_unknown_kind_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as err:
            run(["gen-data", "--kind", "tiny2", "--out-dir", tmp_path / "x"])
        assert err.value.code == 2

    def test_hard_case_kind(self, tmp_path):
        out = tmp_path / "hard"
        assert run(["gen-data", "--kind", "hard-case", "--seed", "1", "--out-dir", out]) == 0
        entries = read_manifest(str(out / "manifest.jsonl"))
        assert all(e.split == "test" for e in entries)


@pytest.fixture(scope="module")
def tiny_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "run"
    assert run(["gen-data", "--kind", "tiny", "--tiny-utterances", "8", "--seed", "5", "--out-dir", out]) == 0
    return out / "manifest.jsonl"


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory, tiny_manifest):
    out = tmp_path_factory.mktemp("train") / "run"
    rc = run([
        "train", "--manifest", tiny_manifest, "--phase", "pretrain", "--variant", "audio",
        "--steps", "12", "--warmup", "2", "--batch-size", "4", "--d-model", "32",
        "--n-layers", "1", "--n-heads", "2", "--ff-dim", "64", "--peak-lr", "1e-3",
        "--seed", "0", "--out-dir", out,
    ])
    assert rc == 0
    return out


class TestTrain:
    def test_writes_checkpoint_and_log(self, trained_run):
        assert (trained_run / "pretrain-12.ckpt").exists()
        log_lines = (trained_run / "log.jsonl").read_text().strip().splitlines()
        assert len(log_lines) == 12
        assert json.loads(log_lines[0])["step"] == 1

    def test_finetune_requires_checkpoint(self, tiny_manifest, tmp_path, capsys):
        rc = run([
            "train", "--manifest", tiny_manifest, "--phase", "finetune",
            "--variant", "audio", "--steps", "2", "--warmup", "1", "--out-dir", tmp_path / "x",
        ])
        assert rc == 1
        assert "init-checkpoint" in capsys.readouterr().err

    def test_finetune_resumes_from_pretrain(self, tiny_manifest, trained_run, tmp_path):
        out = tmp_path / "ft"
        rc = run([
            "train", "--manifest", tiny_manifest, "--phase", "finetune", "--variant", "audio",
            "--steps", "4", "--warmup", "1", "--batch-size", "4", "--peak-lr", "1e-4",
            "--init-checkpoint", trained_run / "pretrain-12.ckpt", "--seed", "1", "--out-dir", out,
        ])
        assert rc == 0
        assert (out / "finetune-4.ckpt").exists()

    def test_pp_checkpoint_carries_extended_vocab(self, tiny_manifest, tmp_path):
        out = tmp_path / "pp"
        rc = run([
            "train", "--manifest", tiny_manifest, "--phase", "pretrain", "--variant", "pp",
            "--steps", "3", "--warmup", "1", "--batch-size", "4", "--d-model", "32",
            "--n-layers", "1", "--n-heads", "2", "--out-dir", out, "--seed", "0",
        ])
        assert rc == 0
        from emotts.model import load_checkpoint

        net, _ = load_checkpoint(str(out / "pretrain-3.ckpt"))
        assert net.layout.has_phonemes

    def test_invalid_variant_name_fails(self, tiny_manifest, tmp_path, capsys):
        rc = run([
            "train", "--manifest", tiny_manifest, "--variant", "zz",
            "--steps", "2", "--warmup", "1", "--out-dir", tmp_path / "x",
        ])
        assert rc == 1
        assert "variant" in capsys.readouterr().err


class TestSynthEvalCompare:
    def test_synth_eval_round(self, tiny_manifest, trained_run, tmp_path):
        synth_dir = tmp_path / "synth"
        rc = run([
            "synth", "--checkpoint", trained_run / "pretrain-12.ckpt",
            "--manifest", tiny_manifest, "--max-steps", "20", "--out-dir", synth_dir,
        ])
        assert rc == 0
        generated = [json.loads(l) for l in (synth_dir / "generated.jsonl").read_text().splitlines()]
        assert len(generated) == 8
        assert all("audio_tokens" in g and "stop_reason" in g for g in generated)

        eval_dir = tmp_path / "eval"
        rc = run([
            "eval", "--generated", synth_dir / "generated.jsonl",
            "--manifest", tiny_manifest, "--out-dir", eval_dir,
        ])
        assert rc == 0
        report = json.loads((eval_dir / "report.json").read_text())
        assert set(report) >= {"wer", "emo_sim", "recall", "n_utterances"}

    def test_eval_of_ground_truth_is_perfect(self, tiny_manifest, tmp_path):
        entries = read_manifest(str(tiny_manifest))
        generated = tmp_path / "gt.jsonl"
        with open(generated, "w") as fh:
            for e in entries:
                fh.write(json.dumps({"id": e.id, "text": e.text, "emotion": e.emotion.label,
                                     "audio_tokens": e.audio_tokens}) + "\n")
        out = tmp_path / "eval"
        assert run(["eval", "--generated", generated, "--manifest", tiny_manifest, "--out-dir", out]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["wer"] == 0.0
        assert report["emo_sim"] == 1.0
        assert report["recall"] == 1.0

    def test_compare_renders_rows(self, tiny_manifest, trained_run, tmp_path, capsys):
        out = tmp_path / "cmp"
        ckpt = trained_run / "pretrain-12.ckpt"
        rc = run([
            "compare", "--manifest", tiny_manifest, "--max-steps", "12", "--out-dir", out,
            f"a={ckpt}", f"b={ckpt}",
        ])
        assert rc == 0
        table = (out / "compare.txt").read_text().splitlines()
        assert table[0].startswith("Model")
        assert len(table) == 4
        assert (out / "report-a.json").exists() and (out / "report-b.json").exists()

    def test_generation_outputs_deterministic(self, tiny_manifest, trained_run, tmp_path):
        outs = []
        for name in ("s1", "s2"):
            out = tmp_path / name
            assert run([
                "synth", "--checkpoint", trained_run / "pretrain-12.ckpt",
                "--manifest", tiny_manifest, "--max-steps", "16", "--out-dir", out,
            ]) == 0
            outs.append((out / "generated.jsonl").read_bytes())
        assert outs[0] == outs[1]


class TestAuditAndGradCheck:
    def test_metric_audit(self, tmp_path, capsys):
        out = tmp_path / "audit"
        rc = run(["metric-audit", "--seed", "0", "--systems", "5", "--items-per-system", "40",
                  "--bucket-size", "5", "--out-dir", out])
        assert rc == 0
        report = json.loads((out / "audit.json").read_text())
        names = {r["name"] for r in report["rows"]}
        assert names == {"emo_sim", "judge_rating"}
        printed = capsys.readouterr().out
        assert "Sentence-rho" in printed

    def test_grad_check_passes(self, capsys):
        rc = run(["grad-check", "--variant", "audio", "--max-coords", "4", "--seed", "0"])
        assert rc == 0
        assert "PASS" in capsys.readouterr().out


class TestConfigFile:
    def test_file_provides_defaults_cli_overrides(self, tmp_path):
        config = tmp_path / "emotts.cfg"
        config.write_text("tiny_utterances = 10\nseed = 9\n# comment\n")
        out = tmp_path / "fromfile"
        assert run(["gen-data", "--kind", "tiny", "--config", config, "--out-dir", out]) == 0
        assert len(read_manifest(str(out / "manifest.jsonl"))) == 10

        out2 = tmp_path / "cli-wins"
        assert run(["gen-data", "--kind", "tiny", "--config", config,
                    "--tiny-utterances", "4", "--out-dir", out2]) == 0
        assert len(read_manifest(str(out2 / "manifest.jsonl"))) == 4

    def test_env_var_config(self, tmp_path, monkeypatch):
        config = tmp_path / "env.cfg"
        config.write_text("tiny_utterances = 6\n")
        monkeypatch.setenv(cli.ENV_CONFIG, str(config))
        out = tmp_path / "env"
        assert run(["gen-data", "--kind", "tiny", "--out-dir", out]) == 0
        assert len(read_manifest(str(out / "manifest.jsonl"))) == 6

    def test_malformed_config_rejected(self, tmp_path, capsys):
        config = tmp_path / "bad.cfg"
        config.write_text("this is not a pair\n")
        rc = run(["gen-data", "--kind", "tiny", "--config", config, "--out-dir", tmp_path / "x"])
        assert rc == 1

    def test_run_meta_written(self, tmp_path):
        out = tmp_path / "meta"
        assert run(["gen-data", "--kind", "tiny", "--tiny-utterances", "4", "--seed", "2", "--out-dir", out]) == 0
        meta = json.loads((out / "run.json").read_text())
        assert meta["command"] == "gen-data"
        assert meta["settings"]["seed"] == 2
