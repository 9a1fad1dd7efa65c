import json
import logging

import pytest

from prefdiff import __version__
from prefdiff.cli import build_parser, main
from prefdiff.config import load_config
from prefdiff.datasets import load_stats, read_header
from prefdiff.diffusion import DiffusionPlanner
from prefdiff.evalharness import disturbance_sweep, read_csv
from prefdiff.ndcore import load_checkpoint
from prefdiff.pipeline import STAGES

TINY = [
    'gaits=["trotting"]',
    "v_cmds=[0.5]",
    "run_dir=runs/tiny",
    "env.max_steps=40",
    "dataset.expert_episodes=2",
    "dataset.planner_episodes=2",
    "dataset.max_steps=40",
    "diffusion.horizon=2",
    "diffusion.diffusion_steps=3",
    "diffusion.hidden=[8]",
    "diffusion.embed_dim=4",
    "diffusion.batch_size=4",
    "diffusion.train_steps=3",
    "diffusion.sampling_steps=2",
    "preference.pairs=4",
    "align.epochs=1",
    "align.batch_size=4",
    "eval.episodes=1",
    "eval.seeds=[0]",
    "eval.disturbances=[0.0, 0.02]",
    "eval.pair_scales=[1.0]",
    "eval.regularizations=[1.0]",
]


def prefdiff(stage, *extra):
    args = [stage, "--no-progress"]
    for override in TINY:
        args += ["--set", override]
    return main(args + list(extra))


@pytest.fixture
def run_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("PREFDIFF_RUN_ROOT", str(tmp_path))
    return tmp_path / "runs" / "tiny"


def test_parser():
    args = build_parser().parse_args(["label", "-s", "seed=2", "-s", "preference.beta=1", "-f"])
    assert args.stage == "label" and args.force
    assert args.overrides == ["seed=2", "preference.beta=1"]


def test_usage_errors(capsys):
    assert main(["--version"]) == 0
    assert __version__ in capsys.readouterr().out
    assert main([]) == 1
    assert main(["deploy"]) == 1


def test_invalid_config(run_dir, tmp_path):
    assert prefdiff("gen-expert", "--set", "align.temprature=1") == 1
    assert prefdiff("gen-expert", "--set", "seed") == 1
    assert main(["gen-expert", "--config", str(tmp_path / "missing.json")]) == 1
    assert not run_dir.exists()


def test_missing_prerequisite(run_dir):
    assert prefdiff("align") == 2
    assert prefdiff("report") == 2


def test_locked_run_directory(run_dir):
    run_dir.mkdir(parents=True)
    (run_dir / ".lock").write_text("12345")
    assert prefdiff("gen-expert") == 1


def test_stray_value_error(run_dir, caplog, monkeypatch):
    def broken(*args, **kwargs):
        raise ValueError("gait 'galloping' has no expert")

    monkeypatch.setattr("prefdiff.pipeline.collect", broken)
    assert prefdiff("gen-expert") == 1
    assert "gait 'galloping' has no expert" in caplog.text
    assert not (run_dir / ".lock").exists()


def test_full_pipeline(run_dir, caplog, monkeypatch):
    caplog.set_level(logging.INFO)
    swept = []

    def recording_sweep(policy, *args, **kwargs):
        swept.append(policy.source)
        return disturbance_sweep(policy, *args, **kwargs)

    monkeypatch.setattr("prefdiff.pipeline.disturbance_sweep", recording_sweep)

    assert prefdiff("gen-expert") == 0
    assert prefdiff("train-bc") == 0
    checkpoint = (run_dir / "bc_trotting.json").read_bytes()
    fingerprint = read_header(run_dir / "trotting_expert.jsonl")["fingerprint"]
    assert json.loads(checkpoint)["meta"]["fingerprint"] == fingerprint

    caplog.clear()
    assert prefdiff("train-bc") == 0
    assert "up to date" in caplog.text
    assert prefdiff("train-bc", "--force") == 0
    assert (run_dir / "bc_trotting.json").read_bytes() == checkpoint

    assert prefdiff("eval") == 0
    table, found = read_csv(run_dir / "eval_trotting_0.5.csv")
    assert found == fingerprint
    assert set(table["planner"]) == {"expert", "untrained", "bc"}
    assert sorted(set(table["disturbance"])) == [0.0, 0.02]
    assert (run_dir / "trace_trotting_0.5_bc_0.csv").is_file()
    assert swept == ["expert", "untrained", "bc"]

    cfg = load_config(None, TINY)
    bc = DiffusionPlanner(
        load_checkpoint(run_dir / "bc_trotting.json")[0],
        load_stats(run_dir / "norm_stats.json"),
        cfg.diffusion,
        cfg.env,
        source="bc",
    )
    sweep = disturbance_sweep(
        bc, "trotting", 0.5, cfg.eval.episodes, cfg.eval.seeds, cfg.eval.disturbances, env=cfg.env
    )
    rows = table[table["planner"] == "bc"]
    assert list(rows["disturbance"]) == [r.disturbance for r in sweep]
    assert list(rows["stability_pct"]) == [s for r in sweep for s in r.stability_pct]

    for stage in ("rollout", "label", "align", "eval", "ablate", "report"):
        assert prefdiff(stage) == 0, stage
    table, _ = read_csv(run_dir / "eval_trotting_0.5.csv")
    assert "aligned" in set(table["planner"])
    ablation, _ = read_csv(run_dir / "ablation.csv")
    assert len(ablation) == 2 and set(ablation["mode"]) == {"weak", "strong"}

    report = json.loads((run_dir / "report.json").read_text())
    assert report["fingerprint"] == fingerprint
    assert set(report) == {"fingerprint", "deltas", "ablation", "label_agreement"}
    assert "trotting" in report["deltas"]["bc_vs_untrained"]
    assert 0 <= report["label_agreement"]["trotting"] <= 1
    assert (run_dir / "stability.png").is_file()
    assert (run_dir / "traces_trotting_0.5.png").is_file()

    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert set(manifest["stages"]) == {
        "gen-expert",
        "train-bc",
        "rollout",
        "label",
        "align",
        "eval",
        "ablate",
        "report",
    }
    assert not (run_dir / ".lock").exists()

    # forced reruns reproduce every artifact byte for byte
    artifacts = {p.name: p.read_bytes() for p in run_dir.iterdir()}
    assert {"trotting_planner.jsonl", "trotting_pairs_weak.jsonl", "aligned_trotting.json"} < set(
        artifacts
    )
    for stage in STAGES:
        assert prefdiff(stage, "--force") == 0, stage
    rerun = {p.name: p.read_bytes() for p in run_dir.iterdir()}
    assert sorted(rerun) == sorted(artifacts)
    for name, content in artifacts.items():
        assert rerun[name] == content, name

    # artifacts of another configuration are rejected
    assert prefdiff("train-bc", "--set", "seed=1") == 2
