from __future__ import annotations

import json

import pytest

from pcbf.campaign import YieldTable
from pcbf.cli import RunConfig, TerminationBreakdown, main, run_rollouts, synthetic_loss, verify_halt
from pcbf.errors import InvalidConfig
from pcbf.ops import AuditReport, load_dump, sha256_file

NEAR_SCENE = {"scene_type": "single_static", "obstacles": [{"center": [-18.0, 0.0], "radius": 1.2}]}

SPEC = {
    "name": "cli",
    "created_at": "2026-01-01T00:00:00Z",
    "criteria": [{"metric": "success_rate", "comparator": ">=", "threshold": 0.85}],
    "attempt_distribution": {"open": 0.5, "single_static": 0.5},
    "predicted_yields": {"open": 1.0, "single_static": 0.9},
}


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def run_config(tmp_path, **overrides):
    cfg = {"env": {"scene": NEAR_SCENE, "max_steps": 60}, "policy": "random", "num_envs": 2,
           "episodes": 6, "output_dir": str(tmp_path / "out"), "seed": 0}
    cfg.update(overrides)
    return cfg


def test_run_config_roundtrip_and_strictness(tmp_path):
    cfg = RunConfig.from_dict(run_config(tmp_path))
    assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    for bad in ({"policy": "ppo"}, {"episodes": 0}, {"seed": -1}, {"extra": 1},
                {"barrier": {"v_max": 3.0}}, {"env": {"dt": -1}}):
        with pytest.raises(InvalidConfig):
            RunConfig.from_dict(run_config(tmp_path, **bad))


def test_rollout_filtered_vs_unfiltered(tmp_path, capsys):
    path = write(tmp_path / "run.json", run_config(tmp_path))
    assert main(["rollout", "--config", path]) == 0
    out = capsys.readouterr().out
    assert "Hard-barrier collision          0 (0.00%)" in out
    breakdown = TerminationBreakdown.from_dict(json.loads((tmp_path / "out" / "breakdown.json").read_text()))
    assert breakdown.filtered and breakdown.episodes == 6
    assert main(["rollout", "--config", path, "--no-filter"]) == 0
    raw = TerminationBreakdown.from_dict(json.loads((tmp_path / "out" / "breakdown.json").read_text()))
    assert raw.counts["collision"] > 0
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["files"] == ["breakdown.json", "breakdown.txt"]


def test_rollout_independent_of_num_envs(tmp_path):
    results = [run_rollouts(RunConfig.from_dict(run_config(tmp_path, num_envs=n)), filtered=False).counts
               for n in (1, 4)]
    assert results[0] == results[1]


def test_scripted_open_rollout_succeeds(tmp_path):
    cfg = run_config(tmp_path, policy="scripted", episodes=2,
                     env={"spawn_position": [-5.0, 0.0], "goal_position": [5.0, 0.0]})
    assert run_rollouts(RunConfig.from_dict(cfg)).counts["success"] == 2


def test_rollout_config_errors(tmp_path):
    assert main(["rollout", "--config", str(tmp_path / "missing.json")]) == 2
    (tmp_path / "bad.json").write_text("{")
    assert main(["rollout", "--config", str(tmp_path / "bad.json")]) == 2
    path = write(tmp_path / "x.json", run_config(tmp_path, policy="gru"))
    assert main(["rollout", "--config", path]) == 2


def test_prereg_commit_eval_and_tamper(tmp_path, capsys):
    spec = write(tmp_path / "spec.json", SPEC)
    art = str(tmp_path / "prereg.json")
    assert main(["prereg", "commit", "--spec", spec, "--out", art]) == 0
    first = capsys.readouterr().out.strip()
    assert main(["prereg", "commit", "--spec", spec, "--out", art]) == 0
    assert capsys.readouterr().out.strip() == first
    assert json.loads((tmp_path / "prereg.json.manifest.json").read_text())["sha256"] == first

    fail = write(tmp_path / "m0.json", {"success_rate": 0.0})
    ok = write(tmp_path / "m1.json", {"success_rate": 0.9})
    assert main(["prereg", "eval", "--artifact", art, "--metrics", fail]) == 1
    assert main(["prereg", "eval", "--artifact", art, "--metrics", ok]) == 0
    assert main(["prereg", "eval", "--artifact", art, "--metrics", write(tmp_path / "m2.json", [1])]) == 2

    text = (tmp_path / "prereg.json").read_text()
    (tmp_path / "prereg.json").write_text(text.replace("0.85", "0.0"))
    assert main(["prereg", "eval", "--artifact", art, "--metrics", fail]) == 4


def test_prereg_commit_malformed(tmp_path):
    bad = write(tmp_path / "spec.json", {"name": "x", "attempt_distribution": {"open": 0.3}})
    assert main(["prereg", "commit", "--spec", bad, "--out", str(tmp_path / "a.json")]) == 2


def test_commit_without_timestamp_is_deterministic(tmp_path, capsys):
    spec = write(tmp_path / "spec.json", {k: v for k, v in SPEC.items() if k != "created_at"})
    hashes = []
    for name in ("a.json", "b.json"):
        assert main(["prereg", "commit", "--spec", spec, "--out", str(tmp_path / name)]) == 0
        hashes.append(capsys.readouterr().out.strip())
    assert hashes[0] == hashes[1]


def test_campaign_and_audit_commands(tmp_path, capsys):
    spec = write(tmp_path / "spec.json", SPEC)
    art = str(tmp_path / "prereg.json")
    main(["prereg", "commit", "--spec", spec, "--out", art])
    out = tmp_path / "camp"
    assert main(["campaign", "--prereg", art, "--total", "4", "--seed", "0", "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["prereg_sha256"] == sha256_file(art)
    assert manifest["dataset_sha256"] == sha256_file(out / "dataset.jsonl")
    assert "dataset sha256:" in capsys.readouterr().out
    AuditReport.from_dict(json.loads((out / "audit.json").read_text()))
    YieldTable.from_dict(json.loads((out / "yield_table.json").read_text()))

    schema = write(tmp_path / "schema.json", {"target_distribution": {"open": 0.5, "single_static": 0.5},
                                              "tolerance_pp": 100.0, "mad_k": 1e9})
    assert main(["audit", "--dataset", str(out / "dataset.jsonl"), "--schema", schema]) == 0
    strict = write(tmp_path / "strict.json", {"target_distribution": {"dynamic_obstacle": 1.0}})
    assert main(["audit", "--dataset", str(out / "dataset.jsonl"), "--schema", strict]) == 1
    (tmp_path / "junk.jsonl").write_text("nope\n")
    assert main(["audit", "--dataset", str(tmp_path / "junk.jsonl"), "--schema", schema]) == 2
    assert main(["audit", "--dataset", str(out / "dataset.jsonl"), "--schema", write(tmp_path / "s.json", {"x": 1})]) == 2


def test_campaign_argument_errors(tmp_path):
    spec = write(tmp_path / "spec.json", SPEC)
    art = str(tmp_path / "prereg.json")
    main(["prereg", "commit", "--spec", spec, "--out", art])
    assert main(["campaign", "--prereg", art, "--out", str(tmp_path / "c")]) == 2
    (tmp_path / "prereg.json").write_text("{}")
    assert main(["campaign", "--prereg", art, "--total", "2", "--seed", "0", "--out", str(tmp_path / "c")]) == 4


def test_halt_demo(tmp_path, capsys):
    assert main(["halt-demo", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert out.count("[x]") == 3
    halt = json.loads((tmp_path / "halt.json").read_text())
    assert load_dump(tmp_path / halt["forensics_dump"])["trigger"]["metric"] == "stage0_success_rate"
    # planting the downstream marker must flip the verdict
    (tmp_path / "stage1_started").write_text("")
    assert not verify_halt(tmp_path)["downstream_not_run"]


def test_halt_verification_detects_forged_hash(tmp_path):
    assert main(["halt-demo", "--out", str(tmp_path)]) == 0
    halt = json.loads((tmp_path / "halt.json").read_text())
    halt["event"]["commitment_sha256"] = "0" * 64
    (tmp_path / "halt.json").write_text(json.dumps(halt))
    assert verify_halt(tmp_path)["halt_cites_commitment"] is False


def test_synthetic_loss_shape():
    assert synthetic_loss(0) == pytest.approx(0.368)
    assert synthetic_loss(10_000) == pytest.approx(0.0595)


def test_help_lists_every_command(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for cmd in ("rollout", "prereg", "campaign", "audit", "halt-demo"):
        assert cmd in text
