import json
import subprocess
import sys
from pathlib import Path

import pytest

from visreason.cli import build_parser, cmd_eval, load_config, main
from visreason.core import read_audit
from visreason.errors import ConfigError
from visreason.evalharness import read_verdicts

from conftest import StepTimer, eval_project, png_bytes, suite_script, write_config, write_script


@pytest.fixture
def project(tmp_path, scripts):
    return eval_project(tmp_path, scripts)


def run_eval_cli(argv, **kw):
    return cmd_eval(build_parser().parse_args(["eval", *argv]), **kw)


# -- ask ----------------------------------------------------------------------


def test_ask_prints_final_answer(tmp_path, scripts, image_path, capsys):
    config = write_config(tmp_path, scripts)
    code = main(["ask", str(image_path), "How many aircraft are at the airport?", "--config", str(config)])
    out = capsys.readouterr().out.splitlines()
    assert code == 0
    assert out[0] == "FINAL"
    audit_path = out[1].removeprefix("audit: ")
    trail = read_audit(audit_path)
    assert len(trail.turns) == 15
    assert trail.final_answer == "FINAL"


def test_ask_missing_config(tmp_path, image_path, capsys):
    code = main(["ask", str(image_path), "Q?", "--config", str(tmp_path / "nope.yaml")])
    assert code == 1
    assert "not found" in capsys.readouterr().err


def test_ask_bad_image(tmp_path, scripts, capsys):
    config = write_config(tmp_path, scripts)
    (tmp_path / "x.png").write_bytes(b"not an image")
    assert main(["ask", str(tmp_path / "x.png"), "Q?", "--config", str(config)]) == 1
    assert main(["ask", str(tmp_path / "missing.jpg"), "Q?", "--config", str(config)]) == 1


def test_ask_suite_down(tmp_path, scripts, image_path, capsys):
    scripts = dict(scripts)
    scripts["geo"] = write_script(tmp_path, "geo_down", suite_script("geo", fail="transport"))
    scripts["llava"] = write_script(tmp_path, "llava_down", suite_script("llava", fail="timeout"))
    config = write_config(tmp_path, scripts)
    code = main(["ask", str(image_path), "Q?", "--config", str(config)])
    assert code == 2
    assert "vision_suite" in capsys.readouterr().err


def test_ask_audit_has_no_secret(tmp_path, scripts, image_path, capsys, monkeypatch):
    monkeypatch.setenv("BACKBONE_TOKEN", "tok-very-secret")
    config = write_config(tmp_path, scripts, backbone_extra={"auth_token_env": "BACKBONE_TOKEN"})
    assert load_config(config).pipeline.backbone.auth_token_env == "BACKBONE_TOKEN"
    assert main(["ask", str(image_path), "Q?", "--config", str(config)]) == 0
    audit_path = capsys.readouterr().out.splitlines()[1].removeprefix("audit: ")
    with open(audit_path) as fh:
        assert "tok-very-secret" not in fh.read()


# -- config -------------------------------------------------------------------


def test_config_resolves_relative_paths(tmp_path, scripts):
    cfg = load_config(eval_project(tmp_path, scripts))
    assert cfg.dataset_path == tmp_path / "data.jsonl"
    assert cfg.output_dir == tmp_path / "out"
    assert cfg.pipeline.judge.temperature == 0.0
    assert [b.backend_id for b in cfg.pipeline.suite] == ["geo", "llava"]


@pytest.mark.parametrize(
    "text",
    ["", "pipeline: 3", "pipeline: {captioner: {script: x}}", "pipeline: [unclosed"],
)
def test_bad_configs(tmp_path, text):
    path = tmp_path / "c.yaml"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_config(path)


def test_missing_env_var_is_config_error(tmp_path, scripts):
    config = write_config(tmp_path, scripts, backbone_extra={"auth_token_env": "UNSET_TOKEN_VAR_Q"})
    with pytest.raises(ConfigError):
        load_config(config)


# -- eval ---------------------------------------------------------------------


def test_eval_two_types(project, tmp_path, capsys):
    assert run_eval_cli(["--config", str(project)]) == 0
    out_dir = tmp_path / "out"
    header, acc_row, rt_row = (out_dir / "report.csv").read_text().splitlines()
    assert header == "model,metric,obj_quantity,obj_color,overall"
    # records 0 and 2 match, record 1 does not
    assert acc_row == "mock,accuracy,66.67,66.67,66.67"
    assert rt_row.startswith("mock,runtime_min,")
    assert len(read_verdicts(out_dir / "verdicts.jsonl")) == 6
    assert len(list((out_dir / "audit").glob("*.jsonl"))) == 6
    assert "overall accuracy 66.67%" in capsys.readouterr().out


def test_eval_single_type(project, tmp_path):
    assert run_eval_cli(["--config", str(project), "--types", "obj_color"]) == 0
    report = json.loads((tmp_path / "out" / "report.json").read_text())["reports"][0]
    assert list(report["per_type_accuracy"]) == ["obj_color"]
    assert report["overall_accuracy"] == report["per_type_accuracy"]["obj_color"]


def test_eval_limit(project, tmp_path):
    assert run_eval_cli(["--config", str(project), "--limit", "2"]) == 0
    assert len(read_verdicts(tmp_path / "out" / "verdicts.jsonl")) == 2


def test_eval_resume_never_repeats(project, tmp_path):
    done = []

    def kill_after_two(rec, verdict):
        done.append(rec.record_id)
        if len(done) == 2:
            raise KeyboardInterrupt

    with pytest.raises(KeyboardInterrupt):
        run_eval_cli(["--config", str(project)], on_record_done=kill_after_two)
    first = list(done)
    done.clear()
    assert run_eval_cli(["--config", str(project), "--resume"], on_record_done=lambda r, v: done.append(r.record_id)) == 0
    assert not set(first) & set(done)
    ids = [v.record_id for v in read_verdicts(tmp_path / "out" / "verdicts.jsonl")]
    assert sorted(ids) == sorted(set(ids)) and len(ids) == 6


def test_eval_pipeline_failure_exit_2(tmp_path, scripts, capsys):
    scripts = dict(scripts)
    scripts["geo"] = write_script(tmp_path, "geo_down", suite_script("geo", fail="status:503"))
    config = eval_project(tmp_path, scripts, suite=("geo",))
    assert run_eval_cli(["--config", str(config)]) == 2
    assert "--resume" in capsys.readouterr().err


def test_eval_schema_error_exit_1(project, tmp_path):
    (tmp_path / "data.jsonl").write_text('{"question": "q?"}\n')
    assert run_eval_cli(["--config", str(project)]) == 1


def test_eval_without_judge(tmp_path, scripts):
    config = eval_project(tmp_path, scripts)
    raw = config.read_text()
    config.write_text(raw.replace("  judge:", "  unused_judge:"))
    assert run_eval_cli(["--config", str(config)]) == 1


def test_eval_baseline_mode(tmp_path, scripts):
    config = eval_project(tmp_path, scripts, mode="baseline")
    assert run_eval_cli(["--config", str(config)]) == 0
    assert not (tmp_path / "out" / "audit").exists()


# -- report -------------------------------------------------------------------


def test_report_matches_eval_output(project, tmp_path):
    assert run_eval_cli(["--config", str(project)], timer=StepTimer()) == 0
    out = tmp_path / "out"
    first = {p.name: p.read_bytes() for p in out.glob("report.*")}
    again = tmp_path / "again"
    assert main(["report", str(out / "verdicts.jsonl"), str(out / "runtimes.jsonl"), "--out", str(again), "--label", "mock"]) == 0
    assert {p.name: p.read_bytes() for p in again.glob("report.*")} == first


def test_report_rerun_is_byte_identical(project, tmp_path):
    assert run_eval_cli(["--config", str(project)]) == 0
    out = tmp_path / "out"
    argv = ["report", str(out / "verdicts.jsonl"), str(out / "runtimes.jsonl"), "--out", str(tmp_path / "r")]
    assert main(argv) == 0
    csv1 = (tmp_path / "r" / "report.csv").read_bytes()
    assert main(argv) == 0
    assert (tmp_path / "r" / "report.csv").read_bytes() == csv1


def test_report_empty_input(tmp_path, capsys):
    (tmp_path / "v.jsonl").write_text("")
    (tmp_path / "r.jsonl").write_text("")
    assert main(["report", str(tmp_path / "v.jsonl"), str(tmp_path / "r.jsonl")]) == 1
    assert "no verdicts" in capsys.readouterr().err


def test_report_missing_runtime(tmp_path):
    (tmp_path / "v.jsonl").write_text(json.dumps({"record_id": "a", "question_type": "obj_shape", "prediction": "p", "verdict": "match"}) + "\n")
    (tmp_path / "r.jsonl").write_text("")
    assert main(["report", str(tmp_path / "v.jsonl"), str(tmp_path / "r.jsonl")]) == 1


def test_report_missing_file(tmp_path):
    (tmp_path / "r.jsonl").write_text("")
    assert main(["report", str(tmp_path / "absent.jsonl"), str(tmp_path / "r.jsonl")]) == 1


def test_module_entry_point(tmp_path, scripts):
    (tmp_path / "img.png").write_bytes(png_bytes())
    config = write_config(tmp_path, scripts)
    proc = subprocess.run(
        [sys.executable, "-m", "visreason", "ask", str(tmp_path / "img.png"), "Q?", "--config", str(config)],
        capture_output=True, text=True, timeout=60,
    )
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.splitlines()[0] == "FINAL"


def test_shipped_mock_config_runs(tmp_path, capsys):
    demo = Path(__file__).resolve().parent.parent / "configs" / "mock"
    assert main(["ask", str(demo / "scene.png"), "What is in this airport?", "--config", str(demo / "config.yaml"), "--out", str(tmp_path)]) == 0
    assert capsys.readouterr().out.startswith("The airport has two runways")
    assert main(["eval", "--config", str(demo / "config.yaml"), "--out", str(tmp_path / "eval")]) == 0
    assert (tmp_path / "eval" / "report.csv").read_text().splitlines()[1] == "mock-agent,accuracy,50.00,50.00,50.00"
