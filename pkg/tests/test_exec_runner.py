import os
import time

import pytest

from helpers import PY, config, make_instance, poc
from pocharness.agent_gateway import PocCandidate
from pocharness.errors import CommandSpawnError, MissingPlaceholder
from pocharness.exec_runner import (
    TIMEOUT_EXIT_CODE,
    RunOutcome,
    entry_name,
    materialize_command,
    materialize_template,
    run_candidate,
)
from pocharness.instance_model import ProjectMeta
from pocharness.trace_engine import DynamicTrace


def _run(tmp_path, source, **kw):
    cfg_kw = {k: kw.pop(k) for k in list(kw) if k in ("output_cap_bytes", "retain_workspaces", "timeout_seconds")}
    return run_candidate(make_instance(**kw), PocCandidate(source), config(tmp_path, **cfg_kw))


def test_exit_code_output_and_events_are_captured(tmp_path):
    out = _run(tmp_path, poc("call a.B.c B.java:3", "print hello [VULN]", "exit 0"))
    assert out.exit_code == 0 and not out.timed_out
    assert out.output == "hello [VULN]\n"
    assert [e.location.qualified_name() for e in out.dynamic_trace.events] == ["a.B.c"]


def test_nonzero_exit_is_reported(tmp_path):
    out = _run(tmp_path, poc("print boom", "exit 3"))
    assert out.exit_code == 3 and out.output == "boom\n"


def test_failed_build_skips_run(tmp_path):
    build = f"{PY} {{PROJECT}}/build.py {{POC}}"
    out = _run(tmp_path, poc("compile-error bad token", "print never"), build=build)
    assert out.exit_code == 1
    assert out.output == "error: bad token\n"


def test_build_output_precedes_run_output(tmp_path):
    build = f"{PY} {{PROJECT}}/build.py {{POC}}"
    out = _run(tmp_path, poc("print ran"), build=build)
    assert out.output == "build ok\nran\n"


def test_timeout_kills_and_reports_sentinel(tmp_path):
    start = time.monotonic()
    out = _run(tmp_path, poc("call a.B.c B.java:1", "print started", "sleep 30"), timeout=1)
    assert time.monotonic() - start < 10
    assert out.timed_out and out.exit_code == TIMEOUT_EXIT_CODE
    assert "started" in out.output
    assert len(out.dynamic_trace) == 1


def test_config_timeout_overrides_manifest(tmp_path):
    out = _run(tmp_path, poc("sleep 30"), timeout=60, timeout_seconds=1)
    assert out.timed_out


def test_background_children_are_killed(tmp_path):
    script = tmp_path / "spawn.py"
    script.write_text(
        "import subprocess, sys\n"
        f"subprocess.Popen([{PY!r}, '-c', 'import time; time.sleep(30)'])\n"
        "print('parent done')\n"
    )
    start = time.monotonic()
    out = _run(tmp_path, poc(), run=f"{PY} {script} {{POC}}", project_dir=None)
    assert out.exit_code == 0 and out.output == "parent done\n"
    assert time.monotonic() - start < 10


def test_output_is_truncated_at_cap(tmp_path):
    script = tmp_path / "loud.py"
    script.write_text("import sys\nsys.stdout.write('x' * 100000)\n")
    out = _run(tmp_path, poc(), run=f"{PY} {script} {{POC}}", project_dir=None, output_cap_bytes=1000)
    assert out.output_truncated
    assert out.output.startswith("x" * 1000)
    assert out.output.count("x") == 1000
    assert "truncated at 1000 bytes" in out.output


def test_stderr_is_merged(tmp_path):
    script = tmp_path / "err.py"
    script.write_text("import sys\nprint('to stderr', file=sys.stderr)\nsys.exit(2)\n")
    out = _run(tmp_path, poc(), run=f"{PY} {script} {{POC}}", project_dir=None)
    assert out.exit_code == 2 and "to stderr" in out.output


def test_events_fall_back_to_stdout_without_log_file(tmp_path):
    script = tmp_path / "evt.py"
    script.write_text("print('EVT a.B.c B.java:5')\nprint('EVT a.B.d B.java:6')\n")
    out = _run(tmp_path, poc(), run=f"{PY} {script} {{POC}}", project_dir=None)
    assert [e.location.method for e in out.dynamic_trace.events] == ["c", "d"]


def test_missing_executable_raises_spawn_error(tmp_path):
    with pytest.raises(CommandSpawnError):
        _run(tmp_path, poc(), run="/nonexistent/runner {POC}", project_dir=None)


def test_credentials_are_not_passed_to_poc(tmp_path, monkeypatch):
    monkeypatch.setenv("POCHARNESS_API_KEY", "sekret")
    script = tmp_path / "env.py"
    script.write_text("import os\nprint(os.environ.get('POCHARNESS_API_KEY', 'absent'))\n")
    out = _run(tmp_path, poc(), run=f"{PY} {script} {{POC}}", project_dir=None)
    assert out.output == "absent\n"


def test_workspace_removed_unless_retained(tmp_path):
    _run(tmp_path, poc())
    assert not any((tmp_path / "ws").rglob("*.java"))
    _run(tmp_path, poc("print keep"), retain_workspaces=True)
    assert [p.name for p in (tmp_path / "ws").rglob("*.java")] == ["Poc.java"]


def test_poc_file_named_after_public_class(tmp_path):
    script = tmp_path / "name.py"
    script.write_text("import os, sys\nprint(os.path.basename(sys.argv[1]))\n")
    out = _run(tmp_path, poc(name="Exploit"), run=f"{PY} {script} {{POC}}", project_dir=None)
    assert out.output == "Exploit.java\n"


def test_entry_name_defaults():
    assert entry_name(PocCandidate("class x {}")) == "Poc"
    assert entry_name(PocCandidate("public final class Z {}")) == "Z"
    assert entry_name(PocCandidate("x", declared_entry="Q")) == "Q"


def test_materialize_replaces_every_placeholder_with_quoting():
    meta = ProjectMeta("c", "m", "", "run {POC} --log {LOG} --again {POC} {PROJECT}", 5, project_dir="/p q")
    cmd = materialize_command(meta, "/w/A B.java", workspace="/w", log_path="/w/l.log")
    assert cmd == "run '/w/A B.java' --log /w/l.log --again '/w/A B.java' '/p q'"


def test_materialize_requires_poc_placeholder():
    with pytest.raises(MissingPlaceholder):
        materialize_template("run {LOG}", poc="x")


def test_run_outcome_round_trip_and_sentinel_check():
    out = RunOutcome(0, "x", DynamicTrace(), 5)
    assert RunOutcome.from_dict(out.to_dict()) == out
    with pytest.raises(ValueError):
        RunOutcome(1, "", DynamicTrace(), 5, timed_out=True)


def test_env_exposes_paths_to_run_script(tmp_path):
    script = tmp_path / "paths.py"
    script.write_text("import os\nprint(os.path.basename(os.environ['POCHARNESS_LOG']))\n")
    out = _run(tmp_path, poc(), run=f"{PY} {script} {{POC}}", project_dir=None)
    assert out.output == "instrumentation.log\n"
    assert os.environ.get("POCHARNESS_LOG") is None
