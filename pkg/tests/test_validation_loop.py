import itertools

import pytest

from helpers import ListBackend, config, loc, make_instance, make_trace, poc
from pocharness.errors import CalledOnValidVerdict, EpisodeNotSuccessful, FixtureMissing, NoGroundTruth
from pocharness.exec_runner import TIMEOUT_EXIT_CODE, RunOutcome
from pocharness.trace_engine import parse_dynamic_log
from pocharness.validation_loop import (
    AttemptRecord,
    EpisodeResult,
    PostHocVerdict,
    ValidationVerdict,
    episode_ref,
    instance_succeeded,
    make_feedback,
    posthoc_validate,
    run_episode,
    run_instance,
    validate,
)

TRACE = make_trace("t1", ["web.Ctl.get", "svc.Svc.find", "db.Dao.query"])
SRC, MID, SINK = "call web.Ctl.get Ctl.java:1", "call svc.Svc.find Svc.java:2", "call db.Dao.query Dao.java:3"


def _outcome(code=0, output="", log="", timed_out=False):
    return RunOutcome(TIMEOUT_EXIT_CODE if timed_out else code, output, parse_dynamic_log(log), 1, timed_out)


# --- validate ----------------------------------------------------------------


@pytest.mark.parametrize("code,marker,sink", list(itertools.product([0, 1], [True, False], [True, False])))
def test_validity_truth_table(tmp_path, code, marker, sink):
    out = _outcome(code, "[VULN]\n" if marker else "ok\n", "EVT db.Dao.query Dao.java:3\n" if sink else "")
    multi = validate(out, TRACE, config(tmp_path))
    assert multi.valid == (code == 0 and marker and sink)
    single = validate(out, None, config(tmp_path, mode="no_trace"))
    assert single.valid == (code == 0 and marker)
    assert single.sink_reached is None


def test_timeout_is_never_valid(tmp_path):
    out = _outcome(output="[VULN]", log="EVT db.Dao.query Dao.java:3", timed_out=True)
    assert not validate(out, TRACE, config(tmp_path)).valid


def test_custom_marker(tmp_path):
    out = _outcome(output="[VULN]")
    assert not validate(out, None, config(tmp_path, mode="no_trace", marker="PWNED")).valid


def test_multi_trace_validation_needs_a_trace(tmp_path):
    with pytest.raises(ValueError):
        validate(_outcome(), None, config(tmp_path))


def test_verdict_serializes_not_applicable():
    v = ValidationVerdict(True, True, None)
    assert v.to_dict()["sink_reached"] == "not_applicable"
    assert ValidationVerdict.from_dict(v.to_dict()) == v


# --- feedback ----------------------------------------------------------------


def test_feedback_lists_each_failed_check(tmp_path):
    out = _outcome(2, "Exception in main\n", "EVT web.Ctl.get Ctl.java:1\n")
    verdict = validate(out, TRACE, config(tmp_path))
    fb = make_feedback(verdict, out, TRACE)
    assert "exited with status 2" in fb
    assert "success marker [VULN]" in fb
    assert "sink of trace t1 was not executed: db.Dao.query at Dao.java:12" in fb
    assert "```\nException in main\n```" in fb
    assert "1/3 steps executed" in fb


def test_feedback_for_timeout(tmp_path):
    out = _outcome(output="", timed_out=True)
    fb = make_feedback(validate(out, None, config(tmp_path, mode="no_trace")), out, None)
    assert "time limit" in fb and "(no output)" in fb
    assert "steps executed" not in fb


def test_feedback_caps_output(tmp_path):
    out = _outcome(1, "y" * 10000)
    fb = make_feedback(validate(out, None, config(tmp_path, mode="no_trace")), out, None, output_cap=100)
    assert "y" * 100 + "\n[... 9900 more bytes omitted ...]" in fb
    assert "y" * 101 not in fb


def test_feedback_refuses_valid_verdict(tmp_path):
    out = _outcome(0, "[VULN]")
    with pytest.raises(CalledOnValidVerdict):
        make_feedback(validate(out, None, config(tmp_path, mode="no_trace")), out, None)


# --- episodes ----------------------------------------------------------------

GOOD = poc(SRC, MID, SINK, "print [VULN] confirmed")
NO_SINK = poc(SRC, "print [VULN] maybe")
CRASH = poc("print boom", "exit 1")


@pytest.mark.parametrize("budget", [1, 3, 5])
@pytest.mark.parametrize("success_at", [None, 0, 2, 4])
def test_episode_stops_at_success_or_budget(tmp_path, budget, success_at):
    replies = [GOOD if i == success_at else NO_SINK for i in range(5)]
    backend = ListBackend(replies)
    ep = run_episode(make_instance(traces=(TRACE,)), TRACE, backend, config(tmp_path, budget=budget))
    expected = budget if success_at is None or success_at >= budget else success_at + 1
    assert len(ep.attempts) == expected == len(backend.prompts)
    assert ep.succeeded == (success_at is not None and success_at < budget)
    assert all(not a.verdict.valid for a in ep.attempts[:-1])


def test_feedback_is_carried_into_next_prompt_only(tmp_path):
    backend = ListBackend([CRASH, NO_SINK, GOOD])
    ep = run_episode(make_instance(traces=(TRACE,)), TRACE, backend, config(tmp_path, budget=5))
    assert [a.verdict.valid for a in ep.attempts] == [False, False, True]
    fb0, fb1 = ep.attempts[0].feedback_issued, ep.attempts[1].feedback_issued
    assert fb0 in backend.prompts[1] and fb1 in backend.prompts[2]
    assert fb0 not in backend.prompts[2]
    assert ep.attempts[2].feedback_issued is None
    assert "exited with status 1" in fb0 and "was not executed" in fb1


def test_no_feedback_after_last_attempt(tmp_path):
    ep = run_episode(make_instance(traces=(TRACE,)), TRACE, ListBackend([CRASH, CRASH]), config(tmp_path, budget=2))
    assert ep.attempts[0].feedback_issued and ep.attempts[1].feedback_issued is None


def test_episode_records_digests_and_session(tmp_path):
    backend = ListBackend([GOOD])
    seen = []
    ep = run_episode(make_instance(traces=(TRACE,)), TRACE, backend, config(tmp_path),
                     on_attempt=lambda ref, n, p, s: seen.append((ref, n, s)))
    assert backend.sessions == ["CVE-2000-0001__t1"]
    assert seen == [(ep.episode_ref, 0, GOOD)]
    assert ep.episode_ref == "CVE-2000-0001__t1__none_multi_trace"
    assert ep.trace_steps == 3 and ep.final_coverage.steps_executed == 3
    assert len(ep.attempts[0].candidate_digest) == 64


def test_no_trace_episode(tmp_path):
    backend = ListBackend([poc("print [VULN] ok")])
    ep = run_episode(make_instance(), None, backend, config(tmp_path, mode="no_trace"))
    assert ep.succeeded and ep.mode == "no_trace" and ep.trace_id is None
    assert ep.final_coverage is None
    assert backend.sessions == ["CVE-2000-0001__no_trace"]


def test_episode_round_trips_through_dict(tmp_path):
    ep = run_episode(make_instance(traces=(TRACE,)), TRACE, ListBackend([CRASH, GOOD]), config(tmp_path))
    again = EpisodeResult.from_dict(ep.to_dict())
    assert again == ep


def test_episode_invariants():
    v_ok = ValidationVerdict(True, True, True)
    v_bad = ValidationVerdict(False, False, False)
    out = _outcome()

    def rec(i, v):
        return AttemptRecord(i, "c", "p", out, v, None, {})

    with pytest.raises(ValueError):
        EpisodeResult("i", "CWE-1", "multi_trace", "x", "t", (rec(0, v_bad), rec(1, v_bad)), budget=1)
    with pytest.raises(ValueError):
        EpisodeResult("i", "CWE-1", "multi_trace", "x", "t", (rec(0, v_ok), rec(1, v_bad)), budget=3)
    with pytest.raises(ValueError):
        EpisodeResult("i", "CWE-1", "multi_trace", "x", "t", (rec(1, v_bad),), budget=3)


def test_episode_ref_is_filesystem_safe():
    ref = episode_ref("CVE-1/2", "a b", "remote/gpt:4")
    assert "/" not in ref and " " not in ref and ":" not in ref


# --- instances ---------------------------------------------------------------


def test_run_instance_runs_top_k_traces(tmp_path):
    traces = tuple(make_trace(f"t{i}", ["web.Ctl.get", f"db.Dao{i}.query"]) for i in range(4))
    backend = ListBackend([NO_SINK])
    eps = run_instance(make_instance(traces=traces), backend, config(tmp_path, top_k=2, budget=1))
    assert [e.trace_id for e in eps] == ["t0", "t1"]
    assert not instance_succeeded(eps)


def test_run_instance_stop_early(tmp_path):
    traces = (TRACE, make_trace("t2", ["web.Ctl.get", "db.Dao.query"]))
    eps = run_instance(make_instance(traces=traces), ListBackend([GOOD]), config(tmp_path, stop_early=True))
    assert len(eps) == 1 and instance_succeeded(eps)


def test_run_instance_without_traces_records_failure(tmp_path):
    recorded = []
    eps = run_instance(make_instance(), ListBackend([]), config(tmp_path), on_episode=recorded.append)
    assert eps == recorded and eps[0].error == "no static traces available"
    assert not eps[0].succeeded


def test_harness_error_becomes_error_episode(tmp_path):
    class Broken:
        kind = "scripted"

        def complete(self, prompt, session_id, attempt_index):
            raise FixtureMissing("gone")

    eps = run_instance(make_instance(traces=(TRACE,)), Broken(), config(tmp_path))
    assert eps[0].error.startswith("FixtureMissing") and eps[0].attempts == ()


# --- post-hoc ------------------------------------------------------------------


def _success(tmp_path, source, gt):
    inst = make_instance(traces=(TRACE,), ground_truth=gt)
    return run_episode(inst, TRACE, ListBackend([source]), config(tmp_path))


def test_posthoc_hit_with_evidence(tmp_path):
    ep = _success(tmp_path, GOOD, (loc("db.Dao.query", "src/x/Dao.java", 3),))
    v = posthoc_validate(ep, (loc("db.Dao.query", "src/x/Dao.java", 3),))
    assert v.ground_truth_hit and v.matched_events == (2,)


def test_posthoc_any_of_semantics(tmp_path):
    gt = (loc("x.Other.m"), loc("svc.Svc.find"))
    ep = _success(tmp_path, GOOD, gt)
    v = posthoc_validate(ep, gt)
    assert v.matched_locations == (loc("svc.Svc.find"),)
    assert v.ground_truth_hit


def test_posthoc_miss_on_valid_episode(tmp_path):
    gt = (loc("x.Real.vuln"),)
    ep = _success(tmp_path, GOOD, gt)
    assert ep.succeeded
    assert not posthoc_validate(ep, gt).ground_truth_hit


def test_posthoc_requires_success_and_ground_truth(tmp_path):
    failed = run_episode(make_instance(traces=(TRACE,)), TRACE, ListBackend([CRASH]), config(tmp_path, budget=1))
    with pytest.raises(EpisodeNotSuccessful):
        posthoc_validate(failed, (loc("a.B.c"),))
    ok = _success(tmp_path, GOOD, (loc("a.B.c"),))
    with pytest.raises(NoGroundTruth):
        posthoc_validate(ok, ())


def test_posthoc_verdict_round_trip():
    v = PostHocVerdict((loc("a.B.c"),), (4,))
    assert PostHocVerdict.from_dict(v.to_dict()) == v
