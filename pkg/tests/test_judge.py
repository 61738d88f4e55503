import json

import httpx
import numpy as np
import pytest

from vtonflow.errors import GradeParseError, GradingError
from vtonflow.evaluation.judge import (
    ASPECTS, DEFAULT_REPEATS, GradeReport, HttpJudgeClient, Rubric, StubJudgeClient, frame_grid,
    grade_video, make_client, parse_grade,
)

GOOD = "TryOn: 80\nUser: 75.5\nMotion: 60\nVisual: 90\nOverall: 70"


@pytest.fixture
def video(rng):
    return rng.random((9, 16, 24, 3))


def test_parse_grade_well_formed():
    assert parse_grade(GOOD) == {"TryOn": 80.0, "User": 75.5, "Motion": 60.0, "Visual": 90.0,
                                 "Overall": 70.0}
    assert parse_grade("\n  " + GOOD.replace("\n", "\n\n") + "\n") == parse_grade(GOOD)


@pytest.mark.parametrize("text,needle", [
    (GOOD.replace("TryOn: 80", "TryOn: 150"), "outside"),
    (GOOD + "\nVisual: 10", "duplicate"),
    (GOOD.replace("Motion: 60\n", ""), "missing"),
    (GOOD + "\nStyle: 3", "unknown"),
    (GOOD.replace("User: 75.5", "User = 75"), "malformed"),
])
def test_parse_grade_errors_name_the_defect(text, needle):
    with pytest.raises(GradeParseError, match=needle):
        parse_grade(text)


def test_rubric_default_and_validation():
    r = Rubric.default()
    assert set(ASPECTS) <= set(r.aspects) and r.grid_frames >= 4
    assert all(a in r.prompt("red top") for a in ASPECTS)
    assert Rubric.from_dict(r.to_dict()).hash == r.hash
    with pytest.raises(ValueError):
        Rubric(r.name, r.preamble, {k: v for k, v in r.aspects.items() if k != "Motion"})
    with pytest.raises(ValueError):
        Rubric(r.name, r.preamble, r.aspects, grid_frames=3)


def test_frame_grid_layout(video):
    grid = frame_grid(video, 8)
    assert grid.shape == (3 * 16, 3 * 24, 3)
    assert np.allclose(grid[:16, :24], video[0]) and np.allclose(grid[16:32, 24:48], video[5])


def test_constant_stub(video):
    rep = grade_video(video, {}, n=5, client=StubJudgeClient(constant=70))
    for a in ASPECTS:
        assert rep.aspects[a].mean == 70.0 and rep.aspects[a].std == 0.0


def test_default_repeats_and_reproducibility(video, rng):
    ctx = {"user_image": rng.random((16, 16, 3)), "garments": [rng.random((16, 16, 3))],
           "caption": ["red", "top"]}
    a = grade_video(video, ctx)
    assert DEFAULT_REPEATS == 40 and all(s.n == 40 and len(s.raw) == 40 for s in a.aspects.values())
    b = grade_video(video, ctx, max_workers=4)
    assert a.to_json() == b.to_json()
    other = grade_video(video, {**ctx, "caption": "blue top"})
    assert other.to_json() != a.to_json()
    for s in a.aspects.values():
        assert s.mean == float(np.mean(s.raw)) and s.std == float(np.std(s.raw))
    with pytest.raises(ValueError):
        grade_video(video, ctx, n=0)


def test_report_from_grades_recomputable():
    grades = [parse_grade(GOOD), parse_grade(GOOD.replace("80", "60"))]
    rep = GradeReport.from_grades(grades, "h", "m")
    assert rep.aspects["TryOn"].mean == 70.0 and rep.aspects["TryOn"].std == 10.0
    assert json.loads(rep.to_json())["aspects"]["TryOn"]["raw"] == [80.0, 60.0]


class FlakyClient:
    model = "flaky"

    def __init__(self, replies):
        self.replies = list(replies)
        self.calls = 0

    def complete(self, prompt, images, index, attempt=0):
        self.calls += 1
        return self.replies.pop(0)


def test_retry_then_success(video):
    bad = GOOD.replace("Motion: 60\n", "")
    client = FlakyClient([bad, bad, GOOD])
    rep = grade_video(video, {}, n=1, client=client)
    assert client.calls == 3 and rep.aspects["Motion"].raw == [60.0]


def test_retries_exhausted(video):
    bad = GOOD.replace("Motion: 60\n", "")
    client = FlakyClient([bad] * 3)
    with pytest.raises(GradeParseError, match="Motion"):
        grade_video(video, {}, n=1, client=client)
    assert client.calls == 3


def _http(handler):
    return HttpJudgeClient("http://judge.invalid/grade", "m1", transport=httpx.MockTransport(handler))


@pytest.mark.parametrize("body", [
    {"text": GOOD}, {"output": GOOD}, {"choices": [{"message": {"content": GOOD}}]},
])
def test_http_client_reply_shapes(video, body, monkeypatch):
    seen = []
    monkeypatch.setenv("JUDGE_API_KEY", "secret")

    def handler(request):
        seen.append(request)
        return httpx.Response(200, json=body)

    rep = grade_video(video, {"garments": [video[0]]}, n=2, client=_http(handler))
    assert rep.model == "m1" and rep.aspects["Visual"].mean == 90.0
    payload = json.loads(seen[0].content)
    assert payload["model"] == "m1" and len(payload["images"]) == 2 and "TryOn" in payload["prompt"]
    assert seen[0].headers["authorization"] == "Bearer secret"


def test_http_errors_are_retried_then_fail(video):
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(500, json={})

    with pytest.raises(GradingError):
        grade_video(video, {}, n=1, client=_http(handler))
    assert len(calls) == 3
    with pytest.raises(GradingError):
        grade_video(video, {}, n=1, client=_http(lambda r: httpx.Response(200, json={"x": 1})))


def test_make_client():
    assert isinstance(make_client({"client": "stub"}), StubJudgeClient)
    assert isinstance(make_client({"client": "http", "endpoint": "http://x", "model": "m"}), HttpJudgeClient)
    with pytest.raises(ValueError):
        make_client({"client": "carrier-pigeon"})
