import os
from pathlib import Path

import pytest

from modelguard.bench import BenchReport, load_test_set, overhead_percent, run_protected, run_unprotected
from modelguard.demo import demo_test_set, keyword_clip, write_test_set
from modelguard.features import write_wav
from modelguard.tracing import parse_kv


@pytest.fixture(scope="module")
def clips():
    return [(f"{label}-{i}", clip, label) for i, (label, clip) in enumerate(demo_test_set(per_class=10, seed=3))]


@pytest.fixture(scope="module")
def reports(clips, tmp_path_factory, model_int8):
    unprotected = run_unprotected(clips, model_int8)
    protected = run_protected(clips, model_int8, storage_dir=tmp_path_factory.mktemp("bench"))
    return unprotected, protected


def test_protection_does_not_change_labels(clips, reports):
    unprotected, protected = reports
    assert len(clips) == 100
    assert protected.queries == unprotected.queries == 100
    assert protected.labels == unprotected.labels


def test_demo_model_accuracy(reports):
    unprotected, protected = reports
    assert unprotected.accuracy >= 0.9
    assert protected.accuracy == unprotected.accuracy


def test_world_switch_accounting(reports):
    _, protected = reports
    assert protected.switch_count == 200
    assert protected.switch_ms == pytest.approx(60.0)
    assert protected.switch_ms_per_query == pytest.approx(0.6)


def test_real_time_factor(reports):
    for report in reports:
        assert report.total_audio_s == pytest.approx(100.0)
        assert report.real_time_factor == pytest.approx(report.total_runtime_ms / 1000.0 / 100.0)
        assert report.real_time_factor <= 0.1
        assert report.mean_runtime_ms <= 100.0


def test_report_lines(reports):
    _, protected = reports
    lines = [parse_kv(line) for line in protected.lines()]
    assert [l["event"] for l in lines[:-1]] == ["query"] * 100
    summary = lines[-1]
    assert summary["event"] == "bench"
    assert summary["mode"] == "protected"
    assert summary["queries"] == "100"
    assert summary["world_switches"] == "200"
    assert "real-time factor" in protected.table()


def test_protected_overhead_stays_within_ten_percent(clips, model_int8, tmp_path):
    # best of three median per-clip runtimes; 0.5 ms absorbs timer jitter on tiny runtimes
    subset = clips[::5]
    protected, unprotected = [], []
    for attempt in range(3):
        unprotected.append(run_unprotected(subset, model_int8).median_runtime_ms)
        protected.append(run_protected(subset, model_int8, storage_dir=tmp_path / str(attempt)).median_runtime_ms)
    assert min(protected) <= min(unprotected) * 1.10 + 0.5


def test_median_runtime():
    report = BenchReport(False)
    assert report.median_runtime_ms == 0.0
    for ms in (1.0, 50.0, 2.0):
        report.add("a", "yes", "yes", ms, 1.0)
    assert report.median_runtime_ms == 2.0


def test_overhead_percent():
    fast, slow = BenchReport(False), BenchReport(True)
    fast.add("a", "yes", "yes", 10.0, 1.0)
    slow.add("a", "yes", "yes", 11.0, 1.0)
    assert overhead_percent(slow, fast) == pytest.approx(10.0)
    assert overhead_percent(slow, BenchReport(False)) == 0.0


def test_accuracy_ignores_rejection_classes_and_unlabelled_clips():
    report = BenchReport(False)
    assert report.accuracy is None
    report.add("a", "yes", "yes", 1.0, 1.0)
    report.add("b", "no", "yes", 1.0, 1.0)
    report.add("c", "yes", "silence", 1.0, 1.0)
    report.add("d", "yes", None, 1.0, 1.0)
    assert report.accuracy == pytest.approx(0.5)


def test_load_test_set_uses_directory_labels(tmp_path):
    write_test_set(tmp_path, per_class=1, seed=0)
    (tmp_path / "loose.wav").write_bytes(write_wav(keyword_clip("yes")))
    loaded = load_test_set(tmp_path)
    assert len(loaded) == 11
    expected = {Path(name).name: label for name, _, label in loaded}
    assert expected["loose.wav"] is None
    assert expected["yes_00.wav"] == "yes"


TRAINED_MODEL = os.environ.get("OMG_TRAINED_MODEL")
TRAINED_TESTSET = os.environ.get("OMG_TRAINED_TESTSET")


@pytest.mark.skipif(not (TRAINED_MODEL and TRAINED_TESTSET), reason="set OMG_TRAINED_MODEL and OMG_TRAINED_TESTSET")
def test_trained_model_accuracy_through_the_enclave():
    clips = load_test_set(Path(TRAINED_TESTSET))
    report = run_protected(clips, Path(TRAINED_MODEL).read_bytes())
    assert report.accuracy is not None and report.accuracy >= 0.70
