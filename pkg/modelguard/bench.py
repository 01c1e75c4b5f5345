"""Runtime harness: the same clips with and without the enclave in the path."""
from __future__ import annotations

import logging
import statistics
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from .demo import DEFAULT_CODE_IMAGE, LocalDeployment
from .enclave import SimulatedPeripheral
from .features import AudioClip, make_fingerprint, read_wav
from .inference import LABELS, classify, load_model
from .tracing import format_kv

logger = logging.getLogger(__name__)

REJECTION_LABELS = ("silence", "unknown")

LabelledClip = Tuple[str, AudioClip, Optional[str]]


def load_test_set(directory: Path) -> List[LabelledClip]:
    """Every WAV under ``directory``; a parent directory named after a label is the expected label."""
    clips = []
    for path in sorted(Path(directory).rglob("*.wav")):
        expected = path.parent.name if path.parent.name in LABELS else None
        clips.append((str(path), read_wav(path.read_bytes()), expected))
    return clips


@dataclass
class BenchReport:
    protected: bool
    names: List[str] = field(default_factory=list)
    labels: List[str] = field(default_factory=list)
    expected: List[Optional[str]] = field(default_factory=list)
    runtimes_ms: List[float] = field(default_factory=list)
    audio_seconds: List[float] = field(default_factory=list)
    switch_count: int = 0
    switch_ms: float = 0.0

    def add(self, name: str, label: str, expected: Optional[str], runtime_ms: float, audio_s: float) -> None:
        self.names.append(name)
        self.labels.append(label)
        self.expected.append(expected)
        self.runtimes_ms.append(runtime_ms)
        self.audio_seconds.append(audio_s)

    @property
    def queries(self) -> int:
        return len(self.runtimes_ms)

    @property
    def total_runtime_ms(self) -> float:
        return sum(self.runtimes_ms)

    @property
    def mean_runtime_ms(self) -> float:
        return self.total_runtime_ms / self.queries if self.queries else 0.0

    @property
    def median_runtime_ms(self) -> float:
        return statistics.median(self.runtimes_ms) if self.runtimes_ms else 0.0

    @property
    def total_audio_s(self) -> float:
        return sum(self.audio_seconds)

    @property
    def real_time_factor(self) -> float:
        if not self.total_audio_s:
            return 0.0
        return (self.total_runtime_ms / 1000.0) / self.total_audio_s

    @property
    def switch_ms_per_query(self) -> float:
        return self.switch_ms / self.queries if self.queries else 0.0

    @property
    def accuracy(self) -> Optional[float]:
        """Share of correctly labelled clips, rejection classes excluded; None without labels."""
        scored = [(got, want) for got, want in zip(self.labels, self.expected)
                  if want is not None and want not in REJECTION_LABELS]
        if not scored:
            return None
        return sum(got == want for got, want in scored) / len(scored)

    @property
    def mode(self) -> str:
        return "protected" if self.protected else "unprotected"

    def lines(self) -> List[str]:
        out = [
            format_kv("query", mode=self.mode, clip=name, label=label, expected=expected or "-", runtime_ms=ms)
            for name, label, expected, ms in zip(self.names, self.labels, self.expected, self.runtimes_ms)
        ]
        summary = dict(
            mode=self.mode,
            queries=self.queries,
            mean_runtime_ms=self.mean_runtime_ms,
            total_runtime_ms=self.total_runtime_ms,
            audio_s=self.total_audio_s,
            rtf=f"{self.real_time_factor:.6f}",
            world_switches=self.switch_count,
            switch_ms=self.switch_ms,
        )
        if self.accuracy is not None:
            summary["accuracy"] = self.accuracy
        out.append(format_kv("bench", **summary))
        return out

    def table(self) -> str:
        acc = f"{100 * self.accuracy:.1f} %" if self.accuracy is not None else "n/a"
        rows = [
            ("mode", self.mode),
            ("queries", str(self.queries)),
            ("accuracy", acc),
            ("mean runtime", f"{self.mean_runtime_ms:.2f} ms"),
            ("real-time factor", f"{self.real_time_factor:.4f}x"),
            ("world switches", f"{self.switch_count} ({self.switch_ms:.1f} ms simulated)"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)


def run_unprotected(clips: Sequence[LabelledClip], model_bytes: bytes) -> BenchReport:
    model = load_model(model_bytes)
    report = BenchReport(protected=False)
    for name, clip, expected in clips:
        start = time.perf_counter()
        label, _ = classify(make_fingerprint(clip), model)
        report.add(name, label, expected, (time.perf_counter() - start) * 1000.0, clip.duration_s)
    return report


def run_protected(
    clips: Sequence[LabelledClip],
    model_bytes: bytes,
    code: bytes = DEFAULT_CODE_IMAGE,
    storage_dir: Optional[Path] = None,
) -> BenchReport:
    """Provision the model into a simulated enclave, then feed every clip through its microphone."""
    with tempfile.TemporaryDirectory(prefix="omg-bench-") as scratch:
        deployment = LocalDeployment.create(Path(storage_dir or scratch), model=model_bytes, code=code, auto_authorize=True)
        peripheral = SimulatedPeripheral()
        report = BenchReport(protected=True)
        with deployment.ready_session(peripheral) as session:
            ledger = session.instance.switch_ledger
            base_count = ledger.count
            for name, clip, expected in clips:
                peripheral.push(clip)
                start = time.perf_counter()
                result = session.handle_query()
                report.add(name, result.label, expected, (time.perf_counter() - start) * 1000.0, clip.duration_s)
            report.switch_count = ledger.count - base_count
            report.switch_ms = report.switch_count * ledger.cost_ms
    return report


def overhead_percent(protected: BenchReport, unprotected: BenchReport) -> float:
    """Wall-clock cost of the enclave path relative to direct inference."""
    if not unprotected.total_runtime_ms:
        return 0.0
    return 100.0 * (protected.total_runtime_ms - unprotected.total_runtime_ms) / unprotected.total_runtime_ms
