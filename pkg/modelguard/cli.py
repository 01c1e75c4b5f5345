"""Command-line surface: platform setup, vendor endpoint, device runs, bench and attack demos.

Options fall back to ``OMG_*`` environment variables (see :mod:`modelguard.config`)
and then to built-in defaults. Failures exit with the code of their error class;
usage errors exit with 2.
"""
from __future__ import annotations

import logging
from contextlib import ExitStack
from pathlib import Path
from typing import List, NoReturn, Optional

import typer
import uvicorn

from .attacks import SCENARIOS, run_scenario
from .bench import load_test_set, overhead_percent, run_protected, run_unprotected
from .config import get_settings
from .crypto import Certificate, PlatformIdentity, generate_platform_identity, measure, random_bytes
from .demo import DEFAULT_CODE_IMAGE, KEYWORDS, demo_model_bytes, keyword_clip, write_test_set
from .enclave import EnclaveHost, SimulatedPeripheral
from .errors import ModelGuardError
from .features import read_wav, write_wav
from .inference import LABELS, load_model
from .main import create_app
from .modelstore import ModelStore
from .protocol import ProtocolSession, UserClient, open_session
from .tracing import format_kv
from .transport import HttpVendorChannel, LoopbackVendorChannel
from .vendor import VendorService

logger = logging.getLogger(__name__)

DEFENSE_FAILED_EXIT = 25
SEED_FILE = "platform.seed"
CERT_FILE = "platform.cert"

app = typer.Typer(add_completion=False, help="Offline Model Guard: protected on-device keyword spotting.")
platform_app = typer.Typer(add_completion=False, help="Device platform identity.")
app.add_typer(platform_app, name="platform")


@app.callback()
def main(log_level: Optional[str] = typer.Option(None, help="Logging level (default: OMG_LOG_LEVEL or INFO).")) -> None:
    level = (log_level or get_settings().log_level).upper()
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _fail(exc: ModelGuardError) -> NoReturn:
    typer.echo(f"error[{exc.code}]: {exc.detail}", err=True)
    raise typer.Exit(exc.exit_code)


def _usage(message: str) -> NoReturn:
    typer.echo(f"usage error: {message}", err=True)
    raise typer.Exit(2)


def _read_file(option: str, value: Optional[Path], fallback: str) -> bytes:
    path = value or (Path(fallback) if fallback else None)
    if path is None:
        _usage(f"{option} is required (or set the matching OMG_ variable)")
    if not path.is_file():
        _usage(f"{option}: no such file {path}")
    return path.read_bytes()


def _parse_seed(source: str, text: str) -> bytes:
    try:
        return bytes.fromhex(text.strip())
    except ValueError:
        _usage(f"{source} must hold a hex seed")


def _load_platform(seed_file: Optional[Path]) -> PlatformIdentity:
    if seed_file is not None:
        if not seed_file.is_file():
            _usage(f"--platform-seed: no such file {seed_file}")
        return generate_platform_identity(_parse_seed(f"--platform-seed {seed_file}", seed_file.read_text()))
    seed_hex = get_settings().platform_seed
    if seed_hex:
        return generate_platform_identity(_parse_seed("OMG_PLATFORM_SEED", seed_hex))
    logger.warning("No platform seed configured; using an ephemeral platform identity")
    return generate_platform_identity()


# ---------------------------------------------------------------------------
# platform / fixtures
# ---------------------------------------------------------------------------

@platform_app.command("init")
def platform_init(
    out: Path = typer.Option(Path("."), help="Directory for platform.seed and platform.cert."),
    seed: Optional[str] = typer.Option(None, help="Hex seed; random when omitted."),
) -> None:
    """Create the device root identity and its self-signed certificate."""
    try:
        raw = bytes.fromhex(seed) if seed else random_bytes(32)
    except ValueError:
        _usage("--seed must be hex")
    platform = generate_platform_identity(raw)
    out.mkdir(parents=True, exist_ok=True)
    (out / SEED_FILE).write_text(raw.hex() + "\n")
    (out / CERT_FILE).write_bytes(platform.platform_cert.to_bytes())
    typer.echo(format_kv("platform", pk=platform.public_key, cert=str(out / CERT_FILE)))


@app.command()
def fixtures(
    out: Path = typer.Option(Path("fixtures"), help="Output directory."),
    encoding: str = typer.Option("float32", help="TCV1 weight encoding: float32 or int8."),
    per_class: int = typer.Option(10, min=1, help="Test clips per keyword."),
    seed: int = typer.Option(0, help="Test-set random seed."),
) -> None:
    """Write the demo model, the enclave code image, a labelled test set and microphone clips."""
    if encoding not in ("float32", "int8"):
        _usage("--encoding must be float32 or int8")
    out.mkdir(parents=True, exist_ok=True)
    model_path = out / "model.tcv1"
    model_path.write_bytes(demo_model_bytes(encoding))  # type: ignore[arg-type]
    (out / "code.img").write_bytes(DEFAULT_CODE_IMAGE)
    clips = write_test_set(out / "testset", per_class, seed)
    mic = out / "mic"
    mic.mkdir(exist_ok=True)
    for i, label in enumerate(LABELS):
        (mic / f"{i:02d}_{label}.wav").write_bytes(write_wav(keyword_clip(label)))
    typer.echo(format_kv(
        "fixtures", model=str(model_path), bytes=model_path.stat().st_size,
        test_clips=len(clips), keywords=len(KEYWORDS), mic_clips=len(LABELS),
    ))


# ---------------------------------------------------------------------------
# vendor
# ---------------------------------------------------------------------------

@app.command("vendor-serve")
def vendor_serve(
    model_file: Optional[Path] = typer.Option(None, help="TCV1 model to protect (OMG_MODEL_FILE)."),
    code_image: Optional[Path] = typer.Option(None, help="Enclave code image whose measurement is trusted (OMG_CODE_IMAGE)."),
    platform_cert: Optional[List[Path]] = typer.Option(None, help="Trusted platform root certificate; repeatable (OMG_PLATFORM_CERT)."),
    host: Optional[str] = typer.Option(None, help="Listen address (OMG_VENDOR_HOST)."),
    port: Optional[int] = typer.Option(None, help="Listen port (OMG_VENDOR_PORT)."),
    auto_authorize: Optional[bool] = typer.Option(None, "--auto-authorize/--no-auto-authorize", help="License newly attested enclaves."),
    admin_token: Optional[str] = typer.Option(None, help="Token for /admin routes (OMG_ADMIN_TOKEN)."),
) -> None:
    """Serve attestation, provisioning, key release and license administration over HTTP."""
    settings = get_settings()
    model = _read_file("--model-file", model_file, settings.model_file)
    code = _read_file("--code-image", code_image, settings.code_image)
    cert_paths = platform_cert or ([Path(settings.platform_cert)] if settings.platform_cert else [])
    if not cert_paths:
        _usage("at least one --platform-cert is required")
    try:
        load_model(model)
        roots = [Certificate.from_bytes(_read_file("--platform-cert", p, "")) for p in cert_paths]
        vendor = VendorService(model, measure(code), roots, auto_authorize=auto_authorize)
    except ModelGuardError as exc:
        _fail(exc)
    uvicorn.run(
        create_app(vendor, admin_token=admin_token),
        host=host or settings.vendor_host,
        port=port or settings.vendor_port,
        log_level=settings.log_level.lower(),
    )


# ---------------------------------------------------------------------------
# device side
# ---------------------------------------------------------------------------

def _open_device_session(
    stack: ExitStack,
    *,
    code_image: Optional[Path],
    storage_dir: Optional[Path],
    vendor_url: Optional[str],
    model_file: Optional[Path],
    platform_seed: Optional[Path],
    auto_authorize: Optional[bool],
    peripheral: Optional[SimulatedPeripheral] = None,
) -> ProtocolSession:
    settings = get_settings()
    code = _read_file("--code-image", code_image, settings.code_image) if (code_image or settings.code_image) else DEFAULT_CODE_IMAGE
    platform = _load_platform(platform_seed)
    expected = measure(code)
    if vendor_url:
        channel = stack.enter_context(HttpVendorChannel(vendor_url))
    else:
        model = _read_file("--model-file", model_file, settings.model_file) if (model_file or settings.model_file) else demo_model_bytes()
        vendor = VendorService(model, expected, [platform.platform_cert], auto_authorize=auto_authorize)
        channel = LoopbackVendorChannel(vendor)
        logger.info("No --vendor-url; running the vendor in-process")
    store = ModelStore(storage_dir or Path(settings.storage_dir))
    host = EnclaveHost(platform)
    user = UserClient(platform.platform_cert, expected)
    session = stack.enter_context(open_session(host, code, channel, store, user, peripheral=peripheral))
    session.run_preparation()
    session.run_initialization()
    return session


def _print_result(source: str, label: str, score: float) -> None:
    typer.echo(f"{source}\t{label}\t{score:.4f}")


@app.command("enclave-run")
def enclave_run(
    mic_fixture: Path = typer.Option(..., help="Directory of WAV clips feeding the secure microphone."),
    code_image: Optional[Path] = typer.Option(None, help="Enclave code image (OMG_CODE_IMAGE; demo image otherwise)."),
    storage_dir: Optional[Path] = typer.Option(None, help="Untrusted storage for the sealed model (OMG_STORAGE_DIR)."),
    vendor_url: Optional[str] = typer.Option(None, help="Vendor endpoint, e.g. http://127.0.0.1:8750."),
    model_file: Optional[Path] = typer.Option(None, help="Model for an in-process vendor when no --vendor-url is given."),
    platform_seed: Optional[Path] = typer.Option(None, help="platform.seed written by `platform init`."),
    auto_authorize: Optional[bool] = typer.Option(None, "--auto-authorize/--no-auto-authorize", help="In-process vendor licensing."),
) -> None:
    """Run preparation and initialization, then answer every queued microphone clip."""
    try:
        peripheral = SimulatedPeripheral.from_directory(mic_fixture)
        with ExitStack() as stack:
            session = _open_device_session(
                stack, code_image=code_image, storage_dir=storage_dir, vendor_url=vendor_url,
                model_file=model_file, platform_seed=platform_seed, auto_authorize=auto_authorize,
                peripheral=peripheral,
            )
            n = 0
            while len(peripheral):
                result = session.handle_query()
                _print_result(f"mic#{n}", result.label, result.score)
                n += 1
            ledger = session.instance.switch_ledger
            typer.echo(format_kv("enclave", queries=n, world_switches=ledger.count, switch_ms=ledger.simulated_ms))
    except ModelGuardError as exc:
        _fail(exc)


@app.command()
def transcribe(
    wav: Optional[Path] = typer.Argument(None, help="16 kHz mono 16-bit WAV recording."),
    mic_fixture: Optional[Path] = typer.Option(None, help="Read the next clip from this microphone fixture instead."),
    code_image: Optional[Path] = typer.Option(None, help="Enclave code image (OMG_CODE_IMAGE; demo image otherwise)."),
    storage_dir: Optional[Path] = typer.Option(None, help="Untrusted storage for the sealed model (OMG_STORAGE_DIR)."),
    vendor_url: Optional[str] = typer.Option(None, help="Vendor endpoint, e.g. http://127.0.0.1:8750."),
    model_file: Optional[Path] = typer.Option(None, help="Model for an in-process vendor when no --vendor-url is given."),
    platform_seed: Optional[Path] = typer.Option(None, help="platform.seed written by `platform init`."),
    auto_authorize: Optional[bool] = typer.Option(None, "--auto-authorize/--no-auto-authorize", help="In-process vendor licensing."),
) -> None:
    """Classify one recording inside the enclave and print its label and score."""
    if (wav is None) == (mic_fixture is None):
        _usage("give either a WAV path or --mic-fixture")
    try:
        clip = None
        peripheral = None
        if wav is not None:
            if not wav.is_file():
                _usage(f"no such file {wav}")
            clip = read_wav(wav.read_bytes())
        else:
            peripheral = SimulatedPeripheral.from_directory(mic_fixture)
        with ExitStack() as stack:
            session = _open_device_session(
                stack, code_image=code_image, storage_dir=storage_dir, vendor_url=vendor_url,
                model_file=model_file, platform_seed=platform_seed, auto_authorize=auto_authorize,
                peripheral=peripheral,
            )
            result = session.handle_query(clip)
            _print_result(str(wav) if wav is not None else "mic", result.label, result.score)
    except ModelGuardError as exc:
        _fail(exc)


# ---------------------------------------------------------------------------
# bench / attacks
# ---------------------------------------------------------------------------

@app.command()
def bench(
    test_set: Path = typer.Argument(..., help="Directory of WAV clips, optionally one sub-directory per label."),
    protected: bool = typer.Option(True, "--protected/--unprotected", help="Run through the enclave or directly."),
    compare: bool = typer.Option(False, help="Run both modes and report overhead and label agreement."),
    model_file: Optional[Path] = typer.Option(None, help="TCV1 model (OMG_MODEL_FILE; demo model otherwise)."),
    code_image: Optional[Path] = typer.Option(None, help="Enclave code image (OMG_CODE_IMAGE; demo image otherwise)."),
) -> None:
    """Per-clip runtime, real-time factor, world-switch ledger and accuracy."""
    settings = get_settings()
    if not test_set.is_dir():
        _usage(f"no such directory {test_set}")
    try:
        model = _read_file("--model-file", model_file, settings.model_file) if (model_file or settings.model_file) else demo_model_bytes()
        code = _read_file("--code-image", code_image, settings.code_image) if (code_image or settings.code_image) else DEFAULT_CODE_IMAGE
        clips = load_test_set(test_set)
        if not clips:
            _usage(f"no WAV files under {test_set}")
        reports = []
        if compare or not protected:
            reports.append(run_unprotected(clips, model))
        if compare or protected:
            reports.append(run_protected(clips, model, code))
    except ModelGuardError as exc:
        _fail(exc)
    for report in reports:
        typer.echo(report.table())
        typer.echo("")
    for report in reports:
        for line in report.lines():
            typer.echo(line)
    if compare:
        unprotected, protected_report = reports
        typer.echo(format_kv(
            "compare",
            labels_identical=str(unprotected.labels == protected_report.labels).lower(),
            overhead_pct=overhead_percent(protected_report, unprotected),
            switch_ms_per_query=protected_report.switch_ms_per_query,
        ))


@app.command("demo-attack")
def demo_attack(
    scenario: str = typer.Argument("all", help=f"One of: {', '.join(SCENARIOS)}, or all."),
) -> None:
    """Drive adversary scenarios and check that each documented defense fires."""
    names = list(SCENARIOS) if scenario == "all" else [scenario]
    if any(name not in SCENARIOS for name in names):
        _usage(f"unknown scenario {scenario!r}")
    failed = False
    for name in names:
        try:
            outcome = run_scenario(name)
        except ModelGuardError as exc:
            typer.echo(f"{name}: FAIL (unexpected {exc.code}: {exc.detail})")
            failed = True
            continue
        typer.echo(outcome.line())
        failed = failed or not outcome.passed
    if failed:
        raise typer.Exit(DEFENSE_FAILED_EXIT)


if __name__ == "__main__":
    app()
