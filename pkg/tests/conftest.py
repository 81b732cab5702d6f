import hashlib
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from viti import toy  # noqa: E402
from viti.runtime import Model, load_model, save_model  # noqa: E402
from viti.vnd import ProbeBank, load_bank, save_bank  # noqa: E402

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: list = []


@dataclass
class Trained:
    model: Model
    bank: ProbeBank
    train_seconds: float
    build_seconds: float


def _fingerprint() -> str:
    """Hash of the recipe and the code that produces the cached artifacts."""
    src = Path(toy.__file__).parent
    h = hashlib.sha256(repr(toy.RECIPE).encode())
    for name in ("toy.py", "synthtask.py", "runtime.py", "perturb.py", "vnd.py"):
        h.update((src / name).read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def trained(request) -> Trained:
    """The reference toy model and probe bank, trained once and cached between sessions.

    The wall time of the original build is stored next to the artifacts so
    runtime bounds can still be checked when the cache is hit.
    """
    cache = Path(request.config.cache.mkdir("viti-toy")) / _fingerprint()
    model_path, bank_path, meta_path = cache / "model.bin", cache / "bank.vprb", cache / "meta.json"
    if model_path.exists() and bank_path.exists() and meta_path.exists():
        meta = json.loads(meta_path.read_text())
        return Trained(load_model(model_path), load_bank(bank_path), meta["train_seconds"], meta["build_seconds"])
    cache.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    run = toy.build()
    build_seconds = time.perf_counter() - t0
    save_model(run.model, model_path)
    save_bank(run.bank, bank_path)
    meta_path.write_text(json.dumps({"train_seconds": run.train_seconds, "build_seconds": build_seconds}))
    return Trained(run.model, run.bank, run.train_seconds, build_seconds)


def pytest_collection_modifyitems(items):
    # anything touching the trained toy is slow on a cold cache
    for item in items:
        if "trained" in getattr(item, "fixturenames", ()):
            item.add_marker(pytest.mark.slow)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
