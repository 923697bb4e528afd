import numpy as np
import pytest

from langadapt.model import ModelConfig, init_model
from langadapt.numerics import RngState
from langadapt.tokenizer import train_bpe

SMALL_CORPUS = [
    "Il gatto mangia il pesce nel giardino.",
    "La ragazza vede la casa di notte.",
    "The dog eats the bread at home.",
    "The opposite of hot is cold.",
    "Quanto fa 2 più 3? 2 più 3 fa 5.",
    "### Instruction:\nGive the Italian word.\n\n### Response:\ncane",
]


@pytest.fixture(scope="session")
def small_vocab():
    return train_bpe(SMALL_CORPUS * 4, 256 + 4 + 40)


@pytest.fixture
def tiny_config(small_vocab):
    return ModelConfig(vocab_size=len(small_vocab), n_layers=1, d_model=16, n_heads=2, d_ff=32, max_seq_len=64)


@pytest.fixture
def tiny_model(tiny_config):
    return init_model(tiny_config, RngState(3))


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


# acceptance reporting: tests marked criterion(n) roll up into one line per criterion
_CRITERIA: dict[int, dict] = {}


@pytest.fixture
def note(request):
    """Attach a short measurement to the current criterion's summary line."""

    def add(text: str) -> None:
        request.node.user_properties.append(("note", text))

    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and not report.failed):
        return
    entry = _CRITERIA.setdefault(marker.args[0], {"title": marker.args[1], "ok": True, "notes": []})
    entry["ok"] = entry["ok"] and not report.failed
    if report.when == "call":
        entry["notes"] += [v for k, v in item.user_properties if k == "note"]
    if report.failed:
        entry["notes"].append(f"{item.name} failed")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        detail = "; ".join(dict.fromkeys(e["notes"]))
        terminalreporter.write_line(f"criterion {n} [{'PASS' if e['ok'] else 'FAIL'}] {e['title']}" + (f": {detail}" if detail else ""))
