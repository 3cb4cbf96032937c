import numpy as np
import pytest

from nspad.autoencoder import Architecture, init_model
from nspad.eventlog import PAD, Event, EventLog, Trace, Vocabulary


def make_log(*traces, name="fixture"):
    """``make_log("ABC", "AC")`` -> one case per string, one event per character."""
    out = []
    for i, t in enumerate(traces):
        acts = list(t) if isinstance(t, str) else list(t)
        out.append(Trace(f"c{i}", tuple(Event(a) for a in acts)))
    return EventLog(tuple(out), name=name)


@pytest.fixture
def abc_vocab():
    return Vocabulary((PAD, "A", "B", "C"), (PAD, "r1", "r2"))


@pytest.fixture
def tiny_model(abc_vocab):
    arch = Architecture(max_len=4, n_activities=abc_vocab.n_activities, n_resources=abc_vocab.n_resources,
                        widths=(6, 3, 6))
    return init_model(arch, abc_vocab, np.random.default_rng(0))


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def report_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
