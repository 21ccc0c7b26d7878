import numpy as np
import pytest

from scriptmot.data import CorpusConfig, random_script, word_list

SAMPLE = """<User> style=2
a lonely knight crosses the frozen sea
<Character1>
a tall knight in silver armor
short: tall silver knight
<Character2>
a small grey fox
<Environment1>
a frozen sea under a pale sky
short: frozen sea
<Frame1>
wide shot, <Character1> stands on <Environment1>
<Video1>
<Character1> whispers <-Now close your eyes. Go on.-> as <-SFX: wind howls->
<Frame2>
close up of <Character2> and <Character1> in <Environment1>
<Video2>
<Character2> runs across the ice.
"""


@pytest.fixture
def sample_text():
    return SAMPLE


def seeded_script(seed, **kw):
    cfg = CorpusConfig(**kw)
    return random_script(np.random.default_rng(seed), cfg, word_list(cfg.vocab_size))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
