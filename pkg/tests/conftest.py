import configparser

import pytest

from homm.config import apply_overrides, default_config, to_ini

TINY_INI = """\
[experiment]
seed = 3

[architecture]
z_dim = 8
i_hidden = 8
mh_hidden = 8
f_hidden = 6
l_hidden = 6
o_hidden = 8

[data]
epochs = 2
dataset_size = 24
m_batch_size = 8

[continual]
n_old = 3
n_new = 2
steps = 4
m_batch_size = 8
"""

TINY_POLY_TASKS = """
[tasks]
n_trained_sources = 4
n_new_tasks = 3
max_degree = 1
trained_mappings = add_1, multiply_-1
held_out_mappings = add_2
classifications = is_constant, relevant_x
"""

TINY_CARDS_TASKS = """
[tasks]
card_classifications = high_card, losers
"""


def tiny_config(domain="poly", **top):
    """A desk config shrunk until a training epoch takes milliseconds."""
    parser = configparser.ConfigParser()
    parser.read_string(TINY_INI + (TINY_POLY_TASKS if domain == "poly" else TINY_CARDS_TASKS))
    cfg = apply_overrides(default_config(domain, "desk"), parser)
    for k, v in top.items():
        setattr(cfg, k, v)
    return cfg.validate()


@pytest.fixture
def tiny_ini(tmp_path):
    def make(domain="poly", **top):
        path = tmp_path / f"tiny-{domain}.ini"
        path.write_text(to_ini(tiny_config(domain, **top)))
        return path

    return make


_ACCEPTANCE: dict = {}


@pytest.fixture
def report():
    """Record a one-line verdict for an acceptance criterion."""
    def record(criterion, passed, detail):
        line = f"{criterion} {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE[criterion] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[key])
