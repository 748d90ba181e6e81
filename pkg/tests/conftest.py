import os

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=50)
settings.register_profile("ci", deadline=None, max_examples=200)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_pair():
    from vireid.data import toy_benchmark

    return toy_benchmark(seed=0)


@pytest.fixture(scope="session")
def toy_test_set(toy_pair):
    return toy_pair[1]


class ToyRuns:
    """Lazily trained cells on the default toy benchmark, shared across test modules.

    Rows are ablation row names or ``lambda=<v>``; each is trained once per
    seed of the default seed list and kept under one output directory.
    """

    def __init__(self, out_dir):
        from vireid.harness.config import resolve

        self.config = resolve()
        self.seeds = list(self.config.experiment["seeds"])
        self.out = out_dir
        self.rows = {}
        self.seconds = {}

    def _overrides(self, name):
        from vireid.harness.experiments import ABLATION_ROWS, axis_overrides

        if name.startswith("lambda="):
            return axis_overrides("lambda", name.split("=", 1)[1])
        return dict(dict(ABLATION_ROWS)[name])

    def run(self, name):
        import time

        from vireid.harness.experiments import cell_dir, run_cell

        if name not in self.rows:
            start = time.perf_counter()
            self.rows[name] = [run_cell(self.config, self._overrides(name), s, cell_dir(self.out, name, s), name)
                               for s in self.seeds]
            self.seconds[name] = time.perf_counter() - start
        return self.rows[name]

    def table(self, names, rename=None):
        from vireid.harness.experiments import ResultTable

        rows = []
        for n in names:
            label = (rename or {}).get(n, n)
            rows += [{**r, "value": label} for r in self.run(n)]
        return ResultTable(rows)

    def steps(self, name):
        import csv

        from vireid.harness.experiments import cell_dir

        self.run(name)
        out = {}
        for s in self.seeds:
            with open(cell_dir(self.out, name, s) / "steps.csv") as fh:
                out[s] = [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]
        return out


@pytest.fixture(scope="session")
def toy_runs(tmp_path_factory):
    return ToyRuns(tmp_path_factory.mktemp("toy_runs"))


# -- acceptance verdicts, repeated at the end of the terminal report --------------------------
VERDICTS = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def verdicts(request):
    return request.config.stash.setdefault(VERDICTS, [])


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
