import pytest

from fewshot_forecast import synthetic
from fewshot_forecast.data import write_prepared


@pytest.fixture(scope="session")
def prepared_dir(tmp_path_factory):
    """Nine small synthetic tasks in the prepared-dataset layout."""
    out = tmp_path_factory.mktemp("prepared")
    write_prepared(out, synthetic.make_corpus(9, seed=2, n_series=12, length=30), {"source": "synthetic"})
    return out


@pytest.fixture
def quick_config(prepared_dir, tmp_path):
    """Overrides that keep every training run to a couple of seconds."""
    return {
        "prepared_dir": str(prepared_dir),
        "output_dir": str(tmp_path / "run"),
        "train": {"support_size": 3, "query_size": 5, "max_epochs": 2, "patience": 2, "ds_epochs": 5},
        "model": {"support_hidden": 4, "query_hidden": 4, "attention_dim": 4, "value_dim": 4, "head_hidden": 8},
    }


# ------------------------------------------------------------ acceptance report

_VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by the test")
    config.stash[_VERDICTS] = {}


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None and (report.when == "call" or (report.when == "setup" and not report.passed)):
        n, title = mark.args
        detail = dict(item.user_properties).get("detail", "")
        if report.passed:
            verdict = "PASS"
        else:
            verdict = "FAIL"
            if hasattr(report, "wasxfail"):
                detail = report.wasxfail
            elif call.excinfo is not None:
                detail = call.excinfo.exconly().splitlines()[0][:200]
        item.config.stash[_VERDICTS][n] = (title, verdict, detail, call.duration)
        print(f"\ncriterion {n:>2} {verdict}: {title} ({detail}; {call.duration:.1f}s)")
    return report


def pytest_terminal_summary(terminalreporter, config):
    verdicts = config.stash.get(_VERDICTS, {})
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(verdicts):
        title, verdict, detail, secs = verdicts[n]
        terminalreporter.line(f"criterion {n:>2} {verdict}: {title} ({detail}; {secs:.1f}s)")
