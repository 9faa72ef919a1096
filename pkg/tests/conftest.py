import numpy as np
import pytest

from ddpmforge.denoiser import DenoiserConfig, init_params


@pytest.fixture
def tiny_config():
    return DenoiserConfig(image_size=4, channels=2, base_width=4, depth=1, embed_dim=4, num_classes=3)


@pytest.fixture
def tiny_params(tiny_config):
    """Tiny network with every weight perturbed so no gradient is trivially zero."""
    params = init_params(tiny_config, seed=3)
    rng = np.random.default_rng(11)
    for name, arr in params.items():
        arr += 0.3 * rng.standard_normal(arr.shape)
    return params


def naive_conv2d(x, w, stride=1, padding=0):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for b in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[b, o, i, j] = np.sum(patch * w[o])
    return out


# --- acceptance summary ------------------------------------------------------------
# Each acceptance test is named test_criterion_<n>_<slug>; the terminal summary
# prints one PASS/FAIL line per criterion with whatever detail the test recorded.

ACCEPTANCE_DETAILS: dict[str, str] = {}
_acceptance_outcomes: dict[str, tuple[str, str]] = {}


def _criterion_of(nodeid: str):
    name = nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return None
    number, _, slug = name[len("test_criterion_"):].partition("_")
    return number, slug.replace("_", " ")


def pytest_runtest_logreport(report):
    crit = _criterion_of(report.nodeid)
    if crit is None:
        return
    # setup/teardown only matter when they fail or skip
    if report.when == "call" or report.outcome != "passed":
        outcome = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _acceptance_outcomes[crit[0]] = (crit[1], outcome)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance_outcomes, key=int):
        slug, outcome = _acceptance_outcomes[number]
        detail = ACCEPTANCE_DETAILS.get(number, "")
        terminalreporter.write_line(f"criterion {number} ({slug}): {outcome}" + (f"  [{detail}]" if detail else ""))
