import numpy as np
import pytest

from dmcn.data import DegradationSpec, Image, extract_patches, make_ilr, to_single_channel


def natural_image(name: str = "coffee") -> Image:
    skdata = pytest.importorskip("skimage.data")
    return to_single_channel(Image.from_array(getattr(skdata, name)() / 255.0))


def overfit_patches(name: str = "coffee", scale: int = 2, count: int = 10):
    """``count`` evenly spaced 48x48 (ILR, HR) patch pairs from one natural image."""
    ilr, hr = make_ilr(natural_image(name), DegradationSpec(scale))
    patches = extract_patches(hr, ilr)
    patches.patches = patches.patches[:: len(patches) // count][:count]
    return patches.arrays()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
