import numpy as np
import pytest

from layered_edit import EditScenario, ObjectSpec, PanopticRegion


def rect(h, w, r0, r1, c0, c1):
    m = np.zeros((h, w))
    m[r0:r1, c0:c1] = 1.0
    return m


def grid_scenario(n, size=16, edit=None, steps=50, seed=0, **kwargs):
    """``n`` 4x4 objects laid out on a lattice, with token ``10 + i`` each.

    The background carries no panoptic token, so its latent is plain noise.
    ``edit`` maps object index to replacement edit tokens.
    """
    edit = edit or {}
    objects, panoptic = [], []
    src_prompt, edit_prompt = [1], [1]
    for i in range(n):
        r0, c0 = 1 + (i // 3) * 7, 1 + (i % 3) * 5
        m = rect(size, size, r0, r0 + 4, c0, c0 + 4)
        e = tuple(edit.get(i, (10 + i,)))
        objects.append(ObjectSpec((10 + i,), e, m))
        panoptic.append(PanopticRegion(m.copy()))
        src_prompt.append(10 + i)
        edit_prompt.extend(t for t in e if t not in edit_prompt)
    return EditScenario(size, size, tuple(src_prompt), tuple(edit_prompt), objects, panoptic,
                        steps=steps, seed=seed, **kwargs)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# criterion number -> list of (check, passed, detail), filled by the acceptance suite
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        checks = ACCEPTANCE[number]
        verdict = "PASS" if all(ok for _, ok, _ in checks) else "FAIL"
        detail = "; ".join(f"{name}: {'ok' if ok else 'FAILED'}{f' ({info})' if info else ''}"
                           for name, ok, info in checks)
        terminalreporter.write_line(f"criterion {number:>2} {verdict}  {detail}")
