import json

import numpy as np
import pytest

from vlcurate.manifest import AnnotationSet, DatasetManifest, InlineImage, Sample


def make_sample(sid, prompt="describe", response="a picture", pixels=None, size=None, **ann):
    image = None
    if pixels is not None:
        arr = np.asarray(pixels, dtype=np.uint8)
        image = InlineImage(width=arr.shape[1], height=arr.shape[0], pixels=arr)
    elif size is not None:
        image = InlineImage(width=size[0], height=size[1])
    losses = {t: ann.pop(f"loss_{t}") for t in ("small", "mid", "large") if f"loss_{t}" in ann}
    return Sample(
        id=sid,
        prompt=prompt,
        response=response,
        image=image,
        annotations=AnnotationSet(model_losses=losses, **ann),
    )


def make_manifest(name, samples, category=None):
    return DatasetManifest(name=name, samples=tuple(samples), category=category)


def write_jsonl(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


@pytest.fixture
def jsonl(tmp_path):
    def _write(name, records):
        return write_jsonl(tmp_path / name, records)

    return _write


# --- acceptance summary ----------------------------------------------------

_CRITERIA: dict[int, tuple[str, bool]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    number, title = mark.args
    if rep.when == "call" or rep.failed:
        _, ok_so_far = _CRITERIA.get(number, (title, True))
        _CRITERIA[number] = (title, ok_so_far and rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}")
