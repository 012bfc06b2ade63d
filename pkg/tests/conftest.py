import numpy as np
import pytest
from hypothesis import settings

from complseg.data import (
    DatasetManifest,
    FrameEntry,
    Subset,
    SynthConfig,
    clear_cache,
    split_full_to_binary,
    synth_generate,
    write_image,
    write_mask,
)
from complseg.labels import ClassCatalog

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _fresh_raster_cache():
    clear_cache()
    yield
    clear_cache()


def write_frames(root, catalog, subsets):
    """Build an on-disk manifest from in-memory frames.

    ``subsets`` maps subset name -> list of (frame_id, split, image, {class: mask}).
    """
    out = []
    for name, frames in subsets.items():
        entries = []
        annotated = []
        for fid, split, image, masks in frames:
            base = root / name / split
            img_path = base / f"{fid}.img.png"
            write_image(img_path, image)
            paths = {}
            for c, m in masks.items():
                p = base / f"{fid}.{c}.mask.png"
                write_mask(p, m)
                paths[c] = p
                if c not in annotated:
                    annotated.append(c)
            entries.append(FrameEntry(fid, split, img_path, paths))
        annotated = [c for c in catalog.classes if c in annotated]
        out.append(Subset(name, tuple(annotated), tuple(entries)))
    return DatasetManifest("test", catalog, tuple(out), root)


@pytest.fixture(scope="session")
def tiny_synth(tmp_path_factory):
    """A small fully labeled synthetic dataset plus its binary split."""
    root = tmp_path_factory.mktemp("tiny_synth")
    cfg = SynthConfig(
        classes=("a", "b", "c"), confusable_pairs=(("a", "b"),),
        n_train=8, n_val=4, n_test=4, height=32, width=32, seed=3,
    )
    full = synth_generate(cfg, root)
    return split_full_to_binary(full, keep_source=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_label_map(rng, h, w, n_classes, background_id=255):
    labels = rng.integers(-1, n_classes, size=(h, w))
    return np.where(labels < 0, background_id, labels)


def catalog_of(n):
    return ClassCatalog(tuple("abcdefgh"[:n]))


# ---------------------------------------------------------------------------
# acceptance verdict lines, echoed live and repeated in the terminal summary

_ACCEPTANCE_LINES = []


@pytest.fixture
def verdict(capsys):
    def record(number, ok, detail):
        line = f"ACCEPTANCE {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        _ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
