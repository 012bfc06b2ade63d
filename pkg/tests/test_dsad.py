import json

import numpy as np
import pytest

from complseg.data import dump_manifest, load_frame, parse_manifest, write_image, write_mask
from complseg.dsad import dsad_manifest
from complseg.errors import MissingFile


def mock_layout(root):
    rng = np.random.default_rng(0)
    for organ in ("stomach", "colon"):
        for surgery in ("01", "02", "03"):
            d = root / organ / surgery
            for k in range(2):
                write_image(d / f"image{k:02d}.png", rng.integers(0, 256, (8, 8, 3), dtype=np.uint8))
                write_mask(d / f"mask{k:02d}.png", rng.random((8, 8)) < 0.3)


def test_dsad_layout(tmp_path):
    mock_layout(tmp_path)
    m = dsad_manifest(tmp_path, ["stomach", "colon"], {"01": "train", "02": "val"})
    assert m.subset_names() == ["stomach", "colon"]
    assert len(m.binary_subsets()) == 2
    st = m.subset("stomach")
    assert len(st.split_frames("train")) == 2 and len(st.split_frames("val")) == 2
    assert not st.split_frames("test")
    frame = load_frame(st.frames[0])
    assert frame.image.shape == (8, 8, 3) and set(frame.masks) == {"stomach"}
    again = parse_manifest(json.loads(dump_manifest(m)), tmp_path)
    assert again.to_dict() == m.to_dict()


def test_dsad_missing_mask(tmp_path):
    mock_layout(tmp_path)
    (tmp_path / "colon" / "01" / "mask01.png").unlink()
    with pytest.raises(MissingFile):
        dsad_manifest(tmp_path, ["stomach", "colon"], {"01": "train"})
