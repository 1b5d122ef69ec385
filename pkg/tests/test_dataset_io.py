import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpmn.core_types import PairedCase, Phase, SegMask, Volume3D
from cpmn.dataset_io import (
    MANIFEST_NAME,
    DatasetIOError,
    load_dataset,
    read_array,
    save_dataset,
    write_array,
)

from conftest import random_case


def _cases(n, rng=None, extent=(8, 8, 8)):
    rng = rng or np.random.default_rng(0)
    return [
        random_case(rng, extent=extent, label=i % 2, case_id=f"case_{i:03d}") for i in range(n)
    ]


def _splits(cases, names=("train", "train", "test")):
    return {c.case_id: names[i % len(names)] for i, c in enumerate(cases)}


class TestArrayFormat:
    def test_roundtrip_float32(self, tmp_path):
        arr = np.random.default_rng(1).random((3, 4, 5), dtype=np.float32)
        write_array(tmp_path / "a.raw", arr)
        back = read_array(tmp_path / "a.raw")
        assert back.dtype == np.float32
        np.testing.assert_array_equal(back, arr)

    def test_roundtrip_uint8(self, tmp_path):
        arr = (np.random.default_rng(2).random((2, 3, 4)) > 0.5).astype(np.uint8)
        write_array(tmp_path / "m.raw", arr)
        np.testing.assert_array_equal(read_array(tmp_path / "m.raw"), arr)

    def test_truncated_file_rejected(self, tmp_path):
        arr = np.zeros((4, 4, 4), dtype=np.float32)
        path = tmp_path / "t.raw"
        write_array(path, arr)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(DatasetIOError, match="bytes"):
            read_array(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "b.raw"
        path.write_bytes(b"XX" + b"\x00" * 30)
        with pytest.raises(DatasetIOError, match="magic"):
            read_array(path)


class TestSaveLoad:
    def test_roundtrip_identity(self, tmp_path):
        cases = _cases(3)
        manifest = save_dataset(cases, _splits(cases), tmp_path)
        assert len(manifest.cases) == 3
        loaded_manifest, iterator = load_dataset(tmp_path)
        loaded = list(iterator)
        assert loaded_manifest.split == manifest.split
        for original, back in zip(cases, loaded):
            assert back.case_id == original.case_id
            assert back.label == original.label
            assert back.nct.phase is Phase.NCT and back.ctpa.phase is Phase.CTPA
            assert back.nct.spacing == original.nct.spacing
            np.testing.assert_array_equal(back.nct.data, original.nct.data)
            np.testing.assert_array_equal(back.ctpa.data, original.ctpa.data)
            np.testing.assert_array_equal(back.mask.labels, original.mask.labels)

    def test_empty_dataset(self, tmp_path):
        manifest = save_dataset([], {}, tmp_path)
        assert manifest.cases == ()
        loaded, iterator = load_dataset(tmp_path)
        assert list(iterator) == []

    def test_duplicate_case_id_writes_nothing(self, tmp_path):
        rng = np.random.default_rng(3)
        cases = [random_case(rng, case_id="dup"), random_case(rng, case_id="dup")]
        with pytest.raises(DatasetIOError, match="duplicate"):
            save_dataset(cases, {"dup": "train"}, tmp_path)
        assert list(tmp_path.iterdir()) == []

    def test_split_must_cover_cases(self, tmp_path):
        cases = _cases(2)
        with pytest.raises(DatasetIOError, match="split"):
            save_dataset(cases, {cases[0].case_id: "train"}, tmp_path)

    def test_unknown_split_name(self, tmp_path):
        cases = _cases(1)
        with pytest.raises(DatasetIOError, match="unknown split"):
            save_dataset(cases, {cases[0].case_id: "holdout"}, tmp_path)

    def test_missing_file_names_case(self, tmp_path):
        cases = _cases(2)
        save_dataset(cases, _splits(cases), tmp_path)
        (tmp_path / "case_001.mask.raw").unlink()
        with pytest.raises(DatasetIOError, match="case_001"):
            load_dataset(tmp_path)

    def test_tampered_extent_detected(self, tmp_path):
        cases = _cases(1)
        save_dataset(cases, _splits(cases), tmp_path)
        doc = json.loads((tmp_path / MANIFEST_NAME).read_text())
        doc["cases"][0]["extent"] = [4, 8, 8]
        (tmp_path / MANIFEST_NAME).write_text(json.dumps(doc))
        _, iterator = load_dataset(tmp_path)
        with pytest.raises(DatasetIOError, match="extent mismatch"):
            list(iterator)

    def test_corrupted_payload_fails_checksum(self, tmp_path):
        cases = _cases(1)
        save_dataset(cases, _splits(cases), tmp_path)
        target = tmp_path / "case_000.nct.raw"
        blob = bytearray(target.read_bytes())
        blob[-1] ^= 0xFF
        target.write_bytes(bytes(blob))
        _, iterator = load_dataset(tmp_path)
        with pytest.raises(DatasetIOError, match="checksum"):
            list(iterator)

    def test_iteration_follows_manifest_order(self, tmp_path):
        cases = _cases(5)
        save_dataset(cases, _splits(cases), tmp_path)
        _, iterator = load_dataset(tmp_path)
        assert [c.case_id for c in iterator] == [c.case_id for c in cases]


@settings(max_examples=20, deadline=None)
@given(
    extent=st.tuples(
        st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)
    ),
    seed=st.integers(0, 2**31 - 1),
    spacing=st.tuples(
        st.floats(0.1, 10.0), st.floats(0.1, 10.0), st.floats(0.1, 10.0)
    ),
)
def test_roundtrip_property(tmp_path_factory, extent, seed, spacing):
    rng = np.random.default_rng(seed)
    mask = (rng.random(extent) > 0.7).astype(np.uint8)
    case = PairedCase(
        nct=Volume3D(rng.random(extent, dtype=np.float32), spacing=spacing, phase=Phase.NCT),
        ctpa=Volume3D(rng.random(extent, dtype=np.float32), spacing=spacing, phase=Phase.CTPA),
        mask=SegMask(mask),
        label=int(mask.any()),
        case_id="prop",
    )
    directory = tmp_path_factory.mktemp("roundtrip")
    save_dataset([case], {"prop": "train"}, directory)
    _, iterator = load_dataset(directory)
    back = next(iterator)
    np.testing.assert_array_equal(back.nct.data, case.nct.data)
    np.testing.assert_array_equal(back.ctpa.data, case.ctpa.data)
    np.testing.assert_array_equal(back.mask.labels, case.mask.labels)
    assert back.nct.spacing == case.nct.spacing
    assert back.label == case.label
