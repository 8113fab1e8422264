"""
Tests for Archive Storage
"""

import json

import numpy as np
import pytest

from archive import SCHEMA_VERSION, SimulationArchive, archive_exists, read_archive, read_manifest, write_archive
from errors import ArchiveChecksumError, ArchiveError, ArchiveVersionError


@pytest.fixture
def archive_dir(tmp_path, rng):
    arrays = {
        "theta": rng.standard_normal((4, 6, 1)),
        "index": np.arange(5),
        "mask": np.array([True, False, True]),
    }
    path = tmp_path / "sims"
    write_archive(str(path), SimulationArchive(arrays, kind="simulations", task="sird", budget=4, seed=0,
                                               meta={"dim": 1}))
    return path, arrays


class TestArchive:
    """Test writing and reading archives"""

    def test_round_trip(self, archive_dir):
        """Arrays and manifest fields come back unchanged"""
        path, arrays = archive_dir
        archive = read_archive(str(path))
        assert archive.task == "sird" and archive.budget == 4 and archive.seed == 0
        assert archive.meta == {"dim": 1}
        assert np.array_equal(archive["theta"], arrays["theta"])
        assert np.array_equal(archive["index"], arrays["index"])
        assert archive["mask"].tolist() == [1, 0, 1]

    def test_memory_map(self, archive_dir):
        """mmap reads the same values"""
        path, arrays = archive_dir
        assert np.array_equal(read_archive(str(path), mmap=True)["theta"], arrays["theta"])

    def test_manifest(self, archive_dir):
        """The manifest records shape, dtype and checksum"""
        path, _ = archive_dir
        entry = read_manifest(str(path))["arrays"]["theta"]
        assert entry["shape"] == [4, 6, 1]
        assert entry["dtype"] == "<f8"
        assert len(entry["sha256"]) == 64
        assert archive_exists(str(path))

    def test_unknown_schema_version(self, archive_dir):
        """Test a manifest from a newer writer"""
        path, _ = archive_dir
        manifest = json.loads((path / "manifest.json").read_text())
        manifest["schema_version"] = SCHEMA_VERSION + 1
        (path / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(ArchiveVersionError):
            read_archive(str(path))

    def test_altered_array(self, archive_dir):
        """Test a flipped byte"""
        path, _ = archive_dir
        data = bytearray((path / "theta.bin").read_bytes())
        data[3] ^= 0xFF
        (path / "theta.bin").write_bytes(bytes(data))
        with pytest.raises(ArchiveChecksumError) as exc:
            read_archive(str(path))
        assert exc.value.array_name == "theta"

    def test_truncated_array(self, archive_dir):
        """Test a short file"""
        path, _ = archive_dir
        (path / "index.bin").write_bytes((path / "index.bin").read_bytes()[:-8])
        with pytest.raises(ArchiveChecksumError):
            read_archive(str(path))

    def test_missing_array(self, archive_dir):
        """Test a deleted file"""
        path, _ = archive_dir
        (path / "mask.bin").unlink()
        with pytest.raises(ArchiveChecksumError):
            read_archive(str(path))

    def test_missing_manifest(self, tmp_path):
        """Test a directory without a manifest"""
        with pytest.raises(ArchiveError):
            read_archive(str(tmp_path))
        assert not archive_exists(str(tmp_path))

    def test_unsupported_dtype(self, tmp_path):
        """Test complex arrays"""
        with pytest.raises(ArchiveError):
            write_archive(str(tmp_path / "bad"), SimulationArchive({"z": np.ones(3, dtype=complex)}))


if __name__ == '__main__':
    pytest.main([__file__, '-v'])
