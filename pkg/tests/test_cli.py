import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from xxlseg.cli import main
from xxlseg.fusion import save_stack
from xxlseg.labels import count_segments
from xxlseg.phantom import perfect_slice_stack
from xxlseg.volume import load_volume, save_volume

SPEC = {
    "dims": [40, 40, 40],
    "seed": 11,
    "min_gap": 2,
    "noise_sigma": 0.1,
    "random_objects": {"sheets": 2, "pipes": 1, "rivets": 2, "brackets": 1, "min_thickness": 3},
}


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def tree_digest(root):
    return {
        str(p.relative_to(root)): digest(p)
        for p in sorted(root.rglob("*"))
        if p.is_file() and not p.name.endswith("manifest.json")
    }


def manifest(path):
    return json.loads(path.read_text())


@pytest.fixture
def work(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "spec.json").write_text(json.dumps(SPEC))
    return tmp_path


def test_phantom_writes_volumes_and_manifest(work):
    assert main(["phantom", "spec.json", "ph", "--stack", "--border-thickness", "1"]) == 0
    for name in ("scalar", "labels", "classes"):
        assert (work / "ph" / f"{name}.vol.json").is_file()
    assert (work / "ph" / "stack" / "stack.json").is_file()
    assert load_volume(work / "ph" / "scalar").meta.voxel_kind == "scalar-f32"
    doc = manifest(work / "ph" / "manifest.json")
    assert doc["command"] == "phantom" and doc["error"] is None
    assert set(doc) == {"command", "parameters", "input_hashes", "output_paths", "version", "duration_s", "error"}
    assert doc["input_hashes"] == {"spec.json": digest(work / "spec.json")}
    assert "ph/labels.raw" in doc["output_paths"]


def test_phantom_twice_identical(work):
    assert main(["phantom", "spec.json", "a"]) == 0
    assert main(["phantom", "spec.json", "b"]) == 0
    assert tree_digest(work / "a") == tree_digest(work / "b")


def test_malformed_spec_names_field(work, capsys):
    bad = dict(SPEC, objects=[{"type": "pipe", "radius": 2, "length": "long"}])
    (work / "bad.json").write_text(json.dumps(bad))
    assert main(["phantom", "bad.json", "out"]) == 1
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and "objects[0].length" in err
    assert manifest(work / "out" / "manifest.json")["error"].startswith("objects[0].length")
    (work / "broken.json").write_text('{"dims": [4, 4')
    assert main(["phantom", "broken.json", "out2"]) == 1
    assert "malformed JSON" in capsys.readouterr().err


def cube_stack(work):
    ref = np.zeros((10, 10, 10), dtype=np.uint32)
    ref[2:7, 3:8, 1:9] = 1
    save_stack(perfect_slice_stack(ref), work / "stack")
    return ref


def test_fuse_cube(work):
    ref = cube_stack(work)
    assert main(["fuse", "stack", "fused", "--line-overlap-threshold", "0.3"]) == 0
    out = load_volume(work / "fused").data
    assert count_segments(out) == 1 and np.array_equal(out != 0, ref != 0)
    doc = manifest(work / "fused.manifest.json")
    assert doc["parameters"]["line_overlap_threshold"] == 0.3
    assert doc["parameters"]["start_axis"] == "Z"


def test_fuse_missing_manifest(work, capsys):
    cube_stack(work)
    (work / "stack" / "stack.json").unlink()
    assert main(["fuse", "stack", "fused"]) == 1
    assert "missing stack manifest" in capsys.readouterr().err
    assert manifest(work / "fused.manifest.json")["error"]


def test_watershed_and_classes(work):
    labels = np.zeros((12, 12, 12), dtype=np.uint32)
    labels[1:5, 1:11, 1:11] = 1
    labels[7:11, 1:11, 1:11] = 2
    save_volume(labels, work / "labels")
    assert main(["classes", "labels", "cls"]) == 0
    assert main(["watershed", "cls", "ws", "--min-marker-size", "3"]) == 0
    out = load_volume(work / "ws").data
    assert count_segments(out) == 2
    assert manifest(work / "ws.manifest.json")["parameters"] == {"connectivity": 6, "min_marker_size": 3}
    assert main(["watershed", "labels", "bad"]) == 0  # labels 0..2 are valid classes
    labels[0, 0, 0] = 7
    save_volume(labels, work / "labels7")
    assert main(["watershed", "labels7", "bad7"]) == 1


def test_evaluate_self_and_filter(work):
    vol = np.zeros((20, 20, 20), dtype=np.uint32)
    vol[0:9, 0:11, 0] = 1  # 99 voxels
    vol[0:8, 0:17, 5] = 2  # 136 voxels
    vol[10:20, 10:20, 10:20] = 3
    save_volume(vol, work / "ref")
    assert main(["evaluate", "ref", "ref", "ev"]) == 0
    stats = json.loads((work / "ev" / "stats.json").read_text())
    assert all(stats[g]["mean"] == 1.0 for g in ("all", "large", "small"))
    rows = (work / "ev" / "matrix.csv").read_text().splitlines()
    assert len(rows) == 1 + 2
    assert main(["evaluate", "ref", "ref", "ev0", "--min-voxels", "0"]) == 0
    assert len((work / "ev0" / "matrix.csv").read_text().splitlines()) == 1 + 3
    assert (work / "ev" / "heatmap.pgm").read_bytes().startswith(b"P5\n2 2\n255\n")


def test_evaluate_cc_postprocess_adds_columns(work):
    assert main(["phantom", "spec.json", "ph"]) == 0
    ref = load_volume(work / "ph" / "labels").data
    merged = np.where(ref != 0, 1 + ref % 2, 0).astype(np.uint32)
    save_volume(merged, work / "merged")
    assert main(["evaluate", "ph/labels", "merged", "plain", "--min-voxels", "0"]) == 0
    assert main(["evaluate", "ph/labels", "merged", "cc", "--min-voxels", "0", "--cc-postprocess"]) == 0
    cols = [len((work / d / "matrix.csv").read_text().splitlines()[0].split(",")) for d in ("plain", "cc")]
    assert cols[1] > cols[0]
    assert manifest(work / "cc" / "manifest.json")["parameters"]["cc_postprocess"] is True


def test_denoise_records_parameters(work):
    assert main(["phantom", "spec.json", "ph"]) == 0
    assert main(["denoise", "ph/scalar", "den", "--weight", "0.2", "--max-iterations", "5"]) == 0
    doc = manifest(work / "den.manifest.json")
    assert doc["parameters"]["weight"] == 0.2 and doc["parameters"]["max_iterations"] == 5
    assert doc["parameters"]["tolerance"] == 1e-4
    assert load_volume(work / "den").meta.voxel_kind == "scalar-f32"
    assert main(["denoise", "ph/labels", "den2"]) == 1


def test_stats_report(work):
    vol = np.zeros((10, 10, 10), dtype=np.uint32)
    vol[0:2, 0:2, 0:2] = 4
    vol[5:10, 5:10, 5:10] = 6
    save_volume(vol, work / "v")
    assert main(["stats", "v", "report.json"]) == 0
    report = json.loads((work / "report.json").read_text())
    assert report["segments"] == 2
    assert report["min_segment_size"] == 8 and report["max_segment_size"] == 125
    assert report["median_segment_size"] == 8
    assert report["foreground_percent"] == pytest.approx(13.3)


def test_bad_flags_exit_nonzero(work):
    with pytest.raises(SystemExit) as exc:
        main(["fuse", "stack", "out", "--line-overlap-threshold", "1.5"])
    assert exc.value.code != 0


def test_threads_env_var(work, monkeypatch):
    monkeypatch.setenv("XXLSEG_THREADS", "zero")
    assert main(["phantom", "spec.json", "ph"]) == 1


def test_module_entry_point(work):
    res = subprocess.run(
        [sys.executable, "-m", "xxlseg", "stats", "missing", "r.json"], capture_output=True, text=True
    )
    assert res.returncode == 1
    assert res.stderr.startswith("xxlseg stats: error:") and res.stderr.count("\n") == 1
