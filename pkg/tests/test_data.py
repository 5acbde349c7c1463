"""Frame/annotation I/O, dataset loading, and the access audit hook."""

import json

import numpy as np
import pytest

from fsnet.data import (
    AnnotatedBox,
    frame_access_audit,
    label_map,
    load_dataset,
    load_video,
    read_annotations,
    read_ppm,
    to_chw01,
    write_annotations,
    write_ppm,
)
from fsnet.errors import DataError


def rand_img(seed=0, h=9, w=7):
    return np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8)


def make_video(root, frames=4, size=16, ann=None, fps=10, classes=("circle",)):
    """Hand-rolled video directory; returns its path."""
    (root / "frames").mkdir(parents=True)
    rng = np.random.default_rng(1)
    for t in range(1, frames + 1):
        img = rng.integers(0, 256, (size, size, 3), dtype=np.uint8)
        write_ppm(root / "frames" / f"{t:06d}.ppm", img)
    (root / "meta.json").write_text(
        json.dumps({"fps": fps, "classes": list(classes), "image_size": size})
    )
    if ann is not None:
        write_annotations(root / "annotations.jsonl", ann)
    return root


class TestPpm:
    def test_round_trip(self, tmp_path):
        img = rand_img()
        write_ppm(tmp_path / "a.ppm", img)
        np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), img)

    def test_header_bytes(self, tmp_path):
        write_ppm(tmp_path / "a.ppm", rand_img(h=2, w=3))
        raw = (tmp_path / "a.ppm").read_bytes()
        assert raw.startswith(b"P6\n3 2\n255\n")
        assert len(raw) == len(b"P6\n3 2\n255\n") + 18

    def test_reads_commented_header(self, tmp_path):
        img = rand_img(h=2, w=2)
        body = b"P6 # classic netpbm comment\n2\n# another\n2 255\n" + img.tobytes()
        (tmp_path / "c.ppm").write_bytes(body)
        np.testing.assert_array_equal(read_ppm(tmp_path / "c.ppm"), img)

    def test_rejects_bad_magic(self, tmp_path):
        (tmp_path / "a.ppm").write_bytes(b"P5\n2 2\n255\n" + b"\x00" * 4)
        with pytest.raises(DataError, match="not a binary PPM"):
            read_ppm(tmp_path / "a.ppm")

    def test_rejects_short_payload(self, tmp_path):
        (tmp_path / "a.ppm").write_bytes(b"P6\n2 2\n255\n" + b"\x00" * 5)
        with pytest.raises(DataError, match="payload"):
            read_ppm(tmp_path / "a.ppm")

    def test_rejects_wrong_maxval(self, tmp_path):
        (tmp_path / "a.ppm").write_bytes(b"P6\n2 2\n65535\n" + b"\x00" * 24)
        with pytest.raises(DataError, match="geometry"):
            read_ppm(tmp_path / "a.ppm")

    def test_rejects_non_uint8_write(self, tmp_path):
        with pytest.raises(DataError):
            write_ppm(tmp_path / "a.ppm", np.zeros((2, 2, 3), dtype=np.float32))

    def test_to_chw01(self):
        img = np.zeros((2, 2, 3), dtype=np.uint8)
        img[0, 0] = (255, 0, 51)
        out = to_chw01(img)
        assert out.shape == (3, 2, 2)
        assert out.dtype == np.float32
        np.testing.assert_allclose(out[:, 0, 0], [1.0, 0.0, 0.2], atol=1e-7)


class TestAnnotations:
    def test_round_trip(self, tmp_path):
        frames = {
            2: [AnnotatedBox("circle", 0.5, 0.5, 0.2, 0.3)],
            1: [AnnotatedBox("square", 0.1, 0.9, 0.1, 0.1, score=0.75)],
            3: [],
        }
        path = tmp_path / "a.jsonl"
        write_annotations(path, frames)
        lines = path.read_text().splitlines()
        assert len(lines) == 3
        assert json.loads(lines[0])["frame"] == 1  # ascending order
        got = read_annotations(path)
        assert got[2] == frames[2]
        assert got[1] == frames[1]
        assert got[3] == []

    def test_bad_json_names_line(self, tmp_path):
        p = tmp_path / "a.jsonl"
        p.write_text('{"frame": 1, "boxes": []}\n{oops\n')
        with pytest.raises(DataError, match=r"a\.jsonl:2: bad JSON"):
            read_annotations(p)

    def test_frame_beyond_video(self, tmp_path):
        p = tmp_path / "a.jsonl"
        p.write_text('{"frame": 9, "boxes": []}\n')
        with pytest.raises(DataError, match=r"frame 9 not in video \(1\.\.4\)"):
            read_annotations(p, num_frames=4)

    @pytest.mark.parametrize(
        "record,msg",
        [
            ('{"boxes": []}', "frame and boxes"),
            ('{"frame": 0, "boxes": []}', "positive integer"),
            ('{"frame": 1, "boxes": {}}', "must be a list"),
            ('{"frame": 1, "boxes": [{"class": "c", "cx": 0.5, "cy": 0.5, "w": 0.1}]}', "missing 'h'"),
            ('{"frame": 1, "boxes": [{"class": "c", "cx": 1.5, "cy": 0.5, "w": 0.1, "h": 0.1}]}', "outside"),
            ('{"frame": 1, "boxes": [{"class": "", "cx": 0.5, "cy": 0.5, "w": 0.1, "h": 0.1}]}', "non-empty string"),
            ('{"frame": 1, "boxes": [{"class": "c", "cx": 0.5, "cy": 0.5, "w": 0.0, "h": 0.1}]}', "degenerate"),
            ('{"frame": 1, "boxes": [{"class": "c", "cx": 0.5, "cy": 0.5, "w": 0.1, "h": 0.1, "score": 2}]}', "score"),
            ('{"frame": 1, "boxes": [{"class": "c", "cx": 0.5, "cy": 0.5, "w": 0.1, "h": 0.1, "zz": 1}]}', "unknown box keys"),
        ],
    )
    def test_rejects_malformed(self, tmp_path, record, msg):
        p = tmp_path / "a.jsonl"
        p.write_text(record + "\n")
        with pytest.raises(DataError, match=msg):
            read_annotations(p)

    def test_blank_lines_skipped(self, tmp_path):
        p = tmp_path / "a.jsonl"
        p.write_text('\n{"frame": 1, "boxes": []}\n\n')
        assert read_annotations(p) == {1: []}

    def test_label_map_is_one_based(self):
        assert label_map(("a", "b")) == {"a": 1, "b": 2}


class TestVideoClip:
    def test_load_video(self, tmp_path):
        ann = {1: [AnnotatedBox("circle", 0.5, 0.5, 0.25, 0.25)]}
        make_video(tmp_path / "v", frames=3, ann=ann)
        clip = load_video(tmp_path / "v")
        assert clip.id == "v"
        assert clip.num_frames == 3
        assert clip.classes == ("circle",)
        assert clip.annotations() == {1: ann[1]}
        assert clip.load_frame(2).shape == (16, 16, 3)

    def test_frame_bounds(self, tmp_path):
        clip = load_video(make_video(tmp_path / "v"))
        for t in (0, 5):
            with pytest.raises(DataError, match="not in 1"):
                clip.frame_path(t)

    def test_flow_path_needs_predecessor(self, tmp_path):
        clip = load_video(make_video(tmp_path / "v"))
        assert clip.flow_path(2).name == "000002.fsfl"
        with pytest.raises(DataError, match="predecessor"):
            clip.flow_path(1)

    def test_missing_meta(self, tmp_path):
        make_video(tmp_path / "v")
        (tmp_path / "v" / "meta.json").unlink()
        with pytest.raises(DataError, match="missing meta.json"):
            load_video(tmp_path / "v")

    def test_non_contiguous_frames(self, tmp_path):
        make_video(tmp_path / "v")
        (tmp_path / "v" / "frames" / "000003.ppm").rename(
            tmp_path / "v" / "frames" / "000009.ppm"
        )
        with pytest.raises(DataError, match="not contiguous"):
            load_video(tmp_path / "v")

    def test_bad_fps(self, tmp_path):
        make_video(tmp_path / "v", fps=0)
        with pytest.raises(DataError, match="fps"):
            load_video(tmp_path / "v")

    def test_annotation_for_missing_frame(self, tmp_path):
        # validated at load time so the error points at the file, not training
        make_video(tmp_path / "v", frames=2, ann={2: []})
        bad = {5: [AnnotatedBox("circle", 0.5, 0.5, 0.2, 0.2)]}
        write_annotations(tmp_path / "v" / "annotations.jsonl", bad)
        with pytest.raises(DataError, match="frame 5"):
            load_video(tmp_path / "v")


class TestDataset:
    def test_loads_sorted_videos(self, tmp_path):
        make_video(tmp_path / "b_vid")
        make_video(tmp_path / "a_vid")
        clips = load_dataset(tmp_path)
        assert [c.id for c in clips] == ["a_vid", "b_vid"]

    def test_empty_dataset(self, tmp_path):
        with pytest.raises(DataError, match="no video directories"):
            load_dataset(tmp_path)

    def test_mismatched_meta(self, tmp_path):
        make_video(tmp_path / "a", classes=("circle",))
        make_video(tmp_path / "b", classes=("circle", "square"))
        with pytest.raises(DataError, match="disagree"):
            load_dataset(tmp_path)


class TestAccessAudit:
    def test_records_frame_reads(self, tmp_path):
        clip = load_video(make_video(tmp_path / "v"))
        with frame_access_audit() as log:
            clip.load_frame(2)
            clip.load_frame(1)
        assert log == [("v", 2), ("v", 1)]

    def test_nested_audits_both_record(self, tmp_path):
        clip = load_video(make_video(tmp_path / "v"))
        with frame_access_audit() as outer:
            clip.load_frame(1)
            with frame_access_audit() as inner:
                clip.load_frame(3)
        assert outer == [("v", 1), ("v", 3)]
        assert inner == [("v", 3)]

    def test_no_recording_outside_block(self, tmp_path):
        clip = load_video(make_video(tmp_path / "v"))
        with frame_access_audit() as log:
            pass
        clip.load_frame(1)
        assert log == []
