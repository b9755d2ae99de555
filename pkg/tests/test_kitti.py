import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ffkit.errors import BadRatios, FFKitError, MalformedLine, MissingKey, TruncatedFile, WrongArity
from ffkit.geometry import Box2D, Box3D, ProjectionMatrix
from ffkit.kitti import (
    KittiDataset,
    LabelRecord,
    SplitManifest,
    format_calib_file,
    format_label_file,
    make_splits,
    parse_calib_file,
    parse_label_file,
    read_detections_dir,
    read_point_cloud_bin,
    write_detections_dir,
    write_point_cloud_bin,
)
from ffkit.synth import SynthSpec, generate_synthetic_scene, scene_rng

LINE = "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59"


class TestLabels:
    def test_reference_line(self):
        (r,) = parse_label_file(LINE)
        assert r.type == "Car"
        assert (r.truncated, r.occluded, r.alpha) == (0.0, 0, -1.58)
        assert (r.x1, r.y1, r.x2, r.y2) == (587.01, 173.33, 614.12, 200.12)
        assert (r.h, r.w, r.l) == (1.65, 1.67, 3.64)
        assert (r.x, r.y, r.z, r.rotation_y) == (-0.65, 1.71, 46.70, -1.59)
        assert r.score is None

    def test_box_conversion(self):
        (r,) = parse_label_file(LINE)
        b = r.to_box3d()
        assert b.y == pytest.approx(1.71 - 1.65 / 2)
        assert (b.l, b.w, b.h) == (3.64, 1.67, 1.65)
        assert r.box2d.w == pytest.approx(614.12 - 587.01)

    def test_empty(self):
        assert parse_label_file("") == []
        assert parse_label_file("\n  \n") == []

    def test_unknown_class_kept(self):
        (r,) = parse_label_file(LINE.replace("Car", "Freight_Tricycle"))
        assert r.type == "Freight_Tricycle"

    def test_score_field(self):
        (r,) = parse_label_file(LINE + " 0.87")
        assert r.score == 0.87
        assert r.to_line().endswith("0.870000")

    def test_dontcare(self):
        dc = "DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10"
        assert len(parse_label_file(LINE + "\n" + dc)) == 1
        with pytest.raises(MalformedLine):
            parse_label_file(dc, skip_dontcare=False)

    @pytest.mark.parametrize(
        "line, reason",
        [
            (" ".join(LINE.split()[:14]), "fields"),
            (LINE.replace("0.00 0", "1.5 0", 1), "truncation"),
            (LINE.replace(" 0 -1.58", " 4 -1.58", 1), "occlusion"),
            (LINE.replace("614.12", "500.00"), "ordered"),
            (LINE.replace("1.65 1.67", "-1.65 1.67"), "positive"),
            (LINE.replace("-1.59", "4.00"), "rotation_y"),
            (LINE.replace("46.70", "abc"), "non-numeric"),
            (LINE.replace("46.70", "nan"), "non-finite"),
        ],
    )
    def test_rejects(self, line, reason):
        with pytest.raises(MalformedLine) as e:
            parse_label_file("\n" + line, path="x.txt")
        assert e.value.lineno == 2
        assert reason in str(e.value)
        assert "x.txt" in str(e.value)

    def test_pi_after_rounding(self):
        r = parse_label_file(LINE.replace("-1.59", f"{math.pi:.6f}"))[0]
        assert r.rotation_y == pytest.approx(math.pi, abs=1e-6)
        assert abs(r.rotation_y) <= math.pi

    @given(
        st.floats(0, 1), st.integers(0, 3), st.floats(-math.pi, math.pi),
        st.floats(0, 500), st.floats(0, 300), st.floats(0.01, 200), st.floats(0.01, 200),
        st.floats(0.1, 5), st.floats(0.1, 5), st.floats(0.1, 5),
        st.floats(-50, 50), st.floats(-3, 3), st.floats(0.5, 80), st.floats(-math.pi, math.pi),
    )
    def test_serialize_parse_fixed_point(self, tr, occ, alpha, x1, y1, dw, dh, h, w, l, x, y, z, ry):
        r = LabelRecord("People", tr, occ, alpha, x1, y1, x1 + dw, y1 + dh, h, w, l, x, y, z, ry)
        (back,) = parse_label_file(format_label_file([r]))
        assert back.type == r.type and back.occluded == r.occluded
        for f in ("truncated", "alpha", "x1", "y1", "x2", "y2", "h", "w", "l", "x", "y", "z", "rotation_y"):
            assert abs(getattr(back, f) - getattr(r, f)) <= 1e-6, f
        # a second pass is exact
        assert format_label_file([back]) == format_label_file(parse_label_file(format_label_file([back])))

    def test_fuzzed_lines_total(self):
        rng = np.random.default_rng(0)
        corpus = [LINE, LINE + " 0.5", "People 0.1 1 0.3 10 20 30 60 1.6 0.7 0.7 1 1.6 12 0.2"]
        alphabet = list("0123456789.-+eE naNinf\t") + ["Car", "1e400", "-"]
        for i in range(10_000):
            toks = corpus[i % len(corpus)].split()
            op = rng.integers(5)
            if op == 0 and toks:
                del toks[rng.integers(len(toks))]
            elif op == 1:
                toks.insert(rng.integers(len(toks) + 1), str(rng.choice(alphabet)))
            elif op == 2 and toks:
                j = rng.integers(len(toks))
                toks[j] = "".join(rng.choice(alphabet, size=rng.integers(1, 6)))
            elif op == 3 and toks:
                j = rng.integers(len(toks))
                toks[j] = str(float(toks[j]) * rng.normal(0, 50)) if j else toks[j]
            else:
                rng.shuffle(toks)
            text = " ".join(toks)
            try:
                recs = parse_label_file(text)
            except MalformedLine as e:
                assert e.lineno == 1
            except ValueError:
                # float("Car") style failures must be wrapped, never leak
                pytest.fail(f"unwrapped error on {text!r}")
            else:
                for r in recs:
                    assert r.x2 > r.x1 and r.y2 > r.y1 and min(r.h, r.w, r.l) > 0

    def test_from_boxes_roundtrip(self):
        b = Box3D(1.0, 0.8, 20.0, 4.0, 1.8, 1.5, 0.4, "Car")
        r = LabelRecord.from_boxes(b, Box2D.from_corners(100, 90, 180, 140))
        back = r.to_box3d()
        assert np.allclose(back.as_array(), b.as_array())
        assert r.alpha == pytest.approx(0.4 - math.atan2(1.0, 20.0))


class TestCalib:
    def _proj(self, rng):
        p = np.array([[721.5377, 0, 609.5593, 44.85728], [0, 721.5377, 172.854, 0.2163791], [0, 0, 1, 0.002745884]])
        rect = np.eye(3) + rng.normal(0, 1e-3, (3, 3))
        tr = np.hstack([np.array([[0, -1, 0], [0, 0, -1], [1, 0, 0.0]]) + rng.normal(0, 1e-3, (3, 3)), rng.normal(0, 0.1, (3, 1))])
        return ProjectionMatrix(p, rect, tr)

    def test_roundtrip(self, rng):
        proj = self._proj(rng)
        back = parse_calib_file(format_calib_file(proj))
        for a, b in ((proj.p, back.p), (proj.rect, back.rect), (proj.lidar_to_cam, back.lidar_to_cam)):
            assert np.max(np.abs(a - b)) <= 1e-9

    def test_extra_keys(self, rng):
        text = "P0: " + " ".join(["0"] * 12) + "\n" + format_calib_file(self._proj(rng)) + "Tr_imu_to_velo: 1 2 3\n"
        parse_calib_file(text)

    def test_missing(self, rng):
        text = "\n".join(l for l in format_calib_file(self._proj(rng)).splitlines() if not l.startswith("P2"))
        with pytest.raises(MissingKey):
            parse_calib_file(text)

    def test_arity(self, rng):
        text = format_calib_file(self._proj(rng)).replace("P2: ", "P2: 1.0 ", 1)
        text = "\n".join(" ".join(l.split()[:12]) if l.startswith("P2") else l for l in text.splitlines())
        with pytest.raises(WrongArity):
            parse_calib_file(text)

    def test_dataset_error_names_file(self, tmp_path):
        ds = KittiDataset(tmp_path)
        ds.ensure_layout()
        (tmp_path / "calib" / "000001.txt").write_text("R0_rect: 1 0 0 0 1 0 0 0 1\n")
        with pytest.raises(MissingKey) as e:
            ds.read_calib("000001")
        assert "000001.txt" in str(e.value)


class TestPointFile:
    def test_two_points(self):
        raw = np.arange(8, dtype="<f4").tobytes()
        pts = read_point_cloud_bin(raw)
        assert pts.shape == (2, 4)
        assert pts[1].tolist() == [4, 5, 6, 7]

    def test_truncated(self, tmp_path):
        p = tmp_path / "x.bin"
        p.write_bytes(b"\0" * 17)
        with pytest.raises(TruncatedFile):
            read_point_cloud_bin(p)

    def test_roundtrip_bits(self, tmp_path, rng):
        pts = rng.normal(0, 30, (10_000, 4)).astype(np.float32)
        p = tmp_path / "x.bin"
        write_point_cloud_bin(p, pts)
        back = read_point_cloud_bin(p)
        assert back.tobytes() == pts.tobytes()

    def test_empty(self):
        assert read_point_cloud_bin(b"").shape == (0, 4)


class TestSplits:
    def test_reference_counts(self):
        m = make_splits([f"{i:06d}" for i in range(1295)], (0.70, 0.15, 0.15), seed=0)
        assert (len(m.train), len(m.val), len(m.test)) == (906, 194, 195)

    def test_small(self):
        m = make_splits([str(i) for i in range(10)], (0.7, 0.15, 0.15))
        assert (len(m.train), len(m.val), len(m.test)) == (7, 1, 2)

    @given(st.integers(0, 400), st.integers(0, 2**31 - 1))
    def test_partition(self, n, seed):
        ids = [f"f{i}" for i in range(n)]
        m = make_splits(ids, seed=seed)
        assert sorted(m.train + m.val + m.test) == sorted(ids)
        assert len(set(m.train) | set(m.val) | set(m.test)) == n
        assert make_splits(ids, seed=seed) == m

    @pytest.mark.parametrize("ratios", [(0.5, 0.5), (0.7, 0.2, 0.2), (1.0, 0.0, 0.0), (0.8, -0.1, 0.3)])
    def test_bad_ratios(self, ratios):
        with pytest.raises(BadRatios):
            make_splits(["a", "b"], ratios)

    def test_json(self, tmp_path):
        m = make_splits([str(i) for i in range(20)], seed=3)
        assert SplitManifest.from_json(m.to_json()) == m
        ds = KittiDataset(tmp_path)
        ds.write_splits(m)
        assert ds.read_splits() == m


class TestDataset:
    def test_frame_roundtrip(self, tmp_path):
        frame = generate_synthetic_scene(SynthSpec(), scene_rng(0, 4), "000004")
        ds = KittiDataset(tmp_path)
        ds.write_frame(frame)
        assert ds.frame_ids() == ["000004"]
        back = ds.read_frame("000004")
        assert back.points.tobytes() == frame.points.tobytes()
        assert np.array_equal(back.image, frame.image)
        assert np.allclose(back.calib.p, frame.calib.p)
        assert len(back.labels) == len(frame.labels)
        for a, b in zip(back.labels, frame.labels):
            assert a.type == b.type and abs(a.z - b.z) < 1e-6

    def test_detections_dir(self, tmp_path):
        (r,) = parse_label_file(LINE + " 0.25")
        write_detections_dir(tmp_path, {"000001": [r], "000002": []})
        got = read_detections_dir(tmp_path, ["000001", "000002", "000003"])
        assert got["000001"][0].score == 0.25
        assert got["000002"] == [] and got["000003"] == []

    def test_errors_share_base(self):
        for cls in (MalformedLine, MissingKey, WrongArity, TruncatedFile, BadRatios):
            assert issubclass(cls, FFKitError)
