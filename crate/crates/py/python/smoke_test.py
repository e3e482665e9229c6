"""Smoke test for the boxadapt_py extension. Run with pytest or directly."""

import math
import tempfile
from pathlib import Path

import boxadapt_py as ba


def test_box_round_trip_and_iou():
    b = ba.Box(10.0, 2.0, -0.9, 4.0, 1.7, 1.5, 0.4)
    again = ba.Box.from_corners(b.corners())
    assert all(abs(p - q) < 1e-9 for p, q in zip(b.center + b.dims, again.center + again.dims))
    assert abs(b.iou_3d(b) - 1.0) < 1e-9
    shifted = ba.Box(10.0 + 4.0, 2.0, -0.9, 4.0, 1.7, 1.5, 0.4)
    assert b.iou_bev(shifted) < 0.2


def test_angles():
    assert abs(ba.normalize_angle(3 * math.pi) - math.pi) < 1e-12
    assert -math.pi / 2 < ba.wrap_parallel(2.0) <= math.pi / 2


def test_frames_detector_and_eval():
    frame = ba.Frame.generate("real", 3)
    assert len(frame) > 0 and frame.boxes
    assert ba.Frame.from_json(frame.to_json()).frame_id == frame.frame_id

    det = ba.Detector("corner", seed=1)
    dets = det.detect(frame)
    assert all(0.0 <= d.confidence <= 1.0 and d.au > 0.0 for d in dets)
    report = ba.evaluate([frame], [dets])
    assert set(report) >= {"bev", "3d"}

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "ck.json"
        det.save(str(path))
        loaded = ba.Detector.load(str(path))
        assert loaded.encoding == "corner" and loaded.num_params == det.num_params

    teacher = ba.Detector("box", seed=2)
    teacher.ema_toward(ba.Detector("box", seed=3), 0.999)


def test_select_frames_and_spearman():
    picked = ba.select_frames({"a": 0.3, "b": 0.1, "c": 0.2, "d": 0.9}, 0.5)
    assert picked == ["b", "c"]
    assert abs(ba.spearman([1, 2, 3, 4, 5], [2, 4, 6, 8, 10]) - 1.0) < 1e-12


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_"):
            fn()
    print("ok")
