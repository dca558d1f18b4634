"""Smoke test for the evrep_py extension.

Build and install first:
    pip install --no-build-isolation ./crates/python
then run:
    python python/smoke_test.py
"""

import json
import struct
import tempfile
from pathlib import Path

import evrep_py as ev


def record(x, y, t, positive):
    return bytes([x, y, (0x80 if positive else 0) | (t >> 16)]) + struct.pack(">H", t & 0xFFFF)


def main():
    data = record(3, 4, 10, True) + record(5, 6, 20, True) + record(3, 4, 30, False)
    stream = ev.EventStream.from_bytes(data)
    assert len(stream) == 3
    assert stream.to_bytes() == data
    assert stream.full_window() == (10, 31)

    img = ev.tencode(stream)
    assert (img.height, img.width, img.kind) == (34, 34, "tencode")
    px = img.pixels()
    at = lambda y, x: px[(y * 34 + x) * 3:(y * 34 + x) * 3 + 3]
    # latest event at (3, 4) is negative, t = 30 -> green 20/21
    assert at(4, 3) == [0.0, 20 / 21, 1.0], at(4, 3)
    assert at(6, 5) == [1.0, 10 / 21, 0.0], at(6, 5)
    assert len(img.png()) > 0

    frame = ev.event_frame(stream)
    assert frame.kind == "event_frame"

    assert ev.jaccard_loss("a red car", "a blue car") == 0.5
    assert ev.fidelity_loss(img, img) == 0.0
    assert ev.dual_loss(0.5, 0.25, 1.0, 2.0) == 1.0

    gen = ev.Generator("tiny", seed=1)
    out = gen.generate(img)
    assert (out.height, out.width, out.kind) == (34, 34, "evrep")
    assert all(0.0 <= v <= 1.0 for v in out.pixels())

    mock = ev.Backend("mock")
    caption = mock.caption(img)
    assert caption == mock.caption(img)
    digits = ev.class_list("nmnist")
    text, label = mock.recognize(img, digits)
    assert label in digits
    assert ev.parse_prediction("It is a 7.", digits) == "7"
    assert ev.parse_prediction("no idea", digits) is None

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        ckpt = tmp / "g.ckpt"
        gen.save(str(ckpt))
        assert ev.Generator.load(str(ckpt)).checksum() == gen.checksum()

        # tiny paired dataset: one class, two samples, RGB frames from the tencode images
        lines = []
        for i in range(2):
            (tmp / f"s{i}.bin").write_bytes(data)
            img.save(str(tmp / f"s{i}.png"))
            lines.append(json.dumps({"id": f"s{i}", "events_path": f"s{i}.bin", "label": "3", "rgb_path": f"s{i}.png"}))
        (tmp / "manifest.jsonl").write_text("\n".join(lines) + "\n")

        trained, summary = ev.train(str(tmp), mock, out_dir=str(tmp / "run"), epochs=2, batch_size=2,
                                    learning_rate=1e-3, seed=0)
        assert summary["steps"] == 2 and len(summary["fidelity"]) == 2
        assert Path(summary["checkpoint"]).is_file()

        rows = ev.evaluate(str(tmp), mock, str(tmp / "eval"), kinds=["tencode", "evrep"],
                           generator=trained, classes=digits)
        assert [r["kind"] for r in rows] == ["tencode", "evrep"]
        assert all(r["total"] == 2 for r in rows)
        assert (tmp / "eval" / "report.csv").is_file()

    print("smoke test passed")


if __name__ == "__main__":
    main()
