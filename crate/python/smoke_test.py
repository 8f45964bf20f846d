"""Smoke test for the fidpoint_py extension.

Build and install first:
    cd crates/python && maturin develop --release
"""

import os
import random
import sys
import tempfile

import fidpoint_py as fp

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
GOLDEN = os.path.join(ROOT, "crates", "core", "tests", "golden")


def main():
    rng = random.Random(3)
    w, h = 40, 30
    data = bytes(rng.randrange(256) for _ in range(w * h))
    img = fp.GrayImage(w, h, data)
    assert (img.width, img.height) == (w, h)
    assert img.to_bytes() == data
    assert img.mirrored().get(0, 0) == img.get(w - 1, 0)

    t = fp.IntegralTables(img, rotated=True)
    for _ in range(50):
        x, y = rng.randrange(w), rng.randrange(h)
        rw, rh = rng.randint(1, w - x), rng.randint(1, h - y)
        brute = sum(data[j * w + i] for j in range(y, y + rh) for i in range(x, x + rw))
        assert t.rect_sum(x, y, rw, rh) == brute

    basic = ["EDGE_H", "EDGE_V", "LINE_H", "LINE_V", "DIAG"]
    assert sum(fp.count_features(24, 24, k) for k in basic) == 162336
    assert len(fp.enumerate_features(24, 24, "BASIC", stride=2)) == 45396

    cascade = fp.Cascade.load(os.path.join(GOLDEN, "cascade.txt"))
    assert fp.Cascade.from_text(cascade.serialize()).serialize() == cascade.serialize()
    assert cascade.mirrored().mirrored().serialize() == cascade.serialize()
    print(cascade, cascade.stage_rates())

    image = fp.GrayImage.read_pgm(os.path.join(GOLDEN, "image.pgm"))
    print("point:", fp.detect_point(image, cascade))

    with open(os.path.join(GOLDEN, "image.pts")) as f:
        pts = fp.parse_points(f.read())
    assert len(pts) == len(fp.landmarks()) == 20
    assert fp.parse_points(fp.write_points(pts)) == pts
    assert fp.interocular_success((0.0, 3.0), (0.0, 0.0), (-15.0, 0.0), (15.0, 0.0), 0.1)

    patches = fp.PatchSet.read(os.path.join(GOLDEN, "patches.fpset"))
    assert len(patches) == len(patches.patches(True)) + len(patches.patches(False))

    code, out, _ = fp.run_cli(["inspect", os.path.join(GOLDEN, "cascade.txt")])
    assert code == 0 and out.startswith("window"), out
    with tempfile.TemporaryDirectory() as d:
        code, _, log = fp.run_cli(["mirror", os.path.join(GOLDEN, "cascade.txt"), os.path.join(d, "m.txt")])
        assert code == 0, log
        assert fp.Cascade.load(os.path.join(d, "m.txt")).serialize() == cascade.mirrored().serialize()
    print("ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
