"""Convert the per-class digit JSON files shipped by the `mnist` npm package
into IDX files (train 1000 / test 200, class-balanced, fixed order).

Usage: python3 digits_json_to_idx.py <package>/src/digits <out-dir>
"""
import json
import random
import struct
import sys
from pathlib import Path

TRAIN_PER_CLASS = 100
TEST_PER_CLASS = 20
PIXELS = 28 * 28


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    train, test = [], []
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        rows = [flat[i * PIXELS:(i + 1) * PIXELS] for i in range(len(flat) // PIXELS)]
        rows = [[min(255, max(0, round(v * 255))) for v in r] for r in rows]
        train += [(r, digit) for r in rows[:TRAIN_PER_CLASS]]
        test += [(r, digit) for r in rows[TRAIN_PER_CLASS:TRAIN_PER_CLASS + TEST_PER_CLASS]]
    rng = random.Random(20170301)
    rng.shuffle(train)
    rng.shuffle(test)
    for name, rows in (("train", train), ("t10k", test)):
        write_images(out / f"{name}-images-idx3-ubyte", [r for r, _ in rows])
        write_labels(out / f"{name}-labels-idx1-ubyte", [d for _, d in rows])


if __name__ == "__main__":
    main()
