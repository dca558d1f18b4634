"""Builds the 10-sample replay fixture.

Writes one N-MNIST binary file per digit, a manifest, and a replay file of
recognition answers for the Tencode images. Image digests are computed here
from the raw events, without the Rust encoder. Seven answers name the true
digit; the other three do not.
"""
import hashlib
import json
import math
import os
import random

SIZE = 34
HERE = os.path.dirname(os.path.abspath(__file__))
CLASSES = [str(d) for d in range(10)]
PROMPT = (
    "Which one of the following categories best matches the image? "
    "Answer with the category name only: " + ", ".join(CLASSES) + "."
)
ANSWERS = {
    "0": "0",
    "1": "The digit is 1.",
    "2": "This looks like a 7.",
    "3": "3",
    "4": "Either 5 or 4.",
    "5": "five (5)",
    "6": "I cannot tell.",
    "7": "Digit 7",
    "8": "8",
    "9": "It is a 9",
}


def events_for(digit):
    rng = random.Random(1000 + digit)
    t = rng.randrange(0, 500)
    out = []
    for _ in range(40 + 7 * digit):
        t += rng.randrange(0, 900)
        out.append((rng.randrange(SIZE), rng.randrange(SIZE), t, rng.random() < 0.5))
    # revisit a pixel so the later event must win
    x, y, _, p = out[3]
    out.append((x, y, t + 17, not p))
    return out


def encode_bin(events):
    b = bytearray()
    for x, y, t, p in events:
        b += bytes([x, y, (0x80 if p else 0) | ((t >> 16) & 0x7F), (t >> 8) & 0xFF, t & 0xFF])
    return bytes(b)


def tencode_rgb8(events):
    t0 = events[0][2]
    t1 = events[-1][2] + 1
    px = [[[0.0, 0.0, 0.0] for _ in range(SIZE)] for _ in range(SIZE)]
    for x, y, t, p in events:
        px[y][x] = [1.0 if p else 0.0, (t - t0) / (t1 - t0), 0.0 if p else 1.0]
    q = lambda v: int(math.floor(min(max(v, 0.0), 1.0) * 255.0 + 0.5))
    return bytes(q(v) for row in px for pix in row for v in pix)


def main():
    manifest, replay = [], []
    for d in range(10):
        ev = events_for(d)
        name = f"events/{d}.bin"
        os.makedirs(os.path.join(HERE, "events"), exist_ok=True)
        with open(os.path.join(HERE, name), "wb") as f:
            f.write(encode_bin(ev))
        manifest.append({"id": f"s{d}", "events_path": name, "label": str(d)})
        replay.append(
            {
                "prompt_sha256": hashlib.sha256(PROMPT.encode()).hexdigest(),
                "image_sha256": hashlib.sha256(tencode_rgb8(ev)).hexdigest(),
                "text": ANSWERS[str(d)],
            }
        )
    with open(os.path.join(HERE, "manifest.jsonl"), "w") as f:
        f.writelines(json.dumps(m) + "\n" for m in manifest)
    with open(os.path.join(HERE, "recognition.jsonl"), "w") as f:
        f.writelines(json.dumps(r) + "\n" for r in replay)
    with open(os.path.join(HERE, "classes.txt"), "w") as f:
        f.writelines(c + "\n" for c in CLASSES)


if __name__ == "__main__":
    main()
