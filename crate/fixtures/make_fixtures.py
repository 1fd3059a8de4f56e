"""Regenerate the test fixtures under fixtures/.

predictor/b0_inc10/
    Ten completion transcripts for the first ten classes of the lexicon
    under a B0 Inc10 split with order seed 1993. Each predicted name is
    placed in a chosen number of transcripts, so the golden tally is known
    by construction. Parsing noise (numbering, bullets, casing, repeats,
    URLs, narrative sentences) is mixed in. The vote table is laid out so
    that, with thresholds 1/4/7, the three levels select 150/90/53 names of
    which 53/43/30 are true future classes.

fpeb/
    A three-sample embedding container with its metadata sidecar, shaped
    like the output of the image bridge.

Run from the repository root: python3 fixtures/make_fixtures.py
"""

import json
import random
import re
import struct
from pathlib import Path

ROOT = Path(__file__).resolve().parent
MASK = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15


def mix64(z):
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return z ^ (z >> 31)


class SplitMix64:
    def __init__(self, seed):
        self.state = seed & MASK

    def next_u64(self):
        self.state = (self.state + GAMMA) & MASK
        return mix64(self.state)

    def below(self, bound):
        threshold = ((1 << 64) - bound) % bound
        while True:
            m = self.next_u64() * bound
            if (m & MASK) >= threshold:
                return m >> 64


def class_order(n, seed):
    order = list(range(n))
    rng = SplitMix64(seed)
    for i in range(n - 1, 0, -1):
        j = rng.below(i + 1)
        order[i], order[j] = order[j], order[i]
    return order


def read_lexicon(path):
    names = []
    for line in path.read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        names.append(line.split("\t")[0].strip())
    return names


WRONG = """
airplane automobile bird cat deer dog frog horse ship truck giraffe zebra
penguin owl eagle parrot duck goose swan flamingo peacock pigeon crow
sparrow hawk bat hedgehog badger moose elk bison buffalo goat sheep pig
donkey llama alpaca hippopotamus rhinoceros gorilla orangutan monkey panda
koala cheetah jaguar hyena coyote octopus jellyfish starfish seahorse squid
shrimp goldfish salmon tuna toad salamander ant wasp dragonfly grasshopper
ladybug moth scorpion banana strawberry grape cherry lemon watermelon
pineapple tomato carrot broccoli cucumber potato daisy lily lotus cactus
fern bamboo guitar piano violin sofa desk bench lighthouse windmill tent
umbrella kite balloon helicopter sailboat submarine
""".split()
WRONG += ["birch tree", "cedar tree", "fire truck", "polar bear", "hot air balloon"]

NOISE = [
    "The dataset can be downloaded from http://www.example-vision.org/data/classes.tar.gz",
    "Each class contains 600 images of size thirty two pixels",
    "The images were collected from the internet and labeled by human annotators.",
    "We train a ResNet model for one hundred epochs on this benchmark",
    "500",
    "www.image-classes.net",
    "Table 1 lists the number of training images for every class in the dataset.",
]


def clean(token):
    # Independent restatement of the parsing rules: strip numbering and
    # bullets, trailing punctuation and quotes; drop long, letterless,
    # narrative (> 4 words) and URL tokens.
    prev = None
    t = token
    while prev != t:
        prev = t
        t = t.strip()
        t = re.sub(r"^\d+[.)](\s|$)", "", t).lstrip()
        for b in "-*•":
            if t.startswith(b):
                t = t[1:].lstrip()
        t = t.rstrip(".;:!?").strip("\"'`").strip()
    t = " ".join(t.split()).lower()
    if not t or len(t) > 60 or not any(c.isalpha() for c in t):
        return None
    if len(t.split(" ")) > 4 or "://" in t or t.startswith("www."):
        return None
    return t


def parse(text):
    out, seen = [], set()
    for raw in re.split(r"[,\n]", text):
        t = clean(raw)
        if t is not None and t not in seen:
            seen.add(t)
            out.append(t)
    return out


def styled(name, rng):
    return rng.choice([name, name, name.title(), name.upper() if len(name) < 8 else name])


def render(names, rng):
    # Opening comma-separated continuation, then a numbered or bulleted list
    # with a few noise lines and an occasional repeat.
    names = names[:]
    rng.shuffle(names)
    cut = rng.randint(len(names) // 4, len(names) // 2)
    head, tail = names[:cut], names[cut:]
    if tail and rng.random() < 0.7:
        tail.append(rng.choice(tail))
    lines = [" " + ", ".join(styled(n, rng) for n in head) + "."]
    lines.append("")
    lines.append(rng.choice(NOISE))
    numbered = rng.random() < 0.5
    for i, n in enumerate(tail, 1):
        prefix = f"{i}. " if numbered else rng.choice(["- ", "* ", "• "])
        lines.append(prefix + styled(n, rng))
        if rng.random() < 0.05:
            lines.append(rng.choice(NOISE))
    lines.append(rng.choice(NOISE))
    return "\n".join(lines) + "\n"


def make_predictor_fixture():
    names = read_lexicon(ROOT / "cifar100_lexicon.tsv")
    assert len(names) == 100
    order = class_order(100, 1993)
    initial = [names[c] for c in order[:10]]
    future = [names[c] for c in order[10:]]
    lexicon = set(names)
    wrong = [w for w in dict.fromkeys(WRONG) if w not in lexicon]
    assert len(wrong) >= 97, len(wrong)

    rng = random.Random(1993)
    true_pick = rng.sample(future, 53)
    wrong_pick = rng.sample(wrong, 97)
    votes = {}
    # 30 + 23 names at >= 7 votes, 13 + 24 at 4..6, 10 + 50 at 1..3.
    for group, lo, hi in [
        (true_pick[:30] + wrong_pick[:23], 7, 10),
        (true_pick[30:43] + wrong_pick[23:47], 4, 6),
        (true_pick[43:] + wrong_pick[47:], 1, 3),
    ]:
        for n in group:
            votes[n] = rng.randint(lo, hi)
    # The model often echoes prompt classes; they are tallied but never
    # selected.
    for n in initial:
        votes[n] = rng.randint(1, 10)

    per_transcript = [[] for _ in range(10)]
    for n in sorted(votes):
        for t in rng.sample(range(10), votes[n]):
            per_transcript[t].append(n)

    out = ROOT / "predictor" / "b0_inc10"
    out.mkdir(parents=True, exist_ok=True)
    texts = [render(names_t, rng) for names_t in per_transcript]
    for i, text in enumerate(texts, 1):
        (out / f"transcript_{i:02d}.txt").write_text(text)

    counts = {}
    for text in texts:
        for n in set(parse(text)):
            counts[n] = counts.get(n, 0) + 1
    assert counts == votes, sorted(set(counts.items()) ^ set(votes.items()))

    (out / "golden_tally.json").write_text(
        json.dumps({"repeats": 10, "counts": dict(sorted(counts.items()))}, indent=2) + "\n"
    )
    (out / "initial.names").write_text("\n".join(initial) + "\n")
    (out / "future.names").write_text("\n".join(future) + "\n")

    excluded = set(initial)
    truth = set(future)
    expected = {}
    for level, threshold in [("full", 1), ("R1", 4), ("R2", 7)]:
        sel = {n for n, c in counts.items() if c >= threshold and n not in excluded}
        expected[level] = {"selected": len(sel), "correct": len(sel & truth)}
    assert expected == {
        "full": {"selected": 150, "correct": 53},
        "R1": {"selected": 90, "correct": 43},
        "R2": {"selected": 53, "correct": 30},
    }, expected
    (out / "expected_levels.json").write_text(json.dumps(expected, indent=2) + "\n")


def make_fpeb_fixture():
    # Values are multiples of 1/8 so they survive f32 exactly.
    rows = [
        ([0.5, -1.25, 2.0, 0.0, 3.875, -0.125, 1.0, 4.5], 3, "real", "train"),
        ([1.5, 0.25, -2.0, 7.0, 0.875, 0.125, -1.0, 0.5], 3, "real", "train"),
        ([-0.5, 2.25, 0.0, -3.0, 1.625, 2.375, 0.0, -4.5], 17, "synthetic", "train"),
    ]
    dim = len(rows[0][0])
    out = ROOT / "fpeb"
    out.mkdir(parents=True, exist_ok=True)
    payload = b"FPEB" + struct.pack("<HIQ", 1, dim, len(rows))
    for feats, *_ in rows:
        payload += struct.pack(f"<{dim}f", *feats)
    (out / "three_images.fpeb").write_bytes(payload)
    meta = "".join(
        json.dumps({"class_id": c, "origin": o, "split": s}, separators=(",", ":")) + "\n" for _, c, o, s in rows
    )
    (out / "three_images.meta.jsonl").write_text(meta)
    (out / "three_images.expected.json").write_text(
        json.dumps([{"features": f, "class_id": c, "origin": o, "split": s} for f, c, o, s in rows], indent=2)
        + "\n"
    )


if __name__ == "__main__":
    make_predictor_fixture()
    make_fpeb_fixture()
