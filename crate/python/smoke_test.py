"""Smoke test for the `fpcil` extension module.

Build and run from the repository root:

    cargo build --release -p fpcil-py
    cp target/release/libfpcil.so python/fpcil.so
    python3 python/smoke_test.py
"""

import json
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))
import fpcil  # noqa: E402

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "fixtures"


def tiny_config():
    cfg = fpcil.ScenarioConfig.reference()
    for key, value in [
        ("name", '"smoke"'),
        ("world.num_classes", "10"),
        ("world.dim", "8"),
        ("world.num_distractors", "10"),
        ("data.train_per_class", "20"),
        ("data.test_per_class", "10"),
        ("schedule.base_size", "4"),
        ("schedule.inc_size", "2"),
        ("auxiliary.n_per_class", "20"),
        ("extractor.layer_dims", "[8, 16, 8]"),
        ("extractor.train.epochs", "2"),
        ("head.kind", '"ncm"'),
        ("eval_seeds", "[0]"),
    ]:
        cfg.set(key, value)
    cfg.validate()
    return cfg


def check_run():
    cfg = tiny_config()
    report = fpcil.run_scenario(cfg, 0)
    assert len(report.per_step) == 4, report.per_step
    assert 0.0 <= report.average_incremental_accuracy <= 1.0
    assert report.config_digest == cfg.digest()
    again = fpcil.run_scenario(cfg, 0)
    assert again.to_json() == report.to_json()
    aia = fpcil.average_incremental_accuracy([s.top1 for s in report.per_step])
    assert abs(aia - report.average_incremental_accuracy) < 1e-12
    with tempfile.TemporaryDirectory() as d:
        run_dir = report.write(Path(d))
        back = fpcil.read_report(run_dir)
        assert back.to_json() == report.to_json()
    try:
        cfg.set("schedule.inc_size", "0")
        cfg.validate()
    except fpcil.ConfigError:
        pass
    else:
        raise AssertionError("inc_size 0 accepted")
    print("run:", report)


def check_head():
    head = fpcil.Head("ncm")
    head.update({0: [[0.0, 0.0], [0.2, 0.0]], 1: [[5.0, 5.0], [5.2, 5.0]]})
    assert head.classes == [0, 1]
    assert head.predict([4.0, 4.0]) == 1
    assert head.predict_batch([[0.1, 0.0], [5.0, 5.1]]) == [0, 1]
    assert head.retained_floats == 4
    try:
        head.update({1: [[1.0, 1.0]]})
    except fpcil.FpcilError:
        pass
    else:
        raise AssertionError("repeated class accepted")
    print("head:", head.kind, head.classes)


def check_schedule():
    steps = fpcil.build_schedule(100, 0, 10, 1993)
    assert len(steps) == 10 and sorted(c for s in steps for c in s) == list(range(100))


def check_predictor():
    d = FIXTURES / "predictor" / "b0_inc10"
    texts = [p.read_text() for p in sorted(d.glob("transcript_*.txt"))]
    initial = d.joinpath("initial.names").read_text().split("\n")[:-1]
    counts, levels = fpcil.tally_transcripts(texts, initial)
    golden = json.loads((d / "golden_tally.json").read_text())
    assert counts == golden["counts"]
    expected = json.loads((d / "expected_levels.json").read_text())
    future = set(d.joinpath("future.names").read_text().split("\n")[:-1])
    for level, want in expected.items():
        got = levels[level]
        assert len(got) == want["selected"], (level, len(got))
        assert len(set(got) & future) == want["correct"], level
    assert "airplane" in fpcil.parse_transcript("1. Airplane\n2. ship", ["airplane"])
    print("predictor:", {k: len(v) for k, v in levels.items()})


def check_embeddings():
    rows = fpcil.read_embeddings(FIXTURES / "fpeb" / "three_images.fpeb")
    expected = json.loads((FIXTURES / "fpeb" / "three_images.expected.json").read_text())
    assert [(r[0], r[1], r[2], r[3]) for r in rows] == [
        (e["features"], e["class_id"], e["origin"], e["split"]) for e in expected
    ]
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "copy.fpeb"
        fpcil.write_embeddings(path, rows)
        assert fpcil.read_embeddings(path) == rows
    manifest = fpcil.manifest_from_lexicon(FIXTURES / "cifar100_lexicon.tsv", n_samples=5)
    assert len(manifest.strip().split("\n")) == 100
    print("embeddings:", len(rows), "rows")


if __name__ == "__main__":
    check_schedule()
    check_head()
    check_predictor()
    check_embeddings()
    check_run()
    print("ok")
