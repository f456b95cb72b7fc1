"""Smoke test for the ragrank extension module.

Build and install it first, e.g. `maturin develop -m crates/py/Cargo.toml`,
then run `python python/smoke_test.py` from the repository root.
"""

import math
import tempfile
from pathlib import Path

import ragrank


def check_primitives():
    counter = ragrank.TokenCounter.bpe("assets/p50k_base.tiktoken")
    assert counter.count("hello world") == 2
    assert ragrank.normalize_text("a\r\nb\n\n\nc") == "a b\n\nc"

    text = " ".join(["star"] * 700)
    chunks = ragrank.chunk_text(text, counter, max_tokens=300, overlap=30)
    assert all(c["token_len"] <= 300 for c in chunks)
    assert chunks[0]["start"] == 0 and chunks[-1]["end"] == len(text)

    emb = ragrank.HashEmbedder(64)
    vecs = emb.embed(["dense halo", "dense halo", "bright jet"])
    assert len(vecs) == 3 and len(vecs[0]) == 64
    assert vecs[0] == vecs[1]

    picked = ragrank.mmr([[1, 0], [1, 0], [0, 1]], [1, 0.2], k=2, lambda_=0.5)
    assert picked == [0, 2], picked

    r = ragrank.pagerank([[1, 0], [0, 1], [1, 1]], personalization=[1, 1, 1], max_iter=1000)
    assert abs(sum(r["scores"]) - 1) < 1e-9 and r["converged"]

    assert ragrank.rouge_n("the cat", "the cat sat", 1) == 0.8
    assert ragrank.rouge_l("a c d b", "a b c d") == 0.75
    assert ragrank.accuracy(["A", None, "B"], ["A", "B", "B"]) == 2 / 3
    assert math.isclose(ragrank.macro_f1(["A", "B"], ["A", "B"]), 1.0)

    try:
        ragrank.Config.defaults().with_overrides({"pr.alpha": 1.0})
    except ragrank.RagrankError:
        pass
    else:
        raise AssertionError("alpha = 1 must be rejected")


def check_pipeline(tmp: Path):
    cfg = ragrank.Config.defaults().with_overrides({"pr.top_k": 2})
    assert cfg.to_dict()["pr"]["top_k"] == 2
    pipeline = ragrank.Pipeline(cfg)

    notes = tmp / "notes.txt"
    notes.write_text(
        "Faint nebula surrounds hot cloud.\n\n"
        "The remnant designated QX-41 is a white dwarf. Cold halo traces dense shell.\n"
    )
    rec = pipeline.answer(
        [str(notes)],
        "What is the remnant designated QX-41?",
        options={"A": "red giant", "B": "white dwarf"},
    )
    assert rec["status"] == "ok", rec
    assert rec["parsed_label"] == "B"
    assert rec["source_files"] == ["notes.txt"]
    assert pipeline.live_sessions() == []

    synth = ragrank.write_synthetic_set(str(tmp / "set"), instances=6, seed=3)
    out = pipeline.run_batch(synth["dataset_path"])
    assert out["report"]["accuracy"] == 1.0
    assert len(out["records"]) == 6

    rows = pipeline.sweep(synth["dataset_path"], "pr.top_k=1,3")
    assert [row["value"] for row in rows] == ["1", "3"]


def main():
    check_primitives()
    with tempfile.TemporaryDirectory() as tmp:
        check_pipeline(Path(tmp))
    print("python smoke test passed")


if __name__ == "__main__":
    main()
