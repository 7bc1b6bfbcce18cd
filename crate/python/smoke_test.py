"""Smoke test for the `mtmm` extension module.

Build and run from the repository root:

    cargo build --release -p mtmm-python --features extension-module
    cp target/release/libmtmm.so python/mtmm.so
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import mtmm  # noqa: E402


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol


def main():
    # hand-worked attention case
    e = math.e
    att = mtmm.cim_attention([[1.0], [0.0]], [[1.0], [1.0]])
    assert att["n1"] == [[0.5, 0.5], [0.5, 0.5]]
    assert close(att["n2"][0][0], e / (e + 1))
    assert att["output"][1][0] == 0.0

    s = mtmm.binary_scores([True, True, False, False], [True, False, True, False])
    assert close(s["f1"], 0.5) and close(s["accuracy"], 0.5)
    assert mtmm.weighted_accuracy([True, False], [True, True]) is None

    ds = mtmm.Dataset.synthesize(n_videos=6, u_min=3, u_max=5, seed=2)
    assert len(ds) == 6 and ds.dims == (16, 12, 10)
    again = mtmm.Dataset.from_jsonl(ds.to_jsonl())
    assert again.to_jsonl() == ds.to_jsonl()

    config = mtmm.ModelConfig(ds.dims, d=6, dense_units=8)
    assert config.rep_width == 18 * 6
    assert mtmm.ModelConfig(ds.dims, modalities="t").rep_width == 400

    model, history = mtmm.Model.train(config, ds, epochs=5, seed=1)
    assert len(history["epochs"]) == 5
    report = model.evaluate(ds)
    assert 0.0 <= report["sentiment"]["accuracy"] <= 1.0
    assert len(report["emotion"]["per_class"]) == len(mtmm.EMOTIONS) == 7

    vid = ds.video_ids()[0]
    pred = model.predict(ds, vid)
    assert all(close(sum(r), 1.0) for r in pred["sentiment"])
    maps = model.attention(ds, vid)
    assert sorted(maps) == ["AV", "TA", "TV"]
    n1, n2 = maps["TV"]
    assert all(close(sum(r), 1.0) for r in n1 + n2)

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "checkpoint.txt")
        model.save(path)
        loaded = mtmm.Model.load(path)
        assert loaded.evaluate(ds) == report
        assert loaded.num_parameters == model.num_parameters

    try:
        model.predict(ds, "missing")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown video id accepted")

    print("python smoke test passed:", model)


if __name__ == "__main__":
    main()
