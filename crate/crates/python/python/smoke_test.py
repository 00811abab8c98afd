"""Smoke test for the emofuse extension module.

Build and install first, e.g. `maturin develop --release` from crates/python.
"""

import math
import os
import tempfile

import emofuse


def main():
    head, coattn = emofuse.fusion_param_counts(768, 1024, 8, 8)
    assert head == 14344, head
    assert coattn == 6429696, coattn

    rates = emofuse.bayes_rates(0.25)
    assert rates["bimodal"] == 1.0 and rates["speech_only"] == 0.75

    m = emofuse.categorical_metrics([0, 1, 2, 3, 0], [0, 1, 2, 3, 1])
    assert math.isclose(m["accuracy"], 0.8)
    s = emofuse.score_metrics([0.4, -1.2, 2.6], [0.3, -0.9, 3.0])
    assert math.isclose(s["acc7"], 1.0) and s["mae"] > 0

    ds = emofuse.Dataset.synthetic(n_examples=80, seed=1, flip_prob=0.0)
    assert len(ds) == 80 and ds.mode == "categorical"
    pipe = emofuse.Pipeline(seed=1, codebook_size=16, layers=1, d_model=16, heads=2, epochs=2, lr=1e-3)
    pre = pipe.prepare(ds)
    assert pre.speech_vocab_size == 16 + 5
    tokens = pre.text_tokens(ds.texts("train")[0])
    assert tokens[0] == 1 and len(tokens) > 1

    model, history = pipe.train(ds, pre, fusion="coattn")
    assert model.fusion == "coattn" and history
    metrics = model.evaluate(ds, pre, "test")
    assert 0.0 <= metrics["accuracy"] <= 1.0
    preds = model.predict(ds, pre, "test")
    assert all(p in emofuse.EMOTIONS for p in preds)

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.ckpt")
        model.save(path)
        again = emofuse.Model.load(path)
        assert again.predict(ds, pre, "test") == preds
        ds.save(os.path.join(d, "data.jsonl"))
        assert len(emofuse.Dataset.load(os.path.join(d, "data.jsonl"))) == 80

    try:
        pipe.train(ds, pre, fusion="speech-only", freeze="text")
    except ValueError:
        pass
    else:
        raise AssertionError("invalid combination accepted")

    print("smoke test passed: accuracy %.3f" % metrics["accuracy"])


if __name__ == "__main__":
    main()
