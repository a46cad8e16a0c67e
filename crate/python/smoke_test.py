"""Smoke test for the multipl_py extension module.

Build first:  maturin develop -m crates/python/Cargo.toml --release
Optionally pass a checkpoint path to exercise the Model bindings.
"""
import itertools
import json
import math
import pathlib
import sys
import tempfile

import multipl_py as m


def logaddexp(a, b):
    if a == -math.inf:
        return b
    return max(a, b) + math.log1p(math.exp(-abs(a - b)))


def brute_ctc(log_probs, target):
    total = -math.inf
    t, v = len(log_probs), len(log_probs[0])
    for path in itertools.product(range(v), repeat=t):
        if m.collapse(list(path)) != target:
            continue
        s = sum(log_probs[i][c] for i, c in enumerate(path))
        total = logaddexp(total, s)
    return total


def log_softmax(row):
    mx = max(row)
    z = mx + math.log(sum(math.exp(x - mx) for x in row))
    return [x - z for x in row]


def check_ctc():
    lp = [log_softmax([0.1 * (i + 1) * (c - 1.3) for c in range(3)]) for i in range(5)]
    target = [1, 2]
    got = m.ctc_logprob(lp, target)
    want = brute_ctc(lp, target)
    assert abs(got - want) < 1e-9, (got, want)
    nll, grad = m.ctc_nll(lp, target)
    assert abs(nll + got) < 1e-9
    assert len(grad) == 5 and len(grad[0]) == 3
    assert m.greedy_decode([[0, 5, 0], [0, 5, 0], [9, 0, 0], [0, 5, 0]]) == [1, 1]


def check_eval():
    assert m.edit_distance("kitten", "sitting") == (3, 2, 1, 0)
    assert m.cer("abc", "abc") == 0.0
    assert abs(m.wer("a b c d", "a x c") - 0.5) < 1e-12


def check_lm_and_beam():
    lm = m.NGramLM.train(["a b", "a b a", "b a"], 2)
    assert lm.order == 2
    assert lm.logprob(["a", "b"]) > lm.logprob(["b", "b"])
    symbols = ["<blank>", " ", "a", "b"]
    lp = [log_softmax(r) for r in ([0, 0, 4, 0], [4, 0, 0, 0], [0, 4, 0, 0], [0, 0, 0, 4])]
    text, score, ctc = m.beam_decode(lp, symbols, beam_size=8)
    assert text == "a b", text
    text_lm, _, _ = m.beam_decode(lp, symbols, lm=lm, beam_size=8, alpha=0.5, beta=0.5)
    assert text_lm == "a b", text_lm
    assert ctc <= 0.0 and score <= 0.0


def check_frontend_and_corpus():
    sr = 16000
    tone = [0.5 * math.sin(2 * math.pi * 440 * i / sr) for i in range(sr // 10)]
    feats = m.log_mel(tone, sample_rate_hz=sr, n_mels=40)
    assert len(feats) > 0 and len(feats[0]) == 40
    preset = json.loads(m.toy_preset())
    corpus = preset["corpus"]
    corpus["base_labeled"] = 20
    corpus["valid_per_language"] = 5
    corpus["lm_sentences"] = 20
    with tempfile.TemporaryDirectory() as d:
        langs = m.gen_corpus(json.dumps(corpus), pathlib.Path(d))
        assert langs == [l["id"] for l in corpus["languages"]]
        fea = sorted(pathlib.Path(d).rglob("*.fea"))
        assert fea, "no feature files written"
        x = m.load_features(fea[0])
        assert len(x[0]) == corpus["feature_dim"]


def check_model(path):
    model = m.Model.load(path)
    x = [[0.0] * 12 for _ in range(96)]
    logits = model.ctc_logits(x)
    assert len(logits[0]) == len(model.symbols)
    print("transcript:", repr(model.transcribe(x)), "cropped:", repr(model.transcribe(x, crop_len=48)))


def main():
    check_ctc()
    check_eval()
    check_lm_and_beam()
    check_frontend_and_corpus()
    if len(sys.argv) > 1:
        check_model(sys.argv[1])
    print("smoke test ok")


if __name__ == "__main__":
    main()
