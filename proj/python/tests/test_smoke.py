import json
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

import dmtd

ROOT = Path(__file__).resolve().parents[2]


def tiny_model(seed=0):
    c = dmtd.ModelConfig()
    c.d_model, c.n_heads, c.d_ff = 16, 2, 32
    c.n_layers, c.n_encoding, c.n_thinking, c.n_decoding = 4, 1, 2, 1
    c.max_seq_len, c.seed = 64, seed
    return dmtd.Model(c)


def test_tokenizer_round_trip():
    assert dmtd.tokenize(b"ab") == [97, 98]
    assert dmtd.tokenize(b"\x1e") == [256]
    data = bytes(range(256))
    assert dmtd.detokenize(dmtd.tokenize(data)) == data
    with pytest.raises(dmtd.TokenIndexError):
        dmtd.detokenize([300])


def test_cycle_mask_and_plt():
    assert dmtd.cycle_mask(9, 3) == [1, 0, 0, 1, 0, 0, 1, 0, 0]
    assert dmtd.plt_theoretical(36, 8, 3) == Fraction(52, 108)
    assert abs(1 / float(dmtd.plt_theoretical(36, 8, 3)) - 2.08) < 5e-3
    with pytest.raises(dmtd.ConfigError):
        dmtd.cycle_mask(4, 0)


def test_scaling_fit():
    pts = [(t, 2.0 - 0.178 * np.log10(t)) for t in (1e3, 1e4, 1e5, 1e6)]
    fit = dmtd.fit_scaling_law(pts)
    assert abs(fit["slope"] + 0.178) < 1e-9
    assert abs(fit["r_squared"] - 1.0) < 1e-9


def test_masked_forward_shape_and_causality():
    m = tiny_model()
    tokens = np.array([[1, 2, 3, 4, 5, 6], [7, 8, 9, 10, 11, 12]])
    logits = m.masked_forward(tokens, tau=2)
    assert logits.shape == (2, 6, 257)
    changed = tokens.copy()
    changed[:, -1] = 0
    again = m.masked_forward(changed, tau=2)
    np.testing.assert_array_equal(logits[:, :-1], again[:, :-1])


def test_generate_matches_replay_and_plt():
    m = tiny_model(3)
    ctx = [10, 20, 30, 40]
    r = m.generate(ctx, max_new=6, tau_infer=3)
    assert len(r["tokens"]) == 6
    assert Fraction(*r["plt_measured"]) == Fraction(*r["plt_theoretical"])
    seq = np.array([ctx + r["tokens"]])
    logits = m.masked_forward(seq, tau=3, anchor=(len(ctx) - 1) % 3)
    argmax = logits[0, len(ctx) - 1 : len(ctx) - 1 + 6].argmax(axis=-1)
    assert argmax.tolist() == r["tokens"]
    t = json.loads(r["transcript"])
    assert [p["kind"] for p in t["passes"]] == ["prefill", "light", "light", "boundary", "light", "light"]


def test_untrained_loss_near_uniform():
    m = tiny_model()
    rng = np.random.default_rng(0)
    windows = rng.integers(0, 256, size=(4, 32)).tolist()
    assert abs(m.evaluate(windows, tau=2) - np.log(256)) < 0.2


def test_cli_round_trip(tmp_path):
    cfg = (ROOT / "configs" / "tiny.ini").read_text()
    cfg = cfg.replace("steps = 40", "steps = 10").replace("log_interval = 10", "log_interval = 5")
    cfg = cfg.replace("../data/corpus.txt", str(ROOT / "data" / "corpus.txt"))
    cfg = cfg.replace("../runs/tiny", str(tmp_path))
    (tmp_path / "run.ini").write_text(cfg)
    code, out, err = dmtd.run_cli(["train", "--config", str(tmp_path / "run.ini")])
    assert code == 0, err
    ck = dmtd.load_checkpoint(str(tmp_path / "model.ckpt"))
    assert ck["step"] == 10
    assert ck["variant"] == "encoding"
    r = ck["model"].generate([72, 105], max_new=8, tau_infer=2, tau_train=2, variant="encoding")
    assert len(r["tokens"]) == 8
    code, out, _ = dmtd.run_cli(["generate", "--checkpoint", str(tmp_path / "model.ckpt"), "--prompt", "Hi", "--max-new", "8"])
    assert code == 0
    assert isinstance(out, bytes) and len(out) >= 8
    code, _, _ = dmtd.run_cli(["inspect", "--checkpoint", str(tmp_path / "missing.ckpt")])
    assert code == 3
