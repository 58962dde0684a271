import json
import pathlib

import numpy as np
import pytest

import danube

DATA = pathlib.Path(__file__).resolve().parents[2] / "tests" / "data"
TEMPLATE = (
    "{{ bos_token }}{% for m in messages %}<|{{ m['role'] }}|>{{ m['content'] }}{{ eos_token }}"
    "{% endfor %}{% if add_generation_prompt %}<|assistant|>{% endif %}"
)


@pytest.fixture(scope="module")
def fixture():
    return json.loads((DATA / "spm_fixture.json").read_text())


@pytest.fixture(scope="module")
def vocab(fixture):
    return danube.Vocabulary(
        fixture["tokens"],
        fixture["scores"],
        fixture["token_type"],
        bos_id=fixture["bos_token_id"],
        eos_id=fixture["eos_token_id"],
        unk_id=fixture["unknown_token_id"],
    )


def tiny_config():
    c = danube.ModelConfig()
    c.n_layers, c.hidden_size, c.intermediate_size = 2, 64, 128
    c.n_heads, c.n_kv_heads, c.head_size = 4, 2, 16
    c.vocab_size, c.max_context = 600, 512
    return c


@pytest.fixture(scope="module")
def model_path(tmp_path_factory, vocab):
    path = tmp_path_factory.mktemp("models") / "tiny.gguf"
    danube.write_random_model(str(path), tiny_config(), seed=7, vocab=vocab, chat_template=TEMPLATE, name="tiny")
    return path


def test_parameter_counts_and_sizes():
    big = danube.danube3_4b()
    big.tied_embeddings = False
    assert danube.count_parameters(big) == 3_961_839_360
    assert danube.count_parameters(danube.danube3_500m()) == 513_590_784
    assert danube.predict_model_size(danube.danube3_4b(), "f16") / 1e9 == pytest.approx(7.92, rel=0.01)


def test_quantize_round_trip():
    x = np.random.default_rng(0).normal(size=256).astype(np.float32)
    q8 = danube.quantize(x, "q8_0")
    q4 = danube.quantize(x, "q4_0")
    assert len(q8) == 8 * 34 and len(q4) == 8 * 18
    y8 = danube.dequantize(q8, "q8_0", 256)
    assert np.max(np.abs(x - y8)) < np.max(np.abs(x)) / 127
    assert np.max(np.abs(x - danube.dequantize(q4, "q4_0", 256))) > np.max(np.abs(x - y8))


def test_errors_carry_kind():
    with pytest.raises(danube.DanubeError) as e:
        danube.quantize(np.ones(33, dtype=np.float32), "q8_0")
    assert len(e.value.args) == 2
    with pytest.raises(danube.DanubeError):
        danube.Model("/nonexistent.gguf")


def test_tokenizer_matches_fixture(fixture, vocab):
    tok = danube.Tokenizer(vocab)
    for case in fixture["cases"][:50]:
        assert tok.encode(case["text"], add_bos=False) == case["ids"]
        assert tok.decode(case["ids"]) == case["text"]


def test_model_load_generate_and_logits(model_path):
    m = danube.Model(str(model_path))
    assert m.name == "tiny"
    assert m.config.vocab_size == 600
    assert m.weight_type == "F32"
    a = m.generate("The river", max_tokens=12, temperature=0.0)
    b = m.generate("The river", max_tokens=12, temperature=0.0, threads=2)
    assert a == b
    assert a["finish_reason"] in {"length", "eos"}
    pieces = []
    streamed = m.generate("The river", max_tokens=12, temperature=0.0, on_text=pieces.append)
    assert "".join(pieces) == streamed["text"]
    ids = m.tokenizer.encode("The river flows", add_bos=True)
    logits = m.logits(ids)
    assert logits.shape == (len(ids), 600)
    assert np.isfinite(logits).all()


def test_chat_and_perplexity(model_path):
    m = danube.Model(str(model_path))
    r = m.chat([("user", "hello")], max_tokens=5, temperature=0.0)
    assert r["prompt_tokens"] > 0
    text = (DATA / "corpus.txt").read_text()
    report = m.perplexity(text, window=64)
    assert report["perplexity"] > 1.0
    assert report["window"] == 64


def test_quantize_file_and_inspect(model_path, tmp_path):
    out = tmp_path / "tiny-q8.gguf"
    s = danube.quantize_file(str(model_path), str(out), "q8_0")
    assert s["quantized_tensors"] > 0 and s["output_bytes"] < s["input_bytes"]
    info = danube.inspect(str(out))
    assert info["version"] == 3
    assert info["metadata"]["general.name"] == "tiny"
    types = {t["name"]: t["type"] for t in info["tensors"]}
    assert types["blk.0.attn_q.weight"] == "Q8_0"
    assert types["blk.0.attn_norm.weight"] == "F32"
    f32, q8 = danube.Model(str(model_path)), danube.Model(str(out))
    ids = f32.tokenizer.encode(text := "The river flows past the old mill", add_bos=True)
    kl = danube.mean_kl_divergence(f32.logits(ids), q8.logits(ids), 600)
    assert 0 <= kl < 2e-3, text
