import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layergate import data as dg
from layergate.errors import ConfigError


def test_spec_rejects_zero_size():
    with pytest.raises(ConfigError):
        dg.SyntheticTaskSpec("reverse", 0)


def test_spec_rejects_unknown_family():
    with pytest.raises(ConfigError):
        dg.SyntheticTaskSpec("frobnicate", 10)


def test_generation_deterministic():
    spec = dg.SyntheticTaskSpec("reverse", 20)
    assert dg.generate_dataset(spec, 1) == dg.generate_dataset(spec, 1)
    assert dg.generate_dataset(spec, 1) != dg.generate_dataset(spec, 2)


def test_reverse_task_reverses_content():
    spec = dg.SyntheticTaskSpec("reverse", 5)
    for ex in dg.generate_dataset(spec, 0):
        words = ex.instruction.split(": ", 1)[1].split()
        assert " ".join(reversed(words)) in ex.response


def test_families_share_style_markers():
    for family in dg.FAMILIES:
        ex = dg.generate_dataset(dg.SyntheticTaskSpec(family, 3), 0)[0]
        if family in ("plain", "pretrain"):  # base corpora carry no style
            assert dg.STYLE_PREFIX not in ex.response
        else:
            assert ex.response.startswith(dg.STYLE_PREFIX)
            assert ex.response.endswith(dg.STYLE_SUFFIX)


def test_tokenize_basics():
    assert dg.tokenize("") == []
    assert dg.tokenize("A") == [65]
    assert dg.detokenize([]) == ""


def test_detokenize_rejects_out_of_range():
    with pytest.raises(IndexError):
        dg.detokenize([260])


@settings(max_examples=50)
@given(st.binary(max_size=1024))
def test_tokenize_roundtrip_bytes(payload):
    text = payload.decode("latin-1")
    ids = dg.tokenize(text)
    assert dg.detokenize(ids) == text or dg.detokenize(ids).encode("utf-8") == text.encode("utf-8")


def test_tokenize_roundtrip_random_kib():
    rng = np.random.default_rng(0)
    raw = bytes(rng.integers(0, 256, size=1024, dtype=np.uint8))
    text = raw.decode("latin-1")
    assert dg.detokenize(dg.tokenize(text)) == text


def _batches(seed=0, size=120, batch_size=4, seq_len=80, probe_batches=2):
    spec = dg.SyntheticTaskSpec("reverse", size)
    examples = dg.generate_dataset(spec, seed)
    return dg.Batches(examples, batch_size, seq_len, seed, probe_batches)


def test_loss_mask_covers_response_span():
    ex = dg.InstructionExample("reverse: a b", "=> b a <=")
    ids, sep_pos = dg._encode(ex, 64)
    assert ids[0] == dg.BOS
    assert ids[sep_pos] == dg.SEP
    assert ids[-1] == dg.EOS
    batches = dg.Batches([ex] * 12, 4, 64, 0, probe_batches=2)
    batch = batches.probe[0]
    row_mask = batch.mask[0]
    # targets under the mask are exactly the response bytes plus EOS
    masked_targets = batch.targets[0][row_mask].tolist()
    assert masked_targets == dg.tokenize("=> b a <=") + [dg.EOS]


def test_probe_disjoint_from_training():
    batches = _batches()
    probe_rows = {tuple(row) for b in batches.probe for row in b.inputs}
    for step in range(batches.train_batches_per_epoch):
        for row in batches.train_batch(step).inputs:
            assert tuple(row) not in probe_rows


def test_batch_order_deterministic():
    a, b = _batches(seed=3), _batches(seed=3)
    for step in range(5):
        assert np.array_equal(a.train_batch(step).inputs, b.train_batch(step).inputs)
    c = _batches(seed=4)
    assert any(
        not np.array_equal(a.train_batch(s).inputs, c.train_batch(s).inputs) for s in range(5)
    )


def test_sample_batches_deterministic():
    batches = _batches()
    s1 = batches.sample_batches(6, seed=9)
    s2 = batches.sample_batches(6, seed=9)
    for x, y in zip(s1, s2):
        assert np.array_equal(x.inputs, y.inputs)


def test_overlong_examples_rejected():
    ex = dg.InstructionExample("x" * 200, "y" * 10)
    with pytest.raises(ConfigError):
        dg.Batches([ex] * 20, 4, 32, 0, probe_batches=1)


def test_too_few_examples_rejected():
    spec = dg.SyntheticTaskSpec("reverse", 4)
    with pytest.raises(ConfigError):
        dg.Batches(dg.generate_dataset(spec, 0), 4, 80, 0, probe_batches=2)


def test_jsonl_roundtrip(tmp_path):
    examples = dg.generate_dataset(dg.SyntheticTaskSpec("sort-tokens", 10), 0)
    path = tmp_path / "data.jsonl"
    dg.save_jsonl(examples, path)
    assert dg.load_jsonl(path) == examples
