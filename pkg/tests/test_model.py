import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from perklab import autodiff as ad
from perklab import model as M
from perklab.autodiff import Tensor
from perklab.model import (
    EmptyLossError,
    LoraAdapter,
    ModelConfig,
    SequenceLengthError,
    TokenSeq,
    VocabError,
    extend_positions,
    forward_logits,
    greedy_decode,
    init_base,
    init_lora,
    lora_linear,
    nll_loss,
    reasoning_loss,
)


def tiny(vocab=32, d=16, **kw):
    return ModelConfig(vocab_size=vocab, d_model=d, n_layers=2, n_heads=2, max_positions=24, lora_rank=4, **kw)


def random_adapter(cfg, rng):
    ad_ = init_lora(cfg, rng)
    return ad_.map(lambda t: Tensor(rng.normal(size=t.shape).astype(t.dtype) * 0.1))


def test_adapted_linear_by_hand(f64):
    y = lora_linear(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), None,
                    (Tensor([[1.0, 1.0]]), Tensor([[1.0], [0.0]])), scale=1.0)
    assert np.array_equal(y.data, [[4.0, 2.0]])


def test_zero_init_lora_is_exact_noop(rng):
    cfg = tiny()
    base = init_base(cfg, rng)
    ids = rng.integers(0, cfg.vocab_size, size=(3, 10))
    plain = forward_logits(base, None, ids).data
    adapted = forward_logits(base, init_lora(cfg, rng), ids).data
    assert np.array_equal(plain, adapted)


def test_lora_scales():
    assert M.lora_scale(16, 256, True) == 1.0
    assert M.lora_scale(16, 8, False) == 2.0
    assert ModelConfig(vocab_size=4, lora_rank=8).lora_scale == pytest.approx(16 / math.sqrt(8))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=4, d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=4, lora_rank=0)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=4, adapted_modules=("nope",))


def test_lora_factor_shapes(rng):
    cfg = tiny()
    adapter = init_lora(cfg, rng)
    assert set(adapter.factors) == set(cfg.adapted_layers())
    a, b = adapter.factors["h0.fc"]
    assert a.shape == (4, 16) and b.shape == (64, 4)
    assert not b.data.any()


@given(st.integers(0, 2**31 - 1), st.integers(1, 9))
def test_causality(seed, t):
    rng = np.random.default_rng(seed)
    cfg = tiny()
    base = init_base(cfg, rng)
    adapter = random_adapter(cfg, rng)
    ids = rng.integers(0, cfg.vocab_size, size=10)
    other = ids.copy()
    other[t] = (other[t] + 1) % cfg.vocab_size
    a = forward_logits(base, adapter, ids).data
    b = forward_logits(base, adapter, other).data
    assert np.array_equal(a[:t], b[:t])


def test_length_and_vocab_errors(rng):
    cfg = tiny()
    base = init_base(cfg, rng)
    with pytest.raises(SequenceLengthError):
        forward_logits(base, None, np.zeros(25, dtype=int))
    with pytest.raises(VocabError):
        forward_logits(base, None, np.array([0, 32]))


def test_uniform_logits_nll():
    logits = Tensor(np.zeros((5, 4)))
    assert nll_loss(logits, TokenSeq(np.array([0, 1, 2, 3, 0]))).item() == pytest.approx(math.log(4), abs=1e-6)


def test_half_probability_nll(f64):
    # true token has logit log(3) against three zeros: p = 3/6 = 1/2
    ids = np.array([0, 1, 2])
    logits = np.zeros((3, 4))
    logits[0, 1] = logits[1, 2] = math.log(3)
    assert nll_loss(Tensor(logits), ids).item() == pytest.approx(math.log(2), abs=1e-12)


def test_nll_matches_scalar_oracle(f64):
    logits = np.array([[1.0, -0.5, 2.0], [0.3, 0.3, -1.0], [0.0, 4.0, 1.0]])
    ids = [2, 0, 1]
    expect = 0.0
    for t in range(2):
        z = logits[t]
        expect += -(z[ids[t + 1]] - math.log(sum(math.exp(v) for v in z)))
    assert nll_loss(Tensor(logits), np.array(ids)).item() == pytest.approx(expect / 2, abs=1e-12)


def test_reasoning_loss_arithmetic(f64):
    # per-token NLLs 0.5 and 1.5 on the two masked positions
    logits = np.zeros((3, 2))
    p1, p2 = math.exp(-0.5), math.exp(-1.5)
    logits[0] = [math.log(p1), math.log(1 - p1)]
    logits[1] = [math.log(1 - p2), math.log(p2)]
    seq = TokenSeq(np.array([1, 0, 1]), np.array([False, True, True]))
    assert reasoning_loss(Tensor(logits), seq).item() == pytest.approx(1.0, abs=1e-12)


def test_reasoning_loss_ignores_unmasked_positions(f64, rng):
    logits = rng.normal(size=(6, 5))
    seq = TokenSeq(rng.integers(0, 5, size=6), np.array([0, 0, 0, 1, 1, 0], dtype=bool))
    a = reasoning_loss(Tensor(logits), seq).item()
    logits[[0, 1, 4, 5]] += rng.normal(size=(4, 5))
    assert reasoning_loss(Tensor(logits), seq).item() == a


@given(st.integers(0, 2**31 - 1), st.integers(2, 8))
def test_reasoning_loss_reduces_to_nll(seed, n):
    rng = np.random.default_rng(seed)
    with ad.precision(np.float64):
        logits = Tensor(rng.normal(size=(n, 6)))
        seq = TokenSeq(rng.integers(0, 6, size=n))
        assert reasoning_loss(logits, seq).item() == nll_loss(logits, seq).item()


def test_empty_masks_raise():
    with pytest.raises(EmptyLossError):
        reasoning_loss(Tensor(np.zeros((3, 2))), TokenSeq(np.array([0, 1, 0]), np.zeros(3, bool)))
    with pytest.raises(EmptyLossError):
        nll_loss(Tensor(np.zeros((1, 2))), np.array([0]))
    with pytest.raises(ValueError):
        TokenSeq(np.array([1, 2]), np.array([True]))


def test_nll_gradient_finite_differences(f64, rng):
    ids = rng.integers(0, 5, size=7)
    assert ad.finite_diff_check(lambda z: nll_loss(z, ids), rng.normal(size=(7, 5))) < 1e-5


def test_tiny_lm_nll_finite_differences(f64, rng):
    cfg = tiny()
    base = init_base(cfg, rng, std=0.3)
    ids = rng.integers(0, cfg.vocab_size, size=8)
    a = random_adapter(cfg, rng)
    name = "h1.fc"
    A, B = a.factors[name]

    def f(x):
        factors = dict(a.factors)
        factors[name] = (A, x)
        return nll_loss(forward_logits(base, LoraAdapter(factors, a.scale), ids), ids)

    assert ad.finite_diff_check(f, B.data, coords=range(0, B.size, 7)) < 1e-5


# ---------------------------------------------------------------- decoding

def table_model(monkeypatch, table):
    """Replace the network by a next-token table keyed on the last token."""
    def fake(base, adapter, ids):
        ids = np.asarray(ids)
        return Tensor(np.asarray(table, dtype=np.float64)[ids])

    monkeypatch.setattr(M, "forward_logits", fake)
    return M.BaseParams(ModelConfig(vocab_size=len(table), d_model=4, n_heads=1, max_positions=64), {})


def test_decode_follows_table(monkeypatch):
    # states 2 and 3 alternate; eos is 1
    base = table_model(monkeypatch, [[0, 0, 1, 0], [0, 0, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]])
    out = greedy_decode(base, None, TokenSeq(np.array([2])), max_new=5, eos_id=1)
    assert out.ids.tolist() == [3, 2, 3, 2, 3]


def test_decode_immediate_eos_is_empty(monkeypatch):
    base = table_model(monkeypatch, [[0, 1, 0], [0, 1, 0], [0, 1, 0]])
    assert len(greedy_decode(base, None, TokenSeq(np.array([0, 2])), max_new=9, eos_id=1)) == 0


def test_decode_ties_pick_lowest_id(monkeypatch):
    base = table_model(monkeypatch, [[0, 0, 5, 5], [0] * 4, [0] * 4, [0] * 4])
    assert greedy_decode(base, None, TokenSeq(np.array([0])), max_new=1, eos_id=1).ids.tolist() == [2]


@given(st.integers(0, 2**31 - 1), st.integers(0, 6))
def test_decode_never_exceeds_cap(seed, max_new):
    rng = np.random.default_rng(seed)
    cfg = tiny()
    base = init_base(cfg, rng, std=0.5)
    out = greedy_decode(base, None, TokenSeq(rng.integers(0, 32, size=3)), max_new=max_new, eos_id=1)
    assert len(out) <= max_new


def test_batch_decode_matches_single(rng):
    cfg = tiny()
    base = init_base(cfg, rng, std=0.5)
    prompts = [TokenSeq(rng.integers(2, 32, size=n)) for n in (2, 5, 3)]
    batch = M.batch_greedy_decode(base, None, prompts, max_new=6, eos_id=1)
    for p, b in zip(prompts, batch):
        assert greedy_decode(base, None, p, max_new=6, eos_id=1).ids.tolist() == b.ids.tolist()


def test_decode_length_error(rng):
    base = init_base(tiny(), rng)
    with pytest.raises(SequenceLengthError):
        greedy_decode(base, None, TokenSeq(np.zeros(20, dtype=int)), max_new=5)


# ---------------------------------------------------------------- positions

def test_extend_positions_interpolates(f64):
    cfg = ModelConfig(vocab_size=4, d_model=4, n_heads=1, max_positions=4)
    base = init_base(cfg, np.random.default_rng(0))
    e = base["wpe"].data
    big = extend_positions(base, 7)
    assert big.config.max_positions == 7
    assert np.allclose(big["wpe"].data[3], (e[1] + e[2]) / 2)
    assert np.array_equal(big["wpe"].data[0], e[0]) and np.array_equal(big["wpe"].data[6], e[3])
    with pytest.raises(ValueError):
        extend_positions(base, 4)


@given(st.integers(2, 40), st.integers(1, 60))
def test_extension_coordinates_monotone(old, extra):
    new = old + extra
    coords = np.arange(new) * (old - 1) / (new - 1)
    assert np.all(np.diff(coords) > 0)
    assert coords[0] == 0 and coords[-1] == old - 1
