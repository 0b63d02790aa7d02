import numpy as np
import pytest

from mpfgvc.config import TextConfig
from mpfgvc.errors import ConfigError, LabelIndexError
from mpfgvc.optim import sgd_step
from mpfgvc.tensor import finite_diff_grad
from mpfgvc.text_prompt import (
    PromptBank,
    TextEncoder,
    TokenEmbeddingTable,
    build_prompt,
    encode_text,
)

DIM = 8
NAMES = ["species0", "species1", "species2", "species3", "species4"]


def make_bank(template="learned_only", names=NAMES, seed=0, **text):
    cfg = TextConfig(
        depth=1, heads=2, context_length=16, tokens_per_class=4, template=template, **text
    )
    table = TokenEmbeddingTable(DIM, seed=cfg.table_seed)
    bank = PromptBank(cfg, names, "bird", table, np.random.default_rng(seed))
    return cfg, bank


def make_encoder(cfg):
    return TextEncoder(cfg, DIM, np.random.default_rng([cfg.table_seed, 1]))


def test_table_is_deterministic_per_word():
    a, b = TokenEmbeddingTable(DIM, seed=3), TokenEmbeddingTable(DIM, seed=3)
    np.testing.assert_array_equal(a.lookup("Bird"), b.lookup("bird "))
    assert not np.array_equal(a.lookup("bird"), TokenEmbeddingTable(DIM, seed=4).lookup("bird"))
    assert a.phrase("a photo of").shape == (3, DIM)


def test_prompt_ends_with_shared_supercategory():
    _, bank = make_bank()
    p0, p3 = build_prompt(0, bank), build_prompt(3, bank)
    assert p0.shape == (5, DIM)
    assert p0.data[-1].tobytes() == bank.supercat_embedding.astype(p0.dtype).tobytes()
    assert p0.data[-1].tobytes() == p3.data[-1].tobytes()
    np.testing.assert_array_equal(p0.data[:4], bank.X.data[0])


def test_build_prompt_unknown_class():
    _, bank = make_bank()
    with pytest.raises(LabelIndexError):
        build_prompt(5, bank)


@pytest.mark.parametrize(
    "template, length",
    [("learned_only", 5), ("prefix_photo", 8), ("subcategory_name", 8), ("handcrafted", 5)],
)
def test_template_lengths(template, length):
    _, bank = make_bank(template)
    assert bank.prompt_length == length
    assert bank.build_all().shape == (len(NAMES), length, DIM)


def test_subcategory_name_template_differs_per_class():
    _, bank = make_bank("subcategory_name")
    rows = bank.build_all().data
    assert not np.array_equal(rows[0, -1], rows[1, -1])


def test_handcrafted_has_nothing_to_learn():
    _, bank = make_bank("handcrafted")
    assert bank.X.frozen
    assert bank.trainable_parameters() == []


def test_learnable_rows_diverge_after_step():
    cfg, bank = make_bank()
    enc = make_encoder(cfg)
    weights = np.random.default_rng(2).standard_normal((len(NAMES), DIM))
    (encode_text(bank, enc) * weights).sum().backward()
    sgd_step(bank.trainable_parameters(), 0.5)
    rows = bank.build_all().data
    assert rows[0, -1].tobytes() == rows[1, -1].tobytes()
    assert not np.array_equal(rows[0, :4], rows[1, :4])


def test_encode_text_shape_and_purity():
    cfg, bank = make_bank()
    enc = make_encoder(cfg)
    assert encode_text(bank, enc).shape == (len(NAMES), DIM)
    bank.X.data[1] = bank.X.data[0]
    out = encode_text(bank, enc).data
    np.testing.assert_array_equal(out[0], out[1])


def test_encode_text_rows_independent_of_other_classes():
    cfg, bank = make_bank()
    enc = make_encoder(cfg)
    before = encode_text(bank, enc).data.copy()
    bank.X.data[4] += 1.0
    after = encode_text(bank, enc).data
    np.testing.assert_array_equal(before[:4], after[:4])


def test_text_encoder_is_frozen():
    cfg, _ = make_bank()
    enc = make_encoder(cfg)
    assert enc.parameters() and enc.trainable_parameters() == []


def test_prompt_gradient_through_frozen_encoder(float64):
    cfg, bank = make_bank()
    enc = make_encoder(cfg)
    weights = np.random.default_rng(5).standard_normal((len(NAMES), DIM))
    frozen_before = {n: p.data.copy() for n, p in enc.named_parameters()}

    def loss(_x):
        return (encode_text(bank, enc) * weights).sum()

    loss(bank.X).backward()
    assert np.linalg.norm(bank.X.grad) > 0
    coords = np.random.default_rng(6).choice(bank.X.size, size=12, replace=False)
    numeric = finite_diff_grad(loss, bank.X, coords=coords).data.reshape(-1)[coords]
    analytic = bank.X.grad.reshape(-1)[coords]
    assert np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric) < 1e-4
    sgd_step(enc.parameters(), 1.0)
    for name, p in enc.named_parameters():
        assert p.data.tobytes() == frozen_before[name].tobytes()


def test_prompt_longer_than_context_rejected():
    with pytest.raises(ConfigError):
        TextConfig(context_length=8, tokens_per_class=6)
    with pytest.raises(ConfigError):
        TextConfig(template="poem")
