import numpy as np
import pytest

from blockflow import tensor as T
from blockflow.conditioning import (
    MASK,
    MASK_LABEL,
    AdaLNBlock,
    ConditionEmbedder,
    ConditionSchema,
    ConditionTable,
    adaln,
    adaln_modulate,
    embed_conditions,
    mask_conditions,
    read_condition_csv,
    time_features,
)

SCHEMA = ConditionSchema(("cell_type", "batch"), (("A", "B", "C"), ("b1", "b2")))


def random_table(n, rng, schema=SCHEMA):
    cols = [rng.integers(1, schema.vocab_size(k), size=n) for k in range(schema.n_types)]
    return ConditionTable(np.stack(cols, axis=1), schema)


def test_schema_indices_reserve_mask():
    assert SCHEMA.vocab_size(0) == 4
    assert SCHEMA.index(0, "A") == 1 and SCHEMA.index(1, MASK_LABEL) == MASK
    assert SCHEMA.label(0, 0) == MASK_LABEL and SCHEMA.label(1, 2) == "b2"
    with pytest.raises(KeyError):
        SCHEMA.index(0, "Z")
    with pytest.raises(ValueError):
        ConditionSchema(("x",), ((MASK_LABEL,),))


def test_schema_json_round_trip(tmp_path):
    SCHEMA.save(tmp_path / "s.json")
    assert ConditionSchema.load(tmp_path / "s.json") == SCHEMA


def test_table_rejects_out_of_vocab():
    with pytest.raises(IndexError):
        ConditionTable(np.array([[4, 1]]), SCHEMA)


def test_condition_csv_round_trip(tmp_path):
    t = ConditionTable.from_labels([("A", "b2"), ("C", MASK_LABEL)], SCHEMA)
    t.write_csv(tmp_path / "c.csv", ["x", "y"])
    ids, back = read_condition_csv(tmp_path / "c.csv", SCHEMA)
    assert ids == ["x", "y"] and back.labels() == t.labels()
    np.testing.assert_array_equal(back.indices, [[1, 2], [3, 0]])


# masking

def test_mask_p0_identity_and_p1_all_mask():
    rng = np.random.default_rng(0)
    t = random_table(50, rng)
    np.testing.assert_array_equal(mask_conditions(t, 0.0, rng).indices, t.indices)
    assert np.all(mask_conditions(t, 1.0, rng).indices == MASK)


def test_mask_fraction_and_independence():
    rng = np.random.default_rng(1)
    # 5 x 10^4 cells x 2 types = 10^5 entries
    t = random_table(50_000, rng)
    hit = mask_conditions(t, 0.6, rng).indices == MASK
    assert abs(hit.mean() - 0.6) < 0.01
    corr = np.corrcoef(hit[:, 0].astype(float), hit[:, 1].astype(float))[0, 1]
    assert abs(corr) < 0.02


def test_mask_rejects_bad_probability():
    with pytest.raises(ValueError):
        mask_conditions(random_table(3, np.random.default_rng(0)), 1.5, np.random.default_rng(0))


# embeddings

def test_single_type_embedding_returns_row():
    schema = ConditionSchema(("c",), (("u", "v"),))
    emb = ConditionEmbedder(schema, 5, np.random.default_rng(0))
    out = embed_conditions(ConditionTable(np.array([[2]]), schema), emb)
    np.testing.assert_array_equal(out.data[0], emb.tables[0].data[2])


def test_embeddings_sum_over_types():
    emb = ConditionEmbedder(SCHEMA, 6, np.random.default_rng(0))
    t = ConditionTable(np.array([[3, 1]]), SCHEMA)
    expected = emb.tables[0].data[3] + emb.tables[1].data[1]
    np.testing.assert_allclose(embed_conditions(t, emb).data[0], expected, atol=0)


def test_all_mask_is_sum_of_mask_rows_and_cell_independent():
    emb = ConditionEmbedder(SCHEMA, 6, np.random.default_rng(0))
    out = embed_conditions(ConditionTable.all_mask(3, SCHEMA), emb).data
    np.testing.assert_array_equal(out[0], emb.tables[0].data[0] + emb.tables[1].data[0])
    assert out[0].tobytes() == out[1].tobytes() == out[2].tobytes()


def test_time_changes_embedding():
    emb = ConditionEmbedder(SCHEMA, 6, np.random.default_rng(0), with_time=True)
    t = ConditionTable(np.array([[1, 1]]), SCHEMA)
    v0 = embed_conditions(t, emb, np.array([0.0])).data
    v1 = embed_conditions(t, emb, np.array([1.0])).data
    assert np.abs(v0 - v1).max() > 1e-3


def test_time_features_shape_and_range():
    f = time_features(np.linspace(0, 1, 7))
    assert f.shape == (7, 128)
    np.testing.assert_array_equal(f[0, :64], 0.0)
    np.testing.assert_array_equal(f[0, 64:], 1.0)
    assert np.all(np.abs(f) <= 1.0)


# AdaLN

def test_zero_init_block_is_identity():
    rng = np.random.default_rng(0)
    block = AdaLNBlock(8, 2, rng)
    h = rng.standard_normal((3, 4, 8))
    cond = rng.standard_normal((3, 8))
    assert adaln_modulate(h, cond, block).data.tobytes() == h.tobytes()


def test_beta_shift_sets_token_mean():
    rng = np.random.default_rng(2)
    h = rng.standard_normal((2, 5, 6))
    beta = rng.standard_normal((2, 6))
    out = adaln(T.as_tensor(h), T.as_tensor(np.zeros((2, 6))), T.as_tensor(beta)).data
    # normalized activations have zero mean over features, so the mean is mean(beta)
    np.testing.assert_allclose(out.mean(axis=-1), np.repeat(beta.mean(axis=1, keepdims=True), 5, 1), atol=1e-9)
    np.testing.assert_allclose(out - beta[:, None, :], T.layernorm(h).data, atol=1e-12)


def test_normalized_activations_standardized():
    h = np.random.default_rng(3).normal(5.0, 3.0, size=(4, 6, 16))
    n = T.layernorm(h).data
    np.testing.assert_allclose(n.mean(-1), 0.0, atol=1e-6)
    np.testing.assert_allclose(n.var(-1), 1.0, atol=1e-5)


@pytest.mark.parametrize("seed", range(5))
def test_modulation_gradient(seed):
    rng = np.random.default_rng(seed)
    block = AdaLNBlock(8, 2, rng)
    block.modulation.weight.data = rng.standard_normal(block.modulation.weight.shape) * 0.3
    h = rng.uniform(-2, 2, size=(2, 3, 8))
    cond = T.parameter(rng.uniform(-2, 2, size=(2, 8)))
    w = rng.standard_normal((2, 3, 8))
    err = T.check_gradients(lambda: T.tsum(adaln_modulate(h, cond, block) * w),
                            [block.modulation.weight, block.modulation.bias, cond], rng)
    assert err < 1e-4


def test_attention_weights_exposed():
    rng = np.random.default_rng(0)
    block = AdaLNBlock(8, 2, rng)
    out, weights = adaln_modulate(rng.standard_normal((2, 3, 8)), rng.standard_normal((2, 8)), block,
                                  return_attention=True)
    assert out.shape == (2, 3, 8) and weights.shape == (2, 2, 3, 3)
