import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blockflow import blocks as B
from blockflow import preprocess as pp
from blockflow import synth
from blockflow import tensor as T
from blockflow import vae as V
from blockflow.conditioning import ConditionSchema, ConditionTable
from blockflow.tensor import Tape

SCHEMA = ConditionSchema(("condition",), (("ctrl", "stim"),))


def small_model(seed=0, n_blocks=3, block_size=4, e=8, d=2, slot_mask=None, **kw):
    cfg = V.VaeConfig(block_size=block_size, n_blocks=n_blocks, e=e, d=d, **kw)
    return V.GeneBlockVAE(cfg, SCHEMA, np.random.default_rng(seed), slot_mask)


def conds(labels):
    return ConditionTable(np.asarray(labels, dtype=np.int64).reshape(-1, 1), SCHEMA)


def randomize_modulation(model, rng, scale=0.3):
    for blk in model.enc_blocks + model.dec_blocks:
        blk.modulation.weight.data = rng.standard_normal(blk.modulation.weight.shape) * scale


def kl_closed(mu, var):
    return float(np.mean(0.5 * (-np.log(var) + var + mu * mu - 1.0)))


# KL

def test_kl_exact_values():
    zero = V.LatentCode(T.as_tensor(np.zeros((2, 3, 4))), T.as_tensor(np.ones((2, 3, 4))), None)
    assert V.kl_divergence(zero).item() == 0.0
    one = V.LatentCode(T.as_tensor(np.ones((2, 3, 4))), T.as_tensor(np.ones((2, 3, 4))), None)
    assert V.kl_divergence(one).item() == 0.5


@pytest.mark.parametrize("seed", range(20))
def test_kl_matches_monte_carlo(seed):
    rng = np.random.default_rng(seed)
    d = 8
    mu = rng.uniform(-1.5, 1.5, size=d)
    var = rng.uniform(0.3, 2.5, size=d)
    z = mu + np.sqrt(var) * rng.standard_normal((1_000_000, d))
    log_q = -0.5 * (np.log(2 * np.pi * var) + (z - mu) ** 2 / var)
    log_p = -0.5 * (np.log(2 * np.pi) + z**2)
    mc = float((log_q - log_p).sum(axis=1).mean()) / d
    closed = V.kl_divergence(V.LatentCode(T.as_tensor(mu), T.as_tensor(var), None)).item()
    assert abs(closed - mc) < 0.01 * closed


@settings(max_examples=60, deadline=None)
@given(st.floats(-5, 5), st.floats(1e-3, 10))
def test_kl_nonnegative_and_zero_only_at_prior(mu, var):
    kl = V.kl_divergence(V.LatentCode(T.as_tensor(np.array([mu])), T.as_tensor(np.array([var])), None)).item()
    assert kl >= 0
    if mu != 0 or var != 1:
        assert kl > 0 or abs(mu) < 1e-7 and abs(var - 1) < 1e-7


# encoder

def test_standard_normal_when_heads_forced():
    model = small_model(n_blocks=2, d=4)
    model.mu_head.weight.data[:] = 0
    model.mu_head.bias.data[:] = 0
    model.var_head.weight.data[:] = 0
    model.var_head.bias.data[:] = np.log(np.expm1(1.0 - V.VAR_FLOOR))
    x = np.random.default_rng(0).random((1250, 2, 4))
    code = V.encode(x, conds(np.ones(1250)), model, np.random.default_rng(1))
    np.testing.assert_allclose(code.var.data, 1.0, atol=1e-12)
    z = code.z.data.ravel()
    assert z.size == 10_000
    assert abs(z.mean()) < 0.05 and abs(z.var() - 1) < 0.05


def test_encode_same_seed_same_z():
    model = small_model()
    x = np.random.default_rng(0).random((5, 3, 4))
    a = V.encode(x, conds([1, 2, 1, 2, 0]), model, np.random.default_rng(7)).z.data
    b = V.encode(x, conds([1, 2, 1, 2, 0]), model, np.random.default_rng(7)).z.data
    assert a.tobytes() == b.tobytes()


def test_encoder_depends_on_every_block():
    model = small_model()
    x = T.parameter(np.random.default_rng(0).random((1, 3, 4)))
    w = np.random.default_rng(1).standard_normal((1, 3, 2))
    c = conds([1])
    for block in range(3):
        idx = np.ravel_multi_index((0, block, np.arange(4)), x.shape)
        jac = T.numerical_gradient(lambda: T.tsum(V.encode(x, c, model, np.random.default_rng(0)).mu * w), x, idx)
        assert np.abs(jac).max() > 1e-6


def test_encoder_shape_errors():
    model = small_model()
    with pytest.raises(T.ShapeError):
        V.encode(np.zeros((2, 3, 5)), conds([1, 1]), model, np.random.default_rng(0))
    with pytest.raises(T.ShapeError):
        V.encode(np.zeros((2, 3, 4)), conds([1]), model, np.random.default_rng(0))


# decoder

@settings(max_examples=30, deadline=None)
@given(st.floats(-1e6, 1e6), st.integers(0, 1000))
def test_decoder_output_in_open_unit_interval(scale, seed):
    model = small_model(seed % 7)
    z = np.random.default_rng(seed).standard_normal((3, 3, 2)) * scale
    out = V.decode(z, conds([0, 1, 2]), model).data
    assert np.all(out > 0) and np.all(out < 1)


def test_padding_slots_decode_to_zero():
    mask = np.ones((3, 4))
    mask[2, 3] = 0
    out = V.decode(np.zeros((2, 3, 2)), conds([1, 2]), small_model(slot_mask=mask)).data
    assert np.all(out[:, 2, 3] == 0) and np.all(out[:, mask > 0] > 0)


def test_conditions_change_decode_after_one_step():
    rng = np.random.default_rng(0)
    model = small_model()
    x = rng.random((8, 3, 4))
    c = conds([1, 2] * 4)
    opt = V.AdamW(model.parameters(), lr=1e-2)
    with Tape() as tape:
        total, _, _ = V.vae_loss(model, x, c, rng, 1e-3)
        tape.backward(total)
    opt.step()
    z = rng.standard_normal((1, 3, 2))
    a = V.decode(z, conds([1]), model).data
    b = V.decode(z, conds([2]), model).data
    assert np.abs(a - b).max() > 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_decoder_gradient_wrt_z(seed):
    rng = np.random.default_rng(seed)
    model = small_model(seed)
    randomize_modulation(model, rng)
    z = T.parameter(rng.uniform(-2, 2, size=(2, 3, 2)))
    w = rng.standard_normal((2, 3, 4))
    c = conds([1, 2])
    assert T.check_gradients(lambda: T.tsum(V.decode(z, c, model) * w), [z], rng) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_sigma_head_gradient(seed):
    rng = np.random.default_rng(seed)
    model = small_model(seed)
    x = rng.random((2, 3, 4))
    c = conds([1, 2])
    w = rng.standard_normal((2, 3, 2))

    def loss():
        return T.tsum(V.encode(x, c, model, np.random.default_rng(0)).var * w)

    assert T.check_gradients(loss, [model.var_head.weight, model.var_head.bias], rng) < 1e-4


# reconstruction loss

def test_reconstruction_examples():
    x = np.random.default_rng(0).random((2, 3, 4))
    assert V.reconstruction_loss(x, x).item() == 0.0
    assert V.reconstruction_loss(x + 0.1, x).item() == pytest.approx(0.01, rel=1e-12)
    mask = np.ones((3, 4))
    mask[2, 2:] = 0
    xhat = x.copy()
    base = V.reconstruction_loss(xhat, x, mask).item()
    xhat[:, 2, 2:] += 5.0
    assert V.reconstruction_loss(xhat, x, mask).item() == base


# end-to-end gradient

@pytest.mark.parametrize("seed", range(5))
def test_full_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    # 2 cells, G = 12, K = 4, e = 8, d = 2
    model = small_model(seed, n_blocks=3, block_size=4, e=8, d=2)
    randomize_modulation(model, rng)
    x = rng.random((2, 3, 4))
    c = conds([1, 2])

    def loss():
        return V.vae_loss(model, x, c, np.random.default_rng(99), 0.5)[0]

    assert T.check_gradients(loss, model.parameters(), rng) < 1e-3


def test_zero_kl_weight_drops_kl_from_gradient():
    rng = np.random.default_rng(0)
    model = small_model()
    x = rng.random((4, 3, 4))
    c = conds([1, 2, 1, 2])

    def grads(use_total):
        model.zero_grad()
        with Tape() as tape:
            total, recon, kl = V.vae_loss(model, x, c, np.random.default_rng(3), 0.0)
            tape.backward(total if use_total else recon)
        return [None if p.grad is None else p.grad.copy() for p in model.parameters()]

    for a, b in zip(grads(True), grads(False)):
        np.testing.assert_array_equal(a, b)
    # the KL path alone does push on the variance head
    model.zero_grad()
    with Tape() as tape:
        _, _, kl = V.vae_loss(model, x, c, np.random.default_rng(3), 0.0)
        tape.backward(kl)
    assert np.abs(model.var_head.weight.grad).max() > 0


# training

def memorizable():
    rng = np.random.default_rng(4)
    cell = rng.uniform(0.1, 0.9, size=(1, 3, 4))
    return np.repeat(cell, 16, axis=0), conds(np.ones(16))


def test_memorizes_single_cell():
    x, c = memorizable()
    cfg = V.VaeConfig(block_size=4, n_blocks=3, e=16, d=2, mask_p=0.0)
    model, _, trace = V.train_vae(x, c, cfg, 200, np.random.default_rng(0), warmup_epochs=5, batch_size=16)
    xhat = V.decode_cells(V.encode_cells(x, c, model, np.random.default_rng(1))[0], c, model)
    assert float(((xhat - x) ** 2).mean()) < 1e-3
    assert trace[-1]["recon"] < 1e-3


def perturbation_blocks(n=240, seed=0):
    spec = synth.perturbation_spec(n_cells=n, n_genes=40, n_cell_types=2, n_shift_genes=10)
    data = synth.generate(spec, seed)
    m = pp.preprocess(data.counts)
    layout = B.BlockLayout(5, 8, np.arange(40), m.gene_ids)
    return B.reshape_to_blocks(m, layout), data.conditions, layout, m


def test_loss_decreases_and_training_is_deterministic():
    x, c, layout, _ = perturbation_blocks(120)
    cfg = V.VaeConfig(block_size=8, n_blocks=5, e=16, d=2)

    def run():
        return V.train_vae(x, c, cfg, 6, np.random.default_rng(5), warmup_epochs=2, batch_size=32)

    m1, _, t1 = run()
    m2, _, t2 = run()
    assert t1[-1]["total"] < t1[0]["total"]
    for a, b in zip(m1.parameters(), m2.parameters()):
        assert a.data.tobytes() == b.data.tobytes()


def test_transfer_self_and_mask_branch():
    x, c = memorizable()
    schema_c = c
    cfg = V.VaeConfig(block_size=4, n_blocks=3, e=16, d=2, mask_p=0.0)
    model, _, _ = V.train_vae(x, schema_c, cfg, 200, np.random.default_rng(0), warmup_epochs=5, batch_size=16)
    m = pp.ExpressionMatrix.from_array(x.reshape(16, 12), "maxabs-scaled")
    model.scale_factors = np.ones(12)
    layout = B.BlockLayout(3, 4, np.arange(12), m.gene_ids)
    m = m.replace(scale_factors=np.ones(12))
    out = V.transfer(m, c, c, model, layout, np.random.default_rng(0), to="maxabs-scaled")
    pcc = np.corrcoef(out.values.mean(0), m.values.mean(0))[0, 1]
    assert pcc > 0.99

    masked = ConditionTable.all_mask(16, SCHEMA)
    out_mask = V.transfer(m, c, masked, model, layout, np.random.default_rng(0), to="maxabs-scaled")
    mu, _ = V.encode_cells(x, c, model, np.random.default_rng(0))
    direct = V.blocks_to_matrix(V.decode_cells(mu, masked, model), layout, np.ones(12), to="maxabs-scaled")
    assert out_mask.values.tobytes() == direct.values.tobytes()


def test_transfer_requires_trained_model():
    model = small_model()
    m = pp.ExpressionMatrix.from_array(np.ones((1, 12)))
    layout = B.BlockLayout(3, 4, np.arange(12), m.gene_ids)
    with pytest.raises(ValueError, match="trained"):
        V.transfer(m, conds([1]), conds([2]), model, layout, np.random.default_rng(0))


def test_condition_swap_moves_decoded_means():
    x, c, layout, m = perturbation_blocks(240)
    cfg = V.VaeConfig(block_size=8, n_blocks=5, e=16, d=4, kl_weight=1e-2)
    model, _, _ = V.train_vae(x, c, cfg, 100, np.random.default_rng(0), warmup_epochs=5, batch_size=32)
    model.scale_factors = m.scale_factors
    rng = np.random.default_rng(1)
    rows = np.flatnonzero(c.indices[:, 1] == c.schema.index(1, "control"))
    ctrl = c.subset(rows)
    stim = ctrl.replace_column("condition", "stimulated")
    mu, var = V.encode_cells(x[rows], ctrl, model, rng)

    def decoded_mean(z, table):
        return B.scatter_from_blocks(V.decode_cells(z, table, model), layout).mean(0)

    shift = decoded_mean(mu, stim) - decoded_mean(mu, ctrl)
    # Monte-Carlo floor: two independent posterior draws decoded under the same labels
    draw = lambda: mu + np.sqrt(var) * rng.standard_normal(mu.shape)  # noqa: E731
    floor = np.abs(decoded_mean(draw(), ctrl) - decoded_mean(draw(), ctrl)).max()
    genes = np.arange(30, 40)
    assert np.abs(shift[genes]).mean() > 2 * floor
    stim_rows = c.indices[:, 1] == c.schema.index(1, "stimulated")
    true = m.values[stim_rows].mean(0) - m.values[~stim_rows].mean(0)
    assert np.mean(np.sign(shift[genes]) == np.sign(true[genes])) >= 0.9


def test_checkpoint_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    model = small_model()
    randomize_modulation(model, rng)
    model.scale_factors = rng.random(12) + 1
    model.layout_signature = "L3K4:test"
    model.trained = True
    opt = V.AdamW(model.parameters())
    model.save(tmp_path / "v.bfck", opt)
    back = V.GeneBlockVAE.load(tmp_path / "v.bfck")
    x = rng.random((3, 3, 4))
    c = conds([1, 2, 0])
    a = V.decode(V.encode(x, c, model, np.random.default_rng(2)).z, c, model).data
    b = V.decode(V.encode(x, c, back, np.random.default_rng(2)).z, c, back).data
    assert a.tobytes() == b.tobytes()
    assert back.scale_factors.tobytes() == model.scale_factors.tobytes()
    assert back.layout_signature == model.layout_signature and back.trained


def test_config_validation():
    with pytest.raises(ValueError):
        V.VaeConfig(block_size=4, n_blocks=2, e=10, n_heads=3)
    with pytest.raises(ValueError):
        V.VaeConfig(block_size=4, n_blocks=2, mask_p=1.5)
