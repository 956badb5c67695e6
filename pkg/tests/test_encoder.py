import numpy as np
import pytest
import torch

from pulsekit.encoder import (FULL_CONFIG, BeatModel, EncoderConfig, LayerWeights, Probe, forward,
                              gradients, init_encoder, parameter_count, sinusoidal_positions,
                              weighted_layer_sum)
from pulsekit.loss import batch_loss
from pulsekit.mining import MiningBatch, TripletSample

SMALL = EncoderConfig(num_layers=2, num_heads=2, embed_dim=16, ffn_dim=32, dropout=0.0, input_dim=8)


def small_loss(model, x):
    triplets = [TripletSample(1, 5, [(i, "easy") for i in (0, 3, 7, 9)]),
                TripletSample(2, 10, [(i, "hard") for i in (4, 6, 8, 11)])]
    return batch_loss([MiningBatch("c", triplets)], model(x)[-1])


def numerical_gradient(model, x, eps=1e-6):
    out = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = small_loss(model, x).item()
                flat[i] = old - eps
                down = small_loss(model, x).item()
                flat[i] = old
                gflat[i] = (up - down) / (2 * eps)
            out[name] = g
    return out


def relative_error(a, b):
    return float((a - b).norm() / max(a.norm() + b.norm(), 1e-12))


def test_reverse_mode_gradients_match_finite_differences():
    model = init_encoder(SMALL, seed=3, dtype=torch.float64).eval()
    x = torch.from_numpy(np.random.default_rng(0).normal(size=(1, 12, 8)))
    analytic = gradients(small_loss(model, x), model)
    numeric = numerical_gradient(model, x)
    for name in analytic:
        assert relative_error(analytic[name], numeric[name]) < 1e-4, name


def test_input_gradient_matches_finite_differences():
    model = init_encoder(SMALL, seed=4, dtype=torch.float64).eval()
    x = torch.from_numpy(np.random.default_rng(1).normal(size=(1, 12, 8))).requires_grad_(True)
    small_loss(model, x).backward()
    numeric = torch.zeros_like(x)
    with torch.no_grad():
        for idx in np.ndindex(*x.shape):
            old = x[idx].item()
            x[idx] = old + 1e-6
            up = small_loss(model, x).item()
            x[idx] = old - 1e-6
            down = small_loss(model, x).item()
            x[idx] = old
            numeric[idx] = (up - down) / 2e-6
    assert relative_error(x.grad, numeric) < 1e-4


@pytest.mark.parametrize("cfg", [EncoderConfig(), SMALL, EncoderConfig(num_layers=3, ffn_dim=40)])
def test_parameter_count_closed_form(cfg):
    model = init_encoder(cfg)
    assert parameter_count(cfg) == sum(p.numel() for p in model.parameters())


def test_large_config_count():
    d, f = 512, 1024
    per_layer = 4 * d * d + 2 * d * f + 9 * d + f
    assert parameter_count(FULL_CONFIG) == 128 * d + d + 8 * per_layer == 16_888_320


def test_shapes_and_per_layer_outputs():
    model = init_encoder(EncoderConfig(num_layers=3))
    outs = forward(np.zeros((2, 50, 128)), model)
    assert len(outs) == 3 and all(o.shape == (2, 50, 64) for o in outs)
    single = forward(np.zeros((50, 128)), model)
    assert single[0].shape == (50, 64)


def test_init_is_seeded():
    a = init_encoder(SMALL, seed=1).state_dict()
    b = init_encoder(SMALL, seed=1).state_dict()
    c = init_encoder(SMALL, seed=2).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not all(torch.equal(a[k], c[k]) for k in a)
    w = a["layers.0.ffn_in.weight"]
    assert w.abs().max() <= 1 / np.sqrt(16)


def test_eval_mode_is_deterministic_and_dropout_active_in_training():
    cfg = EncoderConfig(dropout=0.5)
    model = init_encoder(cfg)
    x = np.random.default_rng(0).normal(size=(20, 128))
    assert torch.equal(forward(x, model)[-1], forward(x, model)[-1])
    torch.manual_seed(0)
    a = forward(x, model, train_mode=True)[-1]
    b = forward(x, model, train_mode=True)[-1]
    assert not torch.equal(a, b)


def test_non_finite_activations_raise():
    model = init_encoder(SMALL)
    x = torch.zeros(1, 5, 8)
    x[0, 2, 0] = float("inf")
    with pytest.raises(FloatingPointError):
        model(x)


def test_wrong_feature_count_and_config_validation():
    with pytest.raises(ValueError):
        forward(np.zeros((5, 7)), init_encoder(SMALL))
    with pytest.raises(ValueError):
        EncoderConfig(embed_dim=10, num_heads=4)
    with pytest.raises(ValueError):
        EncoderConfig(dropout=1.0)


def test_unused_parameters_get_zero_gradient():
    model = init_encoder(SMALL, dtype=torch.float64).eval()
    x = torch.randn(1, 12, 8, dtype=torch.float64)
    loss = model(x)[0].sum()
    g = gradients(loss, model)
    assert torch.count_nonzero(g["layers.1.qkv.weight"]) == 0
    with pytest.raises(ValueError):
        gradients(torch.tensor(1.0), model)


def test_positions_are_bounded_and_distinct():
    pe = sinusoidal_positions(100, 16)
    assert pe.abs().max() <= 1.0
    assert len({tuple(r) for r in pe.numpy().round(6)}) == 100


def test_layer_weights_form_convex_mix():
    outs = [torch.full((3, 4), float(i)) for i in range(3)]
    lw = LayerWeights(3)
    assert torch.allclose(lw(outs), torch.full((3, 4), 1.0))
    with pytest.raises(ValueError):
        weighted_layer_sum(outs, torch.zeros(2))


def test_beat_model_logits_shape():
    model = BeatModel(init_encoder(SMALL), "mlp2")
    assert model(torch.zeros(2, 7, 8)).shape == (2, 7)
    with pytest.raises(ValueError):
        Probe(16, "conv")


def test_single_frame_and_length_range():
    model = init_encoder(EncoderConfig())
    x = np.random.default_rng(0).normal(size=(1, 128))
    a = forward(x, model)[-1]
    assert a.shape == (1, 64) and torch.isfinite(a).all()
    assert torch.equal(a, forward(x, model)[-1])
    assert forward(np.zeros((1000, 128)), model)[0].shape == (1000, 64)


def test_zero_input_layer_one_is_a_function_of_positions_only():
    cfg = EncoderConfig(num_layers=1, num_heads=2, embed_dim=8, ffn_dim=8, dropout=0.0, input_dim=4)
    model = init_encoder(cfg, dtype=torch.float64).eval()
    with torch.no_grad():
        model.proj.bias.zero_()
        h = sinusoidal_positions(5, 8, torch.float64)[None]
        layer = model.layers[0]
        # hand trace of one pre-norm block
        ln = torch.nn.functional.layer_norm(h, (8,), layer.norm1.weight, layer.norm1.bias)
        q, k, v = (ln @ layer.qkv.weight.T + layer.qkv.bias).split(8, dim=-1)
        heads = []
        for i in range(2):
            sl = slice(4 * i, 4 * i + 4)
            w = torch.softmax(q[..., sl] @ k[..., sl].transpose(-1, -2) / 2.0, dim=-1)
            heads.append(w @ v[..., sl])
        h = h + torch.cat(heads, -1) @ layer.out.weight.T + layer.out.bias
        ln2 = torch.nn.functional.layer_norm(h, (8,), layer.norm2.weight, layer.norm2.bias)
        h = h + torch.relu(ln2 @ layer.ffn_in.weight.T + layer.ffn_in.bias) @ layer.ffn_out.weight.T \
            + layer.ffn_out.bias
        got = model(torch.zeros(1, 5, 4, dtype=torch.float64))[0]
    assert torch.allclose(got, h, atol=1e-12)


def test_sum_of_outputs_gradient_check():
    model = init_encoder(SMALL, seed=9, dtype=torch.float64).eval()
    x = torch.from_numpy(np.random.default_rng(2).normal(size=(1, 6, 8)))
    analytic = gradients(model(x)[-1].sum(), model)
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            for i in np.random.default_rng(0).choice(flat.numel(), size=min(5, flat.numel()), replace=False):
                old = flat[i].item()
                flat[i] = old + 1e-6
                up = model(x)[-1].sum().item()
                flat[i] = old - 1e-6
                down = model(x)[-1].sum().item()
                flat[i] = old
                num = (up - down) / 2e-6
                ana = analytic[name].view(-1)[i].item()
                assert abs(ana - num) <= 1e-4 * max(abs(ana), abs(num), 1e-6), name


def test_zero_output_layer_blocks_upstream_gradients():
    model = init_encoder(SMALL, dtype=torch.float64).eval()
    with torch.no_grad():
        model.layers[1].ffn_out.weight.zero_()
        model.layers[1].ffn_out.bias.zero_()
    x = torch.randn(1, 6, 8, dtype=torch.float64)
    g = gradients(model(x)[-1].sum(), model)
    assert torch.count_nonzero(g["layers.1.ffn_in.weight"]) == 0


def test_layer_weight_saturation_and_equal_logits():
    outs = [torch.randn(4, 3) for _ in range(3)]
    near_one_hot = torch.tensor([0.0, 30.0, 0.0])
    assert torch.allclose(weighted_layer_sum(outs, near_one_hot), outs[1], atol=1e-3)
    assert torch.allclose(weighted_layer_sum(outs, torch.zeros(3)), sum(outs) / 3, atol=1e-6)
