#!/usr/bin/env python3
"""
Tests for the Gramformer model, its baselines and the losses
"""
import os
import sys
import time
from dataclasses import replace

project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, project_root)

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from crowd_gramformer import numerics as nx
from crowd_gramformer.config import ModelConfig, RunConfig
from crowd_gramformer.exceptions import ConfigError, ContractError, ShapeError
from crowd_gramformer.graphs import AttentionGraph
from crowd_gramformer.model import (GramformerModel, density_loss, get_loss, graphormer_layer,
                                    modulated_attention_layer, patch_encode, pixel_mse_loss, regression_head,
                                    total_loss, transformer_forward, vanilla_layer)
from crowd_gramformer.synthdata import SceneSpec, generate_scene
from crowd_gramformer.trainer import scheduled_lr, train, train_step

TINY = ModelConfig(channels=8, heads=2, layers=2, m=4)


def tiny_model(**changes) -> GramformerModel:
    return GramformerModel(replace(TINY, **changes), seed=0)


def random_nodes(rng, n=16, c=8):
    return nx.constant(rng.normal(size=(n, c)))


def test_patch_encode():
    print("🧪 Testing patch encoder...")
    model = GramformerModel(ModelConfig(channels=8, heads=2), seed=0)
    nodes, grid = patch_encode(np.random.default_rng(0).uniform(size=(64, 64)), model.params, 8)
    assert nodes.shape == (64, 8) and grid == (8, 8)

    params = dict(model.params)
    params["patch.bias"] = nx.constant(np.zeros(8))
    zero, _ = patch_encode(np.zeros((1, 16, 16)), params, 8)
    assert_array_equal(zero.data, np.zeros((4, 8)))

    # swapping two patches swaps their node rows
    image = np.random.default_rng(1).uniform(size=(16, 16))
    swapped = image.copy()
    swapped[:8, :8], swapped[8:, 8:] = image[8:, 8:], image[:8, :8]
    a, _ = patch_encode(image, model.params, 8)
    b, _ = patch_encode(swapped, model.params, 8)
    assert_allclose(b.data[[3, 1, 2, 0]], a.data)

    with pytest.raises(ContractError):
        patch_encode(np.zeros((20, 16)), model.params, 8)
    print("  ✅ patches map to row-major nodes")


def test_all_ones_graph_matches_vanilla():
    print("🧪 Testing E = 1 reduces to vanilla attention...")
    model = tiny_model(layers=1)
    nodes = random_nodes(np.random.default_rng(2))
    ones = AttentionGraph([nx.constant(np.ones((16, 16))) for _ in range(2)])
    modulated, _ = modulated_attention_layer(nodes, ones, None, None, model.params, "layer.0", 2)
    plain, maps = vanilla_layer(nodes, model.params, "layer.0", 2)
    assert np.max(np.abs(modulated.data - plain.data)) < 1e-10
    for attention in maps:
        assert_allclose(attention.data.sum(axis=1), np.ones(16), atol=1e-12)
    print("  ✅ identical outputs")


def test_zero_graph_annihilates_attention():
    model = tiny_model(layers=1)
    nodes = random_nodes(np.random.default_rng(3))
    zeros = AttentionGraph([nx.constant(np.zeros((16, 16))) for _ in range(2)])
    out, maps = modulated_attention_layer(nodes, zeros, None, None, model.params, "layer.0", 2)
    for attention in maps:
        assert_array_equal(attention.data.sum(axis=1), np.zeros(16))
    expected = nx.layer_norm(nodes, model.params["layer.0.norm1.gain"], model.params["layer.0.norm1.bias"])
    assert_allclose(out.data, expected.data, atol=1e-12)


def test_vanilla_permutation_equivariance():
    model = tiny_model(layers=1)
    rng = np.random.default_rng(4)
    nodes = random_nodes(rng)
    order = rng.permutation(16)
    out, _ = vanilla_layer(nodes, model.params, "layer.0", 2)
    permuted, _ = vanilla_layer(nx.constant(nodes.data[order]), model.params, "layer.0", 2)
    assert_allclose(permuted.data, out.data[order], atol=1e-12)


def test_attention_row_sums_per_variant():
    print("🧪 Testing attention row sums...")
    image = np.random.default_rng(5).uniform(size=(32, 32))
    for variant in ("gramformer", "vanilla", "graphormer"):
        _, _, trace = tiny_model(variant=variant).forward(image)
        assert trace.layers == 2
        for maps in trace.attention:
            sums = maps.sum(axis=2)
            assert np.all(maps >= 0)
            if variant == "gramformer":
                assert np.all(sums >= 0) and np.all(sums <= 1 + 1e-12)
            else:
                assert_allclose(sums, np.ones_like(sums), atol=1e-9)
        print(f"  ✅ {variant}")


def test_graphormer_zero_edges_matches_centrality_only():
    """Zero edge MLP output leaves softmax(qk^T) plus centrality"""
    graphormer = tiny_model(variant="graphormer")
    for layer in range(2):
        graphormer.params[f"layer.{layer}.edge.w2"].data[:] = 0.0
        graphormer.params[f"layer.{layer}.edge.b2"].data[:] = 0.0
    centrality_only = tiny_model(variant="gramformer", use_ewr=False, use_centrality=True)

    image = np.random.default_rng(6).uniform(size=(32, 32))
    a, _, _ = graphormer.forward(image)
    b, _, _ = centrality_only.forward(image)
    assert_allclose(a.data, b.data, atol=1e-12)


def test_graphormer_bias_masking():
    model = tiny_model(layers=1, variant="graphormer")
    nodes = random_nodes(np.random.default_rng(7))
    mask = np.full((16, 16), -1e9)
    np.fill_diagonal(mask, 0.0)
    _, maps = graphormer_layer(nodes, nx.constant(mask), None, None, model.params, "layer.0", 2)
    for attention in maps:
        assert_allclose(attention.data, np.eye(16), atol=1e-12)


def test_regression_head():
    model = tiny_model()
    params = {name: nx.constant(np.zeros_like(p.data)) if name.endswith("bias") else p
              for name, p in model.params.items()}
    zero = regression_head(nx.constant(np.zeros((16, 8))), (4, 4), params)
    assert zero.shape == (1, 8, 8)
    assert_array_equal(zero.data, np.zeros((1, 8, 8)))

    density = regression_head(random_nodes(np.random.default_rng(8)), (4, 4), model.params)
    assert np.all(density.data >= 0)
    assert model.output_shape((32, 32)) == (8, 8)


def test_losses():
    print("🧪 Testing losses...")
    rng = np.random.default_rng(9)
    gt = rng.uniform(0, 0.1, size=(1, 8, 8))
    assert density_loss(nx.constant(gt), gt).item() == pytest.approx(0.0, abs=1e-15)

    offset = pixel_mse_loss(nx.constant(gt + 0.3), gt).item()
    assert offset == pytest.approx(0.09, abs=1e-12)

    pred = rng.uniform(0, 0.1, size=(1, 8, 8))
    expected = np.mean((pred - gt) ** 2) + abs(pred.sum() - gt.sum()) / (gt.sum() + 1.0)
    assert abs(density_loss(nx.constant(pred), gt).item() - expected) < 1e-12

    with pytest.raises(ShapeError):
        density_loss(nx.constant(pred), np.zeros((1, 4, 4)))
    assert get_loss("mse_count") is density_loss
    assert total_loss(nx.constant(np.array(2.0)), nx.constant(np.array(3.0)), 0.1).item() == pytest.approx(2.3)
    assert total_loss(nx.constant(np.array(2.0)), nx.constant(np.array(3.0)), 0.0).item() == 2.0
    assert total_loss(nx.constant(np.array(2.0)), None, 0.1).item() == 2.0
    print("  ✅ losses match direct formulas")


def test_frozen_features_keep_centrality():
    """No-op layers keep the neighbor sets and indices identical across layers"""
    model = tiny_model()
    for layer in range(2):
        for name in ("out", "ffn.w2", "ffn.b2"):
            model.params[f"layer.{layer}.{name}"].data[:] = 0.0
    raw = np.random.default_rng(10).normal(size=(16, 8))
    normalized = (raw - raw.mean(axis=1, keepdims=True)) / raw.std(axis=1, keepdims=True)
    _, trace, _ = transformer_forward(nx.constant(normalized), (4, 4), model.config, model.params)
    assert_array_equal(trace.neighbors[0], trace.neighbors[1])
    assert_array_equal(trace.indices[0], trace.indices[1])


def test_graph_and_centrality_modes():
    image = np.random.default_rng(11).uniform(size=(32, 32))
    _, reg_static, trace = tiny_model(centrality_mode="static").forward(image)
    assert trace.neighbors[0] is not None
    assert_array_equal(trace.neighbors[0], trace.neighbors[1])
    assert reg_static.item() >= 0

    _, reg_dynamic, _ = tiny_model(graph_mode="dynamic").forward(image)
    assert reg_dynamic.item() >= 0

    _, reg_vanilla, vanilla_trace = tiny_model(variant="vanilla").forward(image)
    assert reg_vanilla is None
    assert vanilla_trace.graph is None and vanilla_trace.neighbors == [None, None]


def test_variants_share_initial_weights():
    a = tiny_model(variant="gramformer").state_arrays()
    b = tiny_model(variant="vanilla").state_arrays()
    assert list(a) == list(b)
    for name in a:
        assert_array_equal(a[name], b[name])
    assert tiny_model().parameter_count() == sum(v.size for v in a.values())


def test_full_model_gradient_check():
    """Every parameter of the tiny 2-layer model against central differences"""
    print("🧪 Testing full-model gradients...")
    model = tiny_model(graph_mode="dynamic")
    rng = np.random.default_rng(0)
    image = rng.uniform(size=(32, 32))
    target = rng.uniform(0, 0.05, size=(8, 8))
    frozen = model.forward(image)[2].selections()

    report = nx.grad_check(lambda: model.loss(image, target, frozen=frozen)[0], model.parameters())
    print(f"  📊 worst relative error {report.worst:.2e}")
    assert report.passed, [str(e) for e in report.failures]
    assert sorted(report.names()) == sorted(model.parameters())


def _scene():
    spec = SceneSpec(height=32, width=32, expected_counts=(3.0, 2.0))
    return generate_scene(spec, seed=3)


def test_training_reduces_loss():
    print("🧪 Testing 50 training steps...")
    sample = _scene()
    model = GramformerModel(ModelConfig(channels=16, heads=2), seed=0)
    optimizer = nx.Adam(lr=1e-3)
    losses = [train_step(model, [sample], optimizer, density_loss).loss for _ in range(50)]
    print(f"  📉 {losses[0]:.4f} -> {losses[-1]:.4f}")
    assert losses[-1] < losses[0]
    assert all(np.isfinite(losses))


def test_training_is_deterministic():
    sample = _scene()
    runs = []
    for _ in range(2):
        model = tiny_model()
        optimizer = nx.Adam(lr=1e-3)
        runs.append([train_step(model, [sample], optimizer, density_loss).loss for _ in range(3)])
    assert runs[0] == runs[1]


def test_reg_weight_changes_only_later_steps():
    sample = _scene()
    with_reg, without_reg = tiny_model(reg_weight=0.1), tiny_model(reg_weight=0.0)
    optimizer_a, optimizer_b = nx.Adam(lr=1e-3), nx.Adam(lr=1e-3)
    first_a = train_step(with_reg, [sample], optimizer_a, density_loss)
    first_b = train_step(without_reg, [sample], optimizer_b, density_loss)
    assert first_a.density_term == first_b.density_term
    for _ in range(2):
        train_step(with_reg, [sample], optimizer_a, density_loss)
        train_step(without_reg, [sample], optimizer_b, density_loss)
    assert not np.array_equal(with_reg.params["ewr.0.conv1.weight"].data,
                              without_reg.params["ewr.0.conv1.weight"].data)


def test_centrality_bank_row_zero_is_trainable():
    """Row 0 (no occurrences) starts at zero but is an ordinary trainable row"""
    model = tiny_model()
    bank = model.params["centrality.bank"]
    assert_array_equal(bank.data[0], np.zeros(TINY.channels))
    assert np.any(bank.data[1:] != 0.0)

    model.zero_grad()
    bank.grad[0] = 1.0
    nx.Adam(lr=0.01).step(model.parameters())
    assert_allclose(bank.data[0], np.full(TINY.channels, -0.01), atol=1e-6)


def test_learning_rate_schedule():
    print("🧪 Testing learning rate schedule...")
    config = RunConfig(lr=1e-3, iterations=1000, warmup=100, lr_floor=0.05)
    assert scheduled_lr(config, 1) == pytest.approx(1e-5)
    assert scheduled_lr(config, 50) == pytest.approx(5e-4)
    assert scheduled_lr(config, 100) == pytest.approx(1e-3)
    assert scheduled_lr(config, 550) == pytest.approx(0.5 * (1e-3 + 5e-5))
    assert scheduled_lr(config, 1000) == pytest.approx(5e-5)
    decay = [scheduled_lr(config, i) for i in range(100, 1001)]
    assert all(later <= earlier for earlier, later in zip(decay, decay[1:]))

    flat = replace(config, lr_schedule="constant")
    assert {scheduled_lr(flat, i) for i in (1, 100, 1000)} == {1e-3}
    no_warmup = replace(config, warmup=0)
    assert scheduled_lr(no_warmup, 1) == pytest.approx(1e-3, rel=1e-4)

    with pytest.raises(ConfigError):
        RunConfig(lr_schedule="step").validate()
    with pytest.raises(ConfigError):
        RunConfig(warmup=-1).validate()
    with pytest.raises(ConfigError):
        RunConfig(lr_floor=1.5).validate()
    print("  ✅ warmup then cosine decay")


def test_non_finite_loss_stops_training(tmp_path):
    scene = _scene()
    scene.density[0, 0] = np.nan
    config = RunConfig(channels=8, heads=2, iterations=3, batch_size=1, eval_interval=1, augment_flip=False)
    with pytest.raises(ContractError, match="non-finite at iteration 1"):
        train(config, [scene], [scene], str(tmp_path))


def test_single_scene_memorization(tmp_path):
    """Training and testing on one scene drives its count error below half a head"""
    print("🧪 Testing single-scene memorization (2000 steps)...")
    scene = generate_scene(SceneSpec(), seed=0)
    config = RunConfig(iterations=2000, batch_size=1, eval_interval=2000, augment_flip=False, seed=0)
    started = time.perf_counter()
    result = train(config, [scene], [scene], str(tmp_path))
    elapsed = time.perf_counter() - started
    mae = result.final.errors.mae
    print(f"  📊 mae {mae:.4f} on {scene.count} heads in {elapsed:.1f}s")
    assert mae < 0.5
    assert elapsed < 120.0
    print("  ✅ memorized")


def run_all_tests():
    """Run the model test suite"""
    import tempfile
    from pathlib import Path

    print("🧠 Model Test Suite")
    print("=" * 50)

    tests = [(name, fn) for name, fn in globals().items() if name.startswith("test_") and callable(fn)]
    results = []
    for test_name, test_func in tests:
        try:
            if test_func.__code__.co_argcount:
                with tempfile.TemporaryDirectory() as directory:
                    test_func(Path(directory))
            else:
                test_func()
            results.append((test_name, True))
        except Exception as e:
            print(f"❌ {test_name} failed: {e}")
            results.append((test_name, False))

    print(f"\n{'='*20} TEST SUMMARY {'='*20}")
    for test_name, success in results:
        print(f"{'✅ PASS' if success else '❌ FAIL'} {test_name}")
    passed = sum(1 for _, success in results if success)
    print(f"\nOverall Result: {passed}/{len(results)} tests passed")
    return passed == len(results)


if __name__ == "__main__":
    import argparse

    parser = argparse.ArgumentParser(description="Test the Gramformer model")
    parser.add_argument("--test", "-t", default="all", help="test name without the test_ prefix, or 'all'")
    args = parser.parse_args()

    if args.test == "all":
        success = run_all_tests()
    else:
        test_func = globals()[f"test_{args.test}"]
        if test_func.__code__.co_argcount:
            import tempfile
            from pathlib import Path

            with tempfile.TemporaryDirectory() as directory:
                test_func(Path(directory))
        else:
            test_func()
        success = True
    exit(0 if success else 1)
