#!/usr/bin/env python3
"""
Forward / backward timing per model variant
"""
import os
import sys
import time

project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, project_root)

from crowd_gramformer import numerics as nx
from crowd_gramformer.config import VARIANTS, ModelConfig
from crowd_gramformer.model import GramformerModel
from crowd_gramformer.synthdata import SceneSpec, generate_scene


def benchmark_variants(repeats: int = 5):
    print("⚡ Gramformer Forward/Backward Benchmark")
    print("=" * 45)

    sample = generate_scene(SceneSpec(), seed=0)
    results = []

    for variant in VARIANTS:
        print(f"\n🎯 Testing: {variant}")
        model = GramformerModel(ModelConfig(variant=variant), seed=0)

        start_time = time.time()
        for _ in range(repeats):
            model.forward(sample.image)
        forward_time = (time.time() - start_time) / repeats

        start_time = time.time()
        for _ in range(repeats):
            model.zero_grad()
            with nx.Tape() as tape:
                loss = model.loss(sample.image, sample.density)[0]
            nx.backward(loss, tape)
        step_time = (time.time() - start_time) / repeats

        result = {
            "variant": variant,
            "parameters": model.parameter_count(),
            "forward": forward_time,
            "step": step_time,
            "tape": len(tape),
        }
        print(f"  ✅ {result['parameters']} params, forward {forward_time:.3f}s, "
              f"forward+backward {step_time:.3f}s, {result['tape']} tape records")
        results.append(result)

    print(f"\n📊 Benchmark Summary:")
    for r in results:
        print(f"  {r['variant']:<11} {r['step']:.3f}s per step")
    return results


if __name__ == "__main__":
    benchmark_variants()
