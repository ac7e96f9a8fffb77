import argparse
import sys
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from engines import CONNECTIVITIES, NaiveTextureEngine, OptimizedTextureEngine, TextureEngine
from profiler import KernelProfiler, ProfileResult
from texture import DIRECTIONS

N_REGIONS = 100
MAX_SIDE = 8
SEED = 42


@dataclass
class VerificationResult:
    checks: int = 0
    mismatches: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.mismatches


def random_region(rng: np.random.Generator, max_side: int = MAX_SIDE) -> Tuple[np.ndarray, int]:
    """Random level grid up to max_side per axis: sparse-to-dense mask, 2-8 gray levels."""
    dims = tuple(int(d) for d in rng.integers(1, max_side + 1, size=3))
    n_levels = int(rng.integers(2, 9))
    density = float(rng.uniform(0.3, 1.0))
    mask = rng.random(dims) < density
    levels = rng.integers(1, n_levels + 1, size=dims) * mask
    return levels.astype(np.int32), n_levels


def verify_engines(n_regions: int = N_REGIONS, seed: int = SEED, max_side: int = MAX_SIDE,
                   reference: TextureEngine = None, candidate: TextureEngine = None) -> VerificationResult:
    """Compare every kernel of candidate against reference on seeded random regions (exact integer equality)."""
    reference = reference or NaiveTextureEngine()
    candidate = candidate or OptimizedTextureEngine()
    rng = np.random.default_rng(seed)
    result = VerificationResult()

    for r in range(n_regions):
        levels, g = random_region(rng, max_side)
        pairs = []
        for a in DIRECTIONS:
            pairs.append((f"GLCM {a}", reference.glcm(levels, g, a), candidate.glcm(levels, g, a)))
            pairs.append((f"GLRLM {a}", reference.glrlm(levels, g, a), candidate.glrlm(levels, g, a)))
        for conn in CONNECTIVITIES:
            pairs.append((f"GLSZM {conn}", reference.glszm(levels, g, conn), candidate.glszm(levels, g, conn)))
        for what, expected, actual in pairs:
            result.checks += 1
            if expected.shape != actual.shape or not np.array_equal(expected, actual):
                result.mismatches.append(f"region {r} dims {levels.shape} levels {g}: {what}")
    return result


def profile_engines(n_regions: int = 10, seed: int = SEED, max_side: int = MAX_SIDE) -> Dict[str, ProfileResult]:
    """Mean latency per region (all 13 GLCM + 13 GLRLM directions and one GLSZM) and peak memory."""
    rng = np.random.default_rng(seed)
    workload = [random_region(rng, max_side) for _ in range(n_regions)]

    def all_kernels(engine: TextureEngine):
        def run(levels, g):
            for a in DIRECTIONS:
                engine.glcm(levels, g, a)
                engine.glrlm(levels, g, a)
            return engine.glszm(levels, g)
        return run

    profiler = KernelProfiler(warmups=1, iterations=3)
    return {
        engine.name: profiler.profile(all_kernels(engine), workload)
        for engine in (NaiveTextureEngine(), OptimizedTextureEngine())
    }


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(description="Texture kernel benchmark: naive vs optimized engines")
    parser.add_argument("--regions", type=int, default=N_REGIONS, help="Random regions for the correctness check")
    parser.add_argument("--profile-regions", type=int, default=10, help="Random regions for timing")
    parser.add_argument("--seed", type=int, default=SEED)
    args = parser.parse_args(argv)

    print("=" * 60)
    print("Texture Kernel Benchmark")
    print("=" * 60)
    for engine in (NaiveTextureEngine(), OptimizedTextureEngine()):
        print(engine.describe())
    print("-" * 60)

    print(f"\nVerifying optimized kernels on {args.regions} regions...")
    check = verify_engines(args.regions, args.seed)
    if not check.passed:
        for line in check.mismatches[:20]:
            print(f"  [FAIL] {line}")
        print(f"  {len(check.mismatches)} of {check.checks} matrices differ.")
        return 1
    print(f"  [OK] {check.checks} matrices identical.")

    print("\nTiming...")
    results = profile_engines(args.profile_regions, args.seed)
    print("\n" + "=" * 60)
    print("BENCHMARK RESULTS SUMMARY")
    print("=" * 60)
    for name, res in results.items():
        print(f"{name}:")
        print(f"  Time per region: {res.latency_sec:.6f} sec")
        print(f"  Peak Memory: {res.peak_memory_kb:.2f} KB")
    naive, optimized = results.values()
    if optimized.latency_sec > 0:
        print("-" * 60)
        print(f"  Speedup: {naive.latency_sec / optimized.latency_sec:.2f}x faster")
    print("=" * 60)
    return 0


if __name__ == "__main__":
    sys.exit(main())
