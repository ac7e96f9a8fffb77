import numpy as np

from benchmark import main, profile_engines, random_region, verify_engines
from engines import NaiveTextureEngine, TextureEngine
from profiler import KernelProfiler


class _OffByOneEngine(NaiveTextureEngine):
    def glszm(self, levels, n_levels, connectivity="slice8"):
        out = super().glszm(levels, n_levels, connectivity)
        out[0, 0] += 1
        return out


def test_random_regions_are_seeded():
    a, ga = random_region(np.random.default_rng(5))
    b, gb = random_region(np.random.default_rng(5))
    assert ga == gb and np.array_equal(a, b)
    assert 2 <= ga <= 8
    assert a.min() >= 0 and a.max() <= ga


def test_verification_reports_a_broken_kernel():
    result = verify_engines(3, seed=1, max_side=4, candidate=_OffByOneEngine())
    assert not result.passed
    assert all("GLSZM" in line for line in result.mismatches)
    assert isinstance(_OffByOneEngine(), TextureEngine)


def test_profiler_counts_calls():
    seen = []
    profiler = KernelProfiler(warmups=1, iterations=2)
    result = profiler.profile(lambda x: seen.append(x), [(1,), (2,), (3,)])
    assert result.calls == 6
    assert len(seen) == 3 * (1 + 2 + 1)
    assert result.latency_sec >= 0 and result.peak_memory_kb >= 0


def test_profile_engines_times_both():
    results = profile_engines(n_regions=2, seed=0, max_side=4)
    assert list(results) == ["Naive (Reference)", "Optimized (Vectorized)"]
    assert all(r.calls == 3 * 2 for r in results.values())


def test_main_passes_on_small_run(capsys):
    assert main(["--regions", "5", "--profile-regions", "2", "--seed", "3"]) == 0
    out = capsys.readouterr().out
    assert "[OK]" in out
    assert "BENCHMARK RESULTS SUMMARY" in out
