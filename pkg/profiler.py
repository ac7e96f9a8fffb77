import gc
import time
import tracemalloc
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


@dataclass
class ProfileResult:
    latency_sec: float
    peak_memory_kb: float
    calls: int


class KernelProfiler:
    """
    Latency and peak allocation of a texture kernel over a fixed workload.
    Each measured call runs the kernel once per workload item.
    """

    def __init__(self, warmups: int = 2, iterations: int = 5):
        self.warmups = warmups
        self.iterations = iterations

    def _run(self, func: Callable[..., np.ndarray], workload: Sequence[tuple]) -> None:
        for args in workload:
            func(*args)

    def profile(self, func: Callable[..., np.ndarray], workload: Sequence[tuple]) -> ProfileResult:
        for _ in range(self.warmups):
            self._run(func, workload)

        start = time.perf_counter()
        for _ in range(self.iterations):
            self._run(func, workload)
        avg_latency = (time.perf_counter() - start) / (self.iterations * max(1, len(workload)))

        gc.collect()
        tracemalloc.start()
        try:
            self._run(func, workload)
            _, peak = tracemalloc.get_traced_memory()
        finally:
            tracemalloc.stop()

        return ProfileResult(latency_sec=avg_latency, peak_memory_kb=peak / 1024.0,
                             calls=self.iterations * len(workload))
