import math


from crossprune.kv_cache import cache_bytes, crossover_tokens, live_bytes, memory_curve_csv, reduction_bytes
from crossprune.model import ModelConfig

CFG = ModelConfig(d=64, m=128, n_heads=4, n_kv_heads=4, S=8, C=4, dtype_bytes=4)


def scan_crossover(cfg, n_img):
    _, cross = cache_bytes(cfg, 1, 0, n_img)
    n = 0
    while cache_bytes(cfg, 1, n, n_img)[0] < cross:
        n += 1
    return n


def test_cache_bytes_example():
    assert cache_bytes(CFG, 1, 100, 1601) == (409_600, 3_278_848)


def test_cache_bytes_zero_image():
    assert cache_bytes(CFG, 1, 100, 0)[1] == 0


def test_cache_bytes_linear_in_batch():
    s1, c1 = cache_bytes(CFG, 1, 37, 500)
    s2, c2 = cache_bytes(CFG, 2, 37, 500)
    assert (s2, c2) == (2 * s1, 2 * c1)


def test_gqa_shrinks_cache():
    gqa = ModelConfig(d=64, m=128, n_heads=4, n_kv_heads=1, S=8, C=4, dtype_bytes=4)
    assert cache_bytes(gqa, 1, 100, 1601) == (409_600 // 4, 3_278_848 // 4)


def test_crossover_examples():
    sym = ModelConfig(d=64, n_heads=4, n_kv_heads=4, S=4, C=4)
    assert crossover_tokens(sym, 1601) == 1601
    assert crossover_tokens(CFG, 1601) == 801 == scan_crossover(CFG, 1601)


def test_crossover_halves_with_trimming():
    full = scan_crossover(CFG, 1600)
    assert scan_crossover(CFG, 800) == full // 2
    assert crossover_tokens(CFG, 800) == crossover_tokens(CFG, 1600) // 2


def test_reduction_bytes():
    assert reduction_bytes(CFG, 1, 1601, 1.0) == 0
    assert reduction_bytes(CFG, 2, 1601, 0.5) == 2 * reduction_bytes(CFG, 1, 1601, 0.5)
    _, full = cache_bytes(CFG, 1, 0, 1601)
    assert math.isclose(reduction_bytes(CFG, 1, 1601, 0.509), full * 0.491, rel_tol=1e-12)
    saved = [reduction_bytes(CFG, b, 1601, 0.6) for b in range(1, 6)]
    assert all(a < b for a, b in zip(saved, saved[1:]))


def test_memory_curve_csv():
    text = memory_curve_csv(CFG, [1, 2], [100], 1601)
    assert text.splitlines() == [
        "batch,n_text,n_img_kept,self_bytes,cross_bytes",
        "1,100,1601,409600,3278848",
        "2,100,1601,819200,6557696",
    ]


def test_live_bytes_sums_batch():
    class Fake:
        def __init__(self, s, c):
            self.s, self.c = s, c

        def self_bytes(self):
            return self.s

        def cross_bytes(self):
            return self.c

    assert live_bytes([Fake(1, 2), Fake(3, 4)]) == (4, 6)
