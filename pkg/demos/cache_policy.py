"""
Rolling KV cache with a pinned sink
===================================

Walk a cache through a long stream and a garment switch and print which
frames it keeps after every chunk.
"""

import numpy as np

from streamdiff.kvcache import KvCache, expected_retained, historical_withdraw

# A cache only needs per-layer (K, V) arrays; constant dummies are enough to
# watch the bookkeeping.
def dummy_kv(frame):
    a = np.full((1, 1, 2, 4), float(frame))
    return ((a, a),)

cond_kv = [(np.zeros((1, 1, 5, 4)), np.zeros((1, 1, 5, 4)))]
cache = KvCache(layers=1, tokens=2, chunk=3, max_size=11)
cache = cache.with_conditions(cond_kv, np.zeros((1, 2, 4)), np.zeros((1, 2, 4)))

# Eleven slots: reference, garment, the sink frame and eight rolling frames.
for c in range(8):
    frames = range(3 * c, 3 * c + 3)
    cache = cache.append_and_evict([(f, dummy_kv(f)) for f in frames], 3 * c + 2)
    print(f"chunk {c}: {cache.retained_frames()}  slots {cache.size()}")
    assert cache.retained_frames() == expected_retained(3 * c + 2, 11)

# A switch withdraws all history; the next frame becomes the new sink.
cache = historical_withdraw(cache)
cache = cache.append_and_evict([(f, dummy_kv(f)) for f in range(24, 27)], 26)
print("after withdraw:", cache.retained_frames(), "sink", cache.sink_frame)
