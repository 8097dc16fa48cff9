"""
Teacher-forcing attention mask
==============================

Print the mask for two chunks of three frames (one token per frame) and the
row policy a chunk uses at inference time.
"""

from streamdiff.masking import build_inference_mask, build_tf_mask, mask_to_text

# Layout: ctx | ref | garment | clean 0..5 | noisy 0..5
m = build_tf_mask(6, tokens=1, chunk=3, duplicate_conditions=False)
labels = ["c", "r", "g"] + [f"{i}" for i in range(6)] + [f"{i}'" for i in range(6)]
for lab, row in zip(labels, mask_to_text(m).splitlines()):
    print(f"{lab:>3} {row}")

# The second noisy chunk sees every condition, the first clean chunk and itself.
inf = build_inference_mask(1, chunk=3, tokens=1)
print("inference columns:", len(inf.cols), "all visible:", bool(inf.allowed.all()))
