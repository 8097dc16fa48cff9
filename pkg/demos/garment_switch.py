"""
Streaming with a garment switch
===============================

Train a deliberately small model end to end (a couple of minutes), then
stream twelve chunks and switch garments half way. The printed table compares
refresh-only, refresh + withdraw, and the full rescheduling.
"""

import logging

from streamdiff.config import parse_config
from streamdiff.pipeline import evaluate_switch, run_pipeline

logging.basicConfig(level=logging.INFO)

# Shorter schedules than the acceptance run; switch quality is weaker.
cfg = parse_config("""
teacher_steps = 600
tf_steps = 600
dmd_steps = 40
""")
result = run_pipeline(cfg, out_dir=None, acceptance=False)

table, extra = evaluate_switch(cfg, result.student, result.world, result.dataset)
print(f"{'variant':>15} {'old':>7} {'new':>7} {'ratio':>7}")
for row in table:
    print(f"{row['variant']:>15} {row['post_old']:7.3f} {row['post_new']:7.3f} {row['continuity_ratio']:7.2f}")

mass = extra["attention"]
print(f"historical mass {mass['historical_mass']:.3f}, conditional mass {mass['conditional_mass']:.3f}")

# The session trace records what the cache held after every chunk.
for row in extra["sessions"]["full"].trace:
    print(row["chunk"], row["event"], row["retained_frames"])
