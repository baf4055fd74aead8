"""Train every policy the acceptance suite needs, ahead of time.

    python scripts/warm_cache.py            # all runs
    python scripts/warm_cache.py hopping    # hopping only
"""
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

import training_cache as tc  # noqa: E402

JOBS = {
    "hopping": [lambda: tc.hopping_stage1(0), lambda: tc.hopping_stage2(0),
                lambda: tc.hopping_stage1(1), lambda: tc.hopping_stage1(2)],
    "bounding": [lambda: tc.bounding_stage1(0), lambda: tc.bounding_stage2(0)],
}

if __name__ == "__main__":
    groups = sys.argv[1:] or list(JOBS)
    for g in groups:
        for job in JOBS[g]:
            t0 = time.time()
            out = job()
            print(f"{out.name}: {time.time() - t0:.0f} s", flush=True)
