"""Recompute ``src/ttbsde/data/reference_values.json`` for the shipped presets."""

import json
import sys
import time
from pathlib import Path

from ttbsde import experiment as ex

OUT = Path(__file__).resolve().parents[1] / "src" / "ttbsde" / "data" / "reference_values.json"
EXTRA_BLOCKS = [{"id": "hjb_log", "d": 10, "T": 1.0, "x0": 0.0}]


def main(names):
    table = json.loads(OUT.read_text()) if OUT.exists() else {}
    blocks = [ex.load_config(n).problem for n in names] + EXTRA_BLOCKS
    for block in blocks:
        key = ex.reference_key(block)
        t0 = time.time()
        ref = ex.compute_reference(block)
        if ref is None:
            continue
        ref["seconds"] = round(time.time() - t0, 1)
        table[key] = ref
        print(key, ref, flush=True)
        OUT.write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main(sys.argv[1:] or list(ex.PRESETS))
