#!/usr/bin/env python3
"""End-to-end demo: records -> stages a/b/c -> streams -> masks -> packs.

Writes everything under ./demo_out/ using the mock backend and a fixed seed,
then prints the corpus statistics.
"""

import json
import shutil
import sys
from pathlib import Path

from dialogforge import io
from dialogforge.cli import main as cli
from dialogforge.fixtures import make_distractor_pool, make_edit_records, make_t2i_records
from dialogforge.stage_b import entry_to_record

OUT = Path("demo_out")
SEED = "7"


def step(*argv):
    print("$ dialogforge " + " ".join(argv))
    code = cli(list(argv))
    if code != 0:
        sys.exit(code)


def main() -> None:
    if OUT.exists():
        shutil.rmtree(OUT)
    (OUT / "streams").mkdir(parents=True)

    io.write_jsonl(OUT / "edit_records.jsonl", make_edit_records(40, seed=1))
    io.write_jsonl(OUT / "t2i_records.jsonl", make_t2i_records(40, seed=2))
    pool = make_distractor_pool(12, seed=3)
    io.write_jsonl(OUT / "pool.jsonl", (entry_to_record(e) for e in pool.entries))

    step("synthesize", "--stages", "a,b,c", "--task", "t_i_i1_1",
         "--in", str(OUT / "edit_records.jsonl"), "--pool", str(OUT / "pool.jsonl"),
         "--out", str(OUT / "long_edit.jsonl"), "--backend", "mock", "--seed", SEED)
    step("synthesize", "--stages", "a,c", "--task", "t_i_0_0",
         "--in", str(OUT / "t2i_records.jsonl"),
         "--out", str(OUT / "t2i.jsonl"), "--backend", "mock", "--seed", SEED)

    step("validate", "--in", str(OUT / "long_edit.jsonl"))
    step("serialize", "--in", str(OUT / "long_edit.jsonl"),
         "--out", str(OUT / "streams" / "t_ti_i1_n.jsonl"))
    step("serialize", "--in", str(OUT / "t2i.jsonl"),
         "--out", str(OUT / "streams" / "t_ti_0_0.jsonl"))
    step("mask", "--in", str(OUT / "streams" / "t_ti_i1_n.jsonl"),
         "--out", str(OUT / "masks.jsonl"))

    weights = OUT / "weights.json"
    weights.write_text(json.dumps({"t_ti_i1_n": 0.1, "t_ti_0_0": 0.5}))
    step("pack", "--config", str(weights), "--in-dir", str(OUT / "streams"),
         "--n", "500", "--l-min", "62464", "--l-max", "65536", "--seed", SEED,
         "--out", str(OUT / "packs.jsonl"), "--stats", str(OUT / "pack_stats.json"))

    step("stats", "--in", str(OUT / "long_edit.jsonl"))


if __name__ == "__main__":
    main()
