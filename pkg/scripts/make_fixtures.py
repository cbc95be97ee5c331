#!/usr/bin/env python3
"""Regenerate the bundled fixture corpora under tests/data/.

Everything is seeded, so reruns reproduce the committed files byte for byte.
"""

from pathlib import Path

from dialogforge import io
from dialogforge.fixtures import (
    make_distractor_pool,
    make_edit_records,
    make_subject_records,
    make_t2i_records,
)
from dialogforge.stage_b import entry_to_record

DATA = Path(__file__).resolve().parents[1] / "tests" / "data"


def main() -> None:
    DATA.mkdir(parents=True, exist_ok=True)
    io.write_jsonl(DATA / "edit_records_20.jsonl", make_edit_records(20, seed=2024))
    io.write_jsonl(DATA / "t2i_records_20.jsonl", make_t2i_records(20, seed=2025))
    io.write_jsonl(DATA / "subject_records_20.jsonl", make_subject_records(20, seed=2026))
    pool = make_distractor_pool(10, seed=2027)
    io.write_jsonl(DATA / "pool.jsonl", (entry_to_record(e) for e in pool.entries))
    for name in ("edit_records_20", "t2i_records_20", "subject_records_20", "pool"):
        path = DATA / f"{name}.jsonl"
        print(f"{path}  sha256={io.sha256_file(path)[:16]}")


if __name__ == "__main__":
    main()
