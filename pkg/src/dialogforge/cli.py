"""Command-line pipeline: synthesize, validate, serialize, mask, pack, stats.

All randomness flows from one root seed through per-record derived seeds, and
every writing command drops a manifest next to its output (argv, config,
input/output hashes, counts), so reruns are reproducible byte for byte under
the mock backend.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 backend failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from . import io
from .atomic_ops import BackendUnavailable, CompletionBackend, MockBackend, RemoteBackend
from .dialogue import (
    Dialogue,
    dialogue_from_record,
    dialogue_to_record,
    validate_dialogue,
)
from .packing import SamplingConfig, pack_corpus, pack_to_record
from .stage_a import run_stage_a
from .stage_b import DistractorPool, entry_from_record, run_stage_b
from .stage_c import run_stage_c
from .stream import (
    StreamConfig,
    loss_summary,
    mask_intervals,
    patch_grid_units,
    serialize,
    stream_from_record,
    stream_to_record,
)
from .taxonomy import format_signature

ENV_BACKEND_URL = "DF_BACKEND_URL"
ENV_SEED = "DF_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    backend: str = "mock"
    backend_url: str | None = None
    seed: int = 0
    concurrency: int = 8
    retries: int = 2
    k_min: int = 1
    k_max: int = 3
    apply_fraction: float = 1.0
    l_min: int = 62464
    l_max: int = 65536
    weights: dict[str, float] = field(default_factory=dict)
    vit_patch: int = 14
    vae_patch: int = 16
    max_image_units: int = 16384
    replay_clean: bool = True

    def validate(self) -> None:
        if self.backend not in ("mock", "remote"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.backend == "remote" and not self.backend_url:
            raise ConfigError("remote backend needs a backend_url "
                              f"(flag, config file, or {ENV_BACKEND_URL})")
        if not 1 <= self.k_min <= self.k_max:
            raise ConfigError(f"invalid k range [{self.k_min}, {self.k_max}]")
        if not 0.0 <= self.apply_fraction <= 1.0:
            raise ConfigError("apply_fraction must lie in [0, 1]")
        if not 0 < self.l_min <= self.l_max:
            raise ConfigError(f"invalid length bounds [{self.l_min}, {self.l_max}]")
        if self.concurrency < 1 or self.retries < 0:
            raise ConfigError("concurrency must be >= 1 and retries >= 0")
        if min(self.vit_patch, self.vae_patch, self.max_image_units) < 1:
            raise ConfigError("patch sizes and the image-unit cap must be positive")

    def make_backend(self) -> CompletionBackend:
        if self.backend == "mock":
            return MockBackend()
        return RemoteBackend(url=self.backend_url)

    def stream_config(self) -> StreamConfig:
        return StreamConfig(
            vit_units_per_image=lambda w, h: patch_grid_units(w, h, self.vit_patch),
            vae_units_per_image=lambda w, h: patch_grid_units(w, h, self.vae_patch),
            max_image_units=self.max_image_units,
            replay_clean_after_noised=self.replay_clean,
        )

    def to_obj(self) -> dict[str, Any]:
        return {
            "backend": self.backend,
            "backend_url": self.backend_url,
            "seed": self.seed,
            "concurrency": self.concurrency,
            "retries": self.retries,
            "k_min": self.k_min,
            "k_max": self.k_max,
            "apply_fraction": self.apply_fraction,
            "l_min": self.l_min,
            "l_max": self.l_max,
            "weights": {k: self.weights[k] for k in sorted(self.weights)},
            "vit_patch": self.vit_patch,
            "vae_patch": self.vae_patch,
            "max_image_units": self.max_image_units,
            "replay_clean": self.replay_clean,
        }


def _load_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = PipelineConfig()
    if getattr(args, "config", None):
        try:
            with open(args.config, "r", encoding="utf-8") as f:
                file_cfg = json.load(f)
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file {args.config}: {err}") from err
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        for key, value in file_cfg.items():
            if not hasattr(cfg, key):
                raise ConfigError(f"unknown config key {key!r}")
            setattr(cfg, key, value)
    if os.environ.get(ENV_BACKEND_URL):
        cfg.backend_url = os.environ[ENV_BACKEND_URL]
    if os.environ.get(ENV_SEED):
        try:
            cfg.seed = int(os.environ[ENV_SEED])
        except ValueError as err:
            raise ConfigError(f"{ENV_SEED} must be an integer") from err
    # CLI flags win over env and file values.
    for key in ("backend", "backend_url", "seed", "concurrency", "retries",
                "apply_fraction", "l_min", "l_max", "vit_patch", "vae_patch",
                "max_image_units"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    if getattr(args, "k_min", None) is not None:
        cfg.k_min = args.k_min
    if getattr(args, "k_max", None) is not None:
        cfg.k_max = args.k_max
    cfg.validate()
    return cfg


def _manifest(command: str, argv: Sequence[str], cfg: PipelineConfig,
              inputs: Sequence[str], outputs: Sequence[str],
              counts: dict[str, int]) -> dict[str, Any]:
    return {
        "command": command,
        "argv": list(argv),
        "config": cfg.to_obj(),
        "inputs": {p: io.sha256_file(p) for p in inputs},
        "outputs": {p: io.sha256_file(p) for p in outputs},
        "counts": counts,
    }


def _write_manifest(out_path: str, manifest: dict[str, Any],
                    explicit: str | None) -> str:
    path = explicit or f"{out_path}.manifest.json"
    io.write_json(path, manifest)
    return path


def _read_dialogues(path: str, signature: str | None = None) -> list[Dialogue]:
    dialogues = [dialogue_from_record(rec) for rec in io.read_jsonl(path)]
    if signature:
        dialogues = [d for d in dialogues if format_signature(d.signature) == signature]
    return dialogues


def cmd_synthesize(args: argparse.Namespace, argv: Sequence[str]) -> int:
    cfg = _load_config(args)
    stages = [s.strip() for s in args.stages.split(",") if s.strip()]
    if not stages or any(s not in ("a", "b", "c") for s in stages):
        raise ConfigError(f"stages must be drawn from a,b,c: {args.stages!r}")
    if stages != sorted(stages) or len(set(stages)) != len(stages):
        raise ConfigError("stages must be in order and unique, e.g. a,b,c")
    if "a" in stages and not args.task:
        raise ConfigError("stage a needs --task <signature>")
    if "b" in stages and not args.pool:
        raise ConfigError("stage b needs --pool <jsonl>")

    backend = cfg.make_backend()
    inputs = [args.in_path]
    rejects: list[dict[str, Any]] = []

    if "a" in stages:
        raw = list(io.read_jsonl(args.in_path))
        dialogues, stage_rejects = run_stage_a(
            raw, args.task, backend,
            seed=cfg.seed, retries=cfg.retries, concurrency=cfg.concurrency)
        rejects += [{"stage": "a", **r} for r in stage_rejects]
    else:
        dialogues = _read_dialogues(args.in_path)

    if "b" in stages:
        inputs.append(args.pool)
        pool = DistractorPool(tuple(entry_from_record(r) for r in io.read_jsonl(args.pool)))
        if not pool.entries:
            raise ConfigError(f"distractor pool {args.pool} is empty")
        report = pool.validate()
        if not report.ok:
            first = report.violations[0]
            raise ConfigError(f"distractor pool entry {first.where}: {first.detail}")
        dialogues, stage_rejects = run_stage_b(
            dialogues, pool, (cfg.k_min, cfg.k_max), cfg.seed, backend,
            retries=cfg.retries, concurrency=cfg.concurrency)
        rejects += [{"stage": "b", **r} for r in stage_rejects]

    if "c" in stages:
        dialogues, stage_rejects = run_stage_c(
            dialogues, backend,
            apply_fraction=cfg.apply_fraction, seed=cfg.seed,
            retries=cfg.retries, concurrency=cfg.concurrency)
        rejects += [{"stage": "c", **r} for r in stage_rejects]

    io.write_jsonl(args.out, (dialogue_to_record(d) for d in dialogues))
    rejects_path = args.rejects or f"{args.out}.rejects.jsonl"
    io.write_jsonl(rejects_path, rejects)
    counts = {"written": len(dialogues), "rejected": len(rejects)}
    manifest = _manifest("synthesize", argv, cfg, inputs, [args.out, rejects_path], counts)
    _write_manifest(args.out, manifest, args.manifest)
    print(f"synthesize: {counts['written']} dialogues, {counts['rejected']} rejects -> {args.out}")
    return 0


def cmd_validate(args: argparse.Namespace, argv: Sequence[str]) -> int:
    del argv
    bad = 0
    for d in _read_dialogues(args.in_path, args.signature):
        report = validate_dialogue(d)
        if not report.ok:
            bad += 1
            for v in report.violations:
                where = "" if v.where is None else f" (round {v.where})"
                print(f"{d.id}: {v.rule}{where}: {v.detail}")
    print(f"validate: {bad} dialogues with violations")
    return 0 if bad == 0 else 1


def cmd_serialize(args: argparse.Namespace, argv: Sequence[str]) -> int:
    cfg = _load_config(args)
    stream_cfg = cfg.stream_config()
    records = []
    for d in _read_dialogues(args.in_path, args.signature):
        records.append(stream_to_record(serialize(d, stream_cfg)))
    io.write_jsonl(args.out, records)
    manifest = _manifest("serialize", argv, cfg, [args.in_path], [args.out],
                         {"written": len(records)})
    _write_manifest(args.out, manifest, args.manifest)
    print(f"serialize: {len(records)} streams -> {args.out}")
    return 0


def cmd_mask(args: argparse.Namespace, argv: Sequence[str]) -> int:
    cfg = _load_config(args)
    records = []
    for rec in io.read_jsonl(args.in_path):
        s = stream_from_record(rec)
        records.append({
            "dialogue_id": s.dialogue_id,
            "total_len": s.total_len,
            "rows": mask_intervals(s),
        })
    io.write_jsonl(args.out, records)
    manifest = _manifest("mask", argv, cfg, [args.in_path], [args.out],
                         {"written": len(records)})
    _write_manifest(args.out, manifest, args.manifest)
    print(f"mask: {len(records)} masks -> {args.out}")
    return 0


def cmd_pack(args: argparse.Namespace, argv: Sequence[str]) -> int:
    cfg = _load_config(args)
    try:
        with open(args.sampling_config, "r", encoding="utf-8") as f:
            weights = json.load(f)
    except json.JSONDecodeError as err:
        raise ConfigError(f"sampling config {args.sampling_config}: {err}") from err
    if not isinstance(weights, dict):
        raise ConfigError("sampling config must map category names to weights")
    sampling = SamplingConfig(weights)

    in_dir = Path(args.in_dir)
    corpora: dict[str, list[tuple[str, int]]] = {}
    inputs = [args.sampling_config]
    for category, weight in weights.items():
        if weight <= 0:
            continue
        path = in_dir / f"{category}.jsonl"
        if not path.exists():
            raise ConfigError(f"category {category!r}: no stream file at {path}")
        inputs.append(str(path))
        corpora[category] = [(rec["dialogue_id"], rec["total_len"])
                             for rec in io.read_jsonl(path)]

    packs, stats = pack_corpus(sampling, corpora, args.n, cfg.l_min, cfg.l_max,
                               cfg.seed, sort_desc=(args.sort == "desc"))
    io.write_jsonl(args.out, (pack_to_record(p) for p in packs))
    io.write_json(args.stats, stats)
    manifest = _manifest("pack", argv, cfg, inputs, [args.out, args.stats],
                         {"packs": len(packs), "samples": stats["sample_count"]})
    _write_manifest(args.out, manifest, args.manifest)
    print(f"pack: {len(packs)} packs ({stats['underfull_count']} underfull) -> {args.out}")
    return 0


def cmd_stats(args: argparse.Namespace, argv: Sequence[str]) -> int:
    del argv
    cfg = _load_config(args)
    stream_cfg = cfg.stream_config()
    signatures: dict[str, int] = {}
    depths: dict[str, int] = {}
    distractor_rounds = 0
    loss = {"ce": 0, "mse": 0, "none": 0, "total": 0}
    n = 0
    for d in _read_dialogues(args.in_path, args.signature):
        n += 1
        sig = format_signature(d.signature)
        signatures[sig] = signatures.get(sig, 0) + 1
        depth_key = str(d.dep_depth_value) if d.dep_depth_value is not None else "0"
        depths[depth_key] = depths.get(depth_key, 0) + 1
        distractor_rounds += sum(1 for r in d.rounds if r.user.is_distractor)
        summary = loss_summary(serialize(d, stream_cfg))
        loss["ce"] += summary.ce_positions
        loss["mse"] += summary.mse_positions
        loss["none"] += summary.none_positions
        loss["total"] += summary.total
    result = {
        "dialogues": n,
        "signatures": {k: signatures[k] for k in sorted(signatures)},
        "depth_values": {k: depths[k] for k in sorted(depths, key=lambda x: (len(x), x))},
        "distractor_rounds": distractor_rounds,
        "loss": loss,
    }
    text = json.dumps(result, indent=2, sort_keys=False)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    else:
        print(text)
    return 0


def _add_common(p: argparse.ArgumentParser, *, needs_backend: bool = False) -> None:
    p.add_argument("--config", help="JSON config file merged under CLI flags")
    p.add_argument("--seed", type=int, default=None, help="root seed (env DF_SEED)")
    if needs_backend:
        p.add_argument("--backend", choices=["mock", "remote"], default=None)
        p.add_argument("--backend-url", dest="backend_url", default=None,
                       help=f"remote completion endpoint (env {ENV_BACKEND_URL})")
        p.add_argument("--retries", type=int, default=None)
        p.add_argument("--concurrency", type=int, default=None)


def _add_stream_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--vit-patch", dest="vit_patch", type=int, default=None)
    p.add_argument("--vae-patch", dest="vae_patch", type=int, default=None)
    p.add_argument("--max-image-units", dest="max_image_units", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dialogforge",
        description="Synthesize multi-turn multimodal dialogues and serialize "
                    "them into packed training streams.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", help="run pipeline stages a, b, c")
    p.add_argument("--stage", dest="stages", default=None, help="single stage: a, b, or c")
    p.add_argument("--stages", dest="stages", help="comma-separated stages, e.g. a,b,c")
    p.add_argument("--task", help="stage-a task signature, e.g. t_i_i1_1")
    p.add_argument("--in", dest="in_path", required=True, help="records or dialogues JSONL")
    p.add_argument("--out", required=True, help="output dialogues JSONL")
    p.add_argument("--pool", help="distractor pool JSONL (stage b)")
    p.add_argument("--rejects", help="rejects JSONL (default <out>.rejects.jsonl)")
    p.add_argument("--manifest", help="manifest path (default <out>.manifest.json)")
    p.add_argument("--k-min", dest="k_min", type=int, default=None)
    p.add_argument("--k-max", dest="k_max", type=int, default=None)
    p.add_argument("--apply-fraction", dest="apply_fraction", type=float, default=None)
    _add_common(p, needs_backend=True)
    p.set_defaults(fn=cmd_synthesize)

    p = sub.add_parser("validate", help="check dialogue invariants")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--signature", help="only dialogues with this signature")
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("serialize", help="dialogues -> token streams")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--signature", help="only dialogues with this signature")
    p.add_argument("--manifest", default=None)
    _add_stream_flags(p)
    _add_common(p)
    p.set_defaults(fn=cmd_serialize)

    p = sub.add_parser("mask", help="token streams -> attention-mask intervals")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", default=None)
    _add_common(p)
    p.set_defaults(fn=cmd_mask)

    p = sub.add_parser("pack", help="weighted sampling + first-fit packing")
    p.add_argument("--config", dest="sampling_config", required=True,
                   help="JSON map of category -> weight")
    p.add_argument("--in-dir", dest="in_dir", required=True,
                   help="directory of <category>.jsonl stream files")
    p.add_argument("--n", type=int, required=True, help="number of draws")
    p.add_argument("--l-min", dest="l_min", type=int, default=None)
    p.add_argument("--l-max", dest="l_max", type=int, default=None)
    p.add_argument("--sort", choices=["none", "desc"], default="none")
    p.add_argument("--out", required=True, help="packs JSONL")
    p.add_argument("--stats", required=True, help="stats JSON")
    p.add_argument("--manifest", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_pack)

    p = sub.add_parser("stats", help="corpus statistics")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--signature", help="only dialogues with this signature")
    p.add_argument("--out", help="write JSON here instead of stdout")
    _add_stream_flags(p)
    _add_common(p)
    p.set_defaults(fn=cmd_stats)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args, argv)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return 3
    except BackendUnavailable as err:
        print(f"backend failure: {err}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
