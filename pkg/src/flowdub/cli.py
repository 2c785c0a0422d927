"""``flowdub`` command line: data-gen, train, generate, eval, inspect.

Exit codes: 0 success, 1 usage error (bad flags, missing route input), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import numkit as nk
from . import pipeline as pl
from . import synthdata as sd
from .io import FormatError, read_track, read_wav, write_wav


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _write_header(path: Path, command: str, seed: int, extra: dict | None = None) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"command": command, "seed": seed, "version": __version__, **(extra or {})}
    path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n",
                                                encoding="utf-8")


def cmd_data_gen(args) -> int:
    if args.n_clips < 10:
        raise UsageError("--n-clips must be at least 10")
    manifest = sd.make_corpus(args.seed, args.n_clips, args.out)
    counts = {s: sum(c["split"] == s for c in manifest["clips"]) for s in ("train", "val", "test")}
    _write_header(Path(args.out) / "data-gen.run.json", "data-gen", args.seed, {"n_clips": args.n_clips})
    print(f"wrote {args.n_clips} clips to {args.out} (train {counts['train']}, val {counts['val']}, "
          f"test {counts['test']})")
    return 0


def cmd_train(args) -> int:
    cfg = pl.load_config(args.config, stage=args.stage) if args.config else pl.load_config(stage=args.stage)
    if args.seed_given:
        cfg = pl.StageConfig(**{**cfg.__dict__, "seed": args.seed})
    summary = pl.train_stage(args.stage, args.data, args.out, cfg, resume=args.resume)
    print(f"stage {args.stage}: {summary['updates']} updates, config {cfg.config_hash()[:12]}")
    if summary.get("final_loss") is not None:
        print(f"loss {summary['initial_loss']:.4f} -> {summary['final_loss']:.4f}")
    if "heldout_accuracy" in summary and summary["heldout_accuracy"] is not None:
        print(f"held-out route accuracy {summary['heldout_accuracy']:.4f} ({summary['heldout_size']} instructions)")
    if "drop_rates" in summary:
        r = summary["drop_rates"]
        if r.get("samples"):
            print(f"drop rates over {r['samples']} samples: energy {r['energy']:.3f} text {r['text']:.3f} "
                  f"prompt {r['prompt']:.3f}")
    return 0


def _load_track(path):
    if path is None:
        return None
    try:
        return read_track(path)
    except (OSError, FormatError) as exc:
        raise pl.PipelineError(f"cannot read video track {path}: {exc}") from exc


def _load_wave(path):
    if path is None:
        return None
    try:
        return read_wav(path)
    except (OSError, FormatError) as exc:
        raise pl.PipelineError(f"cannot read prompt {path}: {exc}") from exc


def cmd_generate(args) -> int:
    bundle = pl.ModelBundle.load(args.bundle)
    try:
        wave, audit = pl.generate(bundle, args.instruction, video=_load_track(args.video),
                                  transcript=args.transcript, prompt=_load_wave(args.prompt), seed=args.seed)
    except pl.RouteInputError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_wav(out, wave)
    audit = {**audit, "seed": args.seed, "version": __version__, "wav": out.name}
    audit_path = Path(args.audit) if args.audit else out.with_suffix(".json")
    audit_path.write_text(json.dumps(audit, sort_keys=True) + "\n", encoding="utf-8")
    print(f"route {audit['route']} (p={max(audit['probs']):.3f}); modules {','.join(audit['activated_modules'])}")
    return 0


def cmd_eval(args) -> int:
    summary = pl.evaluate(args.manifest, args.bundle, args.out, upto_stage=args.upto_stage, seed=args.seed,
                          split=args.split, duration=args.duration)
    out = Path(args.out)
    extra = {"bundle": str(args.bundle) if args.bundle else None, "mode": summary["mode"]}
    _write_header(out.with_name(out.name + ".run.json"), "eval", args.seed, extra)
    print(f"{summary['n']} clips ({summary['mode']}): MCD {summary['mean_mcd']:.4f} "
          f"MCD_SL {summary['mean_mcd_sl']:.4f} energy_corr {summary['mean_energy_corr']:.4f}")
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if path.is_dir():
        meta_path = path / "bundle.json"
        if not meta_path.exists():
            raise pl.PipelineError(f"{path} is not a bundle directory")
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        info = {"version": meta.get("version"), "stages": meta.get("stages", {}),
                "frames_per_token": meta.get("frames_per_token")}
    else:
        try:
            blob = path.read_bytes()
        except OSError as exc:
            raise pl.PipelineError(str(exc)) from exc
        if blob[:4] == b"FDCK":
            arrays = nk.checkpoint.parse_arrays(blob)
            step = arrays.pop(nk.checkpoint.STEP_KEY, np.zeros(()))
            params = {k: list(v.shape) for k, v in arrays.items() if not k.endswith(("/m", "/v"))}
            info = {"kind": "checkpoint", "step": int(step), "n_params": int(sum(np.prod(s) for s in params.values())),
                    "tensors": params}
        elif path.suffix == ".json":
            info = json.loads(blob)
        else:
            raise pl.PipelineError(f"unrecognised file {path}")
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="flowdub", description="Instruction-routed audio, speech and dubbing generation.")
    p.add_argument("--version", action="version", version=f"flowdub {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def seeded(sp):
        sp.add_argument("--seed", type=int, default=None, help="random seed (default 42)")
        return sp

    g = seeded(sub.add_parser("data-gen", help="write a synthetic corpus"))
    g.add_argument("--out", required=True)
    g.add_argument("--n-clips", type=int, default=200)
    g.set_defaults(func=cmd_data_gen)

    t = seeded(sub.add_parser("train", help="run one training stage"))
    t.add_argument("--stage", type=int, required=True, choices=(1, 2, 3, 4))
    t.add_argument("--config", default=None, help="stage TOML (packaged default if omitted)")
    t.add_argument("--data", required=True, help="corpus manifest")
    t.add_argument("--out", required=True, help="bundle directory")
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    gen = seeded(sub.add_parser("generate", help="route an instruction and synthesize"))
    gen.add_argument("--bundle", required=True)
    gen.add_argument("--instruction", required=True)
    gen.add_argument("--video", default=None, help="FDVT video track")
    gen.add_argument("--transcript", default=None)
    gen.add_argument("--prompt", default=None, help="reference speaker WAV")
    gen.add_argument("--out", required=True, help="output WAV")
    gen.add_argument("--audit", default=None, help="audit JSON (default: next to the WAV)")
    gen.set_defaults(func=cmd_generate)

    e = seeded(sub.add_parser("eval", help="score a bundle on a corpus split"))
    e.add_argument("--manifest", required=True)
    e.add_argument("--bundle", default=None, help="omit to score references against themselves")
    e.add_argument("--out", required=True, help="JSON-lines report")
    e.add_argument("--upto-stage", type=int, default=None, choices=(1, 2, 3, 4))
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--duration", default="video", choices=("video", "text"),
                   help="output length for zero-shot speech bundles (stages 2-3)")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="describe a bundle, checkpoint or report")
    i.add_argument("path")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if hasattr(args, "seed"):
            args.seed_given = args.seed is not None
            args.seed = 42 if args.seed is None else args.seed
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (pl.PipelineError, nk.CheckpointError, nk.NonFiniteError, FormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
