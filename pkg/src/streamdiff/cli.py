"""Command-line entry point: ``python -m streamdiff <subcommand>``.

Exit codes: 0 success / all checks pass, 1 acceptance failure or runtime
failure, 2 configuration or input error.
"""
from __future__ import annotations

import argparse
import logging
import queue
import sys
import threading
from pathlib import Path

import numpy as np

from . import pipeline as pl
from . import session as sess
from .codec import write_video_csv
from .config import ConfigError, RunConfig, load_config
from .data import write_dataset_csv
from .kvcache import write_trace_csv
from .rng import make_rng

log = logging.getLogger("streamdiff")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _config(args) -> RunConfig:
    return load_config(args.config) if args.config else RunConfig()


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(path, cfg) -> "pl.Backbone":
    try:
        return pl.load_model(path, cfg)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load checkpoint {path}: {exc}") from exc


def cmd_dataset(args) -> int:
    cfg = _config(args)
    out = _out(args)
    world = pl.build_world(cfg)
    ds = pl.build_dataset(cfg, world)
    eval_set = set(ds.eval_index.tolist())
    pl.write_rows(out / "dataset_index.csv", [
        {"sample": i, "garment_id": s.garment_id, "worn_id": s.worn_id, "split": "eval" if i in eval_set else "train"}
        for i, s in enumerate(ds.samples)
    ])
    if args.pixels:
        write_dataset_csv(out / "dataset_pixels.csv", ds)
    print(f"{len(ds)} samples ({len(ds.eval_index)} eval) -> {out}")
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    cfg = _config(args)
    out = _out(args)
    world = pl.build_world(cfg)
    rows: list = []
    teacher = pl.train_teacher(cfg, pl.build_dataset(cfg, world), rows)
    pl.write_rows(out / "teacher_log.csv", rows)
    pl.save_model(out / "teacher.ckpt", teacher)
    print(f"teacher loss {rows[0]['loss']:.4f} -> {rows[-1]['loss']:.4f}")
    return EXIT_OK


def cmd_distill_tf(args) -> int:
    cfg = _config(args)
    out = _out(args)
    teacher = _load(args.teacher, cfg)
    world = pl.build_world(cfg)
    rows: list = []
    student = pl.distill_teacher_forcing(cfg, teacher, pl.build_dataset(cfg, world), rows)
    pl.write_rows(out / "tf_log.csv", rows)
    pl.save_model(out / "student_tf.ckpt", student)
    print(f"teacher-forcing loss {rows[0]['loss']:.4f} -> {rows[-1]['loss']:.4f}")
    return EXIT_OK


def cmd_distill_dmd(args) -> int:
    cfg = _config(args)
    out = _out(args)
    teacher, student = _load(args.teacher, cfg), _load(args.student, cfg)
    world = pl.build_world(cfg)
    rows: list = []
    state = pl.distill_reweighted_dmd(cfg, teacher, student, pl.build_dataset(cfg, world), world, rows)
    pl.write_rows(out / "dmd_log.csv", rows)
    pl.save_model(out / "student.ckpt", state.generator)
    pl.save_model(out / "fake.ckpt", state.fake)
    print(f"{state.gen_steps} generator / {state.fake_steps} fake-score steps, {state.skipped} skipped")
    return EXIT_OK


def _garment_latent(cfg: RunConfig, world, gid: int) -> np.ndarray:
    if not 0 <= gid < cfg.codebook_size:
        raise ConfigError(f"garment id {gid} outside codebook of size {cfg.codebook_size}")
    img = world.garment_image(gid, make_rng(cfg.seed, 70, gid))
    return world.codec.encode_image(img).frames[0]


def _command(cfg, world, parsed) -> sess.SwitchCommand:
    chunk, gid, withdraw, disentangle = parsed
    return sess.SwitchCommand(chunk, _garment_latent(cfg, world, gid), withdraw, disentangle)


def _stdin_reader(q: queue.Queue, stream) -> None:
    for line in stream:
        q.put(line)
    q.put(None)


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = _out(args)
    model = _load(args.model, cfg)
    world = pl.build_world(cfg)
    ds = pl.build_dataset(cfg, world)
    if not 0 <= args.sample < len(ds):
        raise ConfigError(f"sample {args.sample} outside dataset of {len(ds)}")
    smp = ds.samples[args.sample]
    ref = smp.reference_latent
    gar = smp.garment_latent if args.garment is None else _garment_latent(cfg, world, args.garment)
    s = sess.start(model, world.codec, ref, gar, seed=args.seed, max_cache=cfg.cache_size, schedule=cfg.step_schedule(), record_attention=True)
    if args.script:
        try:
            lines = Path(args.script).read_text().splitlines()
        except OSError as exc:
            raise ConfigError(f"cannot read event script: {exc}") from exc
        for n, line in enumerate(lines, 1):
            try:
                parsed = sess.parse_switch_line(line)
                if parsed is not None:
                    sess.enqueue_switch(s, _command(cfg, world, parsed))
            except ValueError as exc:
                raise ConfigError(f"{args.script}:{n}: {exc}") from exc
    inbox = None
    if args.interactive:
        inbox = queue.Queue()
        threading.Thread(target=_stdin_reader, args=(inbox, sys.stdin), daemon=True).start()
    status = EXIT_OK
    try:
        for _ in range(args.chunks):
            while inbox is not None and not inbox.empty():
                line = inbox.get_nowait()
                if line is None:
                    inbox = None
                    break
                try:
                    parsed = sess.parse_switch_line(line, default_chunk=s.chunk_index)
                    if parsed is not None:
                        sess.enqueue_switch(s, _command(cfg, world, parsed))
                        print(f"switch queued for chunk {parsed[0]} -> garment {parsed[1]}", file=sys.stderr)
                except (ValueError, ConfigError) as exc:
                    print(f"ignored command {line.strip()!r}: {exc}", file=sys.stderr)
            sess.step(s)
    except sess.SessionFailed as exc:
        print(f"session failed: {exc}; flushing partial output", file=sys.stderr)
        status = EXIT_FAIL
    if s.outputs:
        stream = s.stream()[0]
        write_video_csv(out / "stream.csv", world.codec.decode(stream))
    write_trace_csv(out / "cache_trace.csv", s.trace)
    print(f"{s.chunk_index} chunks -> {out}")
    return status


def cmd_analyze_attn(args) -> int:
    cfg = _config(args)
    out = _out(args)
    model = _load(args.model, cfg)
    world = pl.build_world(cfg)
    table, extra = pl.evaluate_switch(cfg, model, world, pl.build_dataset(cfg, world))
    pl.write_switch_reports(out, table, extra)
    m = extra["attention"]
    print(f"historical mass {m['historical_mass']:.4f}, conditional mass {m['conditional_mass']:.4f}")
    for row in table:
        print(
            f"{row['variant']:>15}: post-switch error old {row['post_old']:.3f} new {row['post_new']:.3f}, "
            f"continuity ratio {row['continuity_ratio']:.2f}"
        )
    return EXIT_OK


def cmd_accept(args) -> int:
    from .acceptance import STATIC_CHECKS, write_report

    cfg = _config(args)
    out = _out(args)
    if args.static_only:
        results = [c() for c in STATIC_CHECKS]
        write_report(out / "acceptance.csv", results)
    else:
        res = pl.run_pipeline(cfg, out, acceptance=True)
        results = res.acceptance
        if "switch_table" in res.logs:
            pl.write_switch_reports(out, res.logs["switch_table"], res.logs["switch_extra"])
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="streamdiff", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="key=value config file (defaults to the smoke config)")
        sp.add_argument("--out", default=".", help="output directory")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("dataset", cmd_dataset, "generate the synthetic dataset")
    sp.add_argument("--pixels", action="store_true", help="also write every pixel frame")
    add("train-teacher", cmd_train_teacher, "flow-matching pre-training of the bidirectional teacher")
    sp = add("distill-tf", cmd_distill_tf, "teacher-forcing initialisation of the causal student")
    sp.add_argument("--teacher", required=True)
    sp = add("distill-dmd", cmd_distill_dmd, "reweighted distribution matching with self-forcing rollouts")
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--student", required=True)
    sp = add("generate", cmd_generate, "stream chunks with optional garment switches")
    sp.add_argument("--model", required=True)
    sp.add_argument("--chunks", type=int, default=12)
    sp.add_argument("--sample", type=int, default=0, help="dataset sample supplying the reference")
    sp.add_argument("--garment", type=int, default=None, help="initial garment code (default: the sample's)")
    sp.add_argument("--seed", type=int, default=0)
    mode = sp.add_mutually_exclusive_group()
    mode.add_argument("--script", help="event script: 'chunk_index garment_id [--no-withdraw] [--no-disentangle]' per line")
    mode.add_argument("--interactive", action="store_true", help="read switch commands from stdin")
    sp = add("analyze-attn", cmd_analyze_attn, "switch ablations and attention-mass report")
    sp.add_argument("--model", required=True)
    sp = add("accept", cmd_accept, "train the smoke pipeline and run every acceptance check")
    sp.add_argument("--static-only", action="store_true", help="skip the checks that need a trained model")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pl.PipelineError as exc:
        print(f"pipeline halted: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
