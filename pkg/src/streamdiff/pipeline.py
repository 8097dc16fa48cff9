"""End-to-end training: teacher pre-training, teacher forcing, reweighted DMD, evaluation.

Every stage is a plain function so the CLI can run them one at a time;
``run_pipeline`` chains them and writes CSV logs plus checkpoints into an
output directory.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from . import session as sess
from .backbone import Backbone, ConditionSet
from .config import RunConfig, dump_config
from .data import Dataset, World, generate_dataset
from .distill import DmdState, RewardAdapter, distill_dmd, teacher_forcing_step
from .flow import NoisePlan, cfm_loss
from .kvcache import write_trace_csv
from .masking import build_tf_mask
from .metrics import StreamingSwitchMetrics, mean_attention_mass, switch_metrics
from .optim import AdamW
from .rng import make_rng

log = logging.getLogger(__name__)

VARIANTS = {
    "none": None,
    "refresh": dict(withdraw=False, disentangle=False),
    "no_disentangle": dict(withdraw=True, disentangle=False),
    "full": dict(withdraw=True, disentangle=True),
}


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def write_rows(path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def save_model(path, model: Backbone) -> None:
    checkpoint.save(path, model.state_dict())


def load_model(path, cfg: RunConfig) -> Backbone:
    m = Backbone(cfg.backbone())
    m.load_state_dict(checkpoint.load(path))
    return m


def build_world(cfg: RunConfig) -> World:
    return World(cfg.data())


def build_dataset(cfg: RunConfig, world: World) -> Dataset:
    return generate_dataset(world, cfg.samples, cfg.frames, seed=cfg.seed)


def _batch(arrays, rng, size, cfg: RunConfig):
    idx = rng.integers(len(arrays["latents"]), size=size)
    off = cfg.chunk * int(rng.integers(0, cfg.max_frame_offset // cfg.chunk + 1))
    cond = ConditionSet(arrays["reference"][idx], arrays["garment"][idx])
    return arrays["latents"][idx], cond, np.arange(off, off + cfg.frames)


def train_teacher(cfg: RunConfig, dataset: Dataset, log_rows: list | None = None) -> Backbone:
    """Bidirectional flow-matching pre-training on ground-truth clips.

    Frame indices are shifted by random multiples of the chunk size so the
    model sees the positions it will meet during long rollouts.
    """
    model = Backbone(cfg.backbone(), seed=cfg.seed)
    opt = AdamW(model.params, lr=cfg.teacher_lr)
    rng = make_rng(cfg.seed, 10)
    arrays = dataset.arrays(dataset.train_index)
    for i in range(cfg.teacher_steps):
        z0, cond, frames = _batch(arrays, rng, cfg.batch, cfg)
        plan = NoisePlan.draw(rng, z0.shape, per="sample")
        try:
            loss, grads = cfm_loss(model, z0, cond, plan, frames)
        except FloatingPointError as exc:
            raise PipelineError("teacher", f"step {i}: {exc}") from exc
        opt.step(grads)
        if log_rows is not None:
            log_rows.append({"step": i, "loss": loss})
    return model


def distill_teacher_forcing(cfg: RunConfig, teacher: Backbone, dataset: Dataset, log_rows: list | None = None) -> Backbone:
    """Initialise the causal student from the teacher with the teacher-forcing mask.

    Noise levels are drawn per chunk, mostly from the few-step schedule so
    the student is sharp exactly where it will be queried.
    """
    student = teacher.copy()
    opt = AdamW(student.params, lr=cfg.tf_lr)
    rng = make_rng(cfg.seed, 20)
    arrays = dataset.arrays(dataset.train_index)
    mask = build_tf_mask(cfg.frames, cfg.tokens, cfg.chunk, duplicate_conditions=False)
    ts = cfg.step_schedule().timesteps
    n_chunks = cfg.frames // cfg.chunk
    for i in range(cfg.tf_steps):
        z0, cond, frames = _batch(arrays, rng, cfg.batch, cfg)
        if rng.uniform() < cfg.tf_schedule_fraction:
            tc = rng.choice(ts, size=(cfg.batch, n_chunks))
        else:
            tc = rng.uniform(size=(cfg.batch, n_chunks))
        plan = NoisePlan(np.repeat(tc, cfg.chunk, axis=1), rng.standard_normal(z0.shape))
        try:
            loss, grads = teacher_forcing_step(student, z0, cond, plan, mask, frames)
        except FloatingPointError as exc:
            raise PipelineError("teacher-forcing", f"step {i}: {exc}") from exc
        opt.step(grads)
        if log_rows is not None:
            log_rows.append({"step": i, "loss": loss})
    return student


def distill_reweighted_dmd(cfg: RunConfig, teacher: Backbone, student: Backbone, dataset: Dataset, world: World, log_rows: list | None = None) -> DmdState:
    """Self-forcing DMD with per-frame reward weights; the teacher is the frozen real score."""
    state = DmdState(
        generator=student.copy(),
        fake=teacher.copy(),
        real=teacher,
        schedule=cfg.step_schedule(),
        tau=cfg.tau,
        ratio=cfg.fake_ratio,
        max_cache=cfg.cache_size,
        gen_lr=cfg.gen_lr,
        fake_lr=cfg.fake_lr,
    )
    rng = make_rng(cfg.seed, 30)
    arrays = dataset.arrays(dataset.train_index)

    def batches():
        while True:
            _, cond, frames = _batch(arrays, rng, cfg.dmd_batch, cfg)
            yield cond, int(frames[0])

    rewards = RewardAdapter(on_pixels=cfg.reward_on_pixels, codec=world.codec)
    try:
        distill_dmd(state, batches(), cfg.frames, cfg.dmd_steps, rng, rewards=rewards, log_rows=log_rows)
    except FloatingPointError as exc:
        raise PipelineError("dmd", str(exc)) from exc
    if state.skipped:
        log.warning("dmd: %d generator steps skipped on non-finite scores", state.skipped)
    return state


# -- evaluation ---------------------------------------------------------------


@dataclass
class EvalSet:
    reference: np.ndarray
    garment: np.ndarray
    old_codes: np.ndarray
    new_codes: np.ndarray
    new_garment: np.ndarray


def eval_set(cfg: RunConfig, world: World, dataset: Dataset) -> EvalSet:
    """Held-out conditions plus a switch target with a different code for each item."""
    a = dataset.arrays(dataset.eval_index)
    K = cfg.codebook_size
    new = (a["garment_id"] + 1 + np.arange(len(a["garment_id"])) % (K - 1)) % K
    imgs = [world.garment_image(int(g), make_rng(cfg.seed, 40, i)) for i, g in enumerate(new)]
    new_lat = np.stack([world.codec.encode_image(im).frames[0] for im in imgs])
    return EvalSet(a["reference"], a["garment"], a["garment_id"], new, new_lat)


def switch_rollout(cfg: RunConfig, model: Backbone, world: World, ev: EvalSet, variant: str, seed: int | None = None):
    """Stream ``eval_chunks`` chunks, switching garments at ``switch_chunk`` unless ``variant == 'none'``."""
    s = sess.start(
        model, world.codec, ev.reference, ev.garment, seed=cfg.seed + 50 if seed is None else seed,
        max_cache=cfg.cache_size, schedule=cfg.step_schedule(), record_attention=True,
    )
    flags = VARIANTS[variant]
    if flags is not None:
        sess.enqueue_switch(s, sess.SwitchCommand(cfg.switch_chunk, ev.new_garment, **flags))
    sess.run(s, cfg.eval_chunks)
    return s


def evaluate_switch(cfg: RunConfig, model: Backbone, world: World, dataset: Dataset) -> tuple[list[dict], dict]:
    """Ablation table over the switch variants plus the no-switch attention masses.

    Metrics are accumulated chunk by chunk while streaming and cross-checked
    against the whole-array computation.
    """
    ev = eval_set(cfg, world, dataset)
    sf = cfg.switch_chunk * cfg.chunk
    table, sessions = [], {}
    for variant in VARIANTS:
        s = switch_rollout(cfg, model, world, ev, variant)
        sessions[variant] = s
        acc = StreamingSwitchMetrics(world, sf, ev.old_codes, ev.new_codes)
        for chunk in s.outputs:
            acc.update(chunk)
        m = switch_metrics(s.stream(), sf, ev.old_codes, ev.new_codes, world)
        streamed = acc.result().as_dict()
        gap = max(abs(streamed[k] - v) for k, v in m.as_dict().items())
        if gap > 1e-12:
            raise PipelineError("evaluate", f"streaming and whole-array metrics disagree by {gap:.3e}")
        table.append({"variant": variant, **m.as_dict()})
    mass = mean_attention_mass(sessions["none"].trace, chunks=range(1, cfg.eval_chunks))
    return table, {"sessions": sessions, "attention": mass, "eval": ev}


def timing_rollout(cfg: RunConfig, model: Backbone, world: World, dataset: Dataset, evict: bool = True) -> list[float]:
    """Per-chunk wall time of a ``timing_chunks``-chunk rollout over ``timing_batch`` streams."""
    a = dataset.arrays(dataset.eval_index[: cfg.timing_batch])
    s = sess.start(
        model, world.codec, a["reference"], a["garment"], seed=cfg.seed + 60,
        max_cache=cfg.cache_size if evict else None, schedule=cfg.step_schedule(),
    )
    sess.run(s, cfg.timing_chunks)
    return [r["step_seconds"] for r in s.trace]


@dataclass
class PipelineResult:
    cfg: RunConfig
    world: World
    dataset: Dataset
    teacher: Backbone
    student_tf: Backbone
    student: Backbone
    logs: dict = field(default_factory=dict)
    acceptance: list = field(default_factory=list)


def run_pipeline(cfg: RunConfig, out_dir=None, acceptance: bool = True) -> PipelineResult:
    """Teacher -> teacher forcing -> reweighted DMD, then (optionally) the acceptance suite."""
    t0 = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(dump_config(cfg))
    world = build_world(cfg)
    dataset = build_dataset(cfg, world)
    logs = {"teacher": [], "teacher_forcing": [], "dmd": []}
    log.info("teacher pre-training: %d steps", cfg.teacher_steps)
    teacher = train_teacher(cfg, dataset, logs["teacher"])
    log.info("teacher forcing: %d steps", cfg.tf_steps)
    student_tf = distill_teacher_forcing(cfg, teacher, dataset, logs["teacher_forcing"])
    log.info("distribution matching: %d generator steps", cfg.dmd_steps)
    state = distill_reweighted_dmd(cfg, teacher, student_tf, dataset, world, logs["dmd"])
    result = PipelineResult(cfg, world, dataset, teacher, student_tf, state.generator, logs)
    logs["seconds"] = time.perf_counter() - t0
    if out is not None:
        write_rows(out / "dataset_index.csv", [
            {"sample": i, "garment_id": s.garment_id, "worn_id": s.worn_id, "split": "eval" if i in set(dataset.eval_index) else "train"}
            for i, s in enumerate(dataset.samples)
        ])
        write_rows(out / "teacher_log.csv", logs["teacher"])
        write_rows(out / "tf_log.csv", logs["teacher_forcing"])
        write_rows(out / "dmd_log.csv", logs["dmd"])
        save_model(out / "teacher.ckpt", teacher)
        save_model(out / "student_tf.ckpt", student_tf)
        save_model(out / "student.ckpt", state.generator)
        save_model(out / "fake.ckpt", state.fake)
    if acceptance:
        from .acceptance import run_all, write_report

        result.acceptance = run_all(result)
        if out is not None:
            write_report(out / "acceptance.csv", result.acceptance)
    return result


def write_switch_reports(out_dir, table: list[dict], extra: dict) -> None:
    out = Path(out_dir)
    write_rows(out / "switch_ablation.csv", table)
    write_trace_csv(out / "cache_trace.csv", extra["sessions"]["full"].trace)
    write_rows(out / "attention_mass.csv", [extra["attention"]])
