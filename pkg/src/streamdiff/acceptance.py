"""The ten release checks, each returning a ``CriterionResult``.

Checks 1-7 are self-contained; 8-10 read a trained ``PipelineResult``.
Every check compares the library against an oracle written independently
here (closed-form sets, loop-based masks, finite differences, Monte-Carlo
moments) rather than against the code path it is checking.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .backbone import Backbone, BackboneConfig, ConditionSet, UnifiedSequence, condition_block, context_block, video_block
from .distill import GaussianOracle, gaussian_dmd_run, reweight, teacher_forcing_step
from .flow import NoisePlan, StepSchedule, cfm_loss, sample_multistep
from .kvcache import KvCache
from .masking import CLEAN, CONTEXT, GARMENT, NOISY, REFERENCE, VIDEO, build_inference_mask, build_tf_mask
from .optim import AdamW
from .rng import make_rng
from .session import commit_chunk, new_cache


@dataclass(frozen=True)
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        return f"criterion {self.number:2d} {'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(number: int, name: str, fn) -> CriterionResult:
    t0 = time.perf_counter()
    passed, detail, limit = fn()
    dt = time.perf_counter() - t0
    if limit is not None and dt > limit:
        passed = False
        detail += f"; runtime {dt:.1f}s over the {limit:.0f}s budget"
    return CriterionResult(number, name, bool(passed), detail, dt)


# -- 1: cache policy ------------------------------------------------------------


def _closed_form(k: int, M: int) -> set[int]:
    return {0} | set(range(max(1, k - M + 4), k + 1))


def check_cache_policy(sizes=(7, 11, 23), k_max: int = 200) -> CriterionResult:
    def run():
        kv = ((np.zeros((1, 1, 1, 1)), np.zeros((1, 1, 1, 1))),)
        bad = []
        for M in sizes:
            cache = KvCache(1, 1, 3, M).with_conditions([(np.zeros((1, 1, 3, 1)),) * 2], np.zeros((1, 1, 1)), np.zeros((1, 1, 1)))
            cache = cache.append_and_evict([(0, kv)], 0)
            for k in range(1, k_max + 1):
                cache = cache.append_and_evict([(k, kv)], k)
                if set(cache.retained_frames()) != _closed_form(k, M):
                    bad.append((M, k))
        return not bad, f"{len(sizes) * k_max} (M, k) pairs, {len(bad)} mismatches", 1.0

    return _timed(1, "cache policy exactness", run)


# -- 2: incremental vs full attention ---------------------------------------------


def _full_noisy_prediction(model: Backbone, cond: ConditionSet, history: np.ndarray, z: np.ndarray, t: float, k: int):
    """Recompute chunk ``k``'s prediction from scratch over the whole masked sequence."""
    cfg = model.cfg
    B = z.shape[0]
    n_hist = history.shape[1]
    parts = [context_block(B, cfg.channels), condition_block(cond)]
    if n_hist:
        parts.append(video_block(history, 0.0, np.arange(n_hist), cfg.chunk, CLEAN))
    parts.append(video_block(z, t, np.arange(k * cfg.chunk, (k + 1) * cfg.chunk), cfg.chunk, NOISY))
    seq = UnifiedSequence.concat(*parts)
    lay = seq.layout
    n = len(lay)
    allowed = np.zeros((n, n), dtype=bool)
    # explicit per-pair rule: conditions are causal among themselves, clean
    # frames see conditions and clean frames of chunks up to their own, the
    # noisy chunk sees every condition, all clean history and itself
    for i in range(n):
        for j in range(n):
            ri, rj = lay.role[i], lay.role[j]
            if rj == CONTEXT:
                allowed[i, j] = True
            elif ri == CONTEXT:
                allowed[i, j] = False
            elif ri == REFERENCE:
                allowed[i, j] = rj == REFERENCE
            elif ri == GARMENT:
                allowed[i, j] = rj in (REFERENCE, GARMENT)
            elif lay.half[i] == CLEAN:
                allowed[i, j] = rj != VIDEO or (lay.half[j] == CLEAN and lay.chunk[j] <= lay.chunk[i])
            else:
                allowed[i, j] = rj != VIDEO or lay.half[j] == CLEAN or lay.chunk[j] == lay.chunk[i]
    return model.forward(seq, allowed).pred.data[:, n_hist * cfg.tokens :]


def check_incremental_equivalence(rollouts: int = 50, chunks: int = 10, seed: int = 0) -> CriterionResult:
    def run():
        worst = 0.0
        sched = StepSchedule()
        for r in range(rollouts):
            rng = make_rng(seed, 2, r)
            cfg = BackboneConfig(layers=2, heads=2, head_dim=4, d_model=8, tokens=2, channels=4)
            model = Backbone(cfg, seed=int(rng.integers(1 << 30)))
            cond = ConditionSet(rng.standard_normal((1, 2, 4)), rng.standard_normal((1, 2, 4)))
            cache = new_cache(model, cond, None)
            history = np.zeros((1, 0, 2, 4))
            for k in range(chunks):
                frames = np.arange(k * 3, k * 3 + 3)
                z = rng.standard_normal((1, 3, 2, 4))
                for i, t in enumerate(sched.timesteps):
                    with ad.no_grad():
                        inc = model.forward_incremental(video_block(z, t, frames, 3, NOISY), cache).pred.data
                        full = _full_noisy_prediction(model, cond, history, z, t, k)
                    worst = max(worst, float(np.abs(inc - full).max()))
                    x0 = z - t * inc.reshape(z.shape)
                    if i + 1 < len(sched.timesteps):
                        tn = sched.timesteps[i + 1]
                        z = (1 - tn) * x0 + tn * rng.standard_normal(z.shape)
                cache = commit_chunk(model, cache, x0, frames)
                history = np.concatenate([history, x0], axis=1)
        return worst <= 1e-10, f"max |incremental - full| = {worst:.2e} over {rollouts} rollouts x {chunks} chunks", 30.0

    return _timed(2, "incremental/full attention equivalence", run)


# -- 3: gradient integrity ------------------------------------------------------------


def _fd_gap(value, grads: dict, params: dict, coords: int, rng, h: float = 1e-5) -> float:
    """Max ``|analytic - central difference| / max(1, |fd|)`` over sampled coordinates."""
    worst = 0.0
    for name, p in params.items():
        base = p.data
        for i in rng.choice(p.size, size=min(coords, p.size), replace=False):
            ix = np.unravel_index(i, p.shape)
            vals = []
            for s in (h, -h):
                pert = base.copy()
                pert[ix] += s
                p.data = pert
                vals.append(value())
            p.data = base
            fd = (vals[0] - vals[1]) / (2 * h)
            worst = max(worst, abs(grads[name][ix] - fd) / max(1.0, abs(fd)))
    return worst


def check_gradients(configs: int = 3, coords: int = 3, seed: int = 0) -> CriterionResult:
    def run():
        worst = 0.0
        for c in range(configs):
            rng = make_rng(seed, 3, c)
            P, C = int(rng.integers(1, 3)), int(rng.integers(2, 5))
            heads, hd = int(rng.integers(1, 3)), int(rng.integers(2, 4))
            cfg = BackboneConfig(layers=int(rng.integers(1, 3)), heads=heads, head_dim=hd, d_model=heads * hd, tokens=P, channels=C, time_dim=4, mlp_ratio=2)
            model = Backbone(cfg, seed=c)
            f = 3 * int(rng.integers(1, 3))
            z0 = rng.standard_normal((2, f, P, C))
            cond = ConditionSet(rng.standard_normal((2, P, C)), rng.standard_normal((2, P, C)))
            plan = NoisePlan.draw(rng, z0.shape, per="chunk", chunk=3)
            mask = build_tf_mask(f, P, 3, duplicate_conditions=bool(c % 2))
            _, g_cfm = cfm_loss(model, z0, cond, plan)
            worst = max(worst, _fd_gap(lambda: cfm_loss(model, z0, cond, plan, with_grad=False)[0], g_cfm, model.params, coords, rng))
            _, g_tf = teacher_forcing_step(model, z0, cond, plan, mask)
            worst = max(worst, _fd_gap(lambda: teacher_forcing_step(model, z0, cond, plan, mask, with_grad=False)[0], g_tf, model.params, coords, rng))
        return worst <= 1e-4, f"max relative error {worst:.2e} over {configs} configurations", 120.0

    return _timed(3, "gradient integrity", run)


# -- 4: Gaussian DMD ------------------------------------------------------------------


def check_gaussian_dmd(steps: int = 5000, lr: float = 0.02) -> CriterionResult:
    def run():
        traj = gaussian_dmd_run(GaussianOracle(2.0, 1.0, 1.0, 0.0), tau=0.2, steps=steps, lr=lr, seed=4)
        a, b = traj[-1]
        conv = abs(b - 2.0) <= 0.02 and abs(abs(a) - 1.0) <= 0.02
        fixed = gaussian_dmd_run(GaussianOracle(2.0, 1.0, 1.0, 2.0), tau=0.2, steps=100, lr=lr, seed=5)
        drift = float(np.abs(fixed - fixed[0]).max())
        van = gaussian_dmd_run(GaussianOracle(2.0, 1.0, 1.0, 0.0), tau=0.2, steps=500, lr=lr, seed=6)
        eq = gaussian_dmd_run(GaussianOracle(2.0, 1.0, 1.0, 0.0), tau=0.2, steps=500, lr=lr, seed=6, rewards=lambda x: np.full(x.shape, 0.7))
        gap = float(np.abs(van - eq).max())
        ok = conv and drift < 1e-6 and gap <= 1e-12
        return ok, f"(a, b) = ({a:.4f}, {b:.4f}); fixed-point drift {drift:.1e}; equal-reward gap {gap:.1e}", 60.0

    return _timed(4, "Gaussian DMD oracle", run)


# -- 5: reweighting law -----------------------------------------------------------------


def check_reweighting(seed: int = 0) -> CriterionResult:
    def run():
        rng = make_rng(seed, 5)
        failures = []
        for _ in range(200):
            f = int(rng.integers(1, 20))
            r = rng.normal(scale=3.0, size=f)
            tau = float(np.exp(rng.uniform(-2, 2)))
            w = reweight(r, tau)
            if abs(w.sum() - 1.0) > 1e-12:
                failures.append("sum")
            if np.abs(reweight(r + rng.normal(scale=10), tau) - w).max() > 1e-12:
                failures.append("shift")
            r_d = r + np.arange(f) * 1e-3  # distinct rewards
            w_d = reweight(r_d, tau)
            order = np.argsort(r_d)
            if f > 1 and not np.all(np.diff(w_d[order]) < 0):
                failures.append("monotone")
            # the tau -> inf limit is checked on rewards of unit spread
            if np.abs(reweight(rng.uniform(-1, 1, size=f), 1e6) - 1.0 / f).max() > 1e-6:
                failures.append("limit")
        spot = reweight([0.0, 1.0, 2.0], 1.0)
        e = np.exp(-np.arange(3.0))
        if np.abs(spot - np.array([0.66524, 0.24473, 0.09003])).max() > 1e-5 or np.abs(spot - e / e.sum()).max() > 1e-12:
            failures.append("spot")
        detail = f"spot {np.round(spot, 5).tolist()}; " + ("all properties hold" if not failures else f"failures: {sorted(set(failures))}")
        return not failures, detail, None

    return _timed(5, "reweighting law", run)


# -- 6: teacher-forcing mask -----------------------------------------------------------------


def _tf_tokens(f: int, chunk: int, P: int, duplicate: bool) -> list[tuple]:
    """(kind, half, frame, chunk) per token, built by hand in layout order."""
    toks = [("ctx", CLEAN, -1, -1)]
    toks += [("ref", CLEAN, -1, -1)] * P + [("gar", CLEAN, -1, -1)] * P
    toks += [("vid", CLEAN, fr, fr // chunk) for fr in range(f) for _ in range(P)]
    if duplicate:
        toks += [("ref", NOISY, -1, -1)] * P + [("gar", NOISY, -1, -1)] * P
    toks += [("vid", NOISY, fr, fr // chunk) for fr in range(f) for _ in range(P)]
    return toks


def _mask_violations(f: int, chunk: int, P: int, duplicate: bool) -> list[str]:
    m = build_tf_mask(f, P, chunk, duplicate_conditions=duplicate).allowed
    toks = _tf_tokens(f, chunk, P, duplicate)
    if m.shape != (len(toks), len(toks)):
        return ["shape"]
    errs = set()
    for i, (ki, hi, fi, ci) in enumerate(toks):
        for j, (kj, hj, fj, cj) in enumerate(toks):
            a = m[i, j]
            if not a:
                continue
            # anti-leak: noisy chunk c never sees clean frames of chunk >= c, nothing sees future chunks
            if ki == "vid" and hi == NOISY and kj == "vid" and hj == CLEAN and cj >= ci:
                errs.add("noisy sees clean of own/future chunk")
            if ki == "vid" and kj == "vid" and cj > ci:
                errs.add("future chunk visible")
            if ki != "vid" and kj == "vid":
                errs.add("condition sees video")
            # isolation: clean rows never see noisy tokens; noisy rows see noisy video of own chunk only
            if hi == CLEAN and hj == NOISY:
                errs.add("clean sees noisy")
            if ki == "vid" and hi == NOISY and kj == "vid" and hj == NOISY and cj != ci:
                errs.add("noisy sees other noisy chunk")
    # inference restriction: noisy chunk k over [ctx, conditions, clean history, own noisy] must match
    # the inference row policy, and everything outside those columns must be blocked
    idx = np.arange(len(toks))
    kinds = np.array([t[0] for t in toks])
    halves = np.array([t[1] for t in toks])
    chunks = np.array([t[3] for t in toks])
    for k in range(f // chunk):
        rows = idx[(kinds == "vid") & (halves == NOISY) & (chunks == k)]
        cond_cols = idx[(kinds == "ctx") | ((kinds != "vid") & (halves == CLEAN))]
        cols = np.concatenate([cond_cols, idx[(kinds == "vid") & (halves == CLEAN) & (chunks < k)], rows])
        want = build_inference_mask(k, chunk, P).allowed
        if m[np.ix_(rows, cols)].shape != want.shape or not np.array_equal(m[np.ix_(rows, cols)], want):
            errs.add("inference restriction mismatch")
        rest = np.setdiff1d(idx, cols)
        rest = rest[~((kinds[rest] != "vid") & (halves[rest] == NOISY))]  # duplicated conditions are allowed
        if m[np.ix_(rows, rest)].any():
            errs.add("extra columns visible at inference")
        if not want.all():
            errs.add("inference row policy not dense")
    return sorted(errs)


def check_tf_mask(seed: int = 0, random_cases: int = 1000) -> CriterionResult:
    def run():
        bad = []
        n = 0
        for f in range(1, 10):
            for chunk in range(1, f + 1):
                if f % chunk:
                    continue
                for P in (1, 2):
                    for dup in (True, False):
                        n += 1
                        v = _mask_violations(f, chunk, P, dup)
                        if v:
                            bad.append((f, chunk, P, dup, v))
        rng = make_rng(seed, 6)
        for _ in range(random_cases):
            chunk = int(rng.integers(1, 5))
            f = chunk * int(rng.integers(1, 5))
            P = int(rng.integers(1, 4))
            n += 1
            v = _mask_violations(f, chunk, P, bool(rng.integers(2)))
            if v:
                bad.append((f, chunk, P, v))
        return not bad, f"{n} layouts checked, {len(bad)} with violations" + (f": {bad[:3]}" if bad else ""), 10.0

    return _timed(6, "teacher-forcing mask soundness", run)


# -- 7: flow matching on a 2-Gaussian mixture ------------------------------------------------


def two_gaussian_data(rng, n: int) -> np.ndarray:
    centers = np.array([[1.0, 3.0], [3.0, -1.0]])
    comp = rng.integers(2, size=n)
    return centers[comp] + 0.5 * rng.standard_normal((n, 2))


def two_gaussian_moments() -> tuple[np.ndarray, np.ndarray]:
    centers = np.array([[1.0, 3.0], [3.0, -1.0]])
    mean = centers.mean(0)
    d = centers - mean
    return mean, 0.25 * np.eye(2) + d.T @ d / 2


def check_flow_matching(seed: int = 0, steps: int = 3000, batch: int = 256, samples: int = 10_000) -> CriterionResult:
    def run():
        rng = make_rng(seed, 7)
        cfg = BackboneConfig(layers=2, heads=2, head_dim=8, d_model=16, tokens=1, channels=2, chunk=1)
        model = Backbone(cfg, seed=seed)
        opt = AdamW(model.params, lr=3e-3)
        cond = ConditionSet(np.zeros((batch, 1, 2)), np.zeros((batch, 1, 2)))
        for i in range(steps):
            opt.lr = 3e-3 * min(1.0, 2.0 * (1.0 - i / steps))
            z0 = two_gaussian_data(rng, batch).reshape(batch, 1, 1, 2)
            loss, grads = cfm_loss(model, z0, cond, NoisePlan.draw(rng, z0.shape))
            opt.step(grads)
        with ad.no_grad():
            x = sample_multistep(model, ConditionSet(np.zeros((samples, 1, 2)), np.zeros((samples, 1, 2))), 1, 50, rng)
        x = x.reshape(samples, 2)
        mean, cov = two_gaussian_moments()
        em = np.linalg.norm(x.mean(0) - mean) / np.linalg.norm(mean)
        ec = np.linalg.norm(np.cov(x.T) - cov) / np.linalg.norm(cov)
        return em <= 0.1 and ec <= 0.1, f"relative mean error {em:.3f}, covariance error {ec:.3f}", 300.0

    return _timed(7, "flow-matching sanity", run)


# -- 8-10: trained model ----------------------------------------------------------------------


def check_garment_switch(result) -> CriterionResult:
    from .pipeline import evaluate_switch

    def run():
        table, extra = evaluate_switch(result.cfg, result.student, result.world, result.dataset)
        result.logs["switch_table"] = table
        result.logs["switch_extra"] = extra
        rows = {r["variant"]: r for r in table}
        thr = result.cfg.continuity_threshold
        a = rows["refresh"]["post_old"] < rows["refresh"]["post_new"]
        b = rows["full"]["post_new"] < rows["full"]["post_old"]
        c = rows["full"]["continuity_ratio"] <= thr < rows["no_disentangle"]["continuity_ratio"]
        train = result.logs.get("seconds", 0.0)
        detail = (
            f"refresh-only old/new {rows['refresh']['post_old']:.3f}/{rows['refresh']['post_new']:.3f}; "
            f"full old/new {rows['full']['post_old']:.3f}/{rows['full']['post_new']:.3f}; "
            f"continuity full {rows['full']['continuity_ratio']:.2f}, no-disentangle "
            f"{rows['no_disentangle']['continuity_ratio']:.2f} (threshold {thr}); training {train:.0f}s"
        )
        return a and b and c, detail, 900.0 - train

    return _timed(8, "garment-switch analog", run)


def check_attention_mass(result) -> CriterionResult:
    def run():
        if "switch_extra" not in result.logs:
            from .pipeline import evaluate_switch

            _, result.logs["switch_extra"] = evaluate_switch(result.cfg, result.student, result.world, result.dataset)
        m = result.logs["switch_extra"]["attention"]
        detail = f"historical {m['historical_mass']:.4f} vs conditional {m['conditional_mass']:.4f} (intra {m['intra_mass']:.4f})"
        return m["historical_mass"] > m["conditional_mass"], detail, None

    return _timed(9, "attention-mass observation", run)


def check_streaming_cost(result) -> CriterionResult:
    from .metrics import window_means
    from .pipeline import timing_rollout

    def run():
        cfg = result.cfg
        evict = timing_rollout(cfg, result.student, result.world, result.dataset, evict=True)
        grow = timing_rollout(cfg, result.student, result.world, result.dataset, evict=False)
        early, late = window_means(evict, [(10, 40), (40, 80)])
        flat = abs(late - early) <= cfg.flatness_tolerance * early
        windows = [(lo, lo + 10) for lo in range(0, cfg.timing_chunks, 10)]
        g = window_means(grow, windows)
        mono = all(b > a for a, b in zip(g, g[1:]))
        result.logs["timing"] = {"evict": evict, "no_evict": grow}
        detail = (
            f"evicting: chunks 10-40 {early * 1e3:.2f} ms, 40-80 {late * 1e3:.2f} ms; "
            f"no eviction per-10-chunk means {', '.join(f'{x * 1e3:.1f}' for x in g)} ms"
        )
        return flat and mono, detail, None

    return _timed(10, "streaming cost property", run)


STATIC_CHECKS = (
    check_cache_policy,
    check_incremental_equivalence,
    check_gradients,
    check_gaussian_dmd,
    check_reweighting,
    check_tf_mask,
    check_flow_matching,
)


def run_all(result) -> list[CriterionResult]:
    out = [c() for c in STATIC_CHECKS]
    out += [check_garment_switch(result), check_attention_mass(result), check_streaming_cost(result)]
    return out


def write_report(path, results: list[CriterionResult]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["criterion", "name", "passed", "seconds", "detail"])
        for r in results:
            w.writerow([r.number, r.name, int(r.passed), f"{r.seconds:.3f}", r.detail])
