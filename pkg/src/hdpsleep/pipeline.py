"""Stage orchestration: spectra -> infer -> cluster -> report, plus simulate and demo.

Layout of a run directory::

    manifest.json
    subjects/<id>/observations.jsonl, spectra_qc.json,
                  samples.jsonl, trace.csv, checkpoint.json
    clusters/manifest.json, <id>_trajectory.csv
    reports/<id>/heatmap.csv, rho.csv, summary.json, timeline.csv

Every artifact carries the run hash (config + input checksums) and the
hash of the stage that produced it.  Stage hashes chain: a consumer
recomputes the hash it expects from the current config and refuses
artifacts written under a different one.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import io
from .clustering import ClusteringError, pooled_spectra, subject_states, weighted_kmeans
from .config import ClusterConfig, ConfigError, RunConfig, SubjectInput, canonical_hash, file_sha256
from .evaluation import (
    AlignedTrajectories,
    EvaluationError,
    Hypnogram,
    modal_trajectory,
    reorder_by_alpha,
    rho_distribution,
    stage_cluster_heatmap,
    transition_rates,
)
from .inference import BeamSampler, InferenceConfig, InvariantError
from .signal import observe
from .simulator import default_stages, default_transition, simulate

log = logging.getLogger(__name__)

STAGES = (1, 2, 3, 4, 5)

__all__ = [
    "StaleArtifactError",
    "RunHashes",
    "run_hashes",
    "subject_inference_config",
    "cmd_simulate",
    "cmd_spectra",
    "cmd_infer",
    "cmd_cluster",
    "cmd_report",
    "cmd_demo",
    "demo_config",
]


class StaleArtifactError(ValueError):
    """An upstream artifact was produced under a different configuration."""


# ---------------------------------------------------------------------------
# hashing


@dataclasses.dataclass(frozen=True)
class RunHashes:
    run: str
    inputs: dict  # subject -> {"input": sha256, "hypnogram": sha256 | None}
    spectra: dict  # subject -> hash
    infer: dict
    cluster: str
    report: dict

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def subject_inference_config(cfg: RunConfig, sid: str) -> InferenceConfig:
    """Per-subject chain config: the seed is offset by the subject's position."""
    idx = [s.id for s in cfg.subjects].index(sid)
    return dataclasses.replace(cfg.inference, seed=cfg.inference.seed + idx)


def _hashable_config(cfg: RunConfig) -> dict:
    d = cfg.to_dict()
    d.pop("output_dir")  # where outputs go does not change what they contain
    d.pop("checkpoint_every")
    return d


def run_hashes(cfg: RunConfig) -> RunHashes:
    inputs = {}
    for s in cfg.subjects:
        path = cfg.resolve(s.input)
        if not path.is_file():
            raise ConfigError(f"subject {s.id}: input file not found: {path}")
        hyp = None
        if s.hypnogram is not None:
            hp = cfg.resolve(s.hypnogram)
            if not hp.is_file():
                raise ConfigError(f"subject {s.id}: hypnogram not found: {hp}")
            hyp = file_sha256(hp)
        inputs[s.id] = {"input": file_sha256(path), "hypnogram": hyp}
    spectra = {
        s.id: canonical_hash({"spectra": cfg.spectra_section(), "input": inputs[s.id]["input"], "format": s.format})
        for s in cfg.subjects
    }
    infer = {
        s.id: canonical_hash({"spectra": spectra[s.id], "inference": subject_inference_config(cfg, s.id).to_dict()})
        for s in cfg.subjects
    }
    cluster = canonical_hash(
        {
            "infer": [infer[s.id] for s in cfg.subjects],
            "clustering": dataclasses.asdict(cfg.clustering),
            "alpha_band": list(cfg.evaluation.alpha_band),
        }
    )
    report = {
        s.id: canonical_hash(
            {
                "infer": infer[s.id],
                "hypnogram": inputs[s.id]["hypnogram"],
                "epoch_seconds": s.epoch_seconds,
                "evaluation": dataclasses.asdict(cfg.evaluation),
            }
        )
        for s in cfg.subjects
    }
    run = canonical_hash({"config": _hashable_config(cfg), "inputs": inputs})
    return RunHashes(run, inputs, spectra, infer, cluster, report)


def _check(found, expected: str, what: Path, rerun: str) -> None:
    if found != expected:
        raise StaleArtifactError(
            f"{what}: stage hash {found} does not match {expected} expected by the current config; rerun `{rerun}`"
        )


def _write_manifest(cfg: RunConfig, h: RunHashes) -> None:
    cfg.out.mkdir(parents=True, exist_ok=True)
    io.write_json(
        cfg.out / "manifest.json",
        {"manifest_hash": h.run, "config": _hashable_config(cfg), "hashes": h.to_dict()},
    )


def _select(cfg: RunConfig, subjects) -> list:
    if not subjects:
        return list(cfg.subjects)
    return [cfg.subject(sid) for sid in subjects]


def _subject_dir(cfg: RunConfig, sid: str) -> Path:
    d = cfg.out / "subjects" / sid
    d.mkdir(parents=True, exist_ok=True)
    return d


def _map(fn, args, jobs: int) -> list:
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, *zip(*args)))
    return [fn(*a) for a in args]


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(out_dir, subject: str = "S1", T: int = 2000, fs: float = 200.0, window_seconds: float = 15.0,
                 seed: int = 0, fmt: str = "csv", stages=None, transition=None) -> dict:
    """Simulate the built-in fixture (or given stages) into ``out_dir``.

    Writes ``<subject>.csv|.f32`` (series), ``<subject>_truth.csv`` (window,
    stage index, stage code; usable as a hypnogram), ``<subject>_transition.csv``,
    ``<subject>_psd.csv`` (theoretical PSD per stage) and ``<subject>_meta.json``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stages = default_stages() if stages is None else stages
    P = default_transition() if transition is None else np.asarray(transition)
    J = int(round(window_seconds * fs))
    if abs(J - window_seconds * fs) > 1e-9:
        raise ConfigError("window_seconds * fs must be a whole number of samples")
    params = {"subject": subject, "T": T, "fs": fs, "window_seconds": window_seconds, "seed": seed,
              "stages": [dataclasses.asdict(s) for s in stages], "transition": P.tolist()}
    h = canonical_hash(params)
    truth = simulate(stages, P, T, J, fs, seed)
    series = out / f"{subject}.{'f32' if fmt == 'f32' else 'csv'}"
    io.write_series(series, truth.samples, fmt)
    io.write_csv(out / f"{subject}_truth.csv", ["window", "stage_index", "stage"],
                 zip(range(T), truth.stages.tolist(), truth.stage_ids.tolist()), h)
    io.write_csv(out / f"{subject}_transition.csv", [f"to_{s.stage_id}" for s in stages],
                 (list(map(repr, row)) for row in P.tolist()), h)
    io.write_csv(out / f"{subject}_psd.csv", ["freq_hz"] + [f"stage_{s.stage_id}" for s in stages],
                 ([repr(f)] + [repr(v) for v in truth.psd[:, j]] for j, f in enumerate(truth.freqs.tolist())), h)
    meta = {"manifest_hash": h, "params": params, "J": J, "series": series.name, "format": fmt}
    io.write_json(out / f"{subject}_meta.json", meta)
    return meta


# ---------------------------------------------------------------------------
# spectra


def _spectra_one(cfg: RunConfig, subj: SubjectInput, h: RunHashes) -> dict:
    series = io.read_series(cfg.resolve(subj.input), subj.format)
    if not np.all(np.isfinite(series)):
        raise io.FormatError(f"{subj.input}: input contains non-finite samples")
    obs = observe(series, cfg.fs, cfg.window_seconds, cfg.bands, cfg.TW, cfg.M, cfg.artifact_percentile)
    d = _subject_dir(cfg, subj.id)
    head = {"manifest_hash": h.run, "stage_hash": h.spectra[subj.id], "subject": subj.id}
    io.write_observations(d / "observations.jsonl", obs, head)
    hist = {}
    for b, (lo, hi) in enumerate(obs.bands):
        idx, cnt = np.unique(obs.indices[obs.valid, b], return_counts=True)
        hist[f"{lo}-{hi}"] = {str(i): int(c) for i, c in zip(idx, cnt)}
    qc = {
        **head,
        "T": obs.T,
        "J": obs.J,
        "bands": [list(b) for b in obs.bands],
        "M": obs.M,
        "rejected_windows": int((~obs.valid).sum()),
        "rejected": np.flatnonzero(~obs.valid).tolist(),
        "index_histogram": hist,
    }
    io.write_json(d / "spectra_qc.json", qc)
    return qc


def cmd_spectra(cfg: RunConfig, subjects=None, jobs: int = 1) -> list:
    h = run_hashes(cfg)
    _write_manifest(cfg, h)
    sel = _select(cfg, subjects)
    return _map(_spectra_one, [(cfg, s, h) for s in sel], jobs)


# ---------------------------------------------------------------------------
# infer

TRACE_HEADER = ["iteration", "log_joint", "n_occupied", "n_instantiated", "gamma", "alpha"]


def _load_observations(cfg: RunConfig, sid: str, h: RunHashes):
    path = cfg.out / "subjects" / sid / "observations.jsonl"
    head, obs = io.read_observations(path)
    _check(head.get("stage_hash"), h.spectra[sid], path, "spectra")
    return obs


def _truncate_outputs(samples_path: Path, trace_path: Path, iteration: int, head: dict) -> None:
    """Drop samples and trace rows written after the checkpointed iteration."""
    _, kept = io.read_samples(samples_path, max_iteration=iteration)
    io.write_jsonl_header(samples_path, head)
    io.append_jsonl(samples_path, (s.to_dict() for s in kept))
    _, header, rows = io.read_csv(trace_path)
    rows = [r for r in rows if int(r[0]) <= iteration]
    io.write_csv(trace_path, header, rows, head["manifest_hash"])


def _infer_one(cfg: RunConfig, sid: str, h: RunHashes, stop_at=None, fresh: bool = False) -> dict:
    obs = _load_observations(cfg, sid, h)
    icfg = subject_inference_config(cfg, sid)
    d = _subject_dir(cfg, sid)
    samples_path, trace_path, ckpt_path = d / "samples.jsonl", d / "trace.csv", d / "checkpoint.json"
    head = {"manifest_hash": h.run, "stage_hash": h.infer[sid], "subject": sid,
            "bands": [list(b) for b in obs.bands], "inference": icfg.to_dict()}

    sampler = None
    if ckpt_path.exists() and not fresh:
        ckpt = io.read_json(ckpt_path)
        if ckpt.get("stage_hash") != h.infer[sid]:
            raise StaleArtifactError(
                f"{ckpt_path}: checkpoint stage hash {ckpt.get('stage_hash')} does not match "
                f"{h.infer[sid]} expected by the current config; rerun with --fresh to discard it"
            )
        sampler = BeamSampler.from_checkpoint(obs, icfg, ckpt["sampler"])
        _truncate_outputs(samples_path, trace_path, sampler.state.iteration, head)
        log.info("%s: resuming at iteration %d", sid, sampler.state.iteration)
    if sampler is None:
        sampler = BeamSampler(obs, icfg)
        io.write_jsonl_header(samples_path, head)
        io.write_csv(trace_path, TRACE_HEADER, [], h.run)

    pending_samples, pending_trace = [], []

    def flush():
        io.append_jsonl(samples_path, (s.to_dict() for s in pending_samples))
        with open(trace_path, "a") as fh:
            fh.writelines(",".join(map(str, r)) + "\n" for r in pending_trace)
        pending_samples.clear()
        pending_trace.clear()
        io.write_json(ckpt_path, {"manifest_hash": h.run, "stage_hash": h.infer[sid], "sampler": sampler.checkpoint()})

    def on_iteration(smp: BeamSampler):
        st = smp.state
        pending_trace.append([st.iteration, repr(smp.log_joint()), len(np.unique(st.s)), st.K,
                              repr(float(st.gamma)), repr(float(st.alpha))])
        if st.iteration % cfg.checkpoint_every == 0:
            flush()
            log.info("%s: iteration %d/%d, %d occupied", sid, st.iteration, icfg.n_iterations, len(np.unique(st.s)))

    sampler.run(on_sample=pending_samples.append, on_iteration=on_iteration, stop_at=stop_at)
    flush()
    return {"subject": sid, "iteration": sampler.state.iteration, "complete": sampler.state.iteration >= icfg.n_iterations}


def cmd_infer(cfg: RunConfig, subjects=None, jobs: int = 1, stop_at: int | None = None, fresh: bool = False) -> list:
    h = run_hashes(cfg)
    _write_manifest(cfg, h)
    sel = _select(cfg, subjects)
    return _map(_infer_one, [(cfg, s.id, h, stop_at, fresh) for s in sel], jobs)


def _load_samples(cfg: RunConfig, sid: str, h: RunHashes):
    path = cfg.out / "subjects" / sid / "samples.jsonl"
    head, samples = io.read_samples(path)
    _check(head.get("stage_hash"), h.infer[sid], path, "infer")
    ckpt = cfg.out / "subjects" / sid / "checkpoint.json"
    n_it = subject_inference_config(cfg, sid).n_iterations
    if ckpt.exists() and io.read_json(ckpt)["sampler"]["state"]["iteration"] < n_it:
        raise StaleArtifactError(f"{path}: chain is incomplete; rerun `infer` to resume it")
    if not samples:
        raise ValueError(f"{path}: no retained samples")
    return head, samples


# ---------------------------------------------------------------------------
# cluster


def cmd_cluster(cfg: RunConfig) -> dict:
    """Pool states of every subject, cluster them and map each window to a cluster."""
    h = run_hashes(cfg)
    _write_manifest(cfg, h)
    cc: ClusterConfig = cfg.clustering
    pooled, per_subject = [], {}
    for s in cfg.subjects:
        _, samples = _load_samples(cfg, s.id, h)
        per_subject[s.id] = samples
        pooled.extend(subject_states(s.id, samples))
    if cc.C > len(pooled):
        raise ClusteringError(f"C={cc.C} exceeds the {len(pooled)} pooled states")
    X = np.array([st.spectrum for st in pooled])
    w = np.array([st.occurrences for st in pooled], dtype=float)
    fit = weighted_kmeans(X, w, cc.C, seed=cc.seed, restarts=cc.restarts, max_iter=cc.max_iter)

    # cluster ids 1..C in ascending order of normalized alpha power
    rank = reorder_by_alpha(fit.centroids, cfg.bands, cfg.evaluation.alpha_band)
    relabel = {c: cc.C + 1 - rank[c] for c in range(cc.C)}
    order = sorted(range(cc.C), key=lambda c: relabel[c])
    labels = [relabel[int(c)] for c in fit.labels]

    sweep = {}
    if cc.sweep:
        from .clustering import distortion_sweep

        sweep = {str(k): v for k, v in distortion_sweep(X, w, [c for c in cc.sweep if c <= len(pooled)],
                                                        seed=cc.seed, restarts=cc.restarts).items()}
    manifest = {
        "manifest_hash": h.run,
        "stage_hash": h.cluster,
        "C": cc.C,
        "bands": [list(b) for b in cfg.bands],
        "centroids": fit.centroids[order].tolist(),
        "raw_centroids": fit.raw_centroids[order].tolist(),
        "distortion": fit.distortion,
        "distortion_history": fit.history,
        "iterations": fit.n_iter,
        "distortion_sweep": sweep,
        "subjects": {sid: h.infer[sid] for sid in per_subject},
        "states": [
            {"subject": st.subject, "state": st.state, "cluster": lab, "weight": int(st.occurrences),
             "spectrum": st.spectrum.tolist()}
            for st, lab in zip(pooled, labels)
        ],
    }
    cdir = cfg.out / "clusters"
    cdir.mkdir(parents=True, exist_ok=True)
    io.write_json(cdir / "manifest.json", manifest)

    assigned = {(st.subject, st.state): lab for st, lab in zip(pooled, labels)}
    raw_order = np.array(order)
    for sid, samples in per_subject.items():
        modal = modal_trajectory(samples)
        spectra = pooled_spectra(samples)
        cmap = {}
        for k in np.unique(modal).tolist():
            if (sid, k) in assigned:
                cmap[k] = assigned[(sid, k)]
            else:
                # rarely-visited modal state: nearest centroid
                c = int(fit.predict(spectra[k])[0])
                cmap[k] = int(np.flatnonzero(raw_order == c)[0]) + 1
        io.write_csv(cdir / f"{sid}_trajectory.csv", ["window", "state", "cluster"],
                     ((t, int(k), cmap[int(k)]) for t, k in enumerate(modal)), h.run)
    return manifest


# ---------------------------------------------------------------------------
# report


def _fmt(x) -> str:
    return repr(float(x))


def cmd_report(cfg: RunConfig, subjects=None) -> dict:
    """Write the evaluation bundle; raises InvariantError after writing if a check fails."""
    h = run_hashes(cfg)
    _write_manifest(cfg, h)
    cpath = cfg.out / "clusters" / "manifest.json"
    clusters = None
    if cpath.exists():
        clusters = io.read_json(cpath)
        if clusters.get("stage_hash") != h.cluster:
            log.warning("%s is stale (hash %s, expected %s); reporting without clusters",
                        cpath, clusters.get("stage_hash"), h.cluster)
            clusters = None
    failures = {}
    summaries = {}
    for subj in _select(cfg, subjects):
        summary, failed = _report_one(cfg, subj, h, clusters)
        summaries[subj.id] = summary
        if failed:
            failures[subj.id] = failed
    if failures:
        raise InvariantError(f"report invariant checks failed: {json.dumps(failures, sort_keys=True)}")
    return summaries


def _report_one(cfg: RunConfig, subj: SubjectInput, h: RunHashes, clusters):
    sid = subj.id
    _, samples = _load_samples(cfg, sid, h)
    rdir = cfg.out / "reports" / sid
    rdir.mkdir(parents=True, exist_ok=True)
    T = len(samples[0].s)
    modal = modal_trajectory(samples)
    occupied = [smp.n_occupied for smp in samples]
    vals, cnts = np.unique(occupied, return_counts=True)
    summary = {
        "manifest_hash": h.run,
        "stage_hash": h.report[sid],
        "subject": sid,
        "n_samples": len(samples),
        "occupied_states": {"mode": int(vals[np.argmax(cnts)]), "median": float(np.median(occupied)),
                            "distribution": {str(v): int(c) for v, c in zip(vals, cnts)}},
        "notes": [],
    }
    checks = {}

    cluster_traj = None
    if clusters is not None:
        tpath = cfg.out / "clusters" / f"{sid}_trajectory.csv"
        mhash, _, rows = io.read_csv(tpath)
        _check(mhash, clusters["manifest_hash"], tpath, "cluster")
        cluster_traj = np.array([int(r[2]) for r in rows])
        checks["cluster_ids_in_range"] = bool(np.all((cluster_traj >= 1) & (cluster_traj <= clusters["C"])))
    else:
        summary["notes"].append("no cluster manifest; heatmap rows are this subject's states")

    # units shown in the heatmap: clusters if available, else states by ascending alpha
    if cluster_traj is not None:
        units, unit_ids = cluster_traj, list(range(1, clusters["C"] + 1))
    else:
        spectra = pooled_spectra(samples)
        ids = sorted(np.unique(modal).tolist())
        rank = reorder_by_alpha([spectra[k] for k in ids], cfg.bands, cfg.evaluation.alpha_band, ids)
        units, unit_ids = modal, sorted(ids, key=lambda k: -rank[k])

    hyp = None
    if subj.hypnogram is not None:
        labels = io.read_hypnogram(cfg.resolve(subj.hypnogram))
        hyp = Hypnogram(labels, subj.epoch_seconds).per_window(cfg.window_seconds, T)
    if hyp is None or not np.any(hyp > 0):
        summary["notes"].append("no hypnogram; rho, heatmap and transition rates skipped")
    else:
        try:
            rd = rho_distribution(samples, hyp, cfg.bands, cfg.evaluation.alpha_band)
        except EvaluationError as exc:
            rd = None
            summary["notes"].append(f"rho skipped: {exc}")
        if rd is not None:
            io.write_csv(rdir / "rho.csv", ["sample", "iteration", "rho"],
                         ((i, smp.iteration, _fmt(r)) for i, (smp, r) in enumerate(zip(samples, rd["rhos"]))), h.run)
            summary["rho"] = {"median": rd["median"], "min": float(min(rd["rhos"])), "max": float(max(rd["rhos"])),
                              "n": len(rd["rhos"])}
            checks["rho_in_range"] = bool(all(-1.0 <= r <= 1.0 for r in rd["rhos"]))
        aligned = AlignedTrajectories(hyp, units, cfg.window_seconds)
        H, empty = stage_cluster_heatmap(aligned, unit_ids, STAGES)
        io.write_csv(rdir / "heatmap.csv", ["unit"] + [f"stage_{s}" for s in STAGES],
                     ([u] + [_fmt(v) for v in H[i]] for i, u in enumerate(unit_ids)), h.run)
        filled = [j for j, s in enumerate(STAGES) if s not in empty]
        checks["heatmap_columns_sum_to_one"] = bool(np.allclose(H[:, filled].sum(axis=0), 1.0, atol=1e-12))
        summary["empty_stages"] = empty
        summary["heatmap_units"] = "cluster" if cluster_traj is not None else "state"
        summary["transition_rates_per_minute"] = {str(k): v for k, v in transition_rates(aligned, STAGES).items()}

    io.write_csv(
        rdir / "timeline.csv",
        ["window", "time_s", "hypnogram", "state", "cluster"],
        (
            (t, _fmt(t * cfg.window_seconds), int(hyp[t]) if hyp is not None else "", int(modal[t]),
             int(cluster_traj[t]) if cluster_traj is not None else "")
            for t in range(T)
        ),
        h.run,
    )
    checks["occupied_states_positive"] = bool(min(occupied) >= 1)
    checks["modal_states_visited"] = bool(set(np.unique(modal).tolist()) <= {k for smp in samples for k in smp.states})
    summary["checks"] = checks
    io.write_json(rdir / "summary.json", summary)
    return summary, [k for k, ok in checks.items() if not ok]


# ---------------------------------------------------------------------------
# demo


def demo_config(out_dir, seed: int = 0, n_subjects: int = 2, T: int = 400, burn_in: int = 300,
                n_samples: int = 20, thin: int = 10, C: int = 5) -> RunConfig:
    """Config for the built-in fixture, with inputs under ``out_dir/inputs``."""
    subjects = [
        {"id": f"S{i + 1}", "input": f"inputs/S{i + 1}.csv", "hypnogram": f"inputs/S{i + 1}_truth.csv",
         "epoch_seconds": 15.0}
        for i in range(n_subjects)
    ]
    d = {
        "subjects": subjects,
        "fs": 200.0,
        "window_seconds": 15.0,
        "artifact_percentile": None,
        "inference": {"burn_in": burn_in, "n_samples": n_samples, "thin": thin, "seed": seed, "K_max": 30},
        "clustering": {"C": C, "restarts": 10, "seed": seed},
        "output_dir": ".",
        "checkpoint_every": 100,
    }
    return RunConfig.from_dict(d, base_dir=out_dir)


def cmd_demo(out_dir, seed: int = 0, **kw) -> dict:
    """Simulate subjects from the fixture and run every stage on them."""
    out = Path(out_dir)
    cfg = demo_config(out, seed=seed, **kw)
    for i, s in enumerate(cfg.subjects):
        T = kw.get("T", 400)
        cmd_simulate(out / "inputs", subject=s.id, T=T, fs=cfg.fs, window_seconds=cfg.window_seconds,
                     seed=seed * 1000 + i)
    io.write_json(out / "config.json", cfg.to_dict())
    cmd_spectra(cfg)
    cmd_infer(cfg)
    cmd_cluster(cfg)
    return cmd_report(cfg)
