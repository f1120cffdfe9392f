"""Pipeline stages behind the command line front end.

Stages communicate only through documented files: the corpus manifest
(``corpus.json``), the binary shape model, correspondence / speaker /
pose-trajectory JSON, the synthesis model JSON, generated stream files,
and the metrics report.  Every stage is deterministic for a fixed seed;
worker pools only parallelize per-utterance work and reduce results in
utterance order, so the output bytes are independent of ``jobs``.
"""

from __future__ import annotations

import json
import logging
import multiprocessing
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import synthetic
from .ema import (
    EmaRecording,
    RigidTransform,
    align_to_reference,
    interpolate_invalid,
    load_recording,
    parse_labels,
    save_labels,
    save_recording,
    select_channels,
)
from .errors import FileError, FormatError, UsageError
from .fitting import (
    Correspondence,
    FitOptions,
    PoseTrajectory,
    estimate_correspondence,
    fit_sequence,
    load_pose_trajectory,
    save_fit_result,
    save_pose_trajectory,
    virtual_ema,
)
from .mesh import MeshCorpus, load_obj, save_obj
from .metrics import (
    MetricsReport,
    coil_distances,
    duration_rmse,
    dynamics_rmse,
    mcd,
    phone_class_report,
    rmse_cent,
    rmse_hz,
    vuv_rate,
)
from .model import build_model, generate, load_model, save_model
from .synthesis import (
    StreamSpec,
    load_stat_model,
    load_streams,
    save_stat_model,
    save_streams,
    synthesize,
    train,
)

log = logging.getLogger("articulate")

DEFAULT_CONFIG = {
    "seed": 0,
    "jobs": 1,
    "paths": {
        "corpus": "corpus",
        "model": "out/model.mltm",
        "statModel": "out/statmodel.json",
        "output": "out",
    },
    "coils": ["T1", "T2", "T3"],
    "refCoil": "ref",
    "alignTransform": None,
    "correspondence": {"c": 0.25, "restarts": 10, "iters": 20, "frames": 10,
                       "utterance": None},
    "pass1": {"alpha": 20.0, "beta": 10.0, "c": 3.0},
    "pass2": {"alpha": 0.0, "beta": 1.0, "c": 2.0},
    "solver": {"gtol": 1e-6, "maxIter": 200},
    "synthesis": {"states": 5, "deltaDelta": False, "voicedStreams": ["f0"]},
    "split": {"fraction": 0.2, "seed": 1},
    "synthetic": {},
}


def _deep_update(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_update(out[key], value)
        else:
            out[key] = value
    return out


def parse_override(text: str) -> dict:
    """``a.b.c=value`` into a nested dict; the value parses as JSON if it can."""
    if "=" not in text:
        raise UsageError(f"override '{text}' is not of the form key.path=value")
    key_path, raw_value = text.split("=", 1)
    try:
        value = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value
    out: dict = {}
    node = out
    parts = key_path.split(".")
    for part in parts[:-1]:
        node[part] = {}
        node = node[part]
    node[parts[-1]] = value
    return out


class PipelineConfig:
    """Merged configuration: defaults, config file, then flag overrides."""

    def __init__(self, raw: dict, base_dir: Path):
        self.raw = raw
        self.base_dir = Path(base_dir)

    @classmethod
    def load(cls, path=None, overrides=(), jobs=None, seed=None) -> "PipelineConfig":
        raw = DEFAULT_CONFIG
        base_dir = Path.cwd()
        if path is not None:
            path = Path(path)
            try:
                with open(path, "r", encoding="utf-8") as fh:
                    file_cfg = json.load(fh)
            except OSError as exc:
                raise FileError(f"cannot read config {path}: {exc}") from exc
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: invalid JSON: {exc}") from exc
            if not isinstance(file_cfg, dict):
                raise FormatError(f"{path}: config must be a JSON object")
            raw = _deep_update(raw, file_cfg)
            base_dir = path.parent.resolve()
        for override in overrides:
            raw = _deep_update(raw, parse_override(override))
        if jobs is not None:
            raw = _deep_update(raw, {"jobs": int(jobs)})
        if seed is not None:
            raw = _deep_update(raw, {"seed": int(seed)})
        if int(raw["jobs"]) < 1:
            raise UsageError("jobs must be >= 1")
        return cls(raw=raw, base_dir=base_dir)

    def path(self, key: str) -> Path:
        value = self.raw["paths"].get(key)
        if value is None:
            raise UsageError(f"config paths.{key} is not set")
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def jobs(self) -> int:
        return int(self.raw["jobs"])

    @property
    def coils(self) -> list:
        return list(self.raw["coils"])

    @property
    def ref_coil(self) -> str:
        return self.raw["refCoil"]

    @property
    def transform(self) -> RigidTransform | None:
        spec = self.raw.get("alignTransform")
        if not spec:
            return None
        return RigidTransform(
            rotation=np.asarray(spec.get("rotation", np.eye(3).tolist())),
            scale=float(spec.get("scale", 1.0)),
        )

    def fit_options(self, section: str, **extra) -> FitOptions:
        pass_cfg = self.raw[section]
        solver = self.raw["solver"]
        corr = self.raw["correspondence"]
        return FitOptions(
            alpha=float(pass_cfg.get("alpha", 0.0)),
            beta=float(pass_cfg.get("beta", 0.0)),
            c=float(pass_cfg.get("c", 3.0)),
            gtol=float(solver.get("gtol", 1e-6)),
            max_iter=int(solver.get("maxIter", 200)),
            restarts=int(corr.get("restarts", 10)),
            seed=self.seed,
            corr_iters=int(corr.get("iters", 20)),
            corr_frames=int(corr.get("frames", 10)),
            **extra,
        )

    def correspondence_options(self) -> FitOptions:
        corr = self.raw["correspondence"]
        base = self.fit_options("pass1")
        return replace(base, alpha=0.0, beta=0.0, c=float(corr.get("c", 0.25)))

    def synthetic_config(self) -> synthetic.SyntheticConfig:
        extra = dict(self.raw.get("synthetic", {}))
        extra.setdefault("seed", self.seed)
        fields = synthetic.SyntheticConfig.__dataclass_fields__
        unknown = set(extra) - set(fields)
        if unknown:
            raise UsageError(
                f"unknown synthetic options: {', '.join(sorted(unknown))}"
            )
        for key, value in list(extra.items()):
            if isinstance(value, list):
                extra[key] = tuple(value)
        return synthetic.SyntheticConfig(**extra)


def split_corpus(utterances, fraction: float, seed: int):
    """Deterministic disjoint, exhaustive train/test split."""
    utterances = list(utterances)
    if not utterances:
        raise UsageError("cannot split an empty utterance list")
    if not (0.0 < fraction < 1.0):
        raise UsageError(f"split fraction must be in (0, 1), got {fraction}")
    n_test = int(round(fraction * len(utterances)))
    if n_test < 1:
        raise UsageError(
            f"split fraction {fraction} selects no test utterances"
        )
    order = np.random.default_rng(seed).permutation(len(utterances))
    test_idx = set(int(i) for i in order[:n_test])
    train_set = [u for i, u in enumerate(utterances) if i not in test_idx]
    test_set = [u for i, u in enumerate(utterances) if i in test_idx]
    return train_set, test_set


def prepare_recording(rec: EmaRecording, ref_coil: str, coils,
                      transform: RigidTransform | None = None) -> EmaRecording:
    """Interpolate missing samples, align to the reference coil, keep coils."""
    rec = interpolate_invalid(rec)
    rec = align_to_reference(rec, ref_coil, transform)
    return select_channels(rec, coils)


class OutputTracker:
    """Registers written files so a failing stage can clean up after itself."""

    def __init__(self):
        self.paths = []

    def add(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.paths.append(path)
        return path

    def discard_all(self) -> None:
        for path in self.paths:
            try:
                path.unlink(missing_ok=True)
            except OSError:
                pass


# ------------------------------------------------------------- manifest

def load_manifest(corpus_dir) -> dict:
    path = Path(corpus_dir) / "corpus.json"
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise FileError(f"cannot read corpus manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc


def corpus_from_manifest(corpus_dir, manifest: dict) -> MeshCorpus:
    corpus_dir = Path(corpus_dir)
    speakers = manifest["speakers"]
    poses = manifest["poses"]
    meshes = []
    for speaker in speakers:
        row = []
        for pose in poses:
            row.append(load_obj(corpus_dir / manifest["meshes"][speaker][pose]))
        meshes.append(row)
    return MeshCorpus(speakers, poses, meshes)


def manifest_split(cfg: PipelineConfig, manifest: dict):
    """The manifest's stored split when present, else a seeded fresh one."""
    if "split" in manifest:
        return list(manifest["split"]["train"]), list(manifest["split"]["test"])
    split_cfg = cfg.raw["split"]
    return split_corpus(manifest["utterances"],
                        float(split_cfg["fraction"]), int(split_cfg["seed"]))


def _utterance_paths(corpus_dir, manifest: dict, kind: str, utterance: str) -> Path:
    return Path(corpus_dir) / manifest[kind][utterance]


def load_prepared(cfg: PipelineConfig, manifest: dict, utterance: str) -> EmaRecording:
    corpus_dir = cfg.path("corpus")
    rec = load_recording(_utterance_paths(corpus_dir, manifest, "recordings",
                                          utterance))
    return prepare_recording(rec, cfg.ref_coil, cfg.coils, cfg.transform)


def load_correspondence(cfg: PipelineConfig, manifest: dict) -> Correspondence:
    """The estimated correspondence if the file exists, else the planted one."""
    path = cfg.path("output") / "correspondence.json"
    if path.exists():
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        return Correspondence(
            pairs=tuple((p[0], int(p[1])) for p in raw["pairs"]),
            mean_distance_mm=float(raw["meanDistanceMm"]),
        )
    planted = manifest.get("plantedCorrespondence")
    if planted is None:
        raise FileError(
            f"{path} not found and the corpus manifest has no planted "
            "correspondence; run the correspond stage first"
        )
    return Correspondence(
        pairs=tuple((p[0], int(p[1])) for p in planted),
        mean_distance_mm=0.0,
    )


# ------------------------------------------------------- parallel helpers

_WORKER_STATE: dict = {}


def _init_fit_worker(model_path, corr_pairs, opts):
    _WORKER_STATE["model"] = load_model(model_path)
    _WORKER_STATE["corr"] = Correspondence(pairs=corr_pairs, mean_distance_mm=0.0)
    _WORKER_STATE["opts"] = opts


def _fit_worker(args):
    utterance, rec = args
    result = fit_sequence(_WORKER_STATE["model"], rec, _WORKER_STATE["corr"],
                          _WORKER_STATE["opts"])
    return utterance, result


def _map_fits(cfg, model_path, model, corr, opts, recs):
    """Fit each (utterance, recording) pair; order-preserving, jobs-invariant."""
    items = list(recs)
    if cfg.jobs == 1 or len(items) <= 1:
        return [(utt, fit_sequence(model, rec, corr, opts)) for utt, rec in items]
    with multiprocessing.Pool(
        processes=min(cfg.jobs, len(items)),
        initializer=_init_fit_worker,
        initargs=(model_path, corr.pairs, opts),
    ) as pool:
        return pool.map(_fit_worker, items)


# ---------------------------------------------------------------- stages

def stage_make_synthetic_corpus(cfg: PipelineConfig, tracker: OutputTracker) -> dict:
    """Generate the desk-scale corpus plus its refit oracle bound."""
    out_dir = cfg.path("corpus")
    scfg = cfg.synthetic_config()
    world = synthetic.make_world(scfg)
    corpus, model, corr, speaker, pose_targets, f0_targets, mgc_targets, rng = world

    mesh_map = {}
    for i, spk in enumerate(corpus.speakers):
        mesh_map[spk] = {}
        for j, pose in enumerate(corpus.poses):
            rel = f"meshes/{spk}__{pose}.obj"
            save_obj(corpus.meshes[i][j], tracker.add(out_dir / rel))
            mesh_map[spk][pose] = rel

    utterances = []
    rec_map = {}
    lab_map = {}
    stream_map = {}
    for k in range(scfg.utterances):
        name = f"utt{k:04d}"
        utt = synthetic.make_utterance(rng, model, scfg, corr, speaker,
                                       pose_targets, f0_targets, mgc_targets, name)
        rec_rel = f"recordings/{name}.json"
        lab_rel = f"labels/{name}.lab"
        stream_rel = f"streams/{name}.json"
        save_recording(utt.recording, tracker.add(out_dir / rec_rel))
        save_labels(utt.segmentation, tracker.add(out_dir / lab_rel))
        save_streams(utt.streams, scfg.frame_rate,
                     tracker.add(out_dir / stream_rel), utterance=name)
        utterances.append(name)
        rec_map[name] = rec_rel
        lab_map[name] = lab_rel
        stream_map[name] = stream_rel

    split_cfg = cfg.raw["split"]
    train_set, test_set = split_corpus(utterances, float(split_cfg["fraction"]),
                                       int(split_cfg["seed"]))

    manifest = {
        "speakers": list(corpus.speakers),
        "poses": list(corpus.poses),
        "meshes": mesh_map,
        "utterances": utterances,
        "recordings": rec_map,
        "labels": lab_map,
        "streams": stream_map,
        "split": {"train": train_set, "test": test_set},
        "coils": list(scfg.coils),
        "refCoil": scfg.ref_coil,
        "plantedCorrespondence": [[l, int(v)] for l, v in corr.pairs],
        "generator": scfg.to_dict(),
    }

    # Refit oracle: rebuild the model exactly as the pipeline will (from
    # the written OBJ files), refit the training recordings with the
    # paper pass settings, and record the achieved residual plus margin.
    rebuilt_corpus = corpus_from_manifest(out_dir, manifest)
    rebuilt, _, _ = build_model(rebuilt_corpus)
    model_tmp = tracker.add(out_dir / "oracle_model.mltm")
    save_model(rebuilt, model_tmp)
    prepared = []
    for utt in train_set:
        rec = load_recording(out_dir / rec_map[utt])
        prepared.append(
            (utt, prepare_recording(rec, scfg.ref_coil, scfg.coils, cfg.transform))
        )
    pass1 = cfg.fit_options("pass1")
    results1 = _map_fits(cfg, model_tmp, rebuilt, corr, pass1, prepared)
    acc = np.zeros(rebuilt.speaker_dim)
    frames = 0
    for _, result in results1:
        acc += result.s.sum(axis=0)
        frames += result.n_frames
    s_hat = acc / frames
    pass2 = cfg.fit_options("pass2", fix_speaker=s_hat)
    results2 = _map_fits(cfg, model_tmp, rebuilt, corr, pass2, prepared)
    refit_mm = float(np.mean([res.residuals.mean() for _, res in results2]))
    model_tmp.unlink()
    tracker.paths.remove(model_tmp)
    manifest["oracle"] = {
        "refitMeanMm": refit_mm,
        "boundMm": 1.5 * refit_mm,
        "pass1": {"alpha": pass1.alpha, "beta": pass1.beta, "c": pass1.c},
        "pass2": {"alpha": pass2.alpha, "beta": pass2.beta, "c": pass2.c},
    }

    with open(tracker.add(out_dir / "corpus.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
    log.info("synthetic corpus: %d utterances, refit oracle %.3f mm",
             len(utterances), refit_mm)
    return manifest


def stage_build_model(cfg: PipelineConfig, tracker: OutputTracker):
    manifest = load_manifest(cfg.path("corpus"))
    corpus = corpus_from_manifest(cfg.path("corpus"), manifest)
    model, _, _ = build_model(corpus)
    path = tracker.add(cfg.path("model"))
    save_model(model, path)
    log.info("model: %d speakers x %d poses, %d vertices -> %s",
             model.speaker_dim, model.pose_dim, model.vertex_count, path)
    return model


def stage_correspond(cfg: PipelineConfig, tracker: OutputTracker) -> Correspondence:
    manifest = load_manifest(cfg.path("corpus"))
    model = load_model(cfg.path("model"))
    train_set, _ = manifest_split(cfg, manifest)
    utterance = cfg.raw["correspondence"].get("utterance") or train_set[0]
    rec = load_prepared(cfg, manifest, utterance)
    corr = estimate_correspondence(model, rec, cfg.coils,
                                   cfg.correspondence_options())
    path = tracker.add(cfg.path("output") / "correspondence.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "pairs": [[l, int(v)] for l, v in corr.pairs],
                "meanDistanceMm": corr.mean_distance_mm,
                "utterance": utterance,
            },
            fh, sort_keys=True, indent=1,
        )
    log.info("correspondence %.3f mm: %s", corr.mean_distance_mm, corr.pairs)
    return corr


def stage_fit(cfg: PipelineConfig, tracker: OutputTracker):
    """Single-pass fit of every utterance with the pass-1 settings."""
    manifest = load_manifest(cfg.path("corpus"))
    model = load_model(cfg.path("model"))
    corr = load_correspondence(cfg, manifest)
    opts = cfg.fit_options("pass1")
    recs = [(utt, load_prepared(cfg, manifest, utt))
            for utt in manifest["utterances"]]
    results = _map_fits(cfg, cfg.path("model"), model, corr, opts, recs)
    out_dir = cfg.path("output") / "fits"
    for utt, result in results:
        save_fit_result(result, tracker.add(out_dir / f"{utt}.json"))
    log.info("fitted %d utterances", len(results))
    return results


def stage_estimate_speaker(cfg: PipelineConfig, tracker: OutputTracker):
    manifest = load_manifest(cfg.path("corpus"))
    model = load_model(cfg.path("model"))
    corr = load_correspondence(cfg, manifest)
    train_set, _ = manifest_split(cfg, manifest)
    recs = [(utt, load_prepared(cfg, manifest, utt)) for utt in train_set]

    pass1 = cfg.fit_options("pass1")
    results1 = _map_fits(cfg, cfg.path("model"), model, corr, pass1, recs)
    acc = np.zeros(model.speaker_dim)
    frames = 0
    for _, result in results1:
        acc += result.s.sum(axis=0)
        frames += result.n_frames
    s_hat = acc / frames

    pass2 = cfg.fit_options("pass2", fix_speaker=s_hat)
    results2 = _map_fits(cfg, cfg.path("model"), model, corr, pass2, recs)

    out = cfg.path("output")
    pose_dir = out / "pose"
    for utt, result in results2:
        save_pose_trajectory(result.pose_trajectory(),
                             tracker.add(pose_dir / f"{utt}.json"))
    refit_mm = float(np.mean([res.residuals.mean() for _, res in results2]))
    with open(tracker.add(out / "speaker.json"), "w", encoding="utf-8") as fh:
        json.dump(
            {
                "speaker": list(s_hat),
                "passResidualMm": refit_mm,
                "trainUtterances": train_set,
                "pass1": {"alpha": pass1.alpha, "beta": pass1.beta, "c": pass1.c},
                "pass2": {"alpha": pass2.alpha, "beta": pass2.beta, "c": pass2.c},
            },
            fh, sort_keys=True, indent=1,
        )
    log.info("speaker estimated over %d utterances, pass-2 residual %.3f mm",
             len(train_set), refit_mm)
    return s_hat, results2


def _stream_specs(cfg: PipelineConfig, streams: dict) -> list:
    """Stream specs from observed dimensions plus the synthesis config."""
    synth_cfg = cfg.raw["synthesis"]
    windows = [(1.0,), (-0.5, 0.0, 0.5)]
    if synth_cfg.get("deltaDelta"):
        windows.append((1.0, -2.0, 1.0))
    voiced = set(synth_cfg.get("voicedStreams", ["f0"]))
    specs = []
    for name in sorted(streams):
        dim = streams[name].shape[1]
        specs.append(StreamSpec(
            name=name,
            dim=dim,
            windows=tuple(tuple(w) for w in windows),
            voiced_aware=name in voiced,
        ))
    return specs


def stage_train(cfg: PipelineConfig, tracker: OutputTracker):
    manifest = load_manifest(cfg.path("corpus"))
    corpus_dir = cfg.path("corpus")
    train_set, _ = manifest_split(cfg, manifest)
    out = cfg.path("output")

    corpus = []
    frame_rate = None
    specs = None
    for utt in train_set:
        seg = parse_labels(corpus_dir / manifest["labels"][utt])
        traj = load_pose_trajectory(out / "pose" / f"{utt}.json")
        streams, rate, _ = load_streams(corpus_dir / manifest["streams"][utt])
        streams = dict(streams)
        streams["pose"] = traj.frames
        if frame_rate is None:
            frame_rate = rate
            specs = _stream_specs(cfg, streams)
        corpus.append((seg, streams))

    model = train(corpus, specs, S=int(cfg.raw["synthesis"]["states"]),
                  frame_rate=frame_rate)
    path = tracker.add(cfg.path("statModel"))
    save_stat_model(model, path)
    for line in model.backoff_report:
        log.info("backoff: %s", line)
    log.info("synthesis model: %d phones x %d states -> %s",
             len(model.phones), model.states, path)
    return model


def stage_synth(cfg: PipelineConfig, tracker: OutputTracker):
    manifest = load_manifest(cfg.path("corpus"))
    corpus_dir = cfg.path("corpus")
    model = load_stat_model(cfg.path("statModel"))
    _, test_set = manifest_split(cfg, manifest)
    out = cfg.path("output")
    speaker_path = out / "speaker.json"
    if not speaker_path.exists():
        raise FileError(f"{speaker_path} not found; run estimate-speaker first")
    with open(speaker_path, "r", encoding="utf-8") as fh:
        speaker = np.asarray(json.load(fh)["speaker"], dtype=np.float64)

    synth_dir = out / "synth"
    for utt in test_set:
        seg = parse_labels(corpus_dir / manifest["labels"][utt])
        imposed, imposed_seg = synthesize(model, seg, condition="imposed")
        free, free_seg = synthesize(model, seg.labels(), condition="free")
        save_streams(imposed, model.frame_rate,
                     tracker.add(synth_dir / f"{utt}.streams.json"),
                     utterance=utt)
        save_labels(free_seg, tracker.add(synth_dir / f"{utt}.free.lab"))
        if "pose" in imposed:
            save_pose_trajectory(
                PoseTrajectory(frame_rate=model.frame_rate, speaker=speaker,
                               frames=imposed["pose"], utterance=utt),
                tracker.add(synth_dir / f"{utt}.pose.json"),
            )
    log.info("synthesized %d test utterances (imposed + free)", len(test_set))
    return test_set


def stage_evaluate(cfg: PipelineConfig, tracker: OutputTracker) -> dict:
    manifest = load_manifest(cfg.path("corpus"))
    corpus_dir = cfg.path("corpus")
    shape_model = load_model(cfg.path("model"))
    corr = load_correspondence(cfg, manifest)
    _, test_set = manifest_split(cfg, manifest)
    out = cfg.path("output")
    synth_dir = out / "synth"
    with open(out / "speaker.json", "r", encoding="utf-8") as fh:
        speaker = np.asarray(json.load(fh)["speaker"], dtype=np.float64)

    report = MetricsReport()
    class_distances: dict = {}
    tongue_means = []
    for utt in test_set:
        ref_seg = parse_labels(corpus_dir / manifest["labels"][utt])
        ref_streams, rate, _ = load_streams(corpus_dir / manifest["streams"][utt])
        ref_rec = load_prepared(cfg, manifest, utt)
        syn_streams, _, _ = load_streams(synth_dir / f"{utt}.streams.json")
        free_seg = parse_labels(synth_dir / f"{utt}.free.lab")

        metrics = {"duration_rmse_ms": duration_rmse(ref_seg, free_seg)}
        if "f0" in ref_streams and "f0" in syn_streams:
            r = ref_streams["f0"][:, 0]
            s = syn_streams["f0"][:, 0]
            metrics["vuv_percent"] = vuv_rate(r, s)
            metrics["f0_rmse_hz"] = rmse_hz(r, s)
            metrics["f0_rmse_cent"] = rmse_cent(r, s)
        if "mgc" in ref_streams and "mgc" in syn_streams:
            metrics["mcd_db"] = mcd(ref_streams["mgc"], syn_streams["mgc"])

        if "pose" in syn_streams:
            virt = virtual_ema(shape_model, corr, syn_streams["pose"], speaker,
                               rate, utterance=utt)
            dists = coil_distances(ref_rec, virt, cfg.coils)
            per_coil = []
            for coil, values in dists.items():
                metrics[f"euclidean_mm/{coil}"] = float(values.mean())
                per_coil.append(values.mean())
            metrics["euclidean_mm/tongue"] = float(np.mean(per_coil))
            tongue_means.append(metrics["euclidean_mm/tongue"])
            for coil, value in dynamics_rmse(ref_rec, virt, cfg.coils).items():
                metrics[f"dynamics_mm_per_frame/{coil}"] = value
            buckets = phone_class_report(dists, ref_seg, rate)
            for (cls, coil), stats in buckets.items():
                if stats["count"]:
                    key = (cls, coil)
                    class_distances.setdefault(key, []).append(stats)
        report.add(utt, metrics, frames=ref_rec.n_frames)

    doc = report.to_json()
    doc["phoneClasses"] = {
        f"{cls}/{coil}": {
            "count": int(sum(s["count"] for s in stats_list)),
            "mean": float(np.mean([s["mean"] for s in stats_list])),
        }
        for (cls, coil), stats_list in sorted(class_distances.items())
    }
    oracle = manifest.get("oracle")
    if oracle and tongue_means:
        doc["tongueMeanMm"] = float(np.mean(tongue_means))
        doc["oracleBoundMm"] = float(oracle["boundMm"])
        doc["withinOracleBound"] = bool(doc["tongueMeanMm"] <= doc["oracleBoundMm"])

    with open(tracker.add(out / "report.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
    with open(tracker.add(out / "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.to_text() + "\n")
    log.info("evaluated %d test utterances", len(test_set))
    return doc


def stage_export_anim(cfg: PipelineConfig, tracker: OutputTracker,
                      trajectory_path) -> list:
    model = load_model(cfg.path("model"))
    traj = load_pose_trajectory(trajectory_path)
    anim_dir = cfg.path("output") / "anim"
    from .model import ModelParams

    frame_files = []
    for t, pose in enumerate(traj.frames):
        mesh = generate(model, ModelParams(traj.speaker, pose))
        rel = f"frame_{t:06d}.obj"
        save_obj(mesh, tracker.add(anim_dir / rel))
        frame_files.append(rel)
    sidecar = {
        "utterance": traj.utterance,
        "frameRate": traj.frame_rate,
        "speaker": list(traj.speaker),
        "frames": [list(row) for row in traj.frames],
        "frameFiles": frame_files,
    }
    with open(tracker.add(anim_dir / "trajectory.json"), "w",
              encoding="utf-8") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=1)
    log.info("exported %d OBJ frames to %s", len(frame_files), anim_dir)
    return frame_files
