"""Metrics and the two headline experiments.

Semantic accuracy comes from template matching against the class
signatures, temporal error from cross-correlating the generated latent's
energy envelope with the ground-truth event indicator, distributional
similarity from a Gaussian Frechet distance over mean-pooled latents.
The two experiment drivers are the conflicting-condition evaluation
(text says one class, video another) and the sweep over the asymmetric
guidance attenuation alpha.
"""

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import diffusion, nn
from .diffusion import GuidanceParams
from .errors import ConfigError, ContractError, DataError
from .rng import generator
from .synth import LATENT_LEN, SCENE_SECONDS, latent_frame
from .training import restore_system, schedule_from_config

FRAME_SECONDS = SCENE_SECONDS / LATENT_LEN
LAG_WINDOW_S = 2.5
MAX_LAG_FRAMES = int(round(LAG_WINDOW_S / FRAME_SECONDS))
DECISION_FLOOR = 0.2

REPORT_CSV_HEADER = ("scene_id", "target_class", "original_class",
                     "predicted_class", "temporal_offset_s", "clap")
SWEEP_CSV_HEADER = ("alpha", "acc", "mean_offset", "frechet", "clap")


def energy_envelope(latent):
    """Per-frame L2 norm with the background median removed."""
    lat = np.asarray(latent, dtype=np.float64)
    if lat.ndim != 2:
        raise ContractError(
            "expected one (frames, channels) latent, got shape %r"
            % (lat.shape,)
        )
    env = np.linalg.norm(lat, axis=1)
    return env - np.median(env)


def event_indicator(event_times, length=LATENT_LEN):
    if len(event_times) == 0:
        raise ContractError("need at least one event time")
    ind = np.zeros(length, dtype=np.float64)
    for t in event_times:
        ind[min(latent_frame(t), length - 1)] = 1.0
    return ind


def temporal_offset(generated, event_times, max_lag=MAX_LAG_FRAMES):
    """|argmax| of envelope/indicator cross-correlation, in seconds.

    Positive internal lags mean the generated events sit later than the
    ground truth; only the magnitude is reported.
    """
    env = energy_envelope(generated)
    ind = event_indicator(event_times, env.shape[0])
    n = env.shape[0]
    best_lag, best_val = 0, -np.inf
    for lag in range(-max_lag, max_lag + 1):
        if lag >= 0:
            val = float(env[lag:] @ ind[: n - lag])
        else:
            val = float(env[: n + lag] @ ind[-lag:])
        if val > best_val:
            best_val, best_lag = val, lag
    return abs(best_lag) * FRAME_SECONDS


ENERGY_GATE_FACTOR = 3.0


def template_correlation(latent, template):
    """Peak energy-gated cosine between the template and latent windows.

    Raw sliding cosine has a chance level around 0.5 here (max over a
    couple hundred noise windows in 40 dims), which would swamp the
    signature separation bound.  Each window's cosine is therefore
    scaled by |w|^2 / (|w|^2 + tau^2) with tau at three times the median
    window norm: burst windows (far above the noise floor) keep their
    cosine, pure-noise windows are driven toward 0, and an all-zero
    latent scores exactly 0.
    """
    lat = np.asarray(latent, dtype=np.float64)
    tem = np.asarray(template, dtype=np.float64)
    if lat.ndim != 2 or tem.ndim != 2 or lat.shape[1] != tem.shape[1]:
        raise ContractError(
            "latent %r and template %r do not align"
            % (lat.shape, tem.shape)
        )
    e = tem.shape[0]
    if lat.shape[0] < e:
        raise ContractError("latent shorter than the template")
    num = np.zeros(lat.shape[0] - e + 1)
    for k in range(lat.shape[1]):
        num += np.correlate(lat[:, k], tem[:, k], mode="valid")
    window_sq = np.maximum(
        np.convolve(np.sum(lat * lat, axis=1), np.ones(e), mode="valid"),
        0.0)
    denom = np.sqrt(window_sq) * np.linalg.norm(tem)
    ok = denom > 1e-12
    cos = np.where(ok, num / np.where(ok, denom, 1.0), 0.0)
    tau_sq = (ENERGY_GATE_FACTOR ** 2) * np.median(window_sq)
    total = window_sq + tau_sq
    gate = np.where(total > 1e-24, window_sq / np.where(total > 1e-24,
                                                       total, 1.0), 0.0)
    return float((cos * gate).max())


def clap_analog_similarity(latent, class_id, signatures):
    """Peak normalized correlation against one class's latent template."""
    table = {s.class_id: s for s in signatures}
    if class_id not in table:
        raise ContractError("unknown class %r" % (class_id,))
    return template_correlation(latent, table[class_id].latent_template)


def classify_latent(latent, signatures, allowed=None, floor=DECISION_FLOOR):
    """Class whose template correlates best, or None below the floor.

    allowed restricts the candidate set; floor=None disables the floor
    (the two-way target-vs-original restriction with the floor off is
    the accuracy metric: a pure argmax between the two captions).
    """
    table = {s.class_id: s for s in signatures}
    candidates = sorted(table) if allowed is None else list(allowed)
    best_id, best_score = None, -np.inf
    for cid in candidates:
        if cid not in table:
            raise ContractError("unknown class %r" % (cid,))
        score = template_correlation(latent, table[cid].latent_template)
        if score > best_score:
            best_id, best_score = cid, score
    if floor is not None and best_score < floor:
        return None
    return best_id


def _pooled(latents):
    arr = np.asarray(latents, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.mean(axis=1)
    if arr.ndim != 2:
        raise ContractError(
            "expected (n, frames, channels) latents or (n, dim) features, "
            "got shape %r" % (arr.shape,)
        )
    return arr


def _sqrtm_psd(mat):
    sym = (mat + mat.T) / 2.0
    w, vectors = np.linalg.eigh(sym)
    w = np.clip(w, 0.0, None)
    return (vectors * np.sqrt(w)) @ vectors.T


def frechet_distance(set_a, set_b):
    """Squared Gaussian Frechet distance between mean-pooled latent sets.

    d^2 = |mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}), with the
    matrix square root taken by symmetric eigendecomposition and
    negative eigenvalues clamped to zero.
    """
    fa, fb = _pooled(set_a), _pooled(set_b)
    if fa.shape[1] != fb.shape[1]:
        raise ContractError(
            "feature dims differ: %d vs %d" % (fa.shape[1], fb.shape[1])
        )
    dim = fa.shape[1]
    for name, f in (("a", fa), ("b", fb)):
        if f.shape[0] < 2 * dim:
            raise ContractError(
                "set %s has %d samples; need at least %d for %d dims"
                % (name, f.shape[0], 2 * dim, dim)
            )
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    cov_a = np.cov(fa, rowvar=False)
    cov_b = np.cov(fb, rowvar=False)
    half_a = _sqrtm_psd(cov_a)
    cross = _sqrtm_psd(half_a @ cov_b @ half_a)
    diff = mu_a - mu_b
    d2 = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b)
               - 2.0 * np.trace(cross))
    return max(d2, 0.0)


def metric_preflight(dataset):
    """Validate the metrics on clean renders before trusting them on
    model output: classification must be perfect and self-alignment
    within one frame.  Raises ContractError on any violation."""
    sigs = dataset.signatures
    checked, misclassified, worst_offset = 0, 0, 0.0
    for rec in dataset.records:
        if not rec.scene.event_times:
            continue
        checked += 1
        pred = classify_latent(rec.latent, sigs)
        if pred != rec.scene.audio_class:
            misclassified += 1
        worst_offset = max(
            worst_offset, temporal_offset(rec.latent, rec.scene.event_times))
    if checked == 0:
        raise ContractError("no scenes with events to validate metrics on")
    if misclassified:
        raise ContractError(
            "clean renders misclassified: %d of %d" % (misclassified, checked)
        )
    if worst_offset > FRAME_SECONDS + 1e-9:
        raise ContractError(
            "clean render self-alignment %.4f s exceeds one frame"
            % worst_offset
        )
    stats = {"n_checked": checked, "classification_accuracy": 1.0,
             "max_offset_s": worst_offset}
    dim = dataset.records[0].latent.shape[1]
    if len(dataset.records) >= 2 * dim:
        clean = np.stack([r.latent for r in dataset.records])
        stats["frechet_self"] = frechet_distance(clean, clean)
        if stats["frechet_self"] >= 1e-6:
            raise ContractError(
                "frechet self-distance %.3e not ~0" % stats["frechet_self"]
            )
    return stats


@dataclass(frozen=True)
class SceneEval:
    scene_id: int
    target_class: int
    original_class: int
    predicted_class: object
    temporal_offset_s: float
    clap: float


@dataclass
class EvalReport:
    """Per-scene outcomes plus aggregates; the scalar aggregates are a
    pure function of the records (the Frechet distance is set-level and
    stored separately)."""

    records: list
    guide: GuidanceParams
    steps: int
    seed: int
    frechet_distance: float
    accuracy: float = None
    mean_offset_s: float = None
    clap_analog_similarity: float = None
    preflight: dict = field(default_factory=dict, repr=False)

    @staticmethod
    def aggregates_from(records):
        if not records:
            raise ContractError("cannot aggregate an empty record list")
        hits = sum(1 for r in records if r.predicted_class == r.target_class)
        return {
            "accuracy": hits / len(records),
            "mean_offset_s": float(
                np.mean([r.temporal_offset_s for r in records])),
            "clap_analog_similarity": float(
                np.mean([r.clap for r in records])),
        }

    @classmethod
    def assemble(cls, records, guide, steps, seed, frechet, preflight=None):
        agg = cls.aggregates_from(records)
        return cls(records=records, guide=guide, steps=steps, seed=seed,
                   frechet_distance=frechet, preflight=preflight or {},
                   **agg)


def report_csv(report):
    """Per-scene rows as CSV text (predicted_class None prints as 'none')."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(REPORT_CSV_HEADER)
    for r in report.records:
        pred = "none" if r.predicted_class is None else r.predicted_class
        writer.writerow([r.scene_id, r.target_class, r.original_class,
                         pred, repr(r.temporal_offset_s), repr(r.clap)])
    return out.getvalue()


def report_json(report):
    return {
        "n": len(report.records),
        "guide": {"gamma": report.guide.gamma,
                  "alpha_asym": report.guide.alpha_asym},
        "steps": report.steps,
        "seed": report.seed,
        "accuracy": report.accuracy,
        "mean_offset_s": report.mean_offset_s,
        "frechet_distance": report.frechet_distance,
        "clap_analog_similarity": report.clap_analog_similarity,
        "preflight": report.preflight,
    }


def _chunk_seed(seed, start):
    return int(generator(seed, "eval", start).integers(0, 2**31 - 1))


def evaluate_system(system, dataset, sched, guide=None, steps=50, seed=0,
                    batch_size=25, binary=True, text_only=False,
                    run_preflight=True):
    """Sample one latent per scene (text = audio class, video = the
    scene's streams) and score it; see the wrappers below for the two
    published protocols.

    binary restricts classification to {audio class, video class};
    text_only drops the adapter and the video stream entirely (the
    backbone baseline).  Results are deterministic in (seed, batch_size).
    """
    records = dataset.records
    if not records:
        raise DataError("dataset has no scenes")
    if guide is not None:
        system = system.with_guide(guide)
    g = system.sys_cfg.guide
    preflight = metric_preflight(dataset) if run_preflight else {}
    frames, channels = records[0].latent.shape
    evals, generated = [], []
    for start in range(0, len(records), batch_size):
        batch = records[start:start + batch_size]
        ids = np.array([r.scene.audio_class for r in batch], dtype=np.int64)
        if text_only:
            pair = system.backbone_only_pair(ids)
        else:
            with nn.no_grad():
                e_v = system.features_for(
                    np.stack([r.avclip for r in batch]),
                    np.stack([r.clip for r in batch]))
            pair = system.model_pair(ids, e_v)
        z = diffusion.sample(
            pair, sched, g, steps, (len(batch), frames, channels),
            _chunk_seed(seed, start))
        generated.append(z)
        for rec, lat in zip(batch, z):
            scene = rec.scene
            allowed, floor = None, DECISION_FLOOR
            if binary:
                allowed, floor = (scene.audio_class, scene.video_class), None
            evals.append(SceneEval(
                scene_id=scene.scene_id,
                target_class=scene.audio_class,
                original_class=scene.video_class,
                predicted_class=classify_latent(
                    lat, dataset.signatures, allowed=allowed, floor=floor),
                temporal_offset_s=temporal_offset(lat, scene.event_times),
                clap=clap_analog_similarity(
                    lat, scene.audio_class, dataset.signatures),
            ))
    frechet = frechet_distance(
        np.concatenate(generated), np.stack([r.latent for r in records]))
    return EvalReport.assemble(evals, g, steps, seed, frechet, preflight)


def disentanglement_eval(ckpt, dataset, guide=None, steps=50, seed=0,
                         batch_size=25):
    """Conflicting-condition protocol: every scene's text names the
    target class while the video carries the original class; accuracy is
    the two-way target-vs-original restriction."""
    system = restore_system(ckpt)
    sched = schedule_from_config(ckpt.config)
    return evaluate_system(system, dataset, sched, guide=guide, steps=steps,
                           seed=seed, batch_size=batch_size, binary=True)


def aligned_eval(ckpt, dataset, guide=None, steps=50, seed=0, batch_size=25):
    """Aligned-scene protocol: full 12-way classification plus the
    Frechet distance against the clean aligned renders."""
    system = restore_system(ckpt)
    sched = schedule_from_config(ckpt.config)
    return evaluate_system(system, dataset, sched, guide=guide, steps=steps,
                           seed=seed, batch_size=batch_size, binary=False)


def alpha_sweep(ckpt, dataset, alphas, gamma=7.0, steps=50, seed=0,
                batch_size=25):
    """One conflicting-condition evaluation per attenuation value.

    Returns (rows, reports) where each row is
    (alpha, acc, mean_offset, frechet, clap)."""
    alphas = [float(a) for a in alphas]
    if not alphas:
        raise ConfigError("alpha sweep needs at least one value")
    for a in alphas:
        if not 0.0 <= a <= 1.0:
            raise ConfigError("alpha values must lie in [0, 1], got %r" % a)
    system = restore_system(ckpt)
    sched = schedule_from_config(ckpt.config)
    preflight = metric_preflight(dataset)
    rows, reports = [], []
    for a in alphas:
        rep = evaluate_system(
            system, dataset, sched, guide=GuidanceParams(gamma, a),
            steps=steps, seed=seed, batch_size=batch_size, binary=True,
            run_preflight=False)
        rep.preflight = preflight
        rows.append((a, rep.accuracy, rep.mean_offset_s,
                     rep.frechet_distance, rep.clap_analog_similarity))
        reports.append(rep)
    return rows, reports


def sweep_csv(rows):
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(SWEEP_CSV_HEADER)
    for row in rows:
        writer.writerow([repr(float(v)) for v in row])
    return out.getvalue()


def write_sweep_plot(path, rows):
    """Line plot of accuracy and mean offset against alpha; bytes are a
    pure function of the rows (metadata stripped)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    alphas = [r[0] for r in rows]
    fig, ax_acc = plt.subplots(figsize=(6.0, 4.0), dpi=120)
    ax_off = ax_acc.twinx()
    ax_acc.plot(alphas, [r[1] for r in rows], "o-", color="tab:blue",
                label="accuracy")
    ax_off.plot(alphas, [r[2] for r in rows], "s--", color="tab:red",
                label="mean offset (s)")
    ax_acc.set_xlabel("alpha")
    ax_acc.set_ylabel("accuracy", color="tab:blue")
    ax_off.set_ylabel("mean offset (s)", color="tab:red")
    ax_acc.set_ylim(0.0, 1.05)
    fig.legend(loc="lower left", bbox_to_anchor=(0.12, 0.12))
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def save_report(report, csv_path=None, json_path=None, extra=None):
    """Write the per-scene CSV and/or the aggregate JSON for a report."""
    if csv_path is not None:
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(report_csv(report))
    if json_path is not None:
        payload = report_json(report)
        if extra:
            payload.update(extra)
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
