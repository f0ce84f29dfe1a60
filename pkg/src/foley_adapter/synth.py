"""Synthetic scene generator: paired video features, text labels, and
target latents with independently controllable semantics and timing.

A scene is a 10 s clip with 1 to 4 sparse events. Semantics live in
class templates, timing in event placement. Conflicted scenes pair the
video of one class with the audio content of another, which is what the
disentanglement protocol measures against.
"""

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from hashlib import sha256

import numpy as np

from .errors import ContractError, CorruptionError, DataError, StoreError
from .features import FPS5_GRID, SEGMENT_GRID, FeatureStream
from .rng import generator
from .tensor_store import read_tensors, write_tensors

NUM_CLASSES = 12
LATENT_LEN = 216
LATENT_DIM = 8
FEATURE_DIM = 16
SCENE_SECONDS = 10.0

BURST_LEN = 5
BURST_ENVELOPE = np.array([0.35, 0.75, 1.0, 0.75, 0.35])
LATENT_BURST_AMP = 4.0
FEATURE_BURST_AMP = 4.0
LATENT_NOISE_STD = 0.05
FEATURE_NOISE_STD = 0.1
CLIP_NOISE_STD = 0.05

# Video templates mix a class-independent onset cue with a class part so
# timing is easy to read off while semantics only leak weakly. The class
# part must stay well below the onset part: the adapter trains on
# aligned scenes, where video-class content predicts the audio just as
# well as the text does, and guided sampling amplifies whatever video
# semantics the adapter absorbed. Too strong a class part lets the video
# override the text on conflicted scenes.
SHARED_ONSET_WEIGHT = 0.8
CLASS_PART_WEIGHT = 0.25

EVENT_MARGIN = 0.3
MIN_EVENT_SEPARATION = 1.0
MAX_EVENTS = 4

# Rejection threshold while drawing latent templates; tighter than the
# 0.3 the invariant promises so the bound holds with margin.
_MAX_TEMPLATE_COS = 0.26
_MAX_DRAWS = 1000
_PACK_RESTARTS = 20
_PACK_SCHEDULE = ((1000, 0.5, 3), (1500, 0.5, 5), (1500, 1.0, 7))

MANIFEST_NAME = "manifest.json"
SIGNATURES_NAME = "signatures.caft"
DATASET_VERSION = 1


def latent_frame(t, length=LATENT_LEN, seconds=SCENE_SECONDS):
    """Latent frame index nearest to time t (seconds)."""
    return int(round(t * length / seconds))


@dataclass
class Scene:
    """Labels and timing for one clip; arrays are rendered separately."""

    scene_id: int
    video_class: int
    audio_class: int
    event_times: list
    seed: int

    def __post_init__(self):
        for cls in (self.video_class, self.audio_class):
            if not 0 <= cls < NUM_CLASSES:
                raise ContractError("class id %r out of range" % (cls,))
        times = [float(t) for t in self.event_times]
        if len(times) > MAX_EVENTS:
            raise ContractError("at most %d events per scene" % MAX_EVENTS)
        if times != sorted(times):
            raise ContractError("event times must be sorted")
        for t in times:
            if not 0.0 <= t < SCENE_SECONDS:
                raise ContractError("event time %r outside the scene" % t)
        for a, b in zip(times, times[1:]):
            if b - a < MIN_EVENT_SEPARATION - 1e-9:
                raise ContractError(
                    "events %.3f and %.3f closer than %.1f s"
                    % (a, b, MIN_EVENT_SEPARATION)
                )
        self.event_times = times

    @property
    def conflicted(self):
        return self.audio_class != self.video_class


@dataclass
class ClassSignature:
    """Unit-norm burst patterns carrying one class's content."""

    class_id: int
    latent_template: np.ndarray
    feature_template: np.ndarray


def _unit(x):
    return x / np.linalg.norm(x)


def _unit_rows(mat):
    return mat / np.linalg.norm(mat, axis=1, keepdims=True)


def _pack_directions(k, dim, rng, max_cos):
    """k unit vectors with pairwise |cosine| <= max_cos.

    Random draws alone cannot reach the needed separation for 12
    vectors in 8 dims (the coherence lower bound there is ~0.213), so
    each random start is annealed by gradient repulsion on sums of
    even powers of the pairwise inner products, restarting from a fresh
    draw when a run stalls in a bad local optimum."""
    for _ in range(_PACK_RESTARTS):
        u = _unit_rows(rng.normal(size=(k, dim)))
        for iters, step, power in _PACK_SCHEDULE:
            for _ in range(iters):
                gram = u @ u.T
                np.fill_diagonal(gram, 0.0)
                u = _unit_rows(u - step * (gram ** power) @ u)
        gram = u @ u.T
        np.fill_diagonal(gram, 0.0)
        if np.abs(gram).max() <= max_cos:
            return u
    raise DataError(
        "could not pack %d directions in %d dims below cosine %.3f"
        % (k, dim, max_cos)
    )


def _burst_template(direction):
    # Rank-1 burst: every row points along the class direction, scaled
    # by the envelope.  Energy then follows the envelope exactly (peak
    # at the event frame) and any shifted window of one class's burst
    # keeps its cosine against another class's template bounded by the
    # direction separation.
    return _unit(BURST_ENVELOPE[:, None] * direction[None, :])


def make_signatures(k=NUM_CLASSES, seed=0):
    """Draw k class signatures whose latent templates stay well separated
    (pairwise |cosine| bounded via packed class directions)."""
    if k < 2:
        raise ContractError("need at least 2 classes, got %d" % k)
    rng = generator(seed, "signatures")
    onset_dir = _unit(rng.normal(size=FEATURE_DIM))
    latent_dirs = _pack_directions(k, LATENT_DIM, rng, _MAX_TEMPLATE_COS)
    sigs = []
    for idx in range(k):
        class_dir = _unit(rng.normal(size=FEATURE_DIM))
        feat = _burst_template(_unit(SHARED_ONSET_WEIGHT * onset_dir
                                     + CLASS_PART_WEIGHT * class_dir))
        sigs.append(ClassSignature(
            idx, _burst_template(latent_dirs[idx]).astype(np.float32),
            feat.astype(np.float32)))
    return sigs


def sample_scene(rng, conflict, scene_id=0, seed=None):
    """Draw labels and 1 to 4 event times (min separation 1 s)."""
    if seed is None:
        seed = int(rng.integers(0, 2 ** 63))
    video_class = int(rng.integers(0, NUM_CLASSES))
    n_events = int(rng.integers(1, MAX_EVENTS + 1))
    lo, hi = EVENT_MARGIN, SCENE_SECONDS - EVENT_MARGIN
    for _ in range(_MAX_DRAWS):
        times = np.sort(rng.uniform(lo, hi, size=n_events))
        if n_events == 1 or np.min(np.diff(times)) >= MIN_EVENT_SEPARATION:
            break
    else:
        raise DataError("could not place %d separated events" % n_events)
    if conflict:
        audio_class = (video_class + 1
                       + int(rng.integers(0, NUM_CLASSES - 1))) % NUM_CLASSES
    else:
        audio_class = video_class
    return Scene(scene_id, video_class, audio_class,
                 [float(t) for t in times], seed)


def _add_bursts(grid, template, amp, event_times):
    half = BURST_LEN // 2
    for t in event_times:
        f0 = latent_frame(t)
        grid[f0 - half:f0 + half + 1] += amp * template
    return grid


def render_target_latent(scene, signatures):
    """(216, 8) latent: low background noise plus the audio class's
    template at every video event time."""
    rng = generator(scene.seed, "latent")
    z = rng.normal(0.0, LATENT_NOISE_STD, size=(LATENT_LEN, LATENT_DIM))
    tpl = signatures[scene.audio_class].latent_template.astype(np.float64)
    _add_bursts(z, tpl, LATENT_BURST_AMP, scene.event_times)
    return z.astype(np.float32)


def render_video_features(scene, signatures):
    """Dense stream: noise plus the video class's burst template at each
    event. Sparse stream: a slow class component with weak event bumps."""
    sig = signatures[scene.video_class]
    rng = generator(scene.seed, "avclip")
    av = rng.normal(0.0, FEATURE_NOISE_STD, size=(LATENT_LEN, FEATURE_DIM))
    _add_bursts(av, sig.feature_template.astype(np.float64),
                FEATURE_BURST_AMP, scene.event_times)

    rng = generator(scene.seed, "clip")
    clip = rng.normal(0.0, CLIP_NOISE_STD, size=(50, FEATURE_DIM))
    class_dir = _unit(sig.feature_template.astype(np.float64).mean(axis=0))
    phase = 2.0 * np.pi * scene.video_class / NUM_CLASSES
    slow = 0.8 + 0.2 * np.sin(np.linspace(0.0, 2.0 * np.pi, 50) + phase)
    clip += slow[:, None] * class_dir
    bump = np.array([0.5, 1.0, 0.5])
    for t in scene.event_times:
        f5 = int(round(t * 5.0))
        for off, w in zip((-1, 0, 1), bump):
            j = f5 + off
            if 0 <= j < 50:
                clip[j] += 0.5 * w * class_dir
    return (
        FeatureStream(SEGMENT_GRID, av.astype(np.float32)),
        FeatureStream(FPS5_GRID, clip.astype(np.float32)),
    )


@dataclass
class SceneRecord:
    """One manifest row plus its loaded arrays."""

    scene: Scene
    avclip: np.ndarray
    clip: np.ndarray
    latent: np.ndarray


@dataclass
class Dataset:
    seed: int
    k: int
    conflict_ratio: float
    signatures: list
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)


def _worker_count(workers):
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get("FOLEY_ADAPTER_THREADS", "")
    return max(1, int(env)) if env else 1


def _render_one(master_seed, ratio, sigs, index):
    conflict = bool(generator(master_seed, "conflict", index).uniform() < ratio)
    rng = generator(master_seed, "scene", index)
    scene = sample_scene(rng, conflict, scene_id=index)
    av, clip = render_video_features(scene, sigs)
    latent = render_target_latent(scene, sigs)
    return scene, av, clip, latent


def scene_meta(scene):
    """JSON-ready description of a scene's labels and event times."""
    return {
        "scene_id": scene.scene_id,
        "video_class": scene.video_class,
        "audio_class": scene.audio_class,
        "event_times": scene.event_times,
        "conflict": scene.conflicted,
        "seed": scene.seed,
    }


def make_dataset(n, conflict_ratio, seed, path, k=NUM_CLASSES, workers=None):
    """Write n scenes plus a manifest to a directory; a pure function of
    its arguments down to the bytes."""
    if n < 1:
        raise ContractError("dataset size must be >= 1, got %d" % n)
    if not 0.0 <= conflict_ratio <= 1.0:
        raise ContractError(
            "conflict_ratio must be in [0, 1], got %r" % conflict_ratio
        )
    os.makedirs(path, exist_ok=True)
    sigs = make_signatures(k, seed)
    write_tensors(
        os.path.join(path, SIGNATURES_NAME),
        {
            "latent_templates": np.stack(
                [s.latent_template for s in sigs]),
            "feature_templates": np.stack(
                [s.feature_template for s in sigs]),
        },
        manifest={"k": k, "seed": seed},
    )

    def job(index):
        return _render_one(seed, conflict_ratio, sigs, index)

    with ThreadPoolExecutor(max_workers=_worker_count(workers)) as pool:
        rendered = list(pool.map(job, range(n)))

    scene_rows = []
    for scene, av, clip, latent in rendered:
        fname = "scene_%05d.caft" % scene.scene_id
        fpath = os.path.join(path, fname)
        # Scene metadata rides inside the tensor file too, so a single
        # scene file is usable (and auditable) on its own.
        write_tensors(fpath, {
            "avclip": av.frames, "clip": clip.frames, "latent": latent,
        }, manifest=scene_meta(scene))
        with open(fpath, "rb") as fh:
            digest = sha256(fh.read()).hexdigest()
        row = dict(scene_meta(scene), file=fname, sha256=digest)
        scene_rows.append(row)
    manifest = {
        "format_version": DATASET_VERSION,
        "n": n,
        "k": k,
        "seed": seed,
        "conflict_ratio": conflict_ratio,
        "scenes": scene_rows,
    }
    with open(os.path.join(path, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    return manifest


def load_signatures(path):
    tensors, meta = read_tensors(os.path.join(path, SIGNATURES_NAME))
    lat = tensors["latent_templates"]
    feat = tensors["feature_templates"]
    return [ClassSignature(i, lat[i], feat[i]) for i in range(meta["k"])]


def load_dataset(path, verify=True):
    """Read a dataset directory back into memory, checking digests."""
    mpath = os.path.join(path, MANIFEST_NAME)
    try:
        with open(mpath, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise StoreError("no dataset manifest at %s" % mpath) from exc
    except json.JSONDecodeError as exc:
        raise CorruptionError("unreadable manifest at %s" % mpath) from exc
    if manifest.get("format_version") != DATASET_VERSION:
        raise CorruptionError(
            "dataset version %r unsupported (want %d)"
            % (manifest.get("format_version"), DATASET_VERSION)
        )
    ds = Dataset(
        seed=manifest["seed"], k=manifest["k"],
        conflict_ratio=manifest["conflict_ratio"],
        signatures=load_signatures(path),
    )
    for row in manifest["scenes"]:
        fpath = os.path.join(path, row["file"])
        if verify:
            with open(fpath, "rb") as fh:
                digest = sha256(fh.read()).hexdigest()
            if digest != row["sha256"]:
                raise CorruptionError(
                    "%s does not match its manifest digest" % fpath
                )
        tensors, _ = read_tensors(fpath)
        scene = Scene(row["scene_id"], row["video_class"],
                      row["audio_class"], row["event_times"], row["seed"])
        ds.records.append(SceneRecord(
            scene, tensors["avclip"], tensors["clip"], tensors["latent"],
        ))
    return ds


def load_scene_file(path):
    """One self-contained scene file back into a SceneRecord."""
    try:
        tensors, meta = read_tensors(path)
    except FileNotFoundError as exc:
        raise StoreError("no scene file at %s" % path) from exc
    if not isinstance(meta, dict) or "scene_id" not in meta:
        raise CorruptionError("%s carries no scene metadata" % path)
    for key in ("avclip", "clip", "latent"):
        if key not in tensors:
            raise CorruptionError("%s is missing the %r tensor" % (path, key))
    scene = Scene(meta["scene_id"], meta["video_class"], meta["audio_class"],
                  meta["event_times"], meta["seed"])
    return SceneRecord(scene, tensors["avclip"], tensors["clip"],
                       tensors["latent"])
