"""synth.py — Grammar-driven synthetic episodes, JSONL feature files, coordinate-mode leaves.

The sampler plants a known parse in feature space:

  * every class has an actor-dynamics prototype; classes of one interactive
    type share it, so the actor alone says "some object interaction" but not
    which one;
  * the interacting object/human candidate carries its class prototype plus a
    per-kind manipulation marker, distractors carry other classes' prototypes;
  * long-range classes label a segment of clips that share one ambiguous
    dynamics prototype and are told apart only by a cue planted in a single
    clip within ±T of every segment clip.
"""

from __future__ import annotations

import hashlib
import json
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field, replace
from itertools import product
from pathlib import Path

import numpy as np

from gcm.config import FEATURES_FILENAME, MANIFEST_FILENAME, DataConfig, GcmConfig
from gcm.tensor import DimensionError

MIN_PROTOTYPE_ANGLE_DEG = 10.0


class SchemaError(ValueError):
    """A feature-file record does not match the JSONL schema."""

    def __init__(self, line: int, message: str) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


# ── Clips ──────────────────────────────────────────────────────────────────────


@dataclass
class Candidate:
    feature: np.ndarray
    confidence: float
    box: tuple[float, float, float, float]
    candidate_id: int


@dataclass
class PlantedTruth:
    object_id: int | None = None
    human_id: int | None = None
    cue_time: int | None = None


@dataclass
class FeatureClip:
    clip_id: str
    video_id: str
    clip_time: int
    actor_feature: np.ndarray
    objects: list[Candidate]
    humans: list[Candidate]
    labels: np.ndarray
    truth: PlantedTruth | None = None
    actor_id: int = 0


def top_candidates(candidates: Sequence[Candidate], n_max: int) -> list[Candidate]:
    """Keep the *n_max* most confident candidates, returned in id order."""
    ranked = sorted(candidates, key=lambda c: (-c.confidence, c.candidate_id))[:n_max]
    return sorted(ranked, key=lambda c: c.candidate_id)


def expand_box(box: Sequence[float], ratio: float) -> tuple[float, float, float, float]:
    """Grow each side by *ratio* times the box extent, clipped to the unit square."""
    x1, y1, x2, y2 = box
    w, h = x2 - x1, y2 - y1
    return (
        max(0.0, x1 - ratio * w),
        max(0.0, y1 - ratio * h),
        min(1.0, x2 + ratio * w),
        min(1.0, y2 + ratio * h),
    )


# ── Grammar spec ───────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class ClassRecipe:
    name: str
    itype: str  # body | object | human
    dynamics: str  # actor prototype key
    partner: str | None = None  # object/human prototype key
    cue: str | None = None  # long-range cue prototype key


@dataclass(frozen=True)
class LongRangeRule:
    classes: tuple[str, ...] = ()
    max_offset: int = 30
    segment_length: int = 5
    p_video: float = 0.8


@dataclass
class GrammarSpec:
    vocab: tuple[ClassRecipe, ...]
    d_leaf: int
    prototypes: dict[str, np.ndarray]
    noise_sigma: float
    concurrency: tuple[tuple[tuple[str, ...], float], ...]
    long_range: LongRangeRule = field(default_factory=LongRangeRule)
    n_candidates: int = 5
    clips_per_video: int = 61
    marker_gain: float = 1.0
    cue_gain: float = 2.0

    def __post_init__(self) -> None:
        names = [r.name for r in self.vocab]
        if len(set(names)) != len(names):
            raise ValueError("grammar: duplicate class names")
        for recipe in self.vocab:
            for key in (recipe.dynamics, recipe.partner, recipe.cue):
                if key is not None and key not in self.prototypes:
                    raise ValueError(f"grammar: class {recipe.name} needs prototype {key!r}")
        total = sum(p for _, p in self.concurrency)
        if self.concurrency and abs(total - 1.0) > 1e-9:
            raise ValueError(f"grammar: concurrency probabilities sum to {total}")
        known = set(names)
        for combo, _ in self.concurrency:
            unknown = set(combo) - known
            if unknown:
                raise ValueError(f"grammar: concurrency set names unknown classes {sorted(unknown)}")

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(r.name for r in self.vocab)

    @property
    def interactive_types(self) -> tuple[str, ...]:
        return tuple(r.itype for r in self.vocab)

    def index(self, name: str) -> int:
        return self.class_names.index(name)

    def marginals(self) -> np.ndarray:
        """Per-class probability of appearing in a clip's concurrent set."""
        out = np.zeros(len(self.vocab))
        for combo, p in self.concurrency:
            for name in combo:
                out[self.index(name)] += p
        return out

    def to_dict(self) -> dict:
        return {
            "vocab": [
                {"name": r.name, "type": r.itype, "dynamics": r.dynamics, "partner": r.partner, "cue": r.cue}
                for r in self.vocab
            ],
            "d_leaf": self.d_leaf,
            "prototypes": {k: self.prototypes[k].tolist() for k in sorted(self.prototypes)},
            "noise_sigma": self.noise_sigma,
            "concurrency": [[list(c), p] for c, p in self.concurrency],
            "long_range": {
                "classes": list(self.long_range.classes),
                "max_offset": self.long_range.max_offset,
                "segment_length": self.long_range.segment_length,
                "p_video": self.long_range.p_video,
            },
            "n_candidates": self.n_candidates,
            "clips_per_video": self.clips_per_video,
            "marker_gain": self.marker_gain,
            "cue_gain": self.cue_gain,
        }

    def spec_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def model_config(self, base: GcmConfig) -> GcmConfig:
        """*base* with the leaf size and class table of this grammar."""
        return replace(
            base,
            d_leaf=self.d_leaf,
            n_classes=len(self.vocab),
            interactive_types=self.interactive_types,
            class_names=self.class_names,
        )


def unit_prototypes(keys: Sequence[str], d: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Draw unit vectors pairwise more than ``MIN_PROTOTYPE_ANGLE_DEG`` apart."""
    limit = np.cos(np.deg2rad(MIN_PROTOTYPE_ANGLE_DEG))
    out: dict[str, np.ndarray] = {}
    for key in keys:
        for _ in range(1000):
            v = rng.normal(size=d)
            v /= np.linalg.norm(v)
            if all(abs(float(v @ u)) < limit for u in out.values()):
                out[key] = v
                break
        else:
            raise ValueError(f"could not place {len(keys)} distinct prototypes in {d} dims")
    return out


def build_grammar(data: DataConfig, d_leaf: int, t_window: int = 30) -> GrammarSpec:
    """The default vocabulary: body / object / human / long-range classes."""
    vocab: list[ClassRecipe] = []
    vocab += [ClassRecipe(f"body_{i}", "body", f"dyn_body_{i}") for i in range(data.n_body)]
    vocab += [ClassRecipe(f"object_{i}", "object", "dyn_object", partner=f"obj_{i}") for i in range(data.n_object)]
    vocab += [ClassRecipe(f"human_{i}", "human", "dyn_human", partner=f"hum_{i}") for i in range(data.n_human)]
    vocab += [
        ClassRecipe(f"long_range_{i}", "body", "dyn_long_range", cue=f"cue_{i}")
        for i in range(data.n_long_range)
    ]

    keys = sorted(
        {r.dynamics for r in vocab}
        | {r.partner for r in vocab if r.partner}
        | {r.cue for r in vocab if r.cue}
        | {"marker_object", "marker_human", "clutter_object", "clutter_human"}
    )
    prototypes = unit_prototypes(keys, d_leaf, np.random.default_rng(data.seed))

    body = [r.name for r in vocab if r.itype == "body" and r.cue is None]
    objects = [r.name for r in vocab if r.itype == "object"]
    humans = [r.name for r in vocab if r.itype == "human"]
    concurrency = []
    obj_opts = [(None, 1.0 - data.p_object)] + [(n, data.p_object / len(objects)) for n in objects] if objects else [(None, 1.0)]
    hum_opts = [(None, 1.0 - data.p_human)] + [(n, data.p_human / len(humans)) for n in humans] if humans else [(None, 1.0)]
    body_opts = [(n, 1.0 / len(body)) for n in body] if body else [(None, 1.0)]
    for (b, pb), (o, po), (h, ph) in product(body_opts, obj_opts, hum_opts):
        p = pb * po * ph
        if p > 0:
            concurrency.append((tuple(n for n in (b, o, h) if n is not None), p))
    total = sum(p for _, p in concurrency)
    concurrency = [(c, p / total) for c, p in concurrency]

    return GrammarSpec(
        vocab=tuple(vocab),
        d_leaf=d_leaf,
        prototypes=prototypes,
        noise_sigma=data.noise_sigma,
        concurrency=tuple(concurrency),
        long_range=LongRangeRule(
            classes=tuple(r.name for r in vocab if r.cue is not None),
            max_offset=t_window,
            segment_length=data.segment_length,
            p_video=data.p_long_range,
        ),
        n_candidates=data.n_candidates,
        clips_per_video=data.clips_per_video,
        marker_gain=data.marker_gain,
        cue_gain=data.cue_gain,
    )


# ── Sampling ───────────────────────────────────────────────────────────────────


def _random_box(rng: np.random.Generator) -> tuple[float, float, float, float]:
    w, h = rng.uniform(0.1, 0.3, size=2)
    x1 = rng.uniform(0.0, 1.0 - w)
    y1 = rng.uniform(0.0, 1.0 - h)
    return (float(x1), float(y1), float(x1 + w), float(y1 + h))


def _plan_long_range(
    spec: GrammarSpec, rng: np.random.Generator
) -> tuple[dict[int, tuple[str, int]], dict[int, tuple[str, str]]]:
    """Pick a labelled segment and its cue clip; returns ``({t: (class, cue_t)}, {cue_t: (class, cue key)})``."""
    rule = spec.long_range
    n = spec.clips_per_video
    if not rule.classes or rule.max_offset < 1 or rng.random() >= rule.p_video:
        return {}, {}
    name = rule.classes[int(rng.integers(len(rule.classes)))]
    seg_len = min(rule.segment_length, n - 1, rule.max_offset)
    start = int(rng.integers(0, n - seg_len + 1))
    segment = range(start, start + seg_len)
    lo = max(0, start + seg_len - 1 - rule.max_offset)
    hi = min(n - 1, start + rule.max_offset)
    choices = [t for t in range(lo, hi + 1) if t not in segment]
    if not choices:
        return {}, {}
    cue_t = choices[int(rng.integers(len(choices)))]
    cue_key = next(r.cue for r in spec.vocab if r.name == name)
    assert cue_key is not None
    return {t: (name, cue_t) for t in segment}, {cue_t: (name, cue_key)}


def _partner_candidates(
    spec: GrammarSpec, kind: str, active: str | None, rng: np.random.Generator
) -> tuple[list[Candidate], int | None]:
    protos = spec.prototypes
    pool_classes = [r for r in spec.vocab if r.itype == kind]
    clutter = protos[f"clutter_{kind}"]
    marker = protos[f"marker_{kind}"]
    if not pool_classes:
        return [], None
    true_idx = int(rng.integers(spec.n_candidates)) if active is not None else None
    active_recipe = next((r for r in pool_classes if r.name == active), None)
    off_class = [protos[r.partner] for r in pool_classes if r.name != active and r.partner] + [clutter]
    out = []
    for j in range(spec.n_candidates):
        if j == true_idx:
            assert active_recipe is not None and active_recipe.partner is not None
            base = protos[active_recipe.partner] + spec.marker_gain * marker
        else:
            base = off_class[int(rng.integers(len(off_class)))]
        feat = base + rng.normal(0.0, spec.noise_sigma, size=spec.d_leaf) if spec.noise_sigma > 0 else base.copy()
        out.append(Candidate(feat, float(rng.uniform(0.3, 1.0)), _random_box(rng), j))
    return out, true_idx


def sample_episode(spec: GrammarSpec, rng: np.random.Generator, video_id: str = "v0000") -> list[FeatureClip]:
    """Sample one video: ``clips_per_video`` keyframes at t = 0, 1, ... seconds."""
    protos = spec.prototypes
    by_name = {r.name: r for r in spec.vocab}
    probs = np.array([p for _, p in spec.concurrency])
    segment, cues = _plan_long_range(spec, rng)
    clips = []
    for t in range(spec.clips_per_video):
        combo = spec.concurrency[int(rng.choice(len(probs), p=probs))][0] if len(probs) else ()
        labels = np.zeros(len(spec.vocab), dtype=np.int8)
        actor = np.zeros(spec.d_leaf)
        for name in combo:
            actor += protos[by_name[name].dynamics]
            labels[spec.index(name)] = 1
        truth = PlantedTruth()
        if t in segment:
            name, cue_t = segment[t]
            actor += protos[by_name[name].dynamics]
            labels[spec.index(name)] = 1
            truth.cue_time = cue_t
        if t in cues:
            # the cue clip shows the long-range action itself
            name, cue_key = cues[t]
            actor += spec.cue_gain * protos[cue_key]
            labels[spec.index(name)] = 1
        if spec.noise_sigma > 0:
            actor += rng.normal(0.0, spec.noise_sigma, size=spec.d_leaf)

        active_obj = next((n for n in combo if by_name[n].itype == "object"), None)
        active_hum = next((n for n in combo if by_name[n].itype == "human"), None)
        objects, truth.object_id = _partner_candidates(spec, "object", active_obj, rng)
        humans, truth.human_id = _partner_candidates(spec, "human", active_hum, rng)
        clips.append(
            FeatureClip(
                clip_id=f"{video_id}_{t:04d}",
                video_id=video_id,
                clip_time=t,
                actor_feature=actor,
                objects=objects,
                humans=humans,
                labels=labels,
                truth=truth,
            )
        )
    return clips


def noise_clips(
    config: GcmConfig, n_clips: int, rng: np.random.Generator, video_id: str = "v0000"
) -> list[FeatureClip]:
    """Unstructured Gaussian clips with random labels and candidate counts (0..cap)."""
    clips = []
    for t in range(n_clips):

        def cands(cap: int) -> list[Candidate]:
            n = int(rng.integers(0, cap + 1))
            return [
                Candidate(rng.normal(size=config.d_leaf), float(rng.uniform()), _random_box(rng), j)
                for j in range(n)
            ]

        clips.append(
            FeatureClip(
                clip_id=f"{video_id}_{t:04d}",
                video_id=video_id,
                clip_time=t,
                actor_feature=rng.normal(size=config.d_leaf),
                objects=cands(config.n_obj_max),
                humans=cands(config.n_hum_max),
                labels=rng.integers(0, 2, size=config.n_classes).astype(np.int8),
            )
        )
    return clips


def split_videos(video_ids: Sequence[str], val_fraction: float, rng: np.random.Generator) -> dict[str, list[str]]:
    """Disjoint train/val video lists (val gets ``round(n * val_fraction)`` videos)."""
    order = rng.permutation(len(video_ids))
    n_val = int(round(len(video_ids) * val_fraction))
    val = sorted(video_ids[i] for i in order[:n_val])
    train = sorted(video_ids[i] for i in order[n_val:])
    return {"train": train, "val": val}


def _videos(spec: GrammarSpec, n_videos: int, seed: int) -> Iterator[list[FeatureClip]]:
    rng = np.random.default_rng(seed)
    for v in range(n_videos):
        yield sample_episode(spec, rng, video_id=f"v{v:04d}")


def sample_dataset(
    spec: GrammarSpec, n_videos: int, seed: int, val_fraction: float = 0.2
) -> tuple[list[FeatureClip], dict[str, list[str]]]:
    """In-memory twin of :func:`generate_dataset` (same clips, same split)."""
    clips = [c for video in _videos(spec, n_videos, seed) for c in video]
    ids = [f"v{v:04d}" for v in range(n_videos)]
    return clips, split_videos(ids, val_fraction, np.random.default_rng(seed + 1))


# ── JSONL files ────────────────────────────────────────────────────────────────


def _sig9(values) -> list[float]:
    return [float(f"{x:.9g}") for x in values]


def clip_record(clip: FeatureClip) -> dict:
    def cand(c: Candidate) -> dict:
        return {"feat": _sig9(c.feature), "conf": float(f"{c.confidence:.9g}"), "box": _sig9(c.box)}

    truth = None
    if clip.truth is not None:
        truth = {"object": clip.truth.object_id, "human": clip.truth.human_id, "cue_time": clip.truth.cue_time}
    return {
        "clip_id": clip.clip_id,
        "video_id": clip.video_id,
        "t": clip.clip_time,
        "actor_id": clip.actor_id,
        "actor": _sig9(clip.actor_feature),
        "objects": [cand(c) for c in clip.objects],
        "humans": [cand(c) for c in clip.humans],
        "labels": [int(x) for x in clip.labels],
        "truth": truth,
    }


def generate_dataset(
    spec: GrammarSpec, n_videos: int, seed: int, path: Path, val_fraction: float = 0.2
) -> dict:
    """Write ``features.jsonl`` + ``manifest.json`` under *path*; return the manifest.

    Same (spec, n_videos, seed) always produces byte-identical files.
    """
    path.mkdir(parents=True, exist_ok=True)
    n_clips = 0
    with (path / FEATURES_FILENAME).open("w", encoding="utf-8", newline="\n") as fh:
        for video in _videos(spec, n_videos, seed):
            for clip in video:
                fh.write(json.dumps(clip_record(clip)) + "\n")
                n_clips += 1
    ids = [f"v{v:04d}" for v in range(n_videos)]
    manifest = {
        "seed": seed,
        "spec_hash": spec.spec_hash(),
        "splits": split_videos(ids, val_fraction, np.random.default_rng(seed + 1)),
        "n_videos": n_videos,
        "n_clips": n_clips,
        "d_leaf": spec.d_leaf,
        "classes": [{"name": r.name, "type": r.itype} for r in spec.vocab],
        "features": FEATURES_FILENAME,
    }
    (path / MANIFEST_FILENAME).write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return manifest


def read_manifest(path: Path) -> dict:
    """Load ``manifest.json`` from a dataset directory."""
    manifest_path = path / MANIFEST_FILENAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"No {MANIFEST_FILENAME} in {path}")
    return json.loads(manifest_path.read_text(encoding="utf-8"))


_REQUIRED = ("clip_id", "video_id", "t", "actor", "objects", "humans", "labels")


def _floats(line: int, where: str, value, n: int | None = None) -> np.ndarray:
    if not isinstance(value, list) or not all(
        isinstance(x, (int, float)) and not isinstance(x, bool) for x in value
    ):
        raise SchemaError(line, f"{where} must be a list of numbers")
    arr = np.asarray(value, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise SchemaError(line, f"{where} has non-finite values")
    if n is not None and arr.size != n:
        raise DimensionError(f"line {line}: {where} has {arr.size} values, expected {n}")
    return arr


def _parse_candidates(line: int, kind: str, value, d_leaf: int, expand_ratio: float | None) -> list[Candidate]:
    if not isinstance(value, list):
        raise SchemaError(line, f"{kind} must be a list")
    out = []
    for j, entry in enumerate(value):
        if not isinstance(entry, dict) or not {"feat", "conf", "box"} <= entry.keys():
            raise SchemaError(line, f"{kind}[{j}] needs feat, conf and box")
        feat = _floats(line, f"{kind}[{j}].feat", entry["feat"], d_leaf)
        conf = entry["conf"]
        if not isinstance(conf, (int, float)) or not 0.0 <= conf <= 1.0:
            raise SchemaError(line, f"{kind}[{j}].conf must be in [0, 1]")
        box = _floats(line, f"{kind}[{j}].box", entry["box"])
        if box.size != 4:
            raise SchemaError(line, f"{kind}[{j}].box needs 4 numbers")
        x1, y1, x2, y2 = (float(b) for b in box)
        if not (0.0 <= x1 < x2 <= 1.0 and 0.0 <= y1 < y2 <= 1.0):
            raise SchemaError(line, f"{kind}[{j}].box {list(box)} is not a normalised box")
        bx = (x1, y1, x2, y2)
        if expand_ratio is not None:
            bx = expand_box(bx, expand_ratio)
        out.append(Candidate(feat, float(conf), bx, j))
    return out


def parse_record(line: int, record, d_leaf: int, n_classes: int | None = None, expand_ratio: float | None = None) -> FeatureClip:
    """Validate one decoded JSONL record.

    Raises:
        SchemaError:    missing/ill-typed fields.
        DimensionError: a feature vector does not have *d_leaf* entries.
    """
    if not isinstance(record, dict):
        raise SchemaError(line, "record must be an object")
    missing = [k for k in _REQUIRED if k not in record]
    if missing:
        raise SchemaError(line, f"missing fields {missing}")
    if not isinstance(record["t"], int) or isinstance(record["t"], bool):
        raise SchemaError(line, "t must be an integer number of seconds")
    actor = _floats(line, "actor", record["actor"], d_leaf)
    labels = record["labels"]
    if not isinstance(labels, list) or any(x not in (0, 1) or isinstance(x, bool) for x in labels):
        raise SchemaError(line, "labels must be a list of 0/1")
    if n_classes is not None and len(labels) != n_classes:
        raise SchemaError(line, f"{len(labels)} labels for {n_classes} classes")
    truth = None
    raw_truth = record.get("truth")
    if raw_truth is not None:
        if not isinstance(raw_truth, dict):
            raise SchemaError(line, "truth must be an object or null")
        truth = PlantedTruth(raw_truth.get("object"), raw_truth.get("human"), raw_truth.get("cue_time"))
    return FeatureClip(
        clip_id=str(record["clip_id"]),
        video_id=str(record["video_id"]),
        clip_time=record["t"],
        actor_feature=actor,
        objects=_parse_candidates(line, "objects", record["objects"], d_leaf, expand_ratio),
        humans=_parse_candidates(line, "humans", record["humans"], d_leaf, expand_ratio),
        labels=np.asarray(labels, dtype=np.int8),
        truth=truth,
        actor_id=int(record.get("actor_id", 0)),
    )


def load_feature_file(
    path: Path,
    config: GcmConfig,
    *,
    expand_ratio: float | None = None,
) -> Iterator[FeatureClip]:
    """Stream validated clips; candidates are cut to the most confident ``n_*_max``.

    Args:
        path:         JSONL file, one clip per line.
        config:       Supplies ``d_leaf``, ``n_classes`` and candidate caps.
        expand_ratio: Grow every candidate box by this ratio (e.g. 0.2).
    """
    with path.open(encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                record = json.loads(text)
            except json.JSONDecodeError as exc:
                raise SchemaError(lineno, f"invalid JSON: {exc.msg}") from exc
            clip = parse_record(lineno, record, config.d_leaf, config.n_classes, expand_ratio)
            clip.objects = top_candidates(clip.objects, config.n_obj_max)
            clip.humans = top_candidates(clip.humans, config.n_hum_max)
            yield clip


# ── Coordinate-mode leaves ─────────────────────────────────────────────────────


@dataclass
class TrackClip:
    """Per-frame boxes (x1, y1, x2, y2) for the actor and each candidate."""

    clip_id: str
    video_id: str
    clip_time: int
    actor_track: np.ndarray  # (frames, 4)
    object_tracks: list[np.ndarray] = field(default_factory=list)
    human_tracks: list[np.ndarray] = field(default_factory=list)
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int8))


def track_feature(track: np.ndarray, d_leaf: int) -> np.ndarray:
    """Flatten per-frame (cx, cy, w, h) and zero-pad to *d_leaf*.

    Raises:
        ValueError: the track needs more than *d_leaf* numbers.
    """
    track = np.asarray(track, dtype=np.float64)
    if track.ndim != 2 or track.shape[1] != 4:
        raise ValueError(f"track must be (frames, 4), got {track.shape}")
    cx = (track[:, 0] + track[:, 2]) / 2
    cy = (track[:, 1] + track[:, 3]) / 2
    w = track[:, 2] - track[:, 0]
    h = track[:, 3] - track[:, 1]
    flat = np.stack([cx, cy, w, h], axis=1).reshape(-1)
    if flat.size > d_leaf:
        raise ValueError(f"{track.shape[0]} frames need {flat.size} values, capacity is {d_leaf}")
    out = np.zeros(d_leaf)
    out[: flat.size] = flat
    return out


def coordinate_mode_features(tracks: TrackClip, d_leaf: int) -> FeatureClip:
    """Leaf features built from box coordinates only."""

    def cands(items: list[np.ndarray]) -> list[Candidate]:
        return [
            Candidate(track_feature(tr, d_leaf), 1.0, tuple(float(v) for v in np.asarray(tr)[0]), j)  # type: ignore[arg-type]
            for j, tr in enumerate(items)
        ]

    return FeatureClip(
        clip_id=tracks.clip_id,
        video_id=tracks.video_id,
        clip_time=tracks.clip_time,
        actor_feature=track_feature(tracks.actor_track, d_leaf),
        objects=cands(tracks.object_tracks),
        humans=cands(tracks.human_tracks),
        labels=np.asarray(tracks.labels, dtype=np.int8),
    )


def sample_motion_track(
    direction: str, frames: int, rng: np.random.Generator, jitter: float = 0.005
) -> np.ndarray:
    """A box drifting left or right at a random constant speed, with small jitter."""
    if direction not in ("left", "right"):
        raise ValueError(f"direction must be 'left' or 'right', got {direction!r}")
    w, h = rng.uniform(0.1, 0.2, size=2)
    speed = rng.uniform(0.01, 0.03)
    span = speed * (frames - 1)
    lo, hi = 0.02, 1.0 - w - span - 0.02
    start = rng.uniform(lo, max(lo, hi))
    if direction == "left":
        start, speed = start + span, -speed
    y1 = rng.uniform(0.05, 0.95 - h)
    x1 = start + speed * np.arange(frames) + rng.normal(0.0, jitter, size=frames)
    x1 = np.clip(x1, 0.0, 1.0 - w)
    return np.stack([x1, np.full(frames, y1), x1 + w, np.full(frames, y1 + h)], axis=1)
