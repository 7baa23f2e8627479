"""grammar.py — The And-Or graph: entities, primitive/concurrent actions, root, parse trees.

Bottom-up inference over a minibatch of keyframes:

    leaves ─► entities (hv, o, h') ─► primitive branches ⟨h,v⟩ ⟨h,v,o⟩ ⟨h,v,h'⟩
           ─► concurrent action S_A ─► (long-range S_A*) ─► root classifier

And nodes concatenate their children and apply a two-layer MLP; Or nodes score
each alternative with a shared MLP and return the softmax-weighted sum.  Every
Or node leaves an :class:`OrRecord` behind so the parse can be read off after
the forward pass.
"""

from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, NamedTuple

import numpy as np

from gcm.config import INTERACTIVE_TYPES, GcmConfig
from gcm.tensor import (
    DimensionError,
    Linear,
    Mlp2,
    Value,
    add,
    concat,
    constant,
    detach,
    dropout,
    expand,
    fan_in_uniform,
    mask_rows,
    matmul,
    mean_pool,
    parameter,
    place_rows,
    relu,
    reshape,
    softmax,
    take_rows,
    weighted_sum,
)

if TYPE_CHECKING:
    from gcm.memory import BankView
    from gcm.synth import FeatureClip

PARTNER_KINDS = ("object", "human")
ROLES = ("actor", "object", "human")


# ── Parameters ─────────────────────────────────────────────────────────────────


class GcmParams:
    """All trainable pieces of one graph, created for the layers *config* enables."""

    def __init__(self, config: GcmConfig, seed: int | np.random.Generator = 0) -> None:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.config = config
        dl, de, dm, nc = config.d_leaf, config.d_entity, config.d_map, config.n_classes

        self.role: Value | None = None
        if config.role_embeddings:
            self.role = parameter(np.zeros((len(ROLES), dl)))

        self.embed: dict[str, Linear] = {}
        self.null: dict[str, Value] = {}
        self.body_and: Mlp2 | None = None
        self.pair_and: dict[str, Mlp2] = {}
        self.pair_or: dict[str, Mlp2] = {}
        self.primitive_and: Mlp2 | None = None
        self.concurrent_and: Mlp2 | None = None
        self.lrci_pair: Mlp2 | None = None
        self.lrci_or: Mlp2 | None = None
        self.lrci_and: Mlp2 | None = None
        self.baseline_head: Mlp2 | None = None
        self.classifier: Mlp2 | None = None
        self.aux: dict[str, Mlp2] = {}

        if not config.layers_enabled:
            self.baseline_head = Mlp2(dl, dm, nc, rng)
            return

        for role in ROLES:
            self.embed[role] = Linear(dl, de, rng)
        for kind in PARTNER_KINDS:
            self.null[kind] = parameter(fan_in_uniform(rng, de, (de,)))
        if branch_enabled(config, "body"):
            self.body_and = Mlp2(de, dm, dm, rng)
        for kind in PARTNER_KINDS:
            if branch_enabled(config, kind):
                self.pair_and[kind] = Mlp2(2 * de, dm, dm, rng)
                self.pair_or[kind] = Mlp2(dm, dm, 1, rng)

        top = config.top_layer
        if top == "primitive":
            self.primitive_and = Mlp2(3 * dm, dm, dm, rng)
        else:
            self.concurrent_and = Mlp2(3 * dm, dm, dm, rng)
        if top == "lrci":
            self.lrci_pair = Mlp2(2 * dm, dm, dm, rng)
            self.lrci_or = Mlp2(dm, dm, 1, rng)
            self.lrci_and = Mlp2(2 * dm, dm, dm, rng)
        self.classifier = Mlp2(dm, dm, nc, rng)

        if config.aux_heads:
            if top != "primitive":
                self.aux["primitive"] = Mlp2(3 * dm, dm, nc, rng)
            if top == "lrci":
                self.aux["concurrent"] = Mlp2(dm, dm, nc, rng)

    def named_parameters(self) -> dict[str, Value]:
        """Stable ``{dotted name: parameter}`` map (checkpoint and optimizer keys)."""
        out: dict[str, Value] = {}
        if self.role is not None:
            out["role"] = self.role
        for role, layer in self.embed.items():
            out.update(layer.parameters(f"entity.{role}"))
        for kind, null in self.null.items():
            out[f"entity.{kind}.null"] = null
        if self.body_and is not None:
            out.update(self.body_and.parameters("branch.body.and"))
        for kind in PARTNER_KINDS:
            if kind in self.pair_and:
                out.update(self.pair_and[kind].parameters(f"branch.{kind}.and"))
                out.update(self.pair_or[kind].parameters(f"branch.{kind}.or"))
        for name, mlp in (
            ("primitive.and", self.primitive_and),
            ("concurrent.and", self.concurrent_and),
            ("lrci.pair.and", self.lrci_pair),
            ("lrci.or", self.lrci_or),
            ("lrci.and", self.lrci_and),
            ("baseline", self.baseline_head),
        ):
            if mlp is not None:
                out.update(mlp.parameters(name))
        if self.classifier is not None:
            out.update(self.classifier.parameters("root"))
        for layer, mlp in self.aux.items():
            out.update(mlp.parameters(f"aux.{layer}"))
        return out


def branch_enabled(config: GcmConfig, kind: str) -> bool:
    """A branch exists only when some class has its interactive type."""
    return bool(config.classes_of(kind))


# ── Leaves ─────────────────────────────────────────────────────────────────────


@dataclass
class LeafBatch:
    """Padded leaf features of B keyframes (one actor each)."""

    clip_ids: list[str]
    actor_ids: list[int]
    clip_times: list[int]
    video_ids: list[str]
    actor: np.ndarray  # (B, d_leaf)
    objects: np.ndarray  # (B, n_obj_max, d_leaf)
    object_mask: np.ndarray  # (B, n_obj_max)
    object_ids: np.ndarray  # (B, n_obj_max), -1 on padding
    humans: np.ndarray
    human_mask: np.ndarray
    human_ids: np.ndarray
    labels: np.ndarray  # (B, n_classes)

    def __len__(self) -> int:
        return len(self.clip_ids)


def _pad_candidates(candidates, n_max: int, d_leaf: int, clip_id: str):
    from gcm.synth import top_candidates  # noqa: PLC0415

    feats = np.zeros((n_max, d_leaf))
    mask = np.zeros(n_max)
    ids = np.full(n_max, -1, dtype=np.int64)
    for j, cand in enumerate(top_candidates(candidates, n_max)):
        if cand.feature.shape != (d_leaf,):
            raise DimensionError(
                f"clip {clip_id}: candidate feature has shape {cand.feature.shape}, expected ({d_leaf},)"
            )
        feats[j] = cand.feature
        mask[j] = 1.0
        ids[j] = cand.candidate_id
    return feats, mask, ids


def stack_leaves(clips: Sequence[FeatureClip], config: GcmConfig) -> LeafBatch:
    """Pad and stack clips into one batch.

    Raises:
        DimensionError: a leaf feature does not have ``d_leaf`` entries.
        ValueError:     *clips* is empty.
    """
    if not clips:
        raise ValueError("stack_leaves: no clips")
    dl = config.d_leaf
    actor = np.zeros((len(clips), dl))
    obj = [_pad_candidates(c.objects, config.n_obj_max, dl, c.clip_id) for c in clips]
    hum = [_pad_candidates(c.humans, config.n_hum_max, dl, c.clip_id) for c in clips]
    labels = np.zeros((len(clips), config.n_classes))
    for i, clip in enumerate(clips):
        if clip.actor_feature.shape != (dl,):
            raise DimensionError(
                f"clip {clip.clip_id}: actor feature has shape {clip.actor_feature.shape}, expected ({dl},)"
            )
        actor[i] = clip.actor_feature
        if clip.labels.shape != (config.n_classes,):
            raise DimensionError(
                f"clip {clip.clip_id}: {clip.labels.shape[0]} labels for {config.n_classes} classes"
            )
        labels[i] = clip.labels
    return LeafBatch(
        clip_ids=[c.clip_id for c in clips],
        actor_ids=[c.actor_id for c in clips],
        clip_times=[c.clip_time for c in clips],
        video_ids=[c.video_id for c in clips],
        actor=actor,
        objects=np.stack([o[0] for o in obj]),
        object_mask=np.stack([o[1] for o in obj]),
        object_ids=np.stack([o[2] for o in obj]),
        humans=np.stack([h[0] for h in hum]),
        human_mask=np.stack([h[1] for h in hum]),
        human_ids=np.stack([h[2] for h in hum]),
        labels=labels,
    )


# ── Entities ───────────────────────────────────────────────────────────────────


@dataclass
class EntitySet:
    actor: Value  # (B, d_entity)
    objects: Value  # (B, n_obj_max, d_entity)
    object_mask: np.ndarray
    humans: Value
    human_mask: np.ndarray


def _embed_rows(leaf: np.ndarray, layer: Linear, role_vec: Value | None) -> Value:
    x = constant(leaf.reshape(-1, leaf.shape[-1]))
    if role_vec is not None:
        x = add(x, role_vec)
    out = relu(layer(x))
    return reshape(out, leaf.shape[:-1] + (layer.out_dim,))


def _role_vector(params: GcmParams, role: str) -> Value | None:
    if params.role is None:
        return None
    idx = ROLES.index(role)
    # Slice one row out of the role table while keeping it on the tape.
    onehot = np.zeros((1, len(ROLES)))
    onehot[0, idx] = 1.0
    return reshape(matmul(constant(onehot), params.role), (params.role.shape[1],))


def embed_entities(leaves: LeafBatch, params: GcmParams) -> EntitySet:
    """Map every leaf through its role's linear+rectifier layer; pad rows get the null entity."""
    actor = _embed_rows(leaves.actor, params.embed["actor"], _role_vector(params, "actor"))
    objects = _embed_rows(leaves.objects, params.embed["object"], _role_vector(params, "object"))
    humans = _embed_rows(leaves.humans, params.embed["human"], _role_vector(params, "human"))
    return EntitySet(
        actor=actor,
        objects=mask_rows(objects, leaves.object_mask, params.null["object"]),
        object_mask=leaves.object_mask,
        humans=mask_rows(humans, leaves.human_mask, params.null["human"]),
        human_mask=leaves.human_mask,
    )


# ── And / Or node operations ───────────────────────────────────────────────────


def and_compose(parts: Sequence[Value], mlp: Mlp2) -> Value:
    """Concatenate *parts* on the feature axis and apply *mlp*.

    Parts may carry any number of leading axes (shared by all parts); the MLP
    runs on the flattened rows and the leading axes are restored.
    """
    if not parts:
        raise ValueError("and_compose: no parts")
    joined = concat(list(parts))
    lead = joined.shape[:-1]
    if joined.shape[-1] != mlp.in_dim:
        raise DimensionError(
            f"and_compose: parts give width {joined.shape[-1]}, MLP expects {mlp.in_dim}"
        )
    rows = reshape(joined, (int(np.prod(lead, dtype=np.int64)), joined.shape[-1]))
    return reshape(mlp(rows), lead + (mlp.out_dim,))


class OrResult(NamedTuple):
    output: Value  # (B, d)
    weights: Value  # (B, n) λ
    logits: np.ndarray  # (B, n) pre-softmax scores


def or_select(candidates: Value, mask: np.ndarray, scorer: Mlp2) -> OrResult:
    """Weighted add over (B, n, d) *candidates*; λ = softmax of shared MLP scores.

    Masked candidates get λ = 0 exactly and are never scored, so appending a
    masked candidate changes nothing.  A row with every candidate masked (or
    with no candidates at all) returns a zero vector and all-zero λ.
    """
    if candidates.data.ndim != 3:
        raise DimensionError(f"or_select expects (batch, n, d), got {candidates.shape}")
    b, n, d = candidates.shape
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (b, n):
        raise DimensionError(f"or_select: mask {mask.shape} vs candidates {candidates.shape}")
    present = np.flatnonzero(mask.reshape(-1) > 0)
    if present.size == 0:
        return OrResult(constant(np.zeros((b, d))), constant(np.zeros((b, n))), np.zeros((b, n)))
    rows = take_rows(reshape(candidates, (b * n, d)), present)
    scores = reshape(place_rows(scorer(rows), present, b * n), (b, n))
    weights = softmax(scores, mask=mask)
    return OrResult(weighted_sum(weights, candidates), weights, scores.data.copy())


# ── Primitive, concurrent, root ────────────────────────────────────────────────


def primitive_branch(
    entities: EntitySet, kind: str, params: GcmParams
) -> tuple[Value, OrResult | None]:
    """Score one interactive type; object/human branches pair the actor with each candidate.

    A branch with no class in the vocabulary is a constant zero map.
    """
    if kind not in INTERACTIVE_TYPES:
        raise ValueError(f"unknown interactive type {kind!r}")
    actor = entities.actor
    b, dm = actor.shape[0], params.config.d_map
    if kind == "body":
        if params.body_and is None:
            return constant(np.zeros((b, dm))), None
        return and_compose([actor], params.body_and), None
    if kind not in params.pair_and:
        return constant(np.zeros((b, dm))), None
    cands = entities.objects if kind == "object" else entities.humans
    mask = entities.object_mask if kind == "object" else entities.human_mask
    pairs = and_compose([expand(actor, cands.shape[1], axis=1), cands], params.pair_and[kind])
    result = or_select(pairs, mask, params.pair_or[kind])
    return result.output, result


def concurrent_compose(branches: Sequence[Value], mlp: Mlp2) -> Value:
    """S_A: And over the three branch maps."""
    if len(branches) != len(INTERACTIVE_TYPES):
        raise ValueError(f"concurrent_compose needs 3 branch maps, got {len(branches)}")
    return and_compose(branches, mlp)


def classify(
    scoring_map: Value,
    head: Mlp2,
    rate: float,
    training: bool,
    rng: np.random.Generator | None = None,
) -> Value:
    """Dropout then a two-layer MLP to per-class logits."""
    if scoring_map.shape[-1] != head.in_dim:
        raise DimensionError(
            f"classify: map width {scoring_map.shape[-1]}, head expects {head.in_dim}"
        )
    return head(dropout(scoring_map, rate, training, rng))


# ── Parse tree ─────────────────────────────────────────────────────────────────


@dataclass
class OrRecord:
    name: str
    candidate_ids: list[int]
    weights: list[float]
    argmax: int | None  # candidate id; None when every candidate is masked
    all_masked: bool = False


@dataclass
class LrciRecord:
    timestamps: list[int]
    weights: list[float]
    available: list[bool]

    @property
    def argmax_time(self) -> int | None:
        if not any(self.available):
            return None
        return self.timestamps[int(np.argmax(self.weights))]


@dataclass
class ParseTree:
    clip_id: str
    actor_id: int
    or_nodes: list[OrRecord] = field(default_factory=list)
    lrci: LrciRecord | None = None
    layer_norms: dict[str, float] = field(default_factory=dict)
    logits: list[float] = field(default_factory=list)
    classes_over_threshold: list[str] = field(default_factory=list)

    def or_node(self, name: str) -> OrRecord | None:
        return next((r for r in self.or_nodes if r.name == name), None)


def _or_record(name: str, weights: np.ndarray, ids: np.ndarray, mask: np.ndarray) -> OrRecord:
    keep = mask > 0
    w = weights[keep]
    cand = ids[keep]
    if w.size == 0:
        return OrRecord(name, [], [], None, all_masked=True)
    return OrRecord(name, [int(i) for i in cand], [float(x) for x in w], int(cand[int(np.argmax(w))]))


# ── Forward ────────────────────────────────────────────────────────────────────


@dataclass
class ScoringMaps:
    branch_body: Value | None = None
    branch_object: Value | None = None
    branch_human: Value | None = None
    primitive: Value | None = None
    concurrent: Value | None = None
    concurrent_star: Value | None = None
    logits: Value | None = None
    aux_logits: dict[str, Value] = field(default_factory=dict)


@dataclass
class ForwardResult:
    maps: ScoringMaps
    trees: list[ParseTree]


def _baseline_logits(
    leaves: LeafBatch, params: GcmParams, training: bool, rng: np.random.Generator | None
) -> Value:
    rows = np.concatenate([leaves.actor[:, None, :], leaves.objects, leaves.humans], axis=1)
    mask = np.concatenate(
        [np.ones((len(leaves), 1)), leaves.object_mask, leaves.human_mask], axis=1
    )
    pooled = mean_pool(constant(rows), axis=1, mask=mask)
    assert params.baseline_head is not None
    return classify(pooled, params.baseline_head, params.config.dropout, training, rng)


def forward(
    leaves: LeafBatch,
    params: GcmParams,
    views: Sequence[BankView] | None = None,
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
    threshold: float = 0.5,
) -> ForwardResult:
    """Bottom-up inference over one batch.

    Args:
        leaves:    Stacked leaf features.
        params:    Graph parameters (their config decides the enabled layers).
        views:     One bank window per clip; required iff lrci is enabled.
        training:  Enables dropout (needs *rng*).
        threshold: Probability cut for ``classes_over_threshold``.

    Returns:
        Scoring maps (with the tape) and one parse tree per clip.
    """
    config = params.config
    maps = ScoringMaps()
    if config.uses("lrci") and views is None:
        raise ValueError("forward: lrci is enabled but no bank views were given")

    if not config.layers_enabled:
        maps.logits = _baseline_logits(leaves, params, training, rng)
        return ForwardResult(maps, _build_trees(leaves, maps, {}, None, config, threshold))

    entities = embed_entities(leaves, params)
    branch_maps: list[Value] = []
    or_results: dict[str, OrResult] = {}
    for kind in INTERACTIVE_TYPES:
        bmap, res = primitive_branch(entities, kind, params)
        setattr(maps, f"branch_{kind}", bmap)
        branch_maps.append(bmap)
        if res is not None:
            or_results[kind] = res

    top = config.top_layer
    lrci_view = None
    if top == "primitive":
        assert params.primitive_and is not None
        maps.primitive = and_compose(branch_maps, params.primitive_and)
        top_map = maps.primitive
    else:
        assert params.concurrent_and is not None
        maps.concurrent = concurrent_compose(branch_maps, params.concurrent_and)
        top_map = maps.concurrent
        if top == "lrci":
            from gcm.memory import lrci_compose  # noqa: PLC0415

            assert views is not None
            maps.concurrent_star, lrci_view = lrci_compose(maps.concurrent, views, params)
            top_map = maps.concurrent_star

    assert params.classifier is not None
    maps.logits = classify(top_map, params.classifier, config.dropout, training, rng)
    if "primitive" in params.aux:
        maps.aux_logits["primitive"] = params.aux["primitive"](detach(concat(branch_maps)))
    if "concurrent" in params.aux and maps.concurrent is not None:
        maps.aux_logits["concurrent"] = params.aux["concurrent"](detach(maps.concurrent))

    return ForwardResult(maps, _build_trees(leaves, maps, or_results, lrci_view, config, threshold))


def concurrent_maps(leaves: LeafBatch, params: GcmParams) -> np.ndarray:
    """Eval-mode S_A for each clip (what the memory bank stores)."""
    if params.concurrent_and is None:
        raise ValueError("concurrent_maps: the concurrent layer is not enabled")
    entities = embed_entities(leaves, params)
    branches = [primitive_branch(entities, kind, params)[0] for kind in INTERACTIVE_TYPES]
    return concurrent_compose(branches, params.concurrent_and).numpy()


def _build_trees(leaves, maps, or_results, lrci_view, config, threshold) -> list[ParseTree]:
    logits = maps.logits.data
    cut = float(np.log(threshold / (1.0 - threshold)))
    norms = {
        name: getattr(maps, attr)
        for name, attr in (
            ("body", "branch_body"),
            ("object", "branch_object"),
            ("human", "branch_human"),
            ("primitive", "primitive"),
            ("concurrent", "concurrent"),
            ("concurrent_star", "concurrent_star"),
        )
        if getattr(maps, attr) is not None
    }
    trees = []
    for i, clip_id in enumerate(leaves.clip_ids):
        tree = ParseTree(clip_id=clip_id, actor_id=leaves.actor_ids[i])
        for kind in PARTNER_KINDS:
            res = or_results.get(kind)
            if res is None:
                continue
            ids = leaves.object_ids[i] if kind == "object" else leaves.human_ids[i]
            mask = leaves.object_mask[i] if kind == "object" else leaves.human_mask[i]
            tree.or_nodes.append(_or_record(kind, res.weights.data[i], ids, mask))
        if lrci_view is not None:
            w, times, avail = lrci_view
            tree.lrci = LrciRecord(
                timestamps=[int(t) for t in times[i]],
                weights=[float(x) for x in w[i]],
                available=[bool(a) for a in avail[i]],
            )
        tree.layer_norms = {k: float(np.linalg.norm(v.data[i])) for k, v in norms.items()}
        tree.logits = [float(x) for x in logits[i]]
        tree.classes_over_threshold = [
            config.class_names[c] for c in range(config.n_classes) if logits[i, c] >= cut
        ]
        trees.append(tree)
    return trees


# ── Parse document ─────────────────────────────────────────────────────────────


def _sig9(x: float) -> float:
    return float(f"{x:.9g}")


def parse_document(tree: ParseTree) -> dict:
    """Fixed-order dict form of a parse (floats kept to 9 significant digits)."""
    return {
        "clip_id": tree.clip_id,
        "actor_id": tree.actor_id,
        "or_nodes": [
            {
                "name": r.name,
                "candidate_ids": list(r.candidate_ids),
                "lambdas": [_sig9(w) for w in r.weights],
                "argmax": r.argmax,
            }
            for r in tree.or_nodes
        ],
        "lrci": (
            None
            if tree.lrci is None
            else {
                "timestamps": list(tree.lrci.timestamps),
                "lambdas": [_sig9(w) for w in tree.lrci.weights],
            }
        ),
        "logits": [_sig9(x) for x in tree.logits],
        "classes_over_threshold": list(tree.classes_over_threshold),
    }


def extract_parse(tree: ParseTree) -> str:
    """Serialise *tree* as the parse JSON document."""
    return json.dumps(parse_document(tree))
