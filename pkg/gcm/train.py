"""train.py — Stage-2 training on leaf features, bank refresh, mAP evaluation, layer ablation."""

from __future__ import annotations

import json
import time
from collections.abc import Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from rich.table import Table

from gcm.config import LAYER_ORDER, GcmConfig, TrainConfig, _console, is_verbose, worker_count
from gcm.grammar import (
    ForwardResult,
    GcmParams,
    LeafBatch,
    ParseTree,
    concurrent_maps,
    forward,
    stack_leaves,
)
from gcm.memory import BankView, MemoryBank
from gcm.state import EventLog, _format_duration, checkpoint_path
from gcm.synth import FeatureClip, load_feature_file, read_manifest
from gcm.tensor import (
    NumericError,
    OptimizerState,
    Value,
    add,
    bce_multilabel_loss,
    save_checkpoint,
    step,
    zero_grads,
)

EVAL_BATCH = 64


# ── Dataset ────────────────────────────────────────────────────────────────────


@dataclass
class Dataset:
    """Clips plus their per-video train/val split."""

    clips: list[FeatureClip]
    splits: dict[str, list[str]]
    manifest: dict = field(default_factory=dict)

    def split(self, name: str) -> list[FeatureClip]:
        if name not in self.splits:
            raise KeyError(f"unknown split {name!r}; known: {sorted(self.splits)}")
        videos = set(self.splits[name])
        return [c for c in self.clips if c.video_id in videos]

    def clip(self, clip_id: str) -> FeatureClip:
        for c in self.clips:
            if c.clip_id == clip_id:
                return c
        raise KeyError(f"no clip {clip_id!r}")


def config_from_manifest(manifest: dict, base: GcmConfig) -> GcmConfig:
    """*base* with the leaf size and class table a dataset manifest declares."""
    classes = manifest["classes"]
    return replace(
        base,
        d_leaf=int(manifest["d_leaf"]),
        n_classes=len(classes),
        interactive_types=tuple(c["type"] for c in classes),
        class_names=tuple(c["name"] for c in classes),
    )


def load_dataset(
    path: Path, base: GcmConfig, expand_ratio: float | None = None
) -> tuple[Dataset, GcmConfig]:
    """Read ``manifest.json`` + features from *path*; returns the matching model config."""
    manifest = read_manifest(path)
    config = config_from_manifest(manifest, base)
    clips = list(load_feature_file(path / manifest["features"], config, expand_ratio=expand_ratio))
    return Dataset(clips, manifest["splits"], manifest), config


def batches(clips: Sequence[FeatureClip], size: int) -> Iterator[list[FeatureClip]]:
    for start in range(0, len(clips), size):
        yield list(clips[start : start + size])


# ── Memory bank ────────────────────────────────────────────────────────────────


def make_bank(config: GcmConfig) -> MemoryBank | None:
    return MemoryBank(config.d_map, config.t_window) if config.uses("lrci") else None


def refresh_bank(
    bank: MemoryBank | None,
    clips: Sequence[FeatureClip],
    params: GcmParams,
    batch_size: int = EVAL_BATCH,
) -> int:
    """Write the current eval-mode S_A of every clip; returns the number written."""
    if bank is None or params.concurrent_and is None or not clips:
        return 0

    def write_chunk(chunk: list[FeatureClip]) -> int:
        maps = concurrent_maps(stack_leaves(chunk, params.config), params)
        for clip, row in zip(chunk, maps):
            bank.write(clip.video_id, clip.clip_time, row)
        return len(chunk)

    chunks = list(batches(clips, batch_size))
    with ThreadPoolExecutor(max_workers=worker_count()) as executor:
        return sum(executor.map(write_chunk, chunks))


def bank_views(bank: MemoryBank | None, leaves: LeafBatch) -> list[BankView] | None:
    if bank is None:
        return None
    return [bank.read_window(v, t) for v, t in zip(leaves.video_ids, leaves.clip_times)]


# ── Loss ───────────────────────────────────────────────────────────────────────


def batch_loss(result: ForwardResult, labels: np.ndarray) -> tuple[Value, dict[str, float]]:
    """Root BCE plus one BCE per auxiliary head (heads sit on detached maps)."""
    assert result.maps.logits is not None
    loss = bce_multilabel_loss(result.maps.logits, labels)
    parts = {"root": loss.item()}
    for layer, logits in result.maps.aux_logits.items():
        aux = bce_multilabel_loss(logits, labels)
        parts[layer] = aux.item()
        loss = add(loss, aux)
    return loss, parts


# ── Training ───────────────────────────────────────────────────────────────────


@dataclass
class TrainResult:
    params: GcmParams
    bank: MemoryBank | None
    history: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    steps: int = 0


def train(
    train_cfg: TrainConfig,
    dataset: Dataset,
    params: GcmParams,
    bank: MemoryBank | None = None,
    *,
    run_dir: Path | None = None,
    log: EventLog | None = None,
) -> TrainResult:
    """Optimise *params* on the train split.

    Per epoch: one shuffled pass of forward/backward/step, then
    ``bank_refresh`` passes rewriting the bank from the updated params, then a
    val evaluation every ``eval_every`` epochs.  Checkpoints go to
    ``run_dir/{epoch}.ckpt`` when *run_dir* is given.

    Raises:
        ValueError:   the train split is empty.
        NumericError: a batch loss is not finite.
    """
    config = params.config
    train_clips = dataset.split("train")
    if not train_clips:
        raise ValueError("train: the train split has no clips")
    val_clips = dataset.split("val") if "val" in dataset.splits else []

    rng = np.random.default_rng(train_cfg.seed)
    named = params.named_parameters()
    opt = OptimizerState(train_cfg.optimizer, train_cfg.learning_rate(0))
    if bank is None:
        bank = make_bank(config)
    if bank is not None:
        refresh_bank(bank, train_clips, params)

    result = TrainResult(params, bank)
    started = time.monotonic()
    n_steps = -(-len(train_clips) // train_cfg.batch_size)
    _console.print(
        f"[dim]Training {config.top_layer} model: {len(train_clips)} clips, "
        f"{n_steps} steps/epoch, {train_cfg.epochs} epoch(s)[/]"
    )

    for epoch in range(1, train_cfg.epochs + 1):
        opt.learning_rate = train_cfg.learning_rate(epoch - 1)
        order = rng.permutation(len(train_clips))
        losses: list[float] = []
        for start in range(0, len(order), train_cfg.batch_size):
            chunk = [train_clips[i] for i in order[start : start + train_cfg.batch_size]]
            leaves = stack_leaves(chunk, config)
            zero_grads(named.values())
            fwd = forward(leaves, params, bank_views(bank, leaves), training=True, rng=rng)
            loss, parts = batch_loss(fwd, leaves.labels)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(
                    f"non-finite loss {value} at epoch {epoch}, step {result.steps + 1}; "
                    f"parts {parts}; clips {leaves.clip_ids}"
                )
            loss.backward()
            step(opt, named)
            result.steps += 1
            losses.append(value)
            if log is not None:
                log.append(
                    "step",
                    step=result.steps,
                    epoch=epoch,
                    loss=value,
                    lr=opt.learning_rate,
                    elapsed=round(time.monotonic() - started, 3),
                )
            if is_verbose():
                _console.print(f"  [dim]step {result.steps:>6}  loss {value:.5f}[/]")

        for _ in range(train_cfg.bank_refresh):
            refresh_bank(bank, train_clips, params)

        record: dict = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": opt.learning_rate}
        if val_clips and train_cfg.eval_every and epoch % train_cfg.eval_every == 0:
            report = evaluate(val_clips, params, bank, threshold=train_cfg.eval_threshold)
            record["val_mAP"] = report.mean_ap
        result.history.append(record)
        if log is not None:
            log.append("epoch", step=result.steps, elapsed=round(time.monotonic() - started, 3), **record)
        if run_dir is not None:
            path = checkpoint_path(run_dir, epoch)
            meta = {"epoch": epoch, "step": result.steps, "model": asdict(config)}
            save_checkpoint(path, named, meta=meta)
            result.checkpoints.append(path)

        val = f"  val mAP {record['val_mAP']:.4f}" if "val_mAP" in record else ""
        _console.print(
            f"  [cyan]epoch {epoch}/{train_cfg.epochs}[/]  loss {record['loss']:.5f}  "
            f"lr {opt.learning_rate:g}{val}"
        )
    return result


# ── Average precision ──────────────────────────────────────────────────────────


def average_precision(scores, labels) -> float:
    """Non-interpolated AP over the descending-score ranking (ties keep input order).

    Raises:
        ValueError: no positive label, or mismatched lengths.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError(f"average_precision: scores {s.shape} vs labels {y.shape}")
    n_pos = int((y == 1).sum())
    if n_pos == 0:
        raise ValueError("average_precision: no positive labels")
    ranked = (y[np.argsort(-s, kind="stable")] == 1).astype(np.float64)
    hits = np.cumsum(ranked)
    precision = hits / np.arange(1, ranked.size + 1)
    return float((precision * ranked).sum() / n_pos)


def mean_average_precision(scores: np.ndarray, labels: np.ndarray) -> tuple[float, list[float | None]]:
    """mAP over classes with at least one positive; excluded classes report ``None``.

    Raises:
        ValueError: no class has a positive label.
    """
    per_class: list[float | None] = []
    for c in range(labels.shape[1]):
        if labels[:, c].sum() > 0:
            per_class.append(average_precision(scores[:, c], labels[:, c]))
        else:
            per_class.append(None)
    valid = [ap for ap in per_class if ap is not None]
    if not valid:
        raise ValueError("mean_average_precision: no class has a positive label")
    return float(np.mean(valid)), per_class


# ── Evaluation ─────────────────────────────────────────────────────────────────


@dataclass
class EvalReport:
    class_names: list[str]
    per_class_ap: list[float | None]
    mean_ap: float
    layer_maps: dict[str, float]
    counts: dict[str, dict[str, int]]
    recovery: dict[str, float | None]
    n_clips: int

    @property
    def excluded(self) -> list[str]:
        return [n for n, ap in zip(self.class_names, self.per_class_ap) if ap is None]

    def subset_map(self, names: Sequence[str]) -> float:
        """mAP over *names* (classes without positives are skipped)."""
        aps = [
            ap
            for n, ap in zip(self.class_names, self.per_class_ap)
            if n in names and ap is not None
        ]
        if not aps:
            raise ValueError(f"no evaluated class among {list(names)}")
        return float(np.mean(aps))

    def to_dict(self) -> dict:
        return {
            "note": "mAP averages classes with at least one positive clip",
            "n_clips": self.n_clips,
            "mAP": self.mean_ap,
            "per_class_ap": dict(zip(self.class_names, self.per_class_ap)),
            "excluded_classes": self.excluded,
            "layer_mAP": dict(self.layer_maps),
            "counts": self.counts,
            "recovery": dict(self.recovery),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


@dataclass
class _Chunk:
    logits: np.ndarray
    aux: dict[str, np.ndarray]
    trees: list[ParseTree]


def predict(
    clips: Sequence[FeatureClip],
    params: GcmParams,
    bank: MemoryBank | None = None,
    *,
    threshold: float = 0.5,
    batch_size: int = EVAL_BATCH,
) -> tuple[np.ndarray, dict[str, np.ndarray], list[ParseTree]]:
    """Eval-mode logits, aux logits and parse trees for *clips* (input order).

    Raises:
        ValueError: *clips* is empty, or lrci is enabled without a bank.
    """
    if not clips:
        raise ValueError("predict: no clips")
    if params.config.uses("lrci") and bank is None:
        raise ValueError("predict: lrci is enabled but no bank was given")

    def run(chunk: list[FeatureClip]) -> _Chunk:
        leaves = stack_leaves(chunk, params.config)
        fwd = forward(leaves, params, bank_views(bank, leaves), training=False, threshold=threshold)
        assert fwd.maps.logits is not None
        aux = {k: v.numpy() for k, v in fwd.maps.aux_logits.items()}
        return _Chunk(fwd.maps.logits.numpy(), aux, fwd.trees)

    with ThreadPoolExecutor(max_workers=worker_count()) as executor:
        parts = list(executor.map(run, batches(clips, batch_size)))
    logits = np.concatenate([p.logits for p in parts])
    aux = {k: np.concatenate([p.aux[k] for p in parts]) for k in parts[0].aux}
    trees = [t for p in parts for t in p.trees]
    return logits, aux, trees


def _recovery(clips: Sequence[FeatureClip], trees: list[ParseTree]) -> dict[str, float | None]:
    hits = {"object": [0, 0], "human": [0, 0], "cue": [0, 0]}
    cue_mass: list[float] = []
    cue_argmax: list[bool] = []
    for clip, tree in zip(clips, trees):
        truth = clip.truth
        if truth is None:
            continue
        for kind, true_id in (("object", truth.object_id), ("human", truth.human_id)):
            record = tree.or_node(kind)
            if true_id is None or record is None:
                continue
            hits[kind][1] += 1
            hits[kind][0] += int(record.argmax == true_id)
        if truth.cue_time is not None and tree.lrci is not None:
            lr = tree.lrci
            mass = sum(w for t, w in zip(lr.timestamps, lr.weights) if t == truth.cue_time)
            cue_mass.append(mass)
            cue_argmax.append(lr.argmax_time == truth.cue_time)
            hits["cue"][1] += 1
            hits["cue"][0] += int(mass > 0.5)
    out: dict[str, float | None] = {
        f"{k}_argmax" if k != "cue" else "cue_mass_over_half": (h / n if n else None)
        for k, (h, n) in hits.items()
    }
    out["mean_cue_mass"] = float(np.mean(cue_mass)) if cue_mass else None
    out["cue_argmax"] = float(np.mean(cue_argmax)) if cue_argmax else None
    return out


def evaluate(
    clips: Sequence[FeatureClip],
    params: GcmParams,
    bank: MemoryBank | None = None,
    *,
    threshold: float = 0.5,
    refresh: bool = True,
) -> EvalReport:
    """Eval-mode scoring of *clips*: per-class AP, layer mAPs, counts, parse recovery.

    With lrci enabled the bank is first refreshed for *clips* (a fresh bank is
    made when none is given).

    Raises:
        ValueError: *clips* is empty.
    """
    if not clips:
        raise ValueError("evaluate: empty split")
    config = params.config
    if bank is None:
        bank = make_bank(config)
    if refresh:
        refresh_bank(bank, clips, params)

    logits, aux, trees = predict(clips, params, bank, threshold=threshold)
    labels = np.stack([c.labels for c in clips]).astype(np.float64)
    mean_ap, per_class = mean_average_precision(logits, labels)
    layer_maps = {config.top_layer: mean_ap}
    for layer, scores in aux.items():
        layer_maps[layer] = mean_average_precision(scores, labels)[0]

    cut = np.log(threshold / (1.0 - threshold))
    predicted = logits >= cut
    truth = labels > 0
    counts = {
        name: {
            "tp": int((predicted[:, c] & truth[:, c]).sum()),
            "fp": int((predicted[:, c] & ~truth[:, c]).sum()),
            "fn": int((~predicted[:, c] & truth[:, c]).sum()),
        }
        for c, name in enumerate(config.class_names)
    }
    return EvalReport(
        class_names=list(config.class_names),
        per_class_ap=per_class,
        mean_ap=mean_ap,
        layer_maps=layer_maps,
        counts=counts,
        recovery=_recovery(clips, trees),
        n_clips=len(clips),
    )


def print_report(report: EvalReport) -> None:
    table = Table(title=f"Evaluation ({report.n_clips} clips)", show_lines=False)
    table.add_column("class")
    table.add_column("AP", justify="right")
    table.add_column("tp/fp/fn", justify="right")
    for name, ap in zip(report.class_names, report.per_class_ap):
        c = report.counts[name]
        table.add_row(name, "-" if ap is None else f"{ap:.4f}", f"{c['tp']}/{c['fp']}/{c['fn']}")
    _console.print(table)
    _console.print(f"[bold]mAP[/] {report.mean_ap:.4f}  " + "  ".join(
        f"[dim]{k}[/] {v:.4f}" for k, v in report.layer_maps.items()
    ))
    rec = {k: v for k, v in report.recovery.items() if v is not None}
    if rec:
        _console.print("[dim]recovery:[/] " + "  ".join(f"{k} {v:.3f}" for k, v in rec.items()))


# ── Ablation ───────────────────────────────────────────────────────────────────

ABLATION_ROWS: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("baseline (mean-pooled leaves)", ()),
    ("+ primitive", LAYER_ORDER[:1]),
    ("+ concurrent", LAYER_ORDER[:2]),
    ("+ concurrent + LRCI", LAYER_ORDER),
)


@dataclass
class AblationRow:
    label: str
    layers: tuple[str, ...]
    mean_ap: float
    focus_map: float | None
    report: EvalReport


def run_ablation(
    dataset: Dataset,
    base: GcmConfig,
    train_cfg: TrainConfig,
    *,
    focus: Sequence[str] = (),
) -> list[AblationRow]:
    """Train the four layer prefixes from the same seed and score each on val.

    Args:
        focus: Class names whose sub-mAP gets its own column (e.g. long-range classes).
    """
    val = dataset.split("val")
    rows = []
    for label, layers in ABLATION_ROWS:
        _console.rule(f"[bold]{label}[/]", style="dim")
        config = base.with_layers(layers)
        params = GcmParams(config, seed=train_cfg.seed)
        result = train(train_cfg, dataset, params)
        report = evaluate(val, params, result.bank, threshold=train_cfg.eval_threshold)
        focus_map = report.subset_map(focus) if focus else None
        rows.append(AblationRow(label, layers, report.mean_ap, focus_map, report))
    print_ablation(rows)
    return rows


def print_ablation(rows: Sequence[AblationRow]) -> None:
    table = Table(title="Layer ablation (val mAP)")
    table.add_column("model")
    table.add_column("mAP", justify="right")
    if any(r.focus_map is not None for r in rows):
        table.add_column("focus mAP", justify="right")
    for r in rows:
        cells = [r.label, f"{r.mean_ap:.4f}"]
        if r.focus_map is not None:
            cells.append(f"{r.focus_map:.4f}")
        table.add_row(*cells)
    _console.print(table)


def ablation_document(rows: Sequence[AblationRow]) -> list[dict]:
    return [
        {"model": r.label, "layers": list(r.layers), "mAP": r.mean_ap, "focus_mAP": r.focus_map}
        for r in rows
    ]


# ── Gradient check ─────────────────────────────────────────────────────────────


def gradient_check(
    config: GcmConfig,
    *,
    seed: int = 0,
    n_clips: int = 4,
    h: float = 1e-5,
) -> dict[str, float]:
    """Finite-difference check of the root BCE loss over every parameter.

    Uses noise clips and a bank with roughly half the window filled.  Runs in
    eval mode so the loss is a deterministic function of the parameters.
    """
    from gcm.synth import noise_clips  # noqa: PLC0415
    from gcm.tensor import gradcheck  # noqa: PLC0415

    rng = np.random.default_rng(seed)
    params = GcmParams(config, seed=rng)
    clips = noise_clips(config, n_clips, rng)
    leaves = stack_leaves(clips, config)
    bank = make_bank(config)
    if bank is not None:
        for t in range(-config.t_window, n_clips + config.t_window):
            if rng.random() < 0.5:
                bank.write("v0000", t, rng.normal(size=config.d_map))
    views = bank_views(bank, leaves)

    def loss_fn() -> Value:
        fwd = forward(leaves, params, views, training=False)
        assert fwd.maps.logits is not None
        return bce_multilabel_loss(fwd.maps.logits, leaves.labels)

    started = time.monotonic()
    errors = gradcheck(loss_fn, params.named_parameters(), h=h)
    if is_verbose():
        _console.print(f"[dim]gradcheck took {_format_duration(time.monotonic() - started)}[/]")
    return errors
