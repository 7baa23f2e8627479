"""pipeline.py — Command-line entry: gen-data, train, eval, parse, ablate, gradcheck.

Exit codes: 0 success, 1 usage/config error, 2 data/schema error,
3 numeric failure (non-finite loss or a failed gradient check).
"""

import argparse
import sys
from collections.abc import Sequence
from pathlib import Path

from gcm.config import (
    DEFAULT_CONFIG,
    PRESETS_DIR,
    GcmConfig,
    RunConfig,
    _console,
    load_config,
    set_verbose,
)
from gcm.grammar import GcmParams, extract_parse, forward, stack_leaves
from gcm.memory import MemoryBank
from gcm.state import REPORT_FILE, RunDir
from gcm.synth import build_grammar, generate_dataset, sample_dataset
from gcm.tensor import NumericError, assign_parameters, load_checkpoint
from gcm.train import (
    Dataset,
    ablation_document,
    bank_views,
    evaluate,
    gradient_check,
    load_dataset,
    make_bank,
    print_report,
    refresh_bank,
    run_ablation,
    train,
)

COMMANDS = ("gen-data", "train", "eval", "parse", "ablate", "gradcheck")
GRADCHECK_TOL = 1e-4
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    """Bad command line (argparse would otherwise exit with status 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # type: ignore[override]
        raise UsageError(message)


# ── Argument parsing ───────────────────────────────────────────────────────────


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help=f"Run config JSON (default: {DEFAULT_CONFIG.name})")
    common.add_argument("--seed", type=int, help="Sets train.seed and data.seed")
    common.add_argument("--out", type=Path, default=Path("runs"), help="Output root (default: runs/)")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override one config value (repeatable; JSON values)",
    )
    common.add_argument("--verbose", action="store_true", help="One console line per step")

    parser = _Parser(
        prog="gcm",
        description="And-Or grammar model for interactive action detection.",
        epilog="Exit 0 = ok, 1 = usage/config, 2 = data/schema, 3 = numeric failure.",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    sub.add_parser("gen-data", parents=[common], help="Write a synthetic feature dataset")
    p_train = sub.add_parser("train", parents=[common], help="Train on a dataset")
    p_eval = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint")
    p_parse = sub.add_parser("parse", parents=[common], help="Print the parse of one clip as JSON")
    p_ablate = sub.add_parser("ablate", parents=[common], help="Train and compare the four layer prefixes")
    sub.add_parser("gradcheck", parents=[common], help="Finite-difference check of every gradient")

    for p in (p_train, p_eval, p_parse, p_ablate):
        p.add_argument("--data", type=Path, help="Dataset directory (default: sample from the data section)")
        p.add_argument("--expand-boxes", type=float, metavar="RATIO", help="Grow candidate boxes on load")
    for p in (p_eval, p_parse):
        p.add_argument("--ckpt", type=Path, required=True, help="Checkpoint file")
        p.add_argument("--bank", type=Path, help="Bank file (default: refresh from the checkpoint)")
        p.add_argument("--split", default="val", help="Split to use (default: val)")
    p_parse.add_argument("--clip", required=True, help="Clip id")
    p_ablate.add_argument("--focus", nargs="*", help="Classes with their own mAP column")
    return parser


def _effective_config(args: argparse.Namespace) -> RunConfig:
    overrides = []
    if args.seed is not None:
        overrides += [f"train.seed={args.seed}", f"data.seed={args.seed}"]
    return load_config(args.config, overrides + list(args.overrides))


INPUT_FLAGS = ("data", "ckpt", "bank", "split", "clip", "expand_boxes", "focus")


def _inputs(args: argparse.Namespace) -> dict:
    """Command inputs outside the config; paths are recorded absolute."""
    out: dict = {}
    for name in INPUT_FLAGS:
        value = getattr(args, name, None)
        if value is None:
            continue
        out[name] = str(value.resolve()) if isinstance(value, Path) else value
    return out


# ── Data ───────────────────────────────────────────────────────────────────────


def _dataset(args: argparse.Namespace, config: RunConfig) -> tuple[Dataset, GcmConfig]:
    if args.data is not None:
        return load_dataset(args.data, config.model, expand_ratio=args.expand_boxes)
    spec = build_grammar(config.data, config.model.d_leaf, config.model.t_window)
    _console.print(f"[dim]No --data given; sampling {config.data.n_videos} synthetic videos[/]")
    clips, splits = sample_dataset(spec, config.data.n_videos, config.data.seed, config.data.val_fraction)
    return Dataset(clips, splits, {"spec_hash": spec.spec_hash()}), spec.model_config(config.model)


def _restore(ckpt: Path) -> GcmParams:
    arrays, meta = load_checkpoint(ckpt)
    if "model" not in meta:
        raise ValueError(f"{ckpt}: checkpoint has no model description")
    params = GcmParams(GcmConfig(**meta["model"]))
    assign_parameters(params.named_parameters(), arrays)
    return params


def _bank_for(args: argparse.Namespace, params: GcmParams) -> MemoryBank | None:
    if args.bank is None:
        return make_bank(params.config)
    bank = MemoryBank.load(args.bank)
    if bank.d_map != params.config.d_map or bank.t_window != params.config.t_window:
        raise ValueError(
            f"{args.bank}: bank shape (d_map={bank.d_map}, T={bank.t_window}) does not fit the checkpoint"
        )
    return bank


# ── Commands ───────────────────────────────────────────────────────────────────


def cmd_gen_data(args: argparse.Namespace, config: RunConfig, run: RunDir) -> int:
    spec = build_grammar(config.data, config.model.d_leaf, config.model.t_window)
    target = run.path / "data"
    with _console.status("Sampling episodes...", spinner="dots", spinner_style="cyan"):
        manifest = generate_dataset(spec, config.data.n_videos, config.data.seed, target, config.data.val_fraction)
    _console.print(
        f"[green]✔[/] {manifest['n_clips']} clips from {config.data.n_videos} videos → [cyan]{target}[/]"
    )
    run.finish(dataset=str(target), spec_hash=manifest["spec_hash"])
    return EXIT_OK


def cmd_train(args: argparse.Namespace, config: RunConfig, run: RunDir) -> int:
    dataset, model = _dataset(args, config)
    params = GcmParams(model, seed=config.train.seed)
    result = train(config.train, dataset, params, run_dir=run.path, log=run.log)
    if result.bank is not None:
        result.bank.save(run.bank_path)
    extra: dict = {"checkpoints": [p.name for p in result.checkpoints]}
    if result.history and "val_mAP" in result.history[-1]:
        extra["val_mAP"] = result.history[-1]["val_mAP"]
    run.finish(**extra)
    _console.print(f"[green bold]✔ Trained[/] → [cyan]{run.path}[/]")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, config: RunConfig, run: RunDir) -> int:
    params = _restore(args.ckpt)
    dataset, _ = _dataset(args, config)
    bank = _bank_for(args, params)
    report = evaluate(
        dataset.split(args.split),
        params,
        bank,
        threshold=config.train.eval_threshold,
        refresh=args.bank is None,
    )
    print_report(report)
    run.write_json(REPORT_FILE, report.to_dict())
    run.finish(mAP=report.mean_ap, checkpoint=str(args.ckpt))
    return EXIT_OK


def cmd_parse(args: argparse.Namespace, config: RunConfig, run: RunDir) -> int:
    params = _restore(args.ckpt)
    dataset, _ = _dataset(args, config)
    clip = dataset.clip(args.clip)
    bank = _bank_for(args, params)
    if args.bank is None:
        refresh_bank(bank, [c for c in dataset.clips if c.video_id == clip.video_id], params)
    leaves = stack_leaves([clip], params.config)
    fwd = forward(leaves, params, bank_views(bank, leaves), threshold=config.train.eval_threshold)
    text = extract_parse(fwd.trees[0])
    sys.stdout.write(text + "\n")
    (run.path / f"parse-{clip.clip_id}.json").write_text(text, encoding="utf-8")
    run.finish(clip=clip.clip_id)
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace, config: RunConfig, run: RunDir) -> int:
    dataset, model = _dataset(args, config)
    focus = args.focus
    if focus is None:
        focus = [n for n in model.class_names if n.startswith("long_range")]
    rows = run_ablation(dataset, model, config.train, focus=focus)
    doc = ablation_document(rows)
    run.write_json("ablation.json", {"rows": doc, "focus": list(focus)})
    run.finish(rows=doc)
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace, config: RunConfig, run: RunDir) -> int:
    with _console.status("Checking gradients...", spinner="dots", spinner_style="cyan"):
        errors = gradient_check(config.model, seed=config.train.seed)
    worst_name = max(errors, key=lambda k: errors[k])
    worst = errors[worst_name]
    run.write_json("gradcheck.json", {"tolerance": GRADCHECK_TOL, "errors": errors})
    run.finish(max_rel_err=worst, passed=worst < GRADCHECK_TOL)
    print(f"max rel-err {worst:.3e} ({worst_name}) over {len(errors)} parameters")
    if worst < GRADCHECK_TOL:
        _console.print(f"[green]✔ gradcheck passed[/] (tolerance {GRADCHECK_TOL:g})")
        return EXIT_OK
    _console.print(f"[red]✗ gradcheck failed[/] (tolerance {GRADCHECK_TOL:g})")
    return EXIT_NUMERIC


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "parse": cmd_parse,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


# ── Entry points ───────────────────────────────────────────────────────────────


def run(argv: Sequence[str] | None = None) -> int:
    """Execute one command; return its exit code (never raises for expected failures)."""
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except UsageError as exc:
        _console.print(parser.format_usage().rstrip())
        _console.print(f"[red]error:[/] {exc}")
        return EXIT_USAGE
    if args.command is None:
        _console.print(parser.format_help().rstrip())
        return EXIT_USAGE

    set_verbose(args.verbose)
    try:
        config = _effective_config(args)
    except (OSError, ValueError) as exc:
        _console.print(parser.format_usage().rstrip())
        _console.print(f"[red]config error:[/] {exc}")
        return EXIT_USAGE

    seed = config.train.seed
    run_dir = RunDir(args.out, args.command, config, seed, _inputs(args))
    _console.rule(f"[bold cyan]gcm {args.command}[/]  [dim]{run_dir.run_id}[/]", style="cyan")
    try:
        run_dir.open()
        return HANDLERS[args.command](args, config, run_dir)
    except NumericError as exc:
        _console.print(f"[red bold]numeric failure:[/] {exc}")
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError) as exc:
        _console.print(f"[red bold]data error:[/] {exc}")
        return EXIT_DATA


def _interactive_argv() -> list[str] | None:
    """Pick a command with a menu; returns argv or None when cancelled."""
    import questionary  # noqa: PLC0415

    command = questionary.select(
        "What would you like to do?",
        choices=[
            questionary.Choice(title="🧪 Gradient check      (small config)", value="gradcheck"),
            questionary.Choice(title="🎲 Generate synthetic data", value="gen-data"),
            questionary.Choice(title="▶  Train", value="train"),
            questionary.Choice(title="📊 Layer ablation", value="ablate"),
        ],
        use_shortcuts=False,
    ).ask()
    if command is None:
        return None
    presets = sorted(PRESETS_DIR.glob("*.json")) if PRESETS_DIR.exists() else []
    default = PRESETS_DIR / "gradcheck.json" if command == "gradcheck" else DEFAULT_CONFIG
    choices = [questionary.Choice(title=p.name, value=str(p)) for p in presets]
    choices.append(questionary.Choice(title=DEFAULT_CONFIG.name, value=str(DEFAULT_CONFIG)))
    config = questionary.select(
        "Config:", choices=choices, default=next((c for c in choices if c.value == str(default)), None)
    ).ask()
    if config is None:
        return None
    return [command, "--config", config]


def main() -> None:
    argv = sys.argv[1:]
    if not argv and sys.stdin.isatty():
        picked = _interactive_argv()
        if picked is None:
            sys.exit(0)
        argv = picked
    sys.exit(run(argv))
