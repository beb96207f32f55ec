import os
import sys
import glob
import argparse
import logging
from typing import List, Optional, Tuple
import torch
from dotenv import load_dotenv
from pydantic import ValidationError
from urbanet.Config import Settings, format_settings, load_settings
from urbanet.Errors import DataError, NumericError, PreconditionError
from urbanet.Evaluation import (
    EvalReport,
    evaluate,
    export_report,
    export_scatter,
    model_label,
    predict_world,
    published_rows,
    render_scatter,
    stratify,
)
from urbanet.Grid import (
    WorldGrid,
    SplitAssignment,
    assign_split,
    hold_out_regions,
    load_grid,
    normalize_channels,
    pad_grid,
    read_norm_stats,
    save_grid,
    write_norm_stats,
)
from urbanet.Synth import gen_world
from urbanet.Tiler import (
    DEFAULT_PAD,
    INPUT_CHANNELS,
    MULTITASK_LAYOUT,
    POPULATION_TARGET,
    URBAN_TARGET,
    ChannelLayout,
    TileDataset,
    Tiler,
    WindowSpec,
)
from urbanet.Trainer import build_multitask, train, train_multitask
from urbanet.UNet import TINY_SPEC, grad_check, init_params, load_checkpoint, make_spec

this_directory = os.path.abspath(os.path.dirname(__file__))
with open(os.path.join(this_directory, "version"), encoding="utf-8") as f:
    version = f.read().strip()

# Other sizes can be set with `window=` in a config file.
WINDOW_SIZES = (16, 22, 28)

FLAG_SETTINGS = (
    "seed",
    "window",
    "threads",
    "out_dir",
    "checkpoint",
    "test_regions",
    "world",
    "target",
    "by_region",
)


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def common_flags() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    parent.add_argument("--config", help="key=value settings file")
    parent.add_argument("--seed", type=int)
    parent.add_argument("--window", type=int, choices=WINDOW_SIZES, help="tile size in pixels")
    parent.add_argument("--threads", type=int)
    parent.add_argument("--out-dir", dest="out_dir")
    parent.add_argument("--checkpoint")
    parent.add_argument("--test-regions", dest="test_regions", help="comma-separated ISO codes")
    parent.add_argument("--world", help="WGRD grid file")
    parent.add_argument("--target", choices=(URBAN_TARGET, POPULATION_TARGET))
    parent.add_argument("--by-region", dest="by_region", action="store_true")
    parent.add_argument("--print-config", dest="print_config", action="store_true")
    return parent


def build_parser() -> Parser:
    parent = common_flags()
    parser = Parser(prog="urbanet", parents=[parent], description="Urbanization change U-Net")
    parser.add_argument("--version", action="version", version=version)
    subparsers = parser.add_subparsers(dest="command", parser_class=Parser)
    for name, help_text in (
        ("synth", "generate a synthetic world"),
        ("split", "assign test regions and print pixel counts"),
        ("train", "train a single-task network"),
        ("multitask", "train the multi-task network from a pretrained checkpoint"),
        ("eval", "evaluate a checkpoint on the test regions"),
        ("report", "merge report rows and render scatter plots"),
        ("gradcheck", "compare analytic and numeric gradients"),
    ):
        subparsers.add_parser(name, parents=[parent], help=help_text)
    return parser


def world_path(settings: Settings) -> str:
    return settings.world or os.path.join(settings.out_dir, "world.wgrd")


def out_path(settings: Settings, name: str) -> str:
    os.makedirs(settings.out_dir, exist_ok=True)
    return os.path.join(settings.out_dir, name)


def checkpoint_path(settings: Settings, multitask: bool = False, target: str = URBAN_TARGET) -> str:
    prefix = "multitask" if multitask else "unet"
    if target != URBAN_TARGET:
        prefix = f"{prefix}_{target}"
    return out_path(settings, f"{prefix}_sz{settings.window}.unpk")


def prepare(settings: Settings) -> Tuple[WorldGrid, WorldGrid, SplitAssignment]:
    """Raw grid, normalized padded grid and the train/validation/test split.

    Statistics are fitted on training pixels once and reused from the output
    directory afterwards.
    """
    raw = load_grid(world_path(settings))
    split = assign_split(raw, settings.test_regions)
    split = hold_out_regions(raw, split, settings.validation_fraction, settings.seed)
    stats_path = out_path(settings, "norm_stats.txt")
    if os.path.exists(stats_path):
        normalized, _ = normalize_channels(raw, stats=read_norm_stats(stats_path))
    else:
        names = [
            name
            for name in INPUT_CHANNELS + (POPULATION_TARGET,)
            if name in raw.channel_names
        ]
        normalized, stats = normalize_channels(
            raw, split=split, channels=names, mode=settings.normalization
        )
        write_norm_stats(stats, stats_path)
    window = WindowSpec.centered(settings.window)
    grid = pad_grid(normalized, max(DEFAULT_PAD, window.reach))
    return raw, grid, split


def datasets(settings: Settings, layout: ChannelLayout):
    _, grid, split = prepare(settings)
    tiler = Tiler(grid, WindowSpec.centered(settings.window), layout, split)
    return (
        TileDataset(tiler, "train", augment=True),
        TileDataset(tiler, "validation", augment=False),
    )


def synth_command(settings: Settings) -> int:
    world = gen_world(settings.synth_config())
    path = world_path(settings)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    save_grid(world, path)
    return 0


def split_command(settings: Settings) -> int:
    raw = load_grid(world_path(settings))
    counts = assign_split(raw, settings.test_regions).counts
    for name, count in counts.items():
        print(f"{name}={count}")
    return 0


def train_command(settings: Settings) -> int:
    layout = ChannelLayout(targets=(settings.target,))
    train_set, val_set = datasets(settings, layout)
    model = init_params(settings.unet_spec(heads=((settings.target, 1),)), settings.seed)
    _, history = train(
        model,
        train_set,
        val_set,
        settings.train_config(),
        checkpoint_path=settings.checkpoint or checkpoint_path(settings, target=settings.target),
    )
    stem = "" if settings.target == URBAN_TARGET else f"_{settings.target}"
    history.to_csv(out_path(settings, f"history{stem}_sz{settings.window}.csv"))
    return 0


def multitask_command(settings: Settings) -> int:
    pretrained = load_checkpoint(settings.checkpoint or checkpoint_path(settings))
    model = build_multitask(pretrained, seed=settings.seed)
    train_set, val_set = datasets(settings, MULTITASK_LAYOUT)
    _, history = train_multitask(
        model,
        train_set,
        val_set,
        settings.schedule(),
        checkpoint_path=checkpoint_path(settings, multitask=True),
    )
    history.to_csv(out_path(settings, f"history_multitask_sz{settings.window}.csv"))
    return 0


def eval_command(settings: Settings) -> int:
    model = load_checkpoint(settings.checkpoint or checkpoint_path(settings, target=settings.target))
    heads = model.spec.head_names
    if settings.target not in heads:
        raise PreconditionError(f"Checkpoint predicts {heads}, not '{settings.target}'.")
    raw, grid, split = prepare(settings)
    layout = ChannelLayout(targets=tuple(heads))
    window = WindowSpec.centered(settings.window)
    prediction = predict_world(model, grid, window, split, "test", layout, threads=settings.threads)
    truth = grid.unpadded(grid.channel(settings.target))
    strata = stratify(raw, split, "test")
    label = model_label(settings.window, multitask=len(heads) > 1)
    regions = (raw.unpadded(raw.regions), raw.region_table) if settings.by_region else None
    rows = evaluate(prediction, truth, strata, label, settings.target, regions)
    report_path = out_path(settings, f"report_{settings.target}.csv")
    report = EvalReport.read_csv(report_path) if os.path.exists(report_path) else EvalReport()
    export_report(report.merge(rows), report_path)
    stem = "multitask" if len(heads) > 1 else "unet"
    export_scatter(
        prediction.plane(settings.target),
        truth,
        strata["all_cells"],
        out_path(settings, f"scatter_{settings.target}_{stem}_sz{settings.window}.csv"),
        settings.target,
    )
    return 0


def report_command(settings: Settings) -> int:
    written = 0
    for target in (URBAN_TARGET, POPULATION_TARGET):
        path = os.path.join(settings.out_dir, f"report_{target}.csv")
        if not os.path.exists(path):
            continue
        merged = EvalReport()
        if target == URBAN_TARGET:
            merged = EvalReport(rows=published_rows())
        merged = merged.merge(EvalReport.read_csv(path))
        export_report(merged, out_path(settings, f"final_report_{target}.csv"))
        for scatter in sorted(glob.glob(os.path.join(settings.out_dir, f"scatter_{target}_*.csv"))):
            render_scatter(scatter, target)
        written += 1
    if not written:
        raise FileNotFoundError(f"No report_*.csv files in {settings.out_dir}; run eval first.")
    return 0


def gradcheck_command(settings: Settings) -> int:
    failed = 0
    for seed in range(settings.seed, settings.seed + settings.gradcheck_seeds):
        result = grad_check(make_spec(**TINY_SPEC), seed=seed)
        print(
            f"seed={seed} max_rel_error={result.max_rel_error:.3e} checked={result.checked} "
            f"skipped={result.skipped} passed={str(result.passed).lower()}"
        )
        failed += not result.passed
    if failed:
        raise NumericError(f"Gradient check failed for {failed} of {settings.gradcheck_seeds} seeds.")
    return 0


commands = {
    "synth": synth_command,
    "split": split_command,
    "train": train_command,
    "multitask": multitask_command,
    "eval": eval_command,
    "report": report_command,
    "gradcheck": gradcheck_command,
}


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        overrides = {key: getattr(args, key, None) for key in FLAG_SETTINGS}
        settings = load_settings(getattr(args, "config", None), overrides)
        if getattr(args, "print_config", False):
            sys.stdout.write(format_settings(settings))
            return 0
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
    except (UsageError, ValidationError, ValueError) as e:
        logging.error(str(e))
        return 1
    except FileNotFoundError as e:
        logging.error(str(e))
        return 2
    torch.manual_seed(settings.seed)
    torch.set_num_threads(settings.threads)
    try:
        return commands[args.command](settings)
    except NumericError as e:
        logging.error(f"{args.command}: {e}")
        return 3
    except (DataError, FileNotFoundError) as e:
        logging.error(f"{args.command}: {e}")
        return 2
    except ValidationError as e:
        logging.error(f"{args.command}: {e}")
        return 1


def main():
    load_dotenv()
    logging.basicConfig(
        level=os.environ.get("LOGLEVEL", "INFO"),
        format="%(asctime)s | %(levelname)s | %(message)s",
    )
    sys.exit(run())


if __name__ == "__main__":
    main()
