"""
Coarse2Fine Trainer
===================
CLI for the two-stage attention classifier on synthetic fine-grained data.

Usage:
    python main.py gen-data [--config run.cfg] [--out-dir runs/data]
    python main.py pretrain-upsampler [--config run.cfg] [--out runs/upsampler.c2f]
    python main.py train --data runs/data --out runs/model [--upsampler-init runs/upsampler.c2f] [--resume ckpt]
    python main.py eval --checkpoint runs/model/last.c2f --data runs/data --mode average
    python main.py localize --checkpoint runs/model/last.c2f --data runs/data --out-dir runs/loc
    python main.py gradcheck [--full]
    python main.py ablate --kind attention --data runs/data

Exit codes: 0 success, 1 usage/config error, 2 file/format error,
3 numerical failure, 4 failed check.
"""
import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

# Add current directory to path
sys.path.insert(0, str(Path(__file__).parent))

from config import (
    CHECKPOINT_SUFFIX, EXPECT_TOLERANCE, METRICS_FILENAME, PILOT_RECORD, PRETRAIN_MAX_MSE, RUNS_DIR,
    TEST_SPLIT_NAME, TRAIN_SPLIT_NAME,
)
from modules import data_synth
from modules.checkpoint import (
    load_model, load_upsampler, save_model, save_upsampler, write_tensor_file,
)
from modules.coarse2fine import INFERENCE_MODES, EpochMetrics, ModelGraph, evaluate, train
from modules.deconv_upsampler import (
    bilinear_reference_mse, evaluate_mse, make_pairs, pretrain, upsampler_baseline_mse,
)
from modules.errors import Coarse2FineError
from modules.experiments import ABLATION_KINDS, record_results, recorded_value, run_ablation
from modules.localization import error_from_results, localize_dataset, results_frame, sample_mask
from modules.run_config import RunConfig
from modules.verification import run_suite

EXIT_USAGE = 1
EXIT_FORMAT = 2
EXIT_CHECK_FAILED = 4
METRICS_COLUMNS = ["epoch", "L1", "L2", "L3", "L", "acc_coarse", "acc_fine", "acc_average"]


def banner():
    """Print application banner."""
    print("""
╔═══════════════════════════════════════════════════════════════╗
║       COARSE2FINE TRAINER                                     ║
║       Two-stage attention for fine-grained classification     ║
╚═══════════════════════════════════════════════════════════════╝
    """)


def load_run_config(args) -> RunConfig:
    return RunConfig.load(getattr(args, "config", None), getattr(args, "set", None) or [])


def resolve_split(path: str, split_name: str) -> Path:
    """A dataset file, or the named split inside a data directory."""
    path = Path(path)
    return path / split_name if path.is_dir() else path


def cmd_gen_data(args):
    """
    Generate the synthetic train/test splits.
    """
    run_config = load_run_config(args)
    out_dir = Path(args.out_dir) if args.out_dir else RUNS_DIR / "data"

    print(f"\n🎨 Generating synthetic data → {out_dir}")
    print("=" * 60)
    splits = data_synth.generate(run_config.synth_config())
    data_synth.write(splits.train, out_dir / TRAIN_SPLIT_NAME)
    data_synth.write(splits.test, out_dir / TEST_SPLIT_NAME)

    data_synth.print_dataset_summary(splits.train, "TRAIN SPLIT")
    data_synth.print_dataset_summary(splits.test, "TEST SPLIT")
    print(f"✓ Wrote {out_dir / TRAIN_SPLIT_NAME}")
    print(f"✓ Wrote {out_dir / TEST_SPLIT_NAME}")
    return 0


def cmd_pretrain_upsampler(args):
    """
    Pretrain the deconv upsampler on classical interpolation pairs.
    """
    run_config = load_run_config(args)
    settings = run_config.section("upsampler")
    config = run_config.upsampler_config()
    out_path = Path(args.out) if args.out else RUNS_DIR / f"upsampler{CHECKPOINT_SUFFIX}"

    print(f"\n🔧 Pretraining upsampler {config.in_size}x{config.in_size} → {config.out_size}x{config.out_size}")
    print("=" * 60)
    pairs = make_pairs(config, settings["pairs"], np.random.default_rng(settings["seed"]))
    train_pairs, held_out = pairs.split(settings["held_out"])
    result = pretrain(config, train_pairs, settings["epochs"], settings["lr"], settings["momentum"],
                      settings["batch_size"], settings["seed"])
    save_upsampler({name: p.data for name, p in result.params.items()}, run_config, out_path)

    print("-" * 60)
    if result.epoch_losses:
        print(f"Training MSE: {result.epoch_losses[0]:.6f} (epoch 1) → {result.epoch_losses[-1]:.6f} "
              f"(epoch {len(result.epoch_losses)})")
    passed = True
    if held_out.count:
        held_out_mse = evaluate_mse(result.params, config, held_out)
        learned = bilinear_reference_mse(result.params, config, held_out)
        baseline = upsampler_baseline_mse(held_out, config.out_size)
        print(f"Held-out MSE: {held_out_mse:.6f}")
        print(f"vs bilinear: {learned:.6f}   nearest vs bilinear: {baseline:.6f}")
        passed = held_out_mse <= PRETRAIN_MAX_MSE and learned < baseline
        if args.record:
            record_results(args.record, "upsampler", {
                "held_out_mse": held_out_mse, "vs_bilinear": learned, "nearest_vs_bilinear": baseline,
            })
            print(f"✓ Recorded in {args.record}")
    elif args.record:
        print("⚠ No held-out pairs; nothing recorded")
    print(f"✓ Saved {out_path}")
    if args.check and not passed:
        print("❌ Pretraining check failed")
        return EXIT_CHECK_FAILED
    return 0


def write_metrics(rows, path: Path) -> None:
    pd.DataFrame([vars(r) if isinstance(r, EpochMetrics) else r for r in rows],
                 columns=METRICS_COLUMNS).to_csv(path, index=False)


def cmd_train(args):
    """
    Train a model, writing a checkpoint per epoch and metrics.csv.
    """
    out_dir = Path(args.out) if args.out else RUNS_DIR / "model"
    metrics_path = out_dir / METRICS_FILENAME
    rows = []
    if args.resume:
        loaded = load_model(args.resume)
        run_config, model = loaded.run_config, loaded.model
        for assignment in args.set or []:
            run_config.apply_override(assignment)
        run_config.validate()
        if metrics_path.exists():
            rows = [r for r in pd.read_csv(metrics_path).to_dict("records") if r["epoch"] <= model.epoch]
        print(f"\n▶ Resuming from {args.resume} (epoch {model.epoch})")
    else:
        run_config = load_run_config(args)
        backbone = run_config.backbone_config()
        model = ModelGraph.build(backbone, run_config.train_config(), run_config.upsampler_config(backbone))
        if args.upsampler_init:
            model.load_upsampler(load_upsampler(args.upsampler_init))
            print(f"✓ Upsampler initialized from {args.upsampler_init}")
    config = run_config.train_config()

    train_set = data_synth.read(resolve_split(args.data, TRAIN_SPLIT_NAME))
    test_set = data_synth.read(resolve_split(args.data, TEST_SPLIT_NAME)) if Path(args.data).is_dir() else None
    print(f"\n🏋 Training on {len(train_set):,} samples for {config.epochs} epochs → {out_dir}")
    print("=" * 60)

    def on_epoch_end(model_: ModelGraph, metrics: EpochMetrics) -> None:
        save_model(model_, run_config, out_dir / f"epoch_{metrics.epoch:03d}{CHECKPOINT_SUFFIX}")
        save_model(model_, run_config, out_dir / f"last{CHECKPOINT_SUFFIX}")
        rows.append(metrics)
        write_metrics(rows, metrics_path)
        print(f"  epoch {metrics.epoch:>3}: L={metrics.L:.4f}  average acc {100 * metrics.acc_average:.2f}%")

    out_dir.mkdir(parents=True, exist_ok=True)
    train(train_set, config, model=model, eval_dataset=test_set, on_epoch_end=on_epoch_end)
    print("=" * 60)
    print(f"✓ Training complete: {out_dir / ('last' + CHECKPOINT_SUFFIX)}")
    print(f"✓ Metrics: {metrics_path}")
    return 0


def cmd_eval(args):
    """
    Print the accuracy of one inference mode, optionally recording it or
    checking it against the pilot record.
    """
    model = load_model(args.checkpoint).model
    dataset = data_synth.read(resolve_split(args.data, TEST_SPLIT_NAME))
    accuracy = evaluate(model, dataset, modes=[args.mode])[args.mode]
    run = f"eval.{args.mode}"
    if args.record:
        record_results(args.record, run, {"accuracy": accuracy})
        print(f"✓ Recorded in {args.record}")
    if args.expect:
        expected = recorded_value(args.expect, run, "accuracy")
        if abs(accuracy - expected) > EXPECT_TOLERANCE:
            print(f"❌ Accuracy {100.0 * accuracy:.2f}% differs from recorded {100.0 * expected:.2f}%")
            return EXIT_CHECK_FAILED
        print(f"✓ Matches recorded accuracy in {args.expect}")
    print(f"Accuracy ({args.mode}): {100.0 * accuracy:.2f}%")
    return 0


def cmd_localize(args):
    """
    Localize objects on a split with boxes and report the localization error.
    """
    loaded = load_model(args.checkpoint)
    model, settings = loaded.model, loaded.run_config.section("localize")
    threshold = args.threshold if args.threshold is not None else settings["threshold"]
    mode = args.mode or settings["mode"]
    dataset = data_synth.read(resolve_split(args.data, TEST_SPLIT_NAME))
    out_dir = Path(args.out_dir) if args.out_dir else RUNS_DIR / "localization"
    out_dir.mkdir(parents=True, exist_ok=True)

    print(f"\n📍 Localizing {len(dataset):,} samples (threshold {threshold}, mode {mode})")
    print("=" * 60)
    results = localize_dataset(model, dataset, threshold, mode, settings["iou_threshold"])
    results_frame(results).to_csv(out_dir / "localization.csv", index=False)

    if args.dump_masks:
        masks = {}
        for i in range(min(args.dump_masks, len(results))):
            masks[f"mask.{i}"] = sample_mask(model, dataset.images[i], results[i].pred_class,
                                             threshold).astype(np.float32)
        write_tensor_file(out_dir / f"masks{CHECKPOINT_SUFFIX}", masks)
        print(f"✓ Dumped {len(masks)} masks")

    misses = sum(r.box is None for r in results)
    if misses:
        print(f"⚠ {misses} samples without a detection")
    print(f"Localization error: {error_from_results(results):.2f}%")
    print(f"✓ Rows: {out_dir / 'localization.csv'}")
    return 0


def cmd_gradcheck(args):
    """
    Run the gradient verification suite.
    """
    print("\n🔍 Gradient checks (float64, central differences)")
    print("=" * 60)
    all_passed, results = run_suite(full=args.full, instances=args.instances)
    print("-" * 60)
    print(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
    if not all_passed:
        print("❌ Gradient suite failed")
        return EXIT_CHECK_FAILED
    print("✅ All gradient checks passed")
    return 0


def cmd_ablate(args):
    """
    Run a seeded ablation and check its directional gates.
    """
    run_config = load_run_config(args)
    backbone = run_config.backbone_config()
    train_set = data_synth.read(resolve_split(args.data, TRAIN_SPLIT_NAME))
    test_set = data_synth.read(resolve_split(args.data, TEST_SPLIT_NAME))
    upsampler_init = load_upsampler(args.upsampler_init) if args.upsampler_init else None
    out_path = Path(args.out) if args.out else RUNS_DIR / f"ablation_{args.kind}.csv"

    print(f"\n🧪 Ablation: {args.kind}")
    print("=" * 60)
    report = run_ablation(args.kind, train_set, test_set, backbone, run_config.train_config(),
                          run_config.upsampler_config(backbone), seeds=args.seeds,
                          upsampler_init=upsampler_init,
                          threshold=run_config.section("localize")["threshold"], out_path=out_path)
    print("-" * 60)
    print("MEDIANS:")
    print(report.medians.round(2).to_string())
    print("-" * 60)
    for gate, passed in report.gates.items():
        print(f"  {'✓' if passed else '✗'} {gate}")
    print(f"✓ Runs: {out_path}")
    return 0 if report.passed else EXIT_CHECK_FAILED


class CliParser(argparse.ArgumentParser):
    """Usage errors exit with code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"❌ Error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = CliParser(
        description="Coarse2Fine two-stage attention trainer",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python main.py gen-data --out-dir runs/data
  python main.py pretrain-upsampler --out runs/upsampler.c2f
  python main.py train --data runs/data --out runs/model --upsampler-init runs/upsampler.c2f
  python main.py eval --checkpoint runs/model/last.c2f --data runs/data --mode average
  python main.py eval --checkpoint runs/model/last.c2f --data runs/data --expect
  python main.py gradcheck --full
        """
    )
    parser.add_argument('--verbose', '-v', action='store_true', help='Debug logging')
    subparsers = parser.add_subparsers(dest='command', help='Available commands', parser_class=CliParser)

    def with_config(sub):
        sub.add_argument('--config', '-c', help='Run config file')
        sub.add_argument('--set', action='append', metavar='SECTION.KEY=VALUE', help='Override a config value')
        return sub

    gen_parser = with_config(subparsers.add_parser('gen-data', help='Generate synthetic data'))
    gen_parser.add_argument('--out-dir', '-o', help='Output directory')

    pre_parser = with_config(subparsers.add_parser('pretrain-upsampler', help='Pretrain the deconv upsampler'))
    pre_parser.add_argument('--out', '-o', help='Output weights file')
    pre_parser.add_argument('--check', action='store_true', help='Exit 4 unless the held-out checks pass')
    pre_parser.add_argument('--record', nargs='?', const=str(PILOT_RECORD), metavar='FILE',
                            help=f'Store the held-out numbers (default {PILOT_RECORD.name})')

    train_parser = with_config(subparsers.add_parser('train', help='Train a model'))
    train_parser.add_argument('--data', '-d', required=True, help='Data directory or training file')
    train_parser.add_argument('--out', '-o', help='Output directory')
    train_parser.add_argument('--upsampler-init', help='Pretrained upsampler weights')
    train_parser.add_argument('--resume', help='Checkpoint to resume from')

    eval_parser = subparsers.add_parser('eval', help='Evaluate a checkpoint')
    eval_parser.add_argument('--checkpoint', required=True, help='Checkpoint file')
    eval_parser.add_argument('--data', '-d', required=True, help='Data directory or dataset file')
    eval_parser.add_argument('--mode', choices=INFERENCE_MODES, default='average', help='Inference mode')
    eval_parser.add_argument('--record', nargs='?', const=str(PILOT_RECORD), metavar='FILE',
                             help='Store the accuracy in a pilot record')
    eval_parser.add_argument('--expect', nargs='?', const=str(PILOT_RECORD), metavar='FILE',
                             help='Exit 4 unless the accuracy matches the pilot record')

    loc_parser = subparsers.add_parser('localize', help='Evaluate weakly supervised localization')
    loc_parser.add_argument('--checkpoint', required=True, help='Checkpoint file')
    loc_parser.add_argument('--data', '-d', required=True, help='Data directory or dataset file')
    loc_parser.add_argument('--threshold', type=float, help='Mask threshold as a fraction of the max')
    loc_parser.add_argument('--mode', choices=INFERENCE_MODES, help='Inference mode for the class')
    loc_parser.add_argument('--out-dir', '-o', help='Output directory')
    loc_parser.add_argument('--dump-masks', type=int, default=0, metavar='N', help='Write the first N masks')

    grad_parser = subparsers.add_parser('gradcheck', help='Run the gradient verification suite')
    grad_parser.add_argument('--full', action='store_true', help='Include the full training loss')
    grad_parser.add_argument('--instances', type=int, default=20, help='Random instances per check')

    ablate_parser = with_config(subparsers.add_parser('ablate', help='Run an ablation'))
    ablate_parser.add_argument('--kind', choices=list(ABLATION_KINDS), required=True, help='Ablation kind')
    ablate_parser.add_argument('--data', '-d', required=True, help='Data directory')
    ablate_parser.add_argument('--seeds', type=int, nargs='+', help='Training seeds')
    ablate_parser.add_argument('--upsampler-init', help='Pretrained upsampler weights')
    ablate_parser.add_argument('--out', '-o', help='Output CSV')
    return parser


COMMANDS = {
    'gen-data': cmd_gen_data,
    'pretrain-upsampler': cmd_pretrain_upsampler,
    'train': cmd_train,
    'eval': cmd_eval,
    'localize': cmd_localize,
    'gradcheck': cmd_gradcheck,
    'ablate': cmd_ablate,
}


def main(argv=None):
    """Main entry point."""
    banner()
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")

    command = COMMANDS.get(args.command)
    if command is None:
        parser.print_help()
        return 0
    try:
        return command(args)
    except Coarse2FineError as e:
        print(f"❌ Error: {e}")
        return e.exit_code
    except FileNotFoundError as e:
        print(f"❌ Error: {e}")
        return EXIT_FORMAT


if __name__ == "__main__":
    sys.exit(main())
