import argparse
import json
import logging
import sys
from pathlib import Path

from spamlens.checkpoint import load_checkpoint, save_checkpoint
from spamlens.cnn_model import build_model, classify_probability, evaluate, train
from spamlens.config import COMMANDS, EXPLAIN_METHODS, RunConfig, load_config_file, parse_bool
from spamlens.dataset_pipeline import decode_image, gen_synthetic, ingest, normalize, split, write_samples
from spamlens.errors import ConfigError, DatasetError, SpamLensError
from spamlens.files import atomic_write_bytes, atomic_write_text, write_json
from spamlens.lime_explainer import explain as lime_explain
from spamlens.metrics import confusion, format_report, metrics_report
from spamlens.report import render_overlay, segments_png
from spamlens.saliency_heatmap import occlusion_map
from spamlens.shap_explainer import kernel_shap

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def create_argument_parser():
    """Create and return the argument parser for the spamlens CLI."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="Random seed (default: 0)")
    common.add_argument(
        "--json", action="store_true", help="Print a single JSON document instead of status lines"
    )
    common.add_argument(
        "--threads", type=int, default=None, help="Cap on parallel model evaluations (default: all cores)"
    )
    common.add_argument("--config", type=str, default=None, help="Plain-text key = value config file")
    common.add_argument("-v", "--verbose", action="store_true", help="Log progress at INFO level")

    parser = argparse.ArgumentParser(
        prog="spamlens",
        description="Train, evaluate and explain an image-spam CNN",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  spamlens gen-synthetic corpus/ --n 200 --seed 7
  spamlens ingest corpus/ clean/
  spamlens train clean/ --out model.spl --seed 7
  spamlens eval --checkpoint model.spl --data clean/
  spamlens explain model.spl clean/spam/0a1b2c3d4e5f6a7b.png --method lime --out explanations/spam1
        """,
    )
    commands = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = commands.add_parser("ingest", parents=[common], help="Decode, normalise and deduplicate a corpus")
    p.add_argument("src", type=str, help="Corpus root with spam/ and normal/ sub-directories")
    p.add_argument("out", type=str, help="Output directory for the normalised corpus")
    p.add_argument(
        "--format", choices=("png", "jpg"), default="png", help="Output image format (default: png)"
    )

    p = commands.add_parser("train", parents=[common], help="Train the CNN on a corpus")
    p.add_argument("data", type=str, help="Corpus root in the ingest layout")
    p.add_argument("--out", type=str, required=True, help="Checkpoint file to write")
    p.add_argument("--epochs", type=int, default=None, help="Training epochs (default: 30)")
    p.add_argument("--batch-size", type=int, default=None, help="Mini-batch size (default: 20)")
    p.add_argument("--learning-rate", type=float, default=None, help="RMSprop learning rate (default: 1e-4)")
    p.add_argument(
        "--history", type=str, default=None, help="JSON-lines history file (default: <out>.history.jsonl)"
    )

    p = commands.add_parser("eval", parents=[common], help="Score a checkpoint on a corpus")
    p.add_argument("--checkpoint", type=str, default=None, help="Checkpoint file")
    p.add_argument("--data", type=str, default=None, help="Corpus root in the ingest layout")
    p.add_argument(
        "--split",
        choices=("test", "all"),
        default="test",
        help="Held-out quarter re-derived from --seed, or the whole corpus (default: test)",
    )
    p.add_argument("--threshold", type=float, default=0.5, help="Spam decision threshold (default: 0.5)")
    p.add_argument(
        "--predictions",
        type=str,
        default=None,
        help='Score JSON lines of {"label": .., "prediction": ..} instead of running a model',
    )

    p = commands.add_parser("explain", parents=[common], help="Explain the classification of one image")
    p.add_argument("checkpoint", type=str, help="Checkpoint file")
    p.add_argument("image", type=str, help="Image to explain")
    p.add_argument("--method", choices=EXPLAIN_METHODS, required=True, help="Explanation method")
    p.add_argument("--out", type=str, required=True, help="Output prefix for .json and .png")
    p.add_argument("--segments", type=int, default=None, help="Superpixels for lime/shap (default: 50)")
    p.add_argument("--samples", type=int, default=None, help="LIME perturbations (default: 1000)")
    p.add_argument("--kernel-width", type=float, default=None, help="LIME kernel width (default: 0.25)")
    p.add_argument("--ridge", type=float, default=None, help="LIME ridge strength (default: 1e-3)")
    p.add_argument("--max-features", type=int, default=None, help="LIME non-zero weights (default: 10)")
    p.add_argument("--coalitions", type=int, default=None, help="SHAP sampled coalitions (default: 2048)")
    p.add_argument(
        "--exact-threshold", type=int, default=None, help="SHAP full enumeration up to this M (default: 12)"
    )
    p.add_argument("--regularization", type=float, default=None, help="SHAP ridge strength (default: 0)")
    p.add_argument("--patch-size", type=int, default=None, help="Occlusion patch size (default: 16)")
    p.add_argument("--stride", type=int, default=None, help="Occlusion stride (default: 8)")

    p = commands.add_parser("gen-synthetic", parents=[common], help="Write a synthetic two-class corpus")
    p.add_argument("out", type=str, help="Output corpus root")
    p.add_argument("--n", type=int, default=200, help="Images per class (default: 200)")

    return parser


def command_parser(parser, command):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def apply_config_file(parser, command, values):
    """Install config-file values as defaults of ``command`` so that flags override them."""
    sub = command_parser(parser, command)
    actions = {
        action.dest: action
        for action in sub._actions
        if action.option_strings and action.dest not in ("help", "config")
    }
    unknown = sorted(set(values) - set(actions))
    if unknown:
        raise ConfigError(f"Unknown setting(s) for '{command}': {', '.join(unknown)}")
    defaults = {}
    for key, raw in values.items():
        action = actions[key]
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = parse_bool(raw, key)
        elif action.choices is not None and raw not in action.choices:
            raise ConfigError(f"'{key}' must be one of {', '.join(action.choices)}, got {raw!r}")
        else:
            # string defaults go through the action's type conversion
            defaults[key] = raw
    sub.set_defaults(**defaults)


def parse_arguments(argv=None):
    parser = create_argument_parser()
    args = parser.parse_args(argv)
    if args.config:
        apply_config_file(parser, args.command, load_config_file(args.config))
        args = parser.parse_args(argv)
    return args


class Console:
    """Status lines on stdout, suppressed in --json mode."""

    def __init__(self, json_mode: bool):
        self.json_mode = json_mode

    def status(self, message: str):
        if not self.json_mode:
            print(message)

    def result(self, document: dict, text: str = None):
        if self.json_mode:
            print(json.dumps(document, sort_keys=True, indent=4))
        elif text is not None:
            print(text)


def cmd_ingest(run: RunConfig, console: Console) -> int:
    options = run.options
    console.status(f"▸ Ingesting {options['src']}...")
    samples, report = ingest(options["src"], threads=run.threads)
    if not samples:
        raise DatasetError(f"No images kept from {options['src']}")
    out = Path(options["out"])
    write_samples(samples, out, image_format=options["format"])
    write_json(out / "ingest_report.json", report.to_dict())
    console.status(f"✓ Decoded {report.decoded}, corrupt {report.corrupt}, duplicates removed {report.duplicates_removed}")
    for label, kept in report.kept.items():
        console.status(f"  {label}: {kept} kept")
    console.result(report.to_dict(), f"✓ Normalised corpus written to {out}")
    return EXIT_OK


def cmd_train(run: RunConfig, console: Console) -> int:
    options = run.options
    config = run.train_config()
    console.status(f"▸ Loading corpus {options['data']}...")
    samples, _ = ingest(options["data"], threads=run.threads)
    data = split(samples, seed=run.seed)
    console.status(f"✓ {len(data.train)} training / {len(data.test)} held-out samples")

    console.status(
        f"▸ Training {config.epochs} epochs (batch {config.batch_size}, lr {config.learning_rate:g})..."
    )
    model = build_model(seed=run.seed)
    model, history = train(model, data, config, progress=not console.json_mode and sys.stderr.isatty())

    checkpoint = save_checkpoint(model, options["out"])
    history_path = Path(options["history"] or f"{options['out']}.history.jsonl")
    atomic_write_text(history_path, history.to_jsonl())
    last = history.records[-1]
    console.result(
        {
            "checkpoint": str(checkpoint),
            "history": str(history_path),
            "epochs": len(history.records),
            "train_size": len(data.train),
            "test_size": len(data.test),
            "final_loss": last.loss,
            "train_accuracy": last.train_accuracy,
            "test_accuracy": last.test_accuracy,
        },
        f"✓ Checkpoint written to {checkpoint}\n✓ History written to {history_path}",
    )
    return EXIT_OK


def _read_predictions(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Predictions file not found: {path}")
    predictions, labels = [], []
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            labels.append(record["label"])
            predictions.append(record["prediction"])
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise ValueError(f"{path}:{number}: expected {{\"label\", \"prediction\"}} record: {e}") from e
    return predictions, labels


def cmd_eval(run: RunConfig, console: Console) -> int:
    options = run.options
    if options["predictions"]:
        console.status(f"▸ Scoring predictions from {options['predictions']}...")
        predictions, labels = _read_predictions(options["predictions"])
        cm = confusion(predictions, labels)
    else:
        if not options["checkpoint"] or not options["data"]:
            raise ConfigError("eval needs --checkpoint and --data, or --predictions")
        model = load_checkpoint(options["checkpoint"])
        console.status(f"▸ Loading corpus {options['data']}...")
        samples, _ = ingest(options["data"], threads=run.threads)
        if options["split"] == "test":
            samples = split(samples, seed=run.seed).test
        console.status(f"▸ Evaluating on {len(samples)} samples...")
        cm = evaluate(model, samples, threshold=options["threshold"])
    console.result(metrics_report(cm), format_report(cm))
    return EXIT_OK


def cmd_explain(run: RunConfig, console: Console) -> int:
    options = run.options
    method = options["method"]
    config = run.explainer_config()
    model = load_checkpoint(options["checkpoint"])
    image = normalize(decode_image(options["image"]))
    prediction = classify_probability(model.forward(image))
    console.status(f"✓ Prediction: {prediction.label} (p = {prediction.probability:.4f})")

    console.status(f"▸ Explaining with {method}...")
    segmentation = None
    if method == "lime":
        explanation = lime_explain(image, model.forward, config, threads=run.threads)
        segmentation = explanation.segmentation
    elif method == "shap":
        explanation = kernel_shap(image, None, model.forward, config, threads=run.threads)
        segmentation = explanation.segmentation
    else:
        explanation = occlusion_map(
            image, model.forward, patch_size=config.patch_size, stride=config.stride, threads=run.threads
        )

    prefix = options["out"]
    outputs = {"json": f"{prefix}.json", "png": f"{prefix}.png"}
    document = explanation.to_dict()
    write_json(outputs["json"], document)
    atomic_write_bytes(outputs["png"], render_overlay(image, explanation))
    if segmentation is not None:
        outputs["segments"] = f"{prefix}.segments.png"
        atomic_write_bytes(outputs["segments"], segments_png(segmentation))

    console.result(
        {"prediction": prediction.label, "probability": prediction.probability, "outputs": outputs, "explanation": document},
        "\n".join(f"✓ Wrote {path}" for path in outputs.values()),
    )
    return EXIT_OK


def cmd_gen_synthetic(run: RunConfig, console: Console) -> int:
    options = run.options
    console.status(f"▸ Generating {options['n']} images per class...")
    corpus = gen_synthetic(options["n"], run.seed, options["out"])
    console.result(
        {"root": str(corpus.root), "files": len(corpus.files), "n_per_class": corpus.n_per_class, "seed": corpus.seed},
        f"✓ Wrote {len(corpus.files)} images to {corpus.root}",
    )
    return EXIT_OK


HANDLERS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "eval": cmd_eval,
    "explain": cmd_explain,
    "gen-synthetic": cmd_gen_synthetic,
}
assert set(HANDLERS) == set(COMMANDS)


def main(argv=None):
    """Main entry point for the spamlens CLI."""
    try:
        args = parse_arguments(argv)
    except SystemExit as e:
        return e.code if e.code is not None else EXIT_OK
    except FileNotFoundError as e:
        print(f"✗ Error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"✗ Configuration Error: {e}", file=sys.stderr)
        return EXIT_USAGE

    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    console = Console(args.json)

    try:
        run = RunConfig.from_namespace(args)
        return HANDLERS[run.command](run, console)
    except ConfigError as e:
        print(f"✗ Configuration Error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"✗ Error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SpamLensError as e:
        print(f"✗ {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except ValueError as e:
        print(f"✗ Validation Error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"✗ I/O Error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except KeyboardInterrupt:
        print("\n✗ Cancelled by user", file=sys.stderr)
        return EXIT_FAILURE
    except Exception as e:
        print(f"✗ Unexpected error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
