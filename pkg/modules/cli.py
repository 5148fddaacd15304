"""
Command-line front end.

Commands:
- `train --config PATH --out DIR [--seed N]`: model.ckpt, metrics.csv, manifest.json in DIR.
- `encode --model CKPT --input FILE --encoder TAG --output CSV`: feature file.
- `probe --model CKPT --task length|content|order --data PATH`: prints `accuracy=...`.
- `eval-sts --model CKPT --pairs PATH`: prints `pearson=...` then `spearman=...`.
- `gradcheck --config PATH`: prints `max_relative_error=...`.
- `synth --task SPEC --size N --output PATH`: synthetic pair (or sentence) file.
- `replay --manifest PATH`: re-runs a command from its manifest.

Every command that writes files records a manifest first: `manifest.json` in the
train directory, `<output>.manifest.json` beside the encode, synth and probe --report files.
Exit codes: 0 success, 2 usage/config/framework, 3 data/format, 4 numerical failure.
"""

import argparse
import json
import os

from deepdiff import DeepDiff

from modules.app_logger import AppLogger
from modules.checkpoint import load_checkpoint
from modules.config import ConfigError, RunManifest, TrainConfig
from modules.mtl import FrameworkError, MTLModel
from modules.ndgrad import NumericalError
from modules.probes import (ProbeConfig, aux_length, aux_word_content, aux_word_order, bag_of_embeddings_features,
                            cosine_eval, encoders_for_tag, extract_features, random_features, write_feature_file,
                            write_probe_report)
from modules.textdata import (DataFormatError, Dataset, Example, SentenceSet, TaskSpec, load_scored_pairs,
                              load_sentences, make_batch, read_pair_lines, synth_generate, synth_sentences,
                              synthetic_vocabulary, write_pair_dataset, write_sentences)
from modules.trainer import CHECKPOINT_FILE, METRICS_FILE, build_tasks, grad_check, model_for, train_multitask

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
MANIFEST_FILE = "manifest.json"
GRADCHECK_TOLERANCE = 1e-4


# --- Manifests ---
def _short(value) -> str:
    text = json.dumps(value, ensure_ascii=False) if isinstance(value, (dict, list)) else str(value)
    return (text[:50] + "...") if len(text) > 53 else text


def log_config_changes(previous: dict, current: dict, logger: AppLogger) -> None:
    """Logs a `| Field | Old | New |` table of what changed since the previous run."""
    try:
        diff = DeepDiff(previous, current, ignore_order=True, view="tree")
        if not diff:
            logger.log("   ...No config changes since the previous run.")
            return
        changes_log = "   **Changes detected:**\n| Field | Old | New |\n|---|---|---|\n"
        for kind in ("values_changed", "type_changes"):
            for change in diff.get(kind, []):
                path = change.path().replace("root", "").replace("['", ".").replace("']", "").strip(".") or "(root)"
                changes_log += f"| `{path}` | `{_short(change.t1)}` | `{_short(change.t2)}` |\n"
        for kind in ("dictionary_item_added", "dictionary_item_removed"):
            for change in diff.get(kind, []):
                path = change.path().replace("root", "").replace("['", ".").replace("']", "").strip(".")
                old = "" if kind == "dictionary_item_added" else _short(change.t1)
                new = _short(change.t2) if kind == "dictionary_item_added" else ""
                changes_log += f"| `{path}` | `{old}` | `{new}` |\n"
        logger.log(changes_log)
    except Exception as e:
        logger.warn(f"   ...Error comparing configs: {e}.")


def start_manifest(command: str, config: dict, inputs: dict, outputs: dict, seed: int, path: str,
                   logger: AppLogger) -> RunManifest:
    """Writes the manifest before any work; a manifest already at `path` is diffed first."""
    if os.path.exists(path):
        try:
            log_config_changes(RunManifest.read(path).config, config, logger)
        except ConfigError as e:
            logger.warn(f"   ...previous manifest unreadable: {e}")
    manifest = RunManifest(command, config, inputs, outputs, seed)
    manifest.write(path)
    logger.log(f"   ...manifest written to {path}")
    logger.log_code({"inputs": manifest.inputs, "outputs": manifest.outputs})
    return manifest


def _args_config(args: argparse.Namespace) -> dict:
    return {key: value for key, value in vars(args).items() if key not in ("handler", "command")}


def _model_with_vocab(path: str) -> MTLModel:
    model = load_checkpoint(path)
    if model.vocab is None or model.embeddings is None:
        raise DataFormatError("checkpoint has no vocabulary or embedding table", path)
    return model


# --- Commands ---
def run_train(config: TrainConfig, out_dir: str, logger: AppLogger, inputs: dict) -> int:
    out_dir = os.path.abspath(out_dir)
    start_manifest("train", config.to_dict(), inputs,
                   {"out": out_dir, "checkpoint": os.path.join(out_dir, CHECKPOINT_FILE),
                    "metrics": os.path.join(out_dir, METRICS_FILE)},
                   config.seed, os.path.join(out_dir, MANIFEST_FILE), logger)
    train_multitask(config, out_dir, logger)
    logger.log("--- Training done ---")
    return EXIT_OK


def cmd_train(args: argparse.Namespace, logger: AppLogger) -> int:
    config = TrainConfig.from_file(args.config)
    if args.seed is not None:
        config.seed = args.seed
        config.validate()
    return run_train(config, args.out, logger, {"config": os.path.abspath(args.config)})


def _read_encode_input(path: str, model: MTLModel) -> Dataset | SentenceSet:
    if not os.path.exists(path):
        raise DataFormatError("input file not found", path)
    with open(path, encoding="utf-8") as handle:
        first = next((line for line in handle if line.strip()), "")
    if "\t" not in first:
        return load_sentences(path, model.vocab)
    # labels are not needed for features
    examples = [Example(i, "input", model.vocab.encode(t1), model.vocab.encode(t2), 0)
                for i, (_, _, t1, t2) in enumerate(read_pair_lines(path))]
    return Dataset(TaskSpec("input", 2), examples)


def cmd_encode(args: argparse.Namespace, logger: AppLogger) -> int:
    model = _model_with_vocab(args.model)
    encoders_for_tag(model, args.encoder)
    start_manifest("encode", _args_config(args), {"model": os.path.abspath(args.model), "input": os.path.abspath(args.input)},
                   {"output": os.path.abspath(args.output)}, 0, args.output + ".manifest.json", logger)
    data = _read_encode_input(args.input, model)
    features = extract_features(data, model, args.encoder)
    write_feature_file(features, args.output)
    logger.log(f"   ...wrote {len(features)} x {features.dim} features ({args.encoder}) to {args.output}")
    return EXIT_OK


def cmd_probe(args: argparse.Namespace, logger: AppLogger) -> int:
    model = _model_with_vocab(args.model)
    encoders = encoders_for_tag(model, args.encoder)
    if args.report:
        start_manifest("probe", _args_config(args), {"model": os.path.abspath(args.model), "data": os.path.abspath(args.data)},
                       {"report": os.path.abspath(args.report)}, args.seed, args.report + ".manifest.json", logger)
    sentences = load_sentences(args.data, model.vocab)
    vectors = None
    if args.baseline == "random":
        vectors = random_features(len(sentences), sum(e.output_dim for e in encoders), args.seed)
    elif args.baseline == "bag":
        vectors = bag_of_embeddings_features(sentences, model.embeddings)
    cfg = ProbeConfig(kind=args.probe, epochs=args.epochs, seed=args.seed)
    logger.log(f"1. Probing '{args.task}' on {len(sentences)} sentences ({args.encoder}, baseline {args.baseline})...")
    if args.task == "length":
        accuracy = aux_length(sentences, model, args.encoder, cfg, vectors)
    elif args.task == "content":
        accuracy = aux_word_content(sentences, model, args.encoder, args.seed, cfg, vectors)
    else:
        accuracy = aux_word_order(sentences, model, args.encoder, args.seed, cfg, vectors)
    if args.report:
        tag = args.encoder if args.baseline == "none" else f"baseline:{args.baseline}"
        write_probe_report([{"probe": f"aux_{args.task}", "encoder_tag": tag, "metric": "accuracy",
                             "value": accuracy, "seed": args.seed}], args.report)
    print(f"accuracy={accuracy:.6f}")
    return EXIT_OK


def cmd_eval_sts(args: argparse.Namespace, logger: AppLogger) -> int:
    model = _model_with_vocab(args.model)
    encoders_for_tag(model, args.encoder)
    pairs, gold = load_scored_pairs(args.pairs, model.vocab)
    result = cosine_eval(pairs, gold, model, args.encoder)
    logger.log(f"   ...scored {len(pairs)} pairs with the {args.encoder} encoder")
    print(f"pearson={result.pearson:.6f}")
    print(f"spearman={result.spearman:.6f}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace, logger: AppLogger) -> int:
    config = TrainConfig.from_file(args.config)
    if args.seed is not None:
        config.seed = args.seed
    logger.log("1. Building tasks and model...")
    data = build_tasks(config, logger)
    model = model_for(config, data)
    batches = [make_batch(dataset.examples[:args.batch_size]) for dataset in data.train.values()]
    logger.log(f"2. Checking gradients ({config.framework}, d={config.hidden_dim}, {len(batches)} batches)...")
    report = grad_check(model, batches, eps=args.eps, max_checks=args.max_checks, seed=config.seed)
    for name, error in report.errors.items():
        logger.log(f"   {name}: {error:.3e} over {report.checked[name]} entries")
    print(f"max_relative_error={report.max_error:.3e}")
    return EXIT_OK if report.passed(GRADCHECK_TOLERANCE) else EXIT_NUMERICAL


def cmd_synth(args: argparse.Namespace, logger: AppLogger) -> int:
    start_manifest("synth", _args_config(args), {}, {"output": os.path.abspath(args.output)}, args.seed,
                   args.output + ".manifest.json", logger)
    vocab = synthetic_vocabulary()
    if args.sentences:
        write_sentences(synth_sentences(args.size, args.seed, vocab), args.output, vocab)
    else:
        try:
            dataset = synth_generate(args.task, args.size, args.seed, vocab)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        write_pair_dataset(dataset, args.output, vocab)
    logger.log(f"   ...wrote {args.size} {'sentences' if args.sentences else args.task + ' pairs'} to {args.output}")
    return EXIT_OK


def cmd_replay(args: argparse.Namespace, logger: AppLogger) -> int:
    manifest = RunManifest.read(args.manifest)
    logger.log(f"--- Replaying '{manifest.command}' from {args.manifest} ---")
    if manifest.command == "train":
        return run_train(TrainConfig.from_dict(manifest.config), manifest.outputs["out"], logger, manifest.inputs)
    handler = HANDLERS.get(manifest.command)
    if handler is None or manifest.command == "replay":
        raise ConfigError(f"cannot replay command '{manifest.command}'")
    return handler(argparse.Namespace(**manifest.config), logger)


HANDLERS = {"train": cmd_train, "encode": cmd_encode, "probe": cmd_probe, "eval-sts": cmd_eval_sts,
            "gradcheck": cmd_gradcheck, "synth": cmd_synth, "replay": cmd_replay}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtlse", description="Multi-task sentence encoder workbench")
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="train FS/SP/ASP models")
    train.add_argument("--config", required=True)
    train.add_argument("--out", required=True)
    train.add_argument("--seed", type=int, default=None)

    encode = commands.add_parser("encode", help="write frozen features for a pair or sentence file")
    encode.add_argument("--model", required=True)
    encode.add_argument("--input", required=True)
    encode.add_argument("--encoder", default="shared")
    encode.add_argument("--output", required=True, help="feature CSV; its manifest goes to OUTPUT.manifest.json")

    probe = commands.add_parser("probe", help="auxiliary probing tasks")
    probe.add_argument("--model", required=True)
    probe.add_argument("--task", required=True, choices=("length", "content", "order"))
    probe.add_argument("--data", required=True)
    probe.add_argument("--encoder", default="shared")
    probe.add_argument("--probe", default="mlp-512", choices=("logistic", "mlp-512"))
    probe.add_argument("--baseline", default="none", choices=("none", "random", "bag"))
    probe.add_argument("--epochs", type=int, default=30)
    probe.add_argument("--seed", type=int, default=0)
    probe.add_argument("--report", default=None, help="report CSV; its manifest goes to REPORT.manifest.json")

    sts = commands.add_parser("eval-sts", help="cosine similarity against gold scores")
    sts.add_argument("--model", required=True)
    sts.add_argument("--pairs", required=True)
    sts.add_argument("--encoder", default="shared")

    gradcheck = commands.add_parser("gradcheck", help="finite-difference gradient check")
    gradcheck.add_argument("--config", required=True)
    gradcheck.add_argument("--seed", type=int, default=None)
    gradcheck.add_argument("--batch-size", type=int, default=4)
    gradcheck.add_argument("--eps", type=float, default=1e-5)
    gradcheck.add_argument("--max-checks", type=int, default=20)

    synth = commands.add_parser("synth", help="generate synthetic data")
    synth.add_argument("--task", default="SHARED-OVERLAP")
    synth.add_argument("--size", type=int, required=True)
    synth.add_argument("--seed", type=int, default=1)
    synth.add_argument("--output", required=True, help="data file; its manifest goes to OUTPUT.manifest.json")
    synth.add_argument("--sentences", action="store_true", help="single sentences for the probes")

    replay = commands.add_parser("replay", help="re-run a command from its manifest")
    replay.add_argument("--manifest", required=True)
    return parser


def main(argv: list[str] | None = None, logger: AppLogger | None = None) -> int:
    args = build_parser().parse_args(argv)
    logger = logger or AppLogger()
    try:
        return HANDLERS[args.command](args, logger)
    except (ConfigError, FrameworkError) as e:
        logger.error(f"!!! CONFIG ERROR: {e}")
        return EXIT_USAGE
    except DataFormatError as e:
        logger.error(f"!!! DATA ERROR: {e}")
        return EXIT_DATA
    except NumericalError as e:
        logger.error(f"!!! NUMERICAL ERROR: {e}")
        return EXIT_NUMERICAL
    except OSError as e:
        logger.error(f"!!! DATA ERROR: {e}")
        return EXIT_DATA
    except ValueError as e:
        logger.error(f"!!! USAGE ERROR: {e}")
        return EXIT_USAGE
