"""Command-line entry point.

Subcommands: gen-data, train, eval, translate, gradcheck, ablate. Runs are
driven by a single JSON config document; everything else (seed, paths)
comes from flags so a run is reproducible from one file.

Exit codes: 0 success, 1 gradcheck failure or diverged run,
2 missing/invalid config, 3 checkpoint mismatch.
"""

import argparse
import dataclasses
import itertools
import json
import os
import sys

import numpy as np

from posenet import data
from posenet.data import NUM_RESERVED, TaskSpec
from posenet.decoder import DecoderConfig
from posenet.encoder import EncoderConfig
from posenet.model import ModelConfig, greedy_generate, init_parameters
from posenet.training import (
    AdamState,
    TrainConfig,
    TrainingDiverged,
    load_checkpoint,
    train_loop,
)


class ConfigError(Exception):
    pass


class CheckpointMismatch(Exception):
    pass


TOGGLES = (
    "encoder_pe_per_layer",
    "encoder_dilation",
    "encoder_self_attention",
    "decoder_self_attention",
    "decoder_pe_once",
    "heads",
    "attention_mode",
)

TOP_LEVEL_KEYS = ("model", "task", "train", "toggles", "gen", "ablate")


def _strict_fields(cls, values, path):
    if not isinstance(values, dict):
        raise ConfigError(f"{path!r} must be a JSON object")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - allowed
    if unknown:
        raise ConfigError(
            f"unknown key {sorted(unknown)[0]!r} under {path!r} "
            f"(allowed: {sorted(allowed)})"
        )


def _build(cls, values, path):
    if not isinstance(values, dict):
        raise ConfigError(f"{path!r} must be a JSON object")
    _strict_fields(cls, values, path)
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {path!r}: {exc}") from exc


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig
    task: TaskSpec
    train: TrainConfig
    gen_count: int = 1000

    def as_document(self):
        return {
            "model": dataclasses.asdict(self.model),
            "task": dataclasses.asdict(self.task),
            "train": dataclasses.asdict(self.train),
            "gen": {"count": self.gen_count},
        }


def apply_toggles(model_doc, toggles):
    """Map mechanism toggles onto nested model-config fields."""
    encoder = model_doc.setdefault("encoder", {})
    decoder = model_doc.setdefault("decoder", {})
    for key, value in toggles.items():
        if key == "encoder_pe_per_layer":
            encoder["pe_per_layer"] = bool(value)
        elif key == "encoder_dilation":
            encoder["dilations"] = [1, 2] if value else [1, 1]
        elif key == "encoder_self_attention":
            encoder["self_attention"] = bool(value)
        elif key == "decoder_self_attention":
            decoder["self_attention"] = bool(value)
        elif key == "decoder_pe_once":
            decoder["apply_pe_once"] = bool(value)
        elif key == "heads":
            encoder["heads"] = int(value)
            decoder["heads"] = int(value)
        elif key == "attention_mode":
            encoder["attention_mode"] = str(value)
            decoder["attention_mode"] = str(value)
        else:
            raise ConfigError(f"unknown toggle {key!r} (allowed: {list(TOGGLES)})")
    return model_doc


def resolve_config(document, seed=None):
    """Expand a raw JSON document into fully-resolved dataclass configs."""
    if not isinstance(document, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(document) - set(TOP_LEVEL_KEYS)
    if unknown:
        raise ConfigError(
            f"unknown top-level key {sorted(unknown)[0]!r} "
            f"(allowed: {list(TOP_LEVEL_KEYS)})"
        )
    task = _build(TaskSpec, document.get("task", {}), "task")
    model_doc = dict(document.get("model", {}))
    model_doc = apply_toggles(model_doc, document.get("toggles", {}))
    if "vocab_size" not in model_doc:
        model_doc["vocab_size"] = NUM_RESERVED + task.symbols
    if "encoder" in model_doc:
        _strict_fields(EncoderConfig, model_doc["encoder"], "model.encoder")
    if "decoder" in model_doc:
        _strict_fields(DecoderConfig, model_doc["decoder"], "model.decoder")
    model = _build(ModelConfig, model_doc, "model")
    train = _build(TrainConfig, document.get("train", {}), "train")
    gen = document.get("gen", {})
    if not isinstance(gen, dict) or set(gen) - {"count"}:
        raise ConfigError("'gen' accepts only {'count': int}")
    if seed is not None:
        model = dataclasses.replace(model, seed=seed)
        train = dataclasses.replace(train, seed=seed)
    return RunConfig(
        model=model, task=task, train=train, gen_count=int(gen.get("count", 1000))
    )


def load_config(path, seed=None):
    if path is None:
        raise ConfigError("missing --config")
    try:
        with open(path, encoding="utf-8") as fh:
            document = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return resolve_config(document, seed=seed)


def echo_config(run_cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "config.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(run_cfg.as_document(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args):
    run_cfg = load_config(args.config, seed=args.seed)
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng([run_cfg.train.seed, 0x6E5D, run_cfg.task.seed])
    pairs = data.generate_pairs(run_cfg.task, rng, run_cfg.gen_count)
    path = os.path.join(out_dir, "corpus.tsv")
    data.write_corpus(path, pairs)
    echo_config(run_cfg, out_dir)
    print(f"wrote {len(pairs)} examples to {path}")
    return 0


def cmd_train(args):
    run_cfg = load_config(args.config, seed=args.seed)
    out_dir = args.out or "run"
    os.makedirs(out_dir, exist_ok=True)
    echo_config(run_cfg, out_dir)
    if args.ckpt:
        ckpt = _load_ckpt(args.ckpt, expected=run_cfg.model)
        params, state, start = ckpt.params, ckpt.adam, ckpt.step
    else:
        params = init_parameters(run_cfg.model)
        state, start = None, 0
    final, records = train_loop(
        run_cfg.model,
        params,
        run_cfg.task,
        run_cfg.train,
        start_step=start,
        adam_state=state,
        log_path=os.path.join(out_dir, "metrics.log"),
        checkpoint_dir=out_dir,
    )
    for record in records:
        print(record.log_line())
    print(f"finished at step {final.step}; checkpoints in {out_dir}")
    return 0


def _load_ckpt(path, expected=None):
    try:
        return load_checkpoint(path, expected_config=expected)
    except FileNotFoundError:
        raise CheckpointMismatch(f"checkpoint not found: {path}") from None
    except ValueError as exc:
        raise CheckpointMismatch(str(exc)) from exc


def cmd_eval(args):
    from posenet.metrics import evaluate

    run_cfg = load_config(args.config, seed=args.seed)
    if not args.ckpt:
        raise CheckpointMismatch("eval requires --ckpt")
    ckpt = _load_ckpt(args.ckpt, expected=run_cfg.model)
    pairs = data.eval_pairs(run_cfg.task, run_cfg.train.eval_size, seed=run_cfg.train.seed)
    record = evaluate(
        ckpt.model_config,
        ckpt.params,
        pairs,
        step=ckpt.step,
        label_smoothing=run_cfg.train.label_smoothing,
    )
    print(record.log_line())
    return 0


def cmd_translate(args):
    if not args.ckpt:
        raise CheckpointMismatch("translate requires --ckpt")
    ckpt = _load_ckpt(args.ckpt)
    cfg = ckpt.model_config
    lines = [line.strip() for line in sys.stdin]
    for line in lines:
        if not line:
            print()
            continue
        try:
            ids = [int(v) for v in line.split()]
        except ValueError:
            raise ConfigError(f"translate input must be integer ids: {line!r}") from None
        batch = data.make_batch([(ids, ids)], max_length=cfg.max_length)
        out = greedy_generate(batch.src_ids, cfg, ckpt.params)[0]
        print(" ".join(str(v) for v in data.strip_ids(out)))
    return 0


def cmd_gradcheck(args):
    from posenet.gradcheck import standard_suite

    failures = 0
    for name, report in standard_suite():
        status = "pass" if report.passed else "FAIL"
        print(
            f"{name}: {status} (max rel err {report.max_rel_error:.3e} "
            f"over {report.checked} elements)"
        )
        if not report.passed:
            failures += 1
    if failures:
        print(f"{failures} gradient check(s) failed")
        return 1
    return 0


def cmd_ablate(args):
    from posenet.metrics import evaluate

    run_cfg = load_config(args.config, seed=args.seed)
    with open(args.config, encoding="utf-8") as fh:
        document = json.load(fh)
    grid = document.get("ablate", {}).get(
        "grid",
        {"encoder_pe_per_layer": [True, False], "encoder_dilation": [True, False]},
    )
    for key in grid:
        if key not in TOGGLES:
            raise ConfigError(f"unknown toggle {key!r} in ablate grid")
    out_dir = args.out or "ablation"
    os.makedirs(out_dir, exist_ok=True)
    names = list(grid)
    header = ["step"] + names + ["accuracy", "approx_bleu_score"]
    rows = []
    for index, combo in enumerate(itertools.product(*(grid[n] for n in names))):
        toggles = dict(zip(names, combo))
        point_doc = {k: v for k, v in document.items() if k != "ablate"}
        point_doc["toggles"] = {**point_doc.get("toggles", {}), **toggles}
        point_cfg = resolve_config(point_doc, seed=args.seed)
        point_dir = os.path.join(out_dir, f"run_{index}")
        os.makedirs(point_dir, exist_ok=True)
        echo_config(point_cfg, point_dir)
        params = init_parameters(point_cfg.model)
        final, records = train_loop(
            point_cfg.model,
            params,
            point_cfg.task,
            point_cfg.train,
            log_path=os.path.join(point_dir, "metrics.log"),
            checkpoint_dir=point_dir,
        )
        if records:
            record = records[-1]
        else:
            pairs = data.eval_pairs(
                point_cfg.task, point_cfg.train.eval_size, seed=point_cfg.train.seed
            )
            record = evaluate(point_cfg.model, params, pairs, step=final.step)
        rows.append(
            [str(record.step)]
            + [str(toggles[n]).lower() for n in names]
            + [f"{record.accuracy:.6f}", f"{record.approx_bleu_score:.6f}"]
        )
    csv_path = os.path.join(out_dir, "ablation.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")
    print(",".join(header))
    for row in rows:
        print(",".join(row))
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="posenet",
        description="Convolutional sequence-to-sequence model on synthetic tasks",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "eval": cmd_eval,
        "translate": cmd_translate,
        "gradcheck": cmd_gradcheck,
        "ablate": cmd_ablate,
    }
    for name, handler in commands.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="path to the JSON run config")
        p.add_argument("--seed", type=int, default=None, help="override all seeds")
        p.add_argument("--out", help="output directory")
        p.add_argument("--ckpt", help="checkpoint path")
        p.set_defaults(handler=handler)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CheckpointMismatch as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 3
    except TrainingDiverged as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
