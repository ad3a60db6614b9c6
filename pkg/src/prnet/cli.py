"""Command-line entry point: ``prnet synth|train|eval|score``.

Settings come from built-in defaults, then an optional ``--config`` file
(INI syntax, sections ``data``, ``model``, ``train``, ``eval``), then flags.
Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

USAGE_ERROR = 1
RUNTIME_ERROR = 2

log = logging.getLogger("prnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


# -- settings --------------------------------------------------------------------

DEFAULTS: Dict[str, Dict[str, object]] = {
    "data": {
        "root": None,
        "category": "synthetic",
        "resolution": 32,
        "n_seen": 10,
        "index_seed": 0,
        "texture_dir": None,
        "dataset_kind": "texture",
    },
    "model": {
        "channels": "8,16,32",
        "encoder_seed": 0,
        "pretrained_weights": None,
        "normalize_input": False,
        "attention_scale": "paper",
        "stack_depth": 3,
        "embed_dim_cap": 256,
        "decoder_widths": None,
        "output_prior": 0.05,
        "align_corners": False,
    },
    "train": {
        "steps": 200,
        "batch_size": 16,
        "lr": 1e-4,
        "weight_decay": 1e-2,
        "seed": 0,
        "focal_alpha": 0.5,
        "focal_gamma": 4.0,
        "loss_lambda": 5.0,
        "prototype_ratio": 0.1,
        "kmeans_max_iter": 300,
        "checkpoint_every": 0,
        "mp": True,
        "msa": True,
        "mf": True,
        "ea": True,
        "hea": True,
        "hoa": True,
        "ta": True,
    },
    "eval": {
        "fpr_limit": 0.3,
        "top_k": None,
        "max_thresholds": None,
    },
}


def _coerce(default, raw: str):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"expected a boolean, got {raw!r}")
    if raw.strip().lower() in ("", "none"):
        return None
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


_INT_OR_NONE = {("eval", "top_k"), ("eval", "max_thresholds")}


def load_settings(config_path: Optional[str]) -> Dict[str, Dict[str, object]]:
    settings = {section: dict(values) for section, values in DEFAULTS.items()}
    if not config_path:
        return settings
    path = Path(config_path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    parser.read(path)
    for section in parser.sections():
        if section not in settings:
            raise UsageError(f"unknown config section [{section}] in {path}")
        for key, raw in parser.items(section):
            if key not in settings[section]:
                raise UsageError(f"unknown key {key!r} in section [{section}] of {path}")
            default = DEFAULTS[section][key]
            try:
                if (section, key) in _INT_OR_NONE:
                    value = None if raw.strip().lower() in ("", "none") else int(raw)
                else:
                    value = _coerce(default, raw) if default is not None else (raw or None)
            except ValueError as exc:
                raise UsageError(f"bad value for {section}.{key}: {raw!r}") from exc
            settings[section][key] = value
    return settings


def apply_flags(settings, args, mapping: Dict[str, tuple]) -> None:
    for dest, (section, key) in mapping.items():
        value = getattr(args, dest, None)
        if value is not None:
            settings[section][key] = value


def _int_tuple(text) -> Optional[tuple]:
    if text is None:
        return None
    if isinstance(text, (tuple, list)):
        return tuple(int(v) for v in text)
    try:
        return tuple(int(v) for v in str(text).split(","))
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc


def model_config_from(settings):
    from .encoder import EncoderConfig
    from .model import ModelConfig
    from .msa import MsaConfig

    m, d = settings["model"], settings["data"]
    try:
        enc = EncoderConfig(
            input_size=int(d["resolution"]),
            channels_per_scale=_int_tuple(m["channels"]),
            pretrained_weights_path=m["pretrained_weights"],
            seed=int(m["encoder_seed"]),
            normalize_input=bool(m["normalize_input"]),
        )
        msa = MsaConfig(
            stack_depth=int(m["stack_depth"]),
            embed_dim_cap=m["embed_dim_cap"],
            attention_scale=m["attention_scale"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return ModelConfig(
        encoder=enc,
        msa=msa,
        decoder_widths=_int_tuple(m["decoder_widths"]),
        align_corners=bool(m["align_corners"]),
        top_k=settings["eval"]["top_k"],
        output_prior=m["output_prior"],
    )


def train_config_from(settings):
    from .training import TrainConfig

    t, d = settings["train"], settings["data"]
    names = {f.name for f in fields(TrainConfig)}
    kwargs = {k: v for k, v in t.items() if k in names}
    kwargs["n_seen_anomalies"] = int(d["n_seen"])
    kwargs["dataset_kind"] = d["dataset_kind"]
    try:
        return TrainConfig(**kwargs)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _require(settings, section, key, flag):
    if settings[section][key] in (None, ""):
        raise UsageError(f"missing {flag} (or [{section}] {key} in the config file)")
    return settings[section][key]


# -- commands ----------------------------------------------------------------------

DATA_FLAGS = {
    "data": ("data", "root"),
    "category": ("data", "category"),
    "resolution": ("data", "resolution"),
    "n_seen": ("data", "n_seen"),
    "index_seed": ("data", "index_seed"),
    "texture_dir": ("data", "texture_dir"),
    "dataset_kind": ("data", "dataset_kind"),
}

TRAIN_FLAGS = {
    "steps": ("train", "steps"),
    "batch_size": ("train", "batch_size"),
    "lr": ("train", "lr"),
    "weight_decay": ("train", "weight_decay"),
    "seed": ("train", "seed"),
    "prototype_ratio": ("train", "prototype_ratio"),
    "checkpoint_every": ("train", "checkpoint_every"),
    "channels": ("model", "channels"),
    "encoder_seed": ("model", "encoder_seed"),
    "pretrained_weights": ("model", "pretrained_weights"),
    "attention_scale": ("model", "attention_scale"),
    **{flag: ("train", flag) for flag in ("mp", "msa", "mf", "ea", "hea", "hoa", "ta")},
}

EVAL_FLAGS = {
    "fpr_limit": ("eval", "fpr_limit"),
    "top_k": ("eval", "top_k"),
    "max_thresholds": ("eval", "max_thresholds"),
}


def cmd_synth_dataset(args) -> int:
    from .data import generate_synthetic_dataset

    base = generate_synthetic_dataset(
        args.out,
        n_normal=args.n_normal,
        n_test_normal=args.n_test_normal,
        n_test_anomalous=args.n_test_anomalous,
        resolution=args.resolution,
        seed=args.seed,
        category=args.category,
        n_textures=args.n_textures,
    )
    print(base)
    return 0


def cmd_synth_anomalies(args) -> int:
    from .data import index_dataset, load_training_data, save_gray, save_image
    from .synth import GenerationError, SynthConfig, extended_anomaly, simulated_anomaly

    settings = load_settings(args.config)
    apply_flags(settings, args, DATA_FLAGS)
    d = settings["data"]
    root = _require(settings, "data", "root", "--data")
    index = index_dataset(root, d["category"], int(d["n_seen"]), int(d["index_seed"]))
    data = load_training_data(index, int(d["resolution"]), d["texture_dir"])
    kinds = ["EA", "HEA", "HOA"] if args.kind == "all" else [args.kind]
    if "EA" in kinds and not data.seen:
        raise UsageError("EA samples need seen anomalies (n_seen > 0)")
    if "HEA" in kinds and len(data.textures) == 0:
        raise UsageError("HEA samples need a texture directory")
    cfg = SynthConfig(dataset_kind=d["dataset_kind"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    root_seq = np.random.SeedSequence(args.seed)
    lines = []
    for i, child in enumerate(root_seq.spawn(args.count)):
        kind = kinds[i % len(kinds)]
        seed = int(child.generate_state(1)[0])
        for attempt in range(10):
            rng = np.random.default_rng([seed, attempt])
            normal = data.normals[int(rng.integers(len(data.normals)))]
            try:
                if kind == "EA":
                    seen = data.seen[int(rng.integers(len(data.seen)))]
                    sample = extended_anomaly(normal, seen, rng, config=cfg)
                else:
                    sample = simulated_anomaly(normal, kind, data.textures, rng, config=cfg)
                break
            except GenerationError:
                continue
        else:
            raise GenerationError(f"sample {i} ({kind}) failed after 10 attempts")
        save_image(out / f"{i:04d}_{kind}.png", sample.image)
        save_gray(out / f"{i:04d}_{kind}_mask.png", sample.mask.astype(np.float32))
        lines.append(json.dumps({"index": i, "kind": kind, "seed": seed, "attempt": attempt, "beta": sample.beta}))
    (out / "manifest.jsonl").write_text("".join(line + "\n" for line in lines))
    print(out / "manifest.jsonl")
    return 0


def cmd_train(args) -> int:
    from .data import index_dataset, load_training_data
    from .training import train

    settings = load_settings(args.config)
    apply_flags(settings, args, {**DATA_FLAGS, **TRAIN_FLAGS})
    root = _require(settings, "data", "root", "--data")
    d = settings["data"]
    model_cfg = model_config_from(settings)
    train_cfg = train_config_from(settings)
    index = index_dataset(root, d["category"], int(d["n_seen"]), int(d["index_seed"]))
    data = load_training_data(index, int(d["resolution"]), d["texture_dir"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.with_suffix(".index.json").write_text(index.manifest() + "\n")

    step_log = open(out.with_suffix(".log"), "w")
    handler = logging.StreamHandler(step_log)
    handler.setFormatter(logging.Formatter("%(message)s"))
    train_log = logging.getLogger("prnet.train")
    train_log.addHandler(handler)
    train_log.setLevel(logging.INFO)
    train_log.propagate = False
    try:
        result = train(train_cfg, data, model_cfg, out_path=out, extra_config={"data": dict(d)})
    finally:
        train_log.removeHandler(handler)
        train_log.propagate = True
        step_log.close()
    if not args.quiet:
        for entry in result.history:
            print(entry.line())
    print(f"checkpoint={out} config_hash={result.config_hash}")
    return 0


def _eval_data_settings(settings, header, args) -> None:
    """Fill data settings from the checkpoint snapshot unless set by file or flag."""
    saved = header.get("config", {}).get("data", {})
    explicit = {key for flag, (section, key) in DATA_FLAGS.items() if getattr(args, flag, None) is not None}
    file_set = set()
    if args.config:
        parser = configparser.ConfigParser()
        parser.read(args.config)
        if parser.has_section("data"):
            file_set = set(parser.options("data"))
    for key, value in saved.items():
        if key in settings["data"] and key not in explicit and key not in file_set:
            settings["data"][key] = value


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import index_dataset, load_test_set
    from .metrics import evaluate, write_scores_csv

    settings = load_settings(args.config)
    model, header = load_checkpoint(args.checkpoint)
    _eval_data_settings(settings, header, args)
    apply_flags(settings, args, {**DATA_FLAGS, **EVAL_FLAGS})
    d, e = settings["data"], settings["eval"]
    root = _require(settings, "data", "root", "--data")
    if int(d["resolution"]) != model.config.encoder.input_size:
        raise UsageError(
            f"resolution {d['resolution']} does not match the checkpoint's input size {model.config.encoder.input_size}"
        )
    index = index_dataset(root, d["category"], int(d["n_seen"]), int(d["index_seed"]))
    test = load_test_set(index, int(d["resolution"]))
    report, rows, maps = evaluate(model, test, e["top_k"], float(e["fpr_limit"]), e["max_thresholds"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report.to_text())
    write_scores_csv(rows, out / "scores.csv")
    print(report.to_text(), end="")
    return 0


def cmd_score(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_image, save_gray
    from .model import forward

    model, _ = load_checkpoint(args.checkpoint)
    if not Path(args.image).is_file():
        raise FileNotFoundError(f"image not found: {args.image}")
    image = load_image(args.image, model.config.encoder.input_size)
    result = forward(model, image, source_id=str(args.image), top_k=args.top_k)
    save_gray(args.out, result.scores)
    print(repr(float(result.image_score)))
    return 0


# -- parser ------------------------------------------------------------------------

def _bool_flag(parser, name: str, help_text: str) -> None:
    parser.add_argument(f"--{name}", dest=name, action="store_true", default=None, help=f"enable {help_text}")
    parser.add_argument(f"--no-{name}", dest=name, action="store_false", help=f"disable {help_text}")


def _data_args(p, with_root=True) -> None:
    if with_root:
        p.add_argument("--data", help="dataset root holding <category>/train, test, ground_truth")
    p.add_argument("--category")
    p.add_argument("--resolution", type=int)
    p.add_argument("--n-seen", type=int, dest="n_seen")
    p.add_argument("--index-seed", type=int, dest="index_seed")
    p.add_argument("--texture-dir", dest="texture_dir")
    p.add_argument("--dataset-kind", dest="dataset_kind", choices=["texture", "object"])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="prnet", description="Prototypical residual anomaly detection")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    synth = sub.add_parser("synth", help="generate a dataset or anomaly samples")
    synth_sub = synth.add_subparsers(dest="synth_command", parser_class=_Parser)
    synth_sub.required = True
    ds = synth_sub.add_parser("dataset", help="write a procedural MVTec-style dataset")
    ds.add_argument("--out", required=True)
    ds.add_argument("--n-normal", type=int, default=40, dest="n_normal")
    ds.add_argument("--n-test-normal", type=int, default=20, dest="n_test_normal")
    ds.add_argument("--n-test-anomalous", type=int, default=20, dest="n_test_anomalous")
    ds.add_argument("--n-textures", type=int, default=16, dest="n_textures")
    ds.add_argument("--resolution", type=int, default=32)
    ds.add_argument("--seed", type=int, default=0)
    ds.add_argument("--category", default="synthetic")
    ds.set_defaults(func=cmd_synth_dataset)

    an = synth_sub.add_parser("anomalies", help="write generated anomaly samples with masks")
    an.add_argument("--config")
    _data_args(an)
    an.add_argument("--out", required=True)
    an.add_argument("--count", type=int, default=12)
    an.add_argument("--kind", choices=["EA", "HEA", "HOA", "all"], default="all")
    an.add_argument("--seed", type=int, default=0)
    an.set_defaults(func=cmd_synth_anomalies)

    tr = sub.add_parser("train", help="fit prototypes and train a model")
    tr.add_argument("--config")
    _data_args(tr)
    tr.add_argument("--out", required=True, help="checkpoint path")
    tr.add_argument("--steps", type=int)
    tr.add_argument("--batch-size", type=int, dest="batch_size")
    tr.add_argument("--lr", type=float)
    tr.add_argument("--weight-decay", type=float, dest="weight_decay")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--prototype-ratio", type=float, dest="prototype_ratio")
    tr.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    tr.add_argument("--channels")
    tr.add_argument("--encoder-seed", type=int, dest="encoder_seed")
    tr.add_argument("--pretrained-weights", dest="pretrained_weights")
    tr.add_argument("--attention-scale", choices=["paper", "sqrt"], dest="attention_scale")
    for name, text in (
        ("mp", "prototype residuals"),
        ("msa", "multi-size attention"),
        ("mf", "multi-scale fusion"),
        ("ea", "extended anomalies"),
        ("hea", "heterologous simulated anomalies"),
        ("hoa", "homologous simulated anomalies"),
        ("ta", "target areas"),
    ):
        _bool_flag(tr, name, text)
    tr.add_argument("--quiet", action="store_true", help="do not echo per-step log lines")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    ev.add_argument("--config")
    ev.add_argument("--checkpoint", required=True)
    _data_args(ev)
    ev.add_argument("--out", required=True, help="directory for report.txt and scores.csv")
    ev.add_argument("--fpr-limit", type=float, dest="fpr_limit")
    ev.add_argument("--top-k", type=int, dest="top_k")
    ev.add_argument("--max-thresholds", type=int, dest="max_thresholds")
    ev.set_defaults(func=cmd_eval)

    sc = sub.add_parser("score", help="score one image and write its heatmap")
    sc.add_argument("--checkpoint", required=True)
    sc.add_argument("--image", required=True)
    sc.add_argument("--out", required=True, help="heatmap PNG path")
    sc.add_argument("--top-k", type=int, dest="top_k")
    sc.set_defaults(func=cmd_score)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"prnet: error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to one exit code
        log.debug("runtime failure", exc_info=True)
        print(f"prnet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
