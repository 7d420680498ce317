"""``timesiam`` command-line interface.

Exit codes: 0 success, 1 configuration error, 2 data or I/O error,
3 numerical failure (divergence, failed gradient check).
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autograd as ag
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import FinetuneConfig, ModelConfig, PretrainConfig
from .data import (
    TimeSeriesFrame,
    chronological_split,
    instance_normalize,
    load_csv,
    load_labeled_windows,
    sample_siamese_pair,
    synthetic_labeled_windows,
    synthetic_seasonal_ar,
)
from .errors import ConfigError, DataError, NumericalError, TimeSiamError
from .masking import MaskSpec, apply_mask, make_mask, render_mask

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

SEED_ENV = "TIMESIAM_SEED"
SYNTHETIC_KINDS = ("sine",)


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass
class DataConfig:
    split: tuple = (0.7, 0.1, 0.2)
    timestamp_column: bool | None = None
    synthetic_length: int = 2000
    synthetic_examples: int = 300


@dataclass
class RunConfig:
    """Every knob of a run, addressable by dotted keys such as ``model.d_model``."""

    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0

    def flat(self) -> dict:
        out = {}

        def walk(prefix, obj):
            for f in fields(obj):
                value = getattr(obj, f.name)
                key = f"{prefix}{f.name}"
                if hasattr(value, "__dataclass_fields__"):
                    walk(key + ".", value)
                else:
                    out[key] = list(value) if isinstance(value, tuple) else value

        walk("", self)
        return out

    def set(self, key: str, value) -> None:
        parts = key.split(".")
        obj = self
        for part in parts[:-1]:
            if not hasattr(obj, "__dataclass_fields__") or part not in obj.__dataclass_fields__:
                raise ConfigError(f"unknown config key {key!r}")
            obj = getattr(obj, part)
        name = parts[-1]
        if not hasattr(obj, "__dataclass_fields__") or name not in obj.__dataclass_fields__:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(obj, name)
        if hasattr(current, "__dataclass_fields__"):
            raise ConfigError(f"{key!r} is a section; set its fields individually")
        if isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if isinstance(current, tuple) and isinstance(value, list):
            value = tuple(value)
        setattr(obj, name, value)

    def update(self, mapping: dict) -> "RunConfig":
        for key, value in flatten(mapping).items():
            self.set(key, value)
        return self

    def finalize(self) -> "RunConfig":
        """Normalize aliases, propagate the global seed, validate."""
        self.pretrain.seed = self.seed
        self.finetune.seed = self.seed
        self.finetune = FinetuneConfig(**asdict(self.finetune))
        self.model.validate()
        self.pretrain.validate()
        self.finetune.validate()
        return self

    def to_toml(self) -> str:
        lines = []
        for key, value in self.flat().items():
            if value is None:
                continue
            lines.append(f"{key} = {toml_value(value)}")
        return "\n".join(lines) + "\n"


def flatten(mapping: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in mapping.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(toml_value(v) for v in value) + "]"
    raise ConfigError(f"cannot write {value!r} to TOML")


def parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def load_run_config(path=None, overrides=(), seed=None) -> RunConfig:
    """Defaults, then the TOML file, then ``key=value`` overrides, then the seed."""
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read config {path}: {exc}") from None
        try:
            cfg.update(tomllib.loads(text))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        cfg.set(key.strip(), parse_value(value.strip()))
    env = os.environ.get(SEED_ENV)
    if seed is not None:
        cfg.seed = seed
    elif env is not None:
        try:
            cfg.seed = int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None
    return cfg.finalize()


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _emit(text: str) -> None:
    sys.stdout.write(text if text.endswith("\n") else text + "\n")
    sys.stdout.flush()


def _require_data(args) -> None:
    if args.data is None and args.synthetic is None:
        raise DataError("missing --data (or --synthetic sine)")


def _load_frame(args, cfg: RunConfig, n_channels: int) -> TimeSeriesFrame:
    _require_data(args)
    if args.synthetic is not None:
        return synthetic_seasonal_ar(cfg.data.synthetic_length, n_channels, seed=cfg.seed)
    return load_csv(args.data, cfg.data.timestamp_column)


def _load_labeled(args, cfg: RunConfig, model_config: ModelConfig, input_len: int):
    _require_data(args)
    if args.synthetic is not None:
        return synthetic_labeled_windows(cfg.data.synthetic_examples, input_len, model_config.n_channels,
                                         cfg.finetune.n_classes, seed=cfg.seed)
    return load_labeled_windows(args.data)


def _check_channels(n_found: int, model_config: ModelConfig) -> None:
    if n_found != model_config.n_channels:
        raise DataError(f"input tensor has {n_found} channels; checkpoint expects n_channels={model_config.n_channels}")


def _dump_config(args, cfg: RunConfig) -> None:
    if getattr(args, "dump_config", None):
        text = cfg.to_toml()
        if args.dump_config == "-":
            _emit(text)
        else:
            Path(args.dump_config).write_text(text, encoding="utf-8")


def _write_text(path, text: str) -> None:
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_pretrain(args, cfg: RunConfig) -> int:
    from .training import pretrain

    _dump_config(args, cfg)
    frame = _load_frame(args, cfg, cfg.model.n_channels)
    _check_channels(frame.n_channels, cfg.model)
    train, _, _ = chronological_split(frame, ratios=cfg.data.split)
    ckpt = pretrain(train, cfg.model, cfg.pretrain, log=_emit)
    try:
        ckpt.save(args.out)
    except OSError as exc:
        raise DataError(f"cannot write {args.out}: {exc}") from None
    _emit(f"checkpoint={args.out}")
    return 0


def _finetune_config(args, cfg: RunConfig, ckpt: Checkpoint) -> FinetuneConfig:
    fc = cfg.finetune
    updates = {}
    for name in ("task", "mode", "fusion", "input_len", "lineages_used", "epochs"):
        value = getattr(args, name, None)
        if value is not None:
            updates[name] = value
    if getattr(args, "horizons", None):
        updates["horizons"] = tuple(int(h) for h in args.horizons.split(","))
    merged = {**asdict(fc), **updates}
    return FinetuneConfig(**merged).validate(ckpt.model_config)


def cmd_finetune(args, cfg: RunConfig) -> int:
    from .finetune import finetune

    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.is_downstream:
        raise ConfigError(f"{args.checkpoint} is already fine-tuned; pass a pre-training checkpoint")
    mc = ckpt.model_config
    fc = _finetune_config(args, cfg, ckpt)
    cfg.finetune = fc
    _dump_config(args, cfg)
    model = ckpt.build_model()
    input_len = fc.resolved_input_len(mc)
    if fc.task == "forecast":
        frame = _load_frame(args, cfg, mc.n_channels)
        _check_channels(frame.n_channels, mc)
        dataset = chronological_split(frame, ratios=cfg.data.split, lookback=input_len)
    else:
        dataset = _load_labeled(args, cfg, mc, input_len)
        _check_channels(dataset.n_channels, mc)
        if dataset.n_classes != fc.n_classes:
            fc.n_classes = dataset.n_classes
    tuned, report = finetune(model, dataset, fc, log=_emit)
    meta = {"stage": "finetune", "seed": cfg.seed, "finetune": fc.to_dict(), "metrics": report.as_dict()}
    try:
        save_checkpoint(args.out, tuned, meta)
    except OSError as exc:
        raise DataError(f"cannot write {args.out}: {exc}") from None
    report_path = args.report or f"{args.out}.metrics.txt"
    body = report.to_text() + (report.to_table() if fc.task == "forecast" else "")
    _write_text(report_path, body)
    _emit(body)
    _emit(f"checkpoint={args.out}")
    _emit(f"report={report_path}")
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    from .finetune import evaluate_classify, evaluate_forecast, split_forecast_data

    ckpt = load_checkpoint(args.checkpoint)
    if not ckpt.is_downstream:
        raise ConfigError(f"{args.checkpoint} holds no task head; run finetune first")
    task = ckpt.config["downstream"]["task"]
    if args.task is not None and args.task != task:
        raise ConfigError(f"checkpoint was fine-tuned for {task!r}, not {args.task!r}")
    model = ckpt.build_model()
    mc = ckpt.model_config
    if task == "forecast":
        horizons = getattr(model, "horizons", None) or [model.horizon]
        frame = _load_frame(args, cfg, mc.n_channels)
        _check_channels(frame.n_channels, mc)
        split = chronological_split(frame, ratios=cfg.data.split, lookback=model.input_len)
        _, test = split_forecast_data(split, model.input_len)
        report = evaluate_forecast(model, test, horizons, model.input_len, cfg.finetune.eval_stride)
        _emit(report.to_text() + report.to_table())
    else:
        data = _load_labeled(args, cfg, mc, model.input_len)
        _check_channels(data.n_channels, mc)
        report = evaluate_classify(model, data)
        _emit(report.to_text())
    return 0


def cmd_mask_demo(args, cfg: RunConfig) -> int:
    spec = MaskSpec(args.rule, args.ratio, args.segment_length)
    mask = make_mask(args.T, args.C, spec, np.random.default_rng(cfg.seed))
    if args.format == "csv":
        rows = ["t," + ",".join(f"c{c}" for c in range(args.C))]
        rows += [f"{t}," + ",".join(str(int(v)) for v in row) for t, row in enumerate(mask)]
        _emit("\n".join(rows))
    else:
        _emit(render_mask(mask))
    return 0


def cmd_reconstruct(args, cfg: RunConfig) -> int:
    """Write past, masked current, reconstruction and ground truth for one pair.

    One block per channel, each of ``4 * T`` rows ``channel,series,t,value``;
    all values are in the instance-normalized scale.
    """
    from .data import PairBatch
    from .model import SiameseModel

    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.is_downstream:
        raise ConfigError("reconstruct needs a pre-training checkpoint")
    model = ckpt.build_model()
    if not isinstance(model, SiameseModel):
        raise ConfigError("reconstruct needs a pre-training checkpoint")
    mc = model.config
    frame = _load_frame(args, cfg, mc.n_channels)
    _check_channels(frame.n_channels, mc)
    rng = np.random.default_rng(cfg.seed)
    pair = sample_siamese_pair(frame, mc.seq_len, mc.sampling_ratio, rng, args.index)
    pair.x_past = instance_normalize(pair.x_past)[0]
    pair.x_curr = instance_normalize(pair.x_curr)[0]
    pair.x_curr_masked, pair.mask = apply_mask(pair.x_curr, mc.mask, rng)
    model.eval()
    with ag.no_grad():
        _, x_hat = model.pretrain_forward(PairBatch.stack([pair]))
    series = {
        "past": pair.x_past,
        "masked_current": pair.x_curr_masked,
        "reconstruction": x_hat.data[0].astype(np.float64),
        "ground_truth": pair.x_curr,
    }
    try:
        with Path(args.out).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["channel", "series", "t", "value"])
            for c in range(mc.n_channels):
                for name, values in series.items():
                    for t in range(mc.seq_len):
                        w.writerow([c, name, t, repr(float(values[t, c]))])
    except OSError as exc:
        raise DataError(f"cannot write {args.out}: {exc}") from None
    _emit(f"d={pair.d} curr_start={pair.curr_start} masked={int(pair.mask.sum())}")
    _emit(f"reconstruction={args.out}")
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from .gradcheck import end_to_end_check

    if args.size != "tiny":
        raise ConfigError("only --size tiny is supported")
    result = end_to_end_check(seed=cfg.seed, n_samples=args.samples)
    ok = result.passed(args.tol)
    _emit(f"checked={result.n_checked} max_relative_error={result.max_relative_error:.3e} "
          f"tol={args.tol:g} {'PASS' if ok else 'FAIL'}")
    if not ok:
        raise NumericalError(f"gradient check failed: max relative error {result.max_relative_error:.3e}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML file with dotted keys (model.*, pretrain.*, finetune.*, data.*, seed)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help=f"global seed (overrides ${SEED_ENV} and the config file)")
    common.add_argument("--dump-config", metavar="PATH", help="write the effective config as TOML ('-' for stdout)")

    data = _Parser(add_help=False)
    data.add_argument("--data", help="CSV series (forecast, pretrain) or labelled-window file (classify)")
    data.add_argument("--synthetic", choices=SYNTHETIC_KINDS, help="use the bundled seeded generator")

    parser = _Parser(prog="timesiam", description="Siamese pre-training for time series.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("pretrain", parents=[common, data], help="pre-train a Siamese encoder")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common, data], help="fine-tune a pre-trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", choices=("forecast", "classify"))
    p.add_argument("--mode", choices=("full", "linear-probe", "linear_probe"))
    p.add_argument("--fusion", choices=("fixed", "extended", "single"))
    p.add_argument("--input-len", type=int)
    p.add_argument("--lineages-used", type=int)
    p.add_argument("--horizons", help="comma-separated forecast horizons")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="metrics file (default: <out>.metrics.txt)")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", parents=[common, data], help="evaluate a fine-tuned checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", choices=("forecast", "classify"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("mask-demo", parents=[common], help="print one mask")
    p.add_argument("--rule", default="channel_continuous", choices=("binomial", "channel_binomial", "continuous",
                                                                     "channel_continuous", "mask_last"))
    p.add_argument("--ratio", type=float, default=0.25)
    p.add_argument("--T", type=int, default=96)
    p.add_argument("--C", type=int, default=1)
    p.add_argument("--segment-length", type=int, default=MaskSpec().mean_segment_length)
    p.add_argument("--format", choices=("ascii", "csv"), default="ascii")
    p.set_defaults(func=cmd_mask_demo)

    p = sub.add_parser("reconstruct", parents=[common, data], help="dump one reconstruction as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--index", type=int, help="start of the current window (default: random)")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the full model")
    p.add_argument("--size", default="tiny", choices=("tiny",))
    p.add_argument("--samples", type=int, default=120)
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return 1
    if isinstance(exc, NumericalError):
        return 3
    if isinstance(exc, (DataError, OSError)):
        return 2
    return 1


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_run_config(args.config, args.set, args.seed)
        return args.func(args, cfg)
    except (TimeSiamError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return exit_code(exc)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
