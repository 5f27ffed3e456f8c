"""Command-line entry point: ``gtlm <subcommand> [options]``.

Every subcommand that writes files also writes the fully resolved run
configuration next to its outputs; passing that file back with ``--config``
reproduces the run.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import torch

COMMANDS = ("gen-data", "features", "verify", "train", "eval", "generate", "attn-dump", "param-count")


class UsageError(Exception):
    pass


def default_seed() -> int:
    raw = os.environ.get("GTLM_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"GTLM_SEED must be an integer, got {raw!r}") from None


@dataclass
class RunConfig:
    command: str = ""
    # paths
    data: str | None = None
    out: str | None = None
    checkpoint: str | None = None
    report: str | None = None
    config: str | None = None
    # data generation
    task: str | None = None
    sizes: list[int] | None = None
    scale: float = 1.0
    format: str = "standard"
    # model overrides
    layers: int = 2
    heads: int = 4
    d_head: int = 16
    d_ffn: int = 128
    max_spd: int = 8
    rrwp_steps: int = 16
    rrwp_hidden: int = 64
    mag_q: float = 0.25
    mag_dim: int = 32
    deepset_hidden: int = 32
    mag_hidden: int = 64
    no_spd: bool = False
    no_rrwp: bool = False
    no_mag: bool = False
    # optimization
    epochs: int = 10
    lr: float = 0.0
    lr_bias: float = 1e-2
    batch_size: int = 32
    objective: str = "lm"  # lm: full-vocabulary NLL; choices: softmax over answer choices
    seed: int = field(default_factory=default_seed)
    precision: int | None = None  # verify: 64, otherwise 32
    # decoding / inspection
    index: int = 0
    max_new_tokens: int = 24

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def bias_kwargs(self) -> dict:
        return dict(max_spd=self.max_spd, rrwp_steps=self.rrwp_steps, rrwp_hidden=self.rrwp_hidden,
                    mag_q=self.mag_q, mag_dim=self.mag_dim, deepset_hidden=self.deepset_hidden,
                    mag_hidden=self.mag_hidden, use_spd=not self.no_spd,
                    use_rrwp=not self.no_rrwp, use_mag=not self.no_mag)

    def model_config(self):
        from .model import ModelConfig

        return ModelConfig.create(self.layers, self.heads, self.d_head, self.d_ffn, **self.bias_kwargs())

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == 64 else torch.float32

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--layers", type=int)
    g.add_argument("--heads", type=int)
    g.add_argument("--d-head", type=int)
    g.add_argument("--d-ffn", type=int)
    g.add_argument("--max-spd", type=int)
    g.add_argument("--rrwp-steps", type=int)
    g.add_argument("--rrwp-hidden", type=int)
    g.add_argument("--mag-q", type=float)
    g.add_argument("--mag-dim", type=int)
    g.add_argument("--deepset-hidden", type=int)
    g.add_argument("--mag-hidden", type=int)
    g.add_argument("--no-spd", action="store_true", default=None)
    g.add_argument("--no-rrwp", action="store_true", default=None)
    g.add_argument("--no-mag", action="store_true", default=None)


def _add_common(p: argparse.ArgumentParser, data=False, checkpoint=False, report=False) -> None:
    p.add_argument("--config", help="resolved-config JSON to start from")
    p.add_argument("--seed", type=int, help="default: $GTLM_SEED or 0")
    if data:
        p.add_argument("--data", required=False, help="graph records (JSON lines)")
        p.add_argument("--format", choices=("standard", "incidence"))
    if checkpoint:
        p.add_argument("--checkpoint")
    if report:
        p.add_argument("--report")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gtlm", description="Graph-biased language model toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    _add_common(p)
    p.add_argument("--task", help="dataset name (see --task list)")
    p.add_argument("--sizes", type=lambda s: [int(x) for x in s.split(",")],
                   help="train,val,test counts (overrides --scale)")
    p.add_argument("--scale", type=float)
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("features", help="compute structural features for a dataset")
    _add_common(p, data=True)
    _add_model_flags(p)
    p.add_argument("--out")

    p = sub.add_parser("verify", help="run the numerical verification battery")
    _add_common(p, report=True)
    p.add_argument("--precision", type=int, choices=(32, 64))

    p = sub.add_parser("train", help="train bias (and optionally backbone) parameters")
    _add_common(p, data=True, checkpoint=True)
    _add_model_flags(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, help="backbone learning rate (0 freezes it)")
    p.add_argument("--lr-bias", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--objective", choices=("lm", "choices"),
                   help="choices: score yes/no style answers only against their options")
    p.add_argument("--precision", type=int, choices=(32, 64))

    p = sub.add_parser("eval", help="exact-match accuracy on a labelled dataset")
    _add_common(p, data=True, checkpoint=True, report=True)
    p.add_argument("--max-new-tokens", type=int)

    p = sub.add_parser("generate", help="greedy answer for one graph")
    _add_common(p, data=True, checkpoint=True)
    p.add_argument("--index", type=int)
    p.add_argument("--max-new-tokens", type=int)

    p = sub.add_parser("attn-dump", help="node-aggregated prefix attention for one graph")
    _add_common(p, data=True, checkpoint=True)
    p.add_argument("--index", type=int)
    p.add_argument("--out")

    p = sub.add_parser("param-count", help="bias parameter counts for a configuration")
    _add_common(p)
    _add_model_flags(p)
    return parser


def resolve(args: argparse.Namespace) -> RunConfig:
    base = {}
    if getattr(args, "config", None):
        base = json.loads(Path(args.config).read_text())
    cfg = RunConfig.from_dict(base)
    cfg.command = args.command
    for key, val in vars(args).items():
        if key in ("command", "config") or val is None:
            continue
        setattr(cfg, key, val)
    if cfg.precision is None:
        cfg.precision = 64 if cfg.command == "verify" else 32
    return cfg


def _require(cfg: RunConfig, *names: str) -> None:
    missing = [n for n in names if getattr(cfg, n) in (None, "")]
    if missing:
        raise UsageError(f"{cfg.command}: missing --{', --'.join(m.replace('_', '-') for m in missing)}")


def _sidecar(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".config.json")


# -- subcommands -------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig) -> int:
    from .data import DEFAULT_SPECS, generate_dataset, scaled_spec, write_dataset

    _require(cfg, "task", "out")
    if cfg.task not in DEFAULT_SPECS:
        raise UsageError(f"unknown task {cfg.task!r}; choose from {', '.join(DEFAULT_SPECS)}")
    overrides = {}
    if cfg.sizes is not None:
        if len(cfg.sizes) != 3:
            raise UsageError("--sizes takes train,val,test")
        overrides["counts"] = dict(zip(("train", "val", "test"), cfg.sizes))
    spec = scaled_spec(cfg.task, cfg.scale, cfg.seed, **overrides)
    paths = write_dataset(cfg.out, spec, generate_dataset(spec))
    cfg.write(Path(cfg.out) / f"{cfg.task}.config.json")
    for split, path in paths.items():
        print(f"{split} {path}")
    return 0


def _load(cfg: RunConfig):
    from .graph import load_graphs

    _require(cfg, "data")
    return load_graphs(cfg.data, cfg.format)


def cmd_features(cfg: RunConfig) -> int:
    from .features import compute_features, write_features

    _require(cfg, "out")
    graphs = _load(cfg)
    feats = [compute_features(g, cfg.max_spd, cfg.rrwp_steps, cfg.mag_q) for g in graphs]
    write_features(cfg.out, feats)
    cfg.write(_sidecar(cfg.out))
    print(f"features {len(feats)} {cfg.out}")
    return 0


def cmd_verify(cfg: RunConfig) -> int:
    from .verification import format_report, run_battery

    text = format_report(run_battery(cfg.precision, cfg.seed))
    sys.stdout.write(text)
    if cfg.report:
        Path(cfg.report).write_text(text)
        cfg.write(_sidecar(cfg.report))
    return 0 if all("passed=true" in line for line in text.splitlines()) else 1


def cmd_train(cfg: RunConfig) -> int:
    from .data import choices_for
    from .model import fit, init_model, make_example, save_checkpoint

    _require(cfg, "checkpoint")
    if cfg.objective not in ("lm", "choices"):
        raise UsageError(f"unknown objective {cfg.objective!r}")
    graphs = _load(cfg)
    torch.manual_seed(cfg.seed)
    model = init_model(cfg.model_config(), seed=cfg.seed, dtype=cfg.dtype)
    examples = [make_example(g, model.cfg, choices=choices_for(g) if cfg.objective == "choices" else None)
                for g in graphs]
    fit(model, examples, cfg.epochs, cfg.lr, cfg.lr_bias, cfg.batch_size, cfg.seed, log=print)
    save_checkpoint(cfg.checkpoint, model)
    cfg.write(_sidecar(cfg.checkpoint))
    return 0


def _model(cfg: RunConfig):
    from .model import load_checkpoint

    _require(cfg, "checkpoint")
    return load_checkpoint(cfg.checkpoint)


def cmd_eval(cfg: RunConfig) -> int:
    from .data import evaluate_accuracy

    model = _model(cfg)
    acc, records = evaluate_accuracy(model, _load(cfg), max_new_tokens=cfg.max_new_tokens)
    lines = [f"accuracy={acc:.4f} n={len(records)}"]
    lines += [f"index={i} correct={str(r['correct']).lower()} gold={json.dumps(r['gold'])} "
              f"prediction={json.dumps(r['prediction'])}" for i, r in enumerate(records)]
    text = "\n".join(lines) + "\n"
    print(lines[0])
    if cfg.report:
        Path(cfg.report).write_text(text)
        cfg.write(_sidecar(cfg.report))
    return 0


def _pick(cfg: RunConfig):
    graphs = _load(cfg)
    if not 0 <= cfg.index < len(graphs):
        raise UsageError(f"--index {cfg.index} out of range (dataset has {len(graphs)} graphs)")
    return graphs[cfg.index]


def cmd_generate(cfg: RunConfig) -> int:
    from .data import choices_for
    from .model import generate

    model = _model(cfg)
    g = _pick(cfg)
    print(generate(model, g, cfg.max_new_tokens, choices=choices_for(g)))
    return 0


def cmd_attn_dump(cfg: RunConfig) -> int:
    from .verification import format_attention_dump, probe_message_passing

    model = _model(cfg)
    text = format_attention_dump(probe_message_passing(model, _pick(cfg)))
    if cfg.out:
        Path(cfg.out).write_text(text)
        cfg.write(_sidecar(cfg.out))
    else:
        sys.stdout.write(text)
    return 0


def cmd_param_count(cfg: RunConfig) -> int:
    from .bias import BiasConfig, count_parameters

    counts = count_parameters(BiasConfig(n_layers=cfg.layers, n_heads=cfg.heads, **cfg.bias_kwargs()))
    print(" ".join(f"{k}={v}" for k, v in counts.items()))
    return 0


HANDLERS = {
    "gen-data": cmd_gen_data, "features": cmd_features, "verify": cmd_verify,
    "train": cmd_train, "eval": cmd_eval, "generate": cmd_generate,
    "attn-dump": cmd_attn_dump, "param-count": cmd_param_count,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    from .graph import GraphError, ParseError

    try:
        cfg = resolve(args)
        return HANDLERS[cfg.command](cfg)
    except (UsageError, ParseError, GraphError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"gtlm {args.command}: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
