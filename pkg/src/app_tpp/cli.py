"""Command-line entry point: synth, train, eval, generate, score, traverse, sweep.

Exit codes: 0 success, 1 usage, 2 data or validation error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict

import numpy as np
from threadpoolctl import threadpool_limits

from . import evaluate as ev
from . import synth
from .events import ActionSequence, Dataset, DataError, load_dataset, write_dataset
from .model import VARIANTS, APPModel, ModelConfig
from .nn import NumericalError, write_atomic
from .train import TrainConfig, config_echo, format_log, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SEED_ENV = "APP_TPP_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _matrix(text: str) -> tuple[tuple[float, ...], ...]:
    return tuple(_floats(row) for row in text.split(";") if row.strip())


# ---------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help=f"random seed (default: ${SEED_ENV}, else 0)")
    p.add_argument("--threads", type=int, default=1, help="worker threads; 1 gives bit-exact reproducibility (default: %(default)s)")
    p.add_argument("--config", default=None, help="key=value file of defaults; explicit flags win")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--variant", choices=VARIANTS, default="app_vae", help="model variant (default: %(default)s)")
    g.add_argument("--action-embed", type=int, default=64, help="action embedding width (default: %(default)s)")
    g.add_argument("--time-embed", type=int, default=16, help="time embedding width (default: %(default)s)")
    g.add_argument("--joint-embed", type=int, default=128, help="joint event embedding width (default: %(default)s)")
    g.add_argument("--hidden", type=int, default=128, help="LSTM hidden width (default: %(default)s)")
    g.add_argument("--latent", type=int, default=256, help="latent code dimension (default: %(default)s)")
    g.add_argument("--head-hidden", type=int, default=128, help="prior/posterior head width (default: %(default)s)")
    g.add_argument("--decoder-hidden", type=int, default=128, help="decoder MLP width (default: %(default)s)")
    g.add_argument("--delta-tau", type=float, default=1.0, help="interval width of the time likelihood (default: %(default)s)")


def _train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=1500, help="training epochs (default: %(default)s)")
    g.add_argument("--batch-size", type=int, default=32, help="mini-batch size (default: %(default)s)")
    g.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate (default: %(default)s)")
    g.add_argument("--beta1", type=float, default=0.9, help="Adam beta1 (default: %(default)s)")
    g.add_argument("--beta2", type=float, default=0.999, help="Adam beta2 (default: %(default)s)")
    g.add_argument("--adam-eps", type=float, default=1e-8, help="Adam epsilon (default: %(default)s)")
    g.add_argument("--grad-clip", type=float, default=5.0, help="global gradient-norm clip (default: %(default)s)")
    g.add_argument("--val-fraction", type=float, default=0.3, help="held-out share for model selection (default: %(default)s)")
    g.add_argument("--kl-weight", type=float, default=1.0, help="weight of the KL term (default: %(default)s)")


def _data_flags(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--data", required=required, help="event-sequence file")
    p.add_argument("--time-scale", type=float, default=1.0, help="multiply inter-arrivals on load (default: %(default)s)")


def _history_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", default=None, help="event-sequence file holding histories (default: empty history)")
    p.add_argument("--time-scale", type=float, default=1.0, help="multiply inter-arrivals on load (default: %(default)s)")
    p.add_argument("--index", type=int, default=None, help="use only this sequence of --data (default: all)")
    p.add_argument("--prefix", type=int, default=None, help="truncate each history to its first N events (default: whole)")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = _Parser(prog="app-tpp", description="Marked point-process models of action sequences.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    subs = {}

    p = subs["synth"] = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--process", required=True, choices=("poisson", "hawkes", "self_correcting", "markov"))
    p.add_argument("--k", type=int, default=None, help="number of categories (default: 1, or the matrix size for markov)")
    p.add_argument("--sequences", type=int, required=True, help="number of sequences")
    p.add_argument("--events", type=int, required=True, help="events per sequence")
    p.add_argument("--rate", type=float, default=None, help="poisson rate; markov per-state rate when --rates is absent")
    p.add_argument("--category-probs", type=_floats, default=None, help="poisson mark distribution, comma-separated")
    p.add_argument("--mu", type=float, default=None, help="hawkes / self-correcting base rate")
    p.add_argument("--alpha", type=float, default=None, help="hawkes jump / self-correcting growth")
    p.add_argument("--beta", type=float, default=None, help="hawkes decay")
    p.add_argument("--transition", type=_matrix, default=None, help="markov matrix, rows ';'-separated, entries ','-separated")
    p.add_argument("--cycle", action="store_true", help="markov: deterministic cycle 0 -> 1 -> ... -> K-1 -> 0")
    p.add_argument("--rates", type=_floats, default=None, help="markov per-state rates, comma-separated")
    p.add_argument("--initial-probs", type=_floats, default=None, help="markov first-mark distribution (default: uniform)")
    p.add_argument("--out", required=True, help="output event file; a <out>.json manifest is written alongside")

    p = subs["train"] = sub.add_parser("train", help="train a model")
    _data_flags(p)
    p.add_argument("--val-data", default=None, help="explicit validation file (default: split --data)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", default=None, help="training log, one JSON record per epoch (default: <out>.log.jsonl)")
    _model_flags(p)
    _train_flags(p)

    p = subs["eval"] = sub.add_parser("eval", help="teacher-forced accuracy, MAE and log-likelihood")
    p.add_argument("--checkpoint", required=True)
    _data_flags(p)
    p.add_argument("--samples", type=int, default=1500, help="Monte Carlo samples per step (default: %(default)s)")
    p.add_argument("--strategy", choices=("mode", "average"), default="mode", help="category aggregation (default: %(default)s)")
    p.add_argument("--tau-from", choices=("all", "mode"), default="all",
                   help="average 1/lambda over all samples or only those voting for the predicted category (default: %(default)s)")
    p.add_argument("--out", default=None, help="write the report as JSON")
    p.add_argument("--tsv", default=None, help="write per-sequence log-likelihoods as TSV")

    p = subs["generate"] = sub.add_parser("generate", help="continue histories autoregressively")
    p.add_argument("--checkpoint", required=True)
    _history_flags(p)
    p.add_argument("--steps", type=int, required=True, help="events to generate per history")
    p.add_argument("--mode", choices=("report", "stochastic"), default="report",
                   help="report: argmax category and 1/lambda; stochastic: sample both (default: %(default)s)")
    p.add_argument("--out", required=True, help="output event file with the generated events")

    p = subs["score"] = sub.add_parser("score", help="rank sequences by mean per-step log-likelihood")
    p.add_argument("--checkpoint", required=True)
    _data_flags(p)
    p.add_argument("--samples", type=int, default=1500, help="importance samples per step (default: %(default)s)")
    p.add_argument("--out", default=None, help="write the ranking as TSV (default: stdout)")

    p = subs["traverse"] = sub.add_parser("traverse", help="sweep one latent coordinate over mean +/- 5 std")
    p.add_argument("--checkpoint", required=True)
    _history_flags(p)
    p.add_argument("--dim", type=int, required=True, help="latent coordinate to sweep")
    p.add_argument("--points", type=int, default=11, help="grid size (default: %(default)s)")
    p.add_argument("--out", default=None, help="write the table as TSV (default: stdout)")

    p = subs["sweep"] = sub.add_parser("sweep", help="validation log-likelihood per latent size")
    _data_flags(p)
    p.add_argument("--sizes", type=_ints, default=(8, 16, 32), help="comma-separated latent sizes (default: 8,16,32)")
    p.add_argument("--samples", type=int, default=1500, help="importance samples per step (default: %(default)s)")
    p.add_argument("--out", default=None, help="write the table as TSV")
    _model_flags(p)
    _train_flags(p)

    for p in subs.values():
        _common(p)
    return parser, subs


# ---------------------------------------------------------------- config files


def read_config(path: str) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep or not key.strip():
                raise DataError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def _apply_config(sub: argparse.ArgumentParser, cfg: dict[str, str], path: str) -> None:
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    unknown = sorted(set(cfg) - set(actions))
    if unknown:
        raise DataError(f"{path}: unknown keys {', '.join(unknown)}")
    defaults = {}
    for key, value in cfg.items():
        action = actions[key]
        if isinstance(action, argparse._StoreTrueAction):
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise DataError(f"{path}: {key} must be a boolean, got {value!r}")
            defaults[key] = value.lower() in ("true", "1", "yes")
        else:
            if action.choices is not None and value not in action.choices:
                raise DataError(f"{path}: {key} must be one of {list(action.choices)}, got {value!r}")
            defaults[key] = value  # string defaults go through the flag's type on parse
        action.required = False
    sub.set_defaults(**defaults)


def _config_path(argv: list[str]) -> str | None:
    for i, tok in enumerate(argv):
        if tok == "--config":
            if i + 1 >= len(argv):
                raise UsageError("--config needs a file argument")
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser, subs = build_parser()
    path = _config_path(argv)
    if path is not None and argv and argv[0] in subs:
        # config values become defaults before parsing, so explicit flags win
        _apply_config(subs[argv[0]], read_config(path), path)
    args = parser.parse_args(argv)
    if args.seed is None:
        args.seed = _default_seed()
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    return args


# ---------------------------------------------------------------- commands


def _write_text(path: str, text: str) -> None:
    write_atomic(path, text.encode("utf-8"))


def _model_config(args, num_categories: int) -> ModelConfig:
    return ModelConfig(
        num_categories=num_categories,
        action_embed_dim=args.action_embed,
        time_embed_dim=args.time_embed,
        joint_embed_dim=args.joint_embed,
        hidden_dim=args.hidden,
        latent_dim=args.latent,
        head_hidden_dim=args.head_hidden,
        decoder_hidden_dim=args.decoder_hidden,
        delta_tau=args.delta_tau,
        variant=args.variant,
    )


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        beta1=args.beta1,
        beta2=args.beta2,
        adam_eps=args.adam_eps,
        grad_clip=args.grad_clip,
        seed=args.seed,
        val_fraction=args.val_fraction,
        eval_samples=getattr(args, "samples", 1500),
        kl_weight=args.kl_weight,
    )


def _histories(args, model: APPModel) -> list[ActionSequence | tuple]:
    if args.data is None:
        if args.index is not None or args.prefix is not None:
            raise DataError("--index and --prefix need --data")
        return [()]
    data = load_dataset(args.data, args.time_scale)
    if data.num_categories != model.config.num_categories:
        raise DataError(f"{args.data}: K={data.num_categories} but checkpoint expects K={model.config.num_categories}")
    seqs = list(data.sequences)
    if args.index is not None:
        if not 0 <= args.index < len(seqs):
            raise DataError(f"--index {args.index} out of range for {len(seqs)} sequences")
        seqs = [seqs[args.index]]
    if args.prefix is not None:
        if args.prefix < 0:
            raise DataError("--prefix must be >= 0")
        seqs = [tuple(s.events[: args.prefix]) for s in seqs]
    return seqs


def cmd_synth(args) -> int:
    proc, k = args.process, args.k

    def need(*names):
        missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) is None]
        if missing:
            raise UsageError(f"synth --process {proc} requires {', '.join(missing)}")

    if proc == "poisson":
        need("rate")
        spec = synth.PoissonSpec(args.rate, k or 1, args.category_probs)
        data = synth.gen_poisson(spec, args.sequences, args.events, args.seed)
    elif proc == "hawkes":
        need("mu", "alpha", "beta")
        spec = synth.HawkesSpec(args.mu, args.alpha, args.beta, k or 1)
        data = synth.gen_hawkes(spec, args.sequences, args.events, args.seed)
    elif proc == "self_correcting":
        need("mu", "alpha")
        spec = synth.SelfCorrectingSpec(args.mu, args.alpha, k or 1)
        data = synth.gen_self_correcting(spec, args.sequences, args.events, args.seed)
    else:
        if args.cycle == (args.transition is not None):
            raise UsageError("synth --process markov needs exactly one of --cycle or --transition")
        if args.cycle:
            if k is None:
                raise UsageError("synth --process markov --cycle requires --k")
            matrix = tuple(map(tuple, np.roll(np.eye(k), 1, axis=1).tolist()))
        else:
            matrix = args.transition
            if k is not None and k != len(matrix):
                raise synth.SpecError(f"--k {k} disagrees with a {len(matrix)}-state transition matrix")
        if args.rates is None:
            need("rate")
            rates = (args.rate,) * len(matrix)
        else:
            rates = args.rates
        spec = synth.MarkovMarkSpec(matrix, rates, args.initial_probs)
        data = synth.gen_markov_marks(spec, args.sequences, args.events, args.seed)

    manifest = {
        "process": proc,
        "spec": asdict(spec),
        "num_sequences": args.sequences,
        "events_per_sequence": args.events,
        "seed": args.seed,
        "num_categories": data.num_categories,
    }
    _write_text(args.out, write_dataset(data))
    _write_text(args.out + ".json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(data)} sequences ({data.num_events} events, K={data.num_categories}) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    data = load_dataset(args.data, args.time_scale)
    val = load_dataset(args.val_data, args.time_scale) if args.val_data else None
    if val is not None and val.num_categories != data.num_categories:
        raise DataError(f"{args.val_data}: K={val.num_categories} but {args.data} has K={data.num_categories}")
    mc, tc = _model_config(args, data.num_categories), _train_config(args)

    def progress(record):
        logging.getLogger("app_tpp").info("epoch %d val %.6f", record["epoch"], record["val"]["objective"])

    model, history = train(data, mc, tc, validation=val, callback=progress)
    summary = history[-1]
    meta = {"selected_epoch": summary["selected_epoch"], "best_val_objective": summary["best_val_objective"],
            **config_echo(mc, tc)}
    model.save(args.out, meta)
    _write_text(args.log or args.out + ".log.jsonl", format_log(history))
    print(f"selected epoch {summary['selected_epoch']}, validation loss {summary['best_val_objective']:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = APPModel.load(args.checkpoint)
    data = load_dataset(args.data, args.time_scale)
    report = ev.evaluate(model, data, args.samples, args.strategy, args.seed, args.threads, args.tau_from)
    print(report.to_text(), end="")
    if args.out:
        _write_text(args.out, json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    if args.tsv:
        _write_text(args.tsv, report.to_tsv())
    return EXIT_OK


def cmd_generate(args) -> int:
    if args.steps < 1:
        raise DataError("--steps must be >= 1")
    model = APPModel.load(args.checkpoint)
    gens = [ev.generate(model, h, args.steps, args.seed, args.mode) for h in _histories(args, model)]
    out = Dataset(tuple(gens), model.config.num_categories)
    _write_text(args.out, write_dataset(out))
    print(f"wrote {len(gens)} generated sequence(s) of {args.steps} events to {args.out}")
    return EXIT_OK


def cmd_score(args) -> int:
    model = APPModel.load(args.checkpoint)
    data = load_dataset(args.data, args.time_scale)
    if model.config.variant == "td_lstm":
        raise DataError("td_lstm defines no likelihood; scoring needs app_vae, app_vae_fixed_prior or app_lstm")
    if data.num_categories != model.config.num_categories:
        raise DataError(f"{args.data}: K={data.num_categories} but checkpoint expects K={model.config.num_categories}")
    ranking = ev.anomaly_rank(model, data, args.samples, args.seed, args.threads)
    text = "rank\tsequence\tmean_ll\n" + "".join(f"{r}\t{i}\t{ll!r}\n" for r, (i, ll) in enumerate(ranking))
    if args.out:
        _write_text(args.out, text)
        print(f"ranked {len(ranking)} sequences into {args.out}")
    else:
        print(text, end="")
    return EXIT_OK


def cmd_traverse(args) -> int:
    model = APPModel.load(args.checkpoint)
    hist = _histories(args, model)
    if len(hist) != 1:
        raise DataError("traverse needs a single history; pass --index")
    table = ev.latent_traversal(model, hist[0], args.dim, args.points, args.seed).to_tsv()
    if args.out:
        _write_text(args.out, table)
        print(f"wrote {args.points} grid points to {args.out}")
    else:
        print(table, end="")
    return EXIT_OK


def cmd_sweep(args) -> int:
    if not args.sizes:
        raise DataError("--sizes must be non-empty")
    data = load_dataset(args.data, args.time_scale)
    if args.variant not in ("app_vae", "app_vae_fixed_prior"):
        raise DataError(f"sweep needs a latent variant, got {args.variant!r}")
    result = ev.latent_size_sweep(data, args.sizes, _train_config(args), _model_config(args, data.num_categories),
                                  args.samples, args.threads)
    print(result.to_text(), end="")
    if args.out:
        _write_text(args.out, result.to_tsv())
    return EXIT_OK


_INPUTS = ("data", "val_data", "checkpoint")
_OUTPUTS = ("out", "log", "tsv")


def check_paths(args) -> None:
    """Fail before any work if an input is missing or an output directory does not exist."""
    for name in _INPUTS:
        path = getattr(args, name, None)
        if path and not os.path.isfile(path):
            raise DataError(f"--{name.replace('_', '-')}: no such file {path!r}")
    for name in _OUTPUTS:
        path = getattr(args, name, None)
        if path and not os.path.isdir(os.path.dirname(os.path.abspath(path))):
            raise DataError(f"--{name}: directory of {path!r} does not exist")


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "generate": cmd_generate,
    "score": cmd_score,
    "traverse": cmd_traverse,
    "sweep": cmd_sweep,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        check_paths(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
