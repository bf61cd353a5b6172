"""Command-line entry point.

    bachlstm ingest MIDI_DIR --out DATA_DIR
    bachlstm stats --corpus DATA_DIR/corpus.txt
    bachlstm train-notes --corpus ... --dicts ... --out notes.ckpt
    bachlstm train-durations --corpus ... --dicts ... --out durations.ckpt
    bachlstm generate --checkpoint-notes ... --checkpoint-durations ... --dicts ... --out piece.mid
    bachlstm gradcheck --model note --scale 0.0625 --seed 7
    bachlstm eval-survey fixtures/survey19.csv

Exit status: 0 success, 1 usage error, 2 data/format error or failed check.
Options may also come from ``--config FILE`` (``key = value`` lines, keys
named like the long options with dashes or underscores); command-line
flags take precedence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import dataset, generator, midi_io, models, survey_eval, tensor_nn, tokenizer

log = logging.getLogger("bachlstm")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
GRADCHECK_TOLERANCE = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def read_config(path) -> dict[str, str]:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep or not key.strip():
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _window_args(p, seq_len=50):
    p.add_argument("--seq-len", type=int, default=seq_len, help="window length n (default %(default)s)")


def _train_args(p):
    p.add_argument("--corpus", required=True)
    p.add_argument("--dicts", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", help="per-epoch TSV log (default: OUT.history.tsv)")
    _window_args(p)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--patience", type=int, default=10, help="early-stop epochs; 0 disables")
    p.add_argument("--scale", type=float, default=1.0, help="recurrent width factor")
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--rho", type=float, default=0.9)
    p.add_argument("--epsilon", type=float, default=1e-7)
    p.add_argument("--clip-norm", type=float, default=5.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shuffle-seed", type=int, default=0)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--prefetch", type=int, default=2, help="batches built ahead of training")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bachlstm", description="Bach-style LSTM music toolkit")
    parser.add_argument("--config", help="flat key = value file of option defaults")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--version", action="version", version=f"bachlstm {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("ingest", help="MIDI directory -> corpus, dictionaries, stats")
    p.add_argument("midi_dir")
    p.add_argument("--out", required=True, help="output directory")
    _window_args(p)

    p = sub.add_parser("stats", help="report corpus statistics")
    p.add_argument("--corpus", required=True)
    _window_args(p)

    _train_args(sub.add_parser("train-notes", help="train the note model"))
    _train_args(sub.add_parser("train-durations", help="train the duration model"))

    p = sub.add_parser("generate", help="checkpoints -> MIDI file and report")
    p.add_argument("--checkpoint-notes", required=True)
    p.add_argument("--checkpoint-durations", required=True)
    p.add_argument("--dicts", required=True)
    p.add_argument("--length", type=int, default=300, help="token budget (default %(default)s)")
    p.add_argument("--seq-len", type=int, help="must match training (default: from checkpoint)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tempo", type=float, default=midi_io.DEFAULT_TEMPO_BPM)
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="sidecar report path (default: OUT.report.txt)")

    p = sub.add_parser("gradcheck", help="finite-difference check of a scaled model")
    p.add_argument("--model", choices=("note", "duration"), default="note")
    p.add_argument("--scale", type=float, default=0.0625)
    p.add_argument("--vocab", type=int, default=12)
    p.add_argument("--seq-len", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--samples", type=int, default=200, help="coordinates per tensor; 0 = all")
    p.add_argument("--dropout-mode", choices=("infer", "fixed"), default="infer")
    p.add_argument("--seed", type=int, default=7)

    p = sub.add_parser("eval-survey", help="listening-test responses -> score tables")
    p.add_argument("responses")
    p.add_argument("--out-dir", help="also write table3.csv, table4.csv, table5.csv here")
    return parser


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config and args.command:
        config = read_config(args.config)
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in subparser._actions}
        unknown = set(config) - known
        if unknown:
            raise UsageError(f"{args.config}: unknown option(s) {', '.join(sorted(unknown))}")
        subparser.set_defaults(**config)
        args = parser.parse_args(argv)
    return args


def _config_digest(args) -> str:
    items = {k: v for k, v in sorted(vars(args).items()) if k not in ("verbose",)}
    return hashlib.sha256(json.dumps(items, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _provenance(args, out) -> None:
    seed = getattr(args, "seed", None)
    out.write(f"# bachlstm {__version__} command={args.command} seed={seed} "
              f"config={_config_digest(args)}\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_ingest(args, out):
    paths = sorted(str(p) for p in Path(args.midi_dir).iterdir()
                   if p.suffix.lower() in (".mid", ".midi"))
    if not paths:
        raise dataset.DatasetError(f"no .mid files in {args.midi_dir}")
    corpus, dicts, stats = dataset.ingest_midi_files(paths, args.seq_len)
    os.makedirs(args.out, exist_ok=True)
    tokenizer.write_corpus(os.path.join(args.out, "corpus.txt"), corpus)
    Path(args.out, "dicts.json").write_text(dicts.to_json(), encoding="utf-8")
    Path(args.out, "stats.txt").write_text(stats.format(), encoding="utf-8")
    songs = dataset.encode_corpus(dataset.append_end_flags(corpus), dicts)
    try:
        windows = dataset.make_note_windows(songs, dataset.WindowConfig(args.seq_len),
                                            dicts.n_notes)
        dataset.write_window_index(os.path.join(args.out, "windows.idx"), windows,
                                   dataset.corpus_digest(corpus))
    except dataset.DatasetError as exc:
        log.warning("no window index written: %s", exc)
    out.write(stats.format())


def _corpus_stats(corpus, seq_len) -> str:
    dicts = tokenizer.build_dictionaries(corpus)
    flagged = dataset.append_end_flags(corpus)
    lines = [
        f"songs\t{len(corpus)}",
        f"note_tokens\t{sum(len(n) for n, _ in corpus)}",
        f"note_vocab_size\t{dicts.n_notes}",
        f"duration_vocab_size\t{dicts.n_durations}",
        f"sequence_length\t{seq_len}",
        f"coverage_index\t{float(dataset.compute_coverage_index(flagged, seq_len)):.6f}",
    ]
    return "\n".join(lines) + "\n"


def cmd_stats(args, out):
    out.write(_corpus_stats(tokenizer.read_corpus(args.corpus), args.seq_len))


def _load_dicts(path) -> tokenizer.TokenDicts:
    return tokenizer.TokenDicts.from_json(Path(path).read_text(encoding="utf-8"))


def _train(args, out, kind):
    corpus = tokenizer.read_corpus(args.corpus)
    dicts = _load_dicts(args.dicts)
    songs = dataset.encode_corpus(dataset.append_end_flags(corpus), dicts)
    wcfg = dataset.WindowConfig(args.seq_len, args.batch_size, args.shuffle_seed)
    if kind == "note":
        windows = dataset.make_note_windows(songs, wcfg, dicts.n_notes)
        spec = models.build_note_model(dicts.n_notes, args.scale)
    else:
        windows = dataset.make_duration_windows(songs, wcfg, dicts.n_notes)
        spec = models.build_duration_model(dicts.n_notes, dicts.n_durations, args.scale)
    tcfg = models.TrainConfig(epochs=args.epochs, learning_rate=args.lr, rho=args.rho,
                              epsilon=args.epsilon, clip_norm=args.clip_norm or None,
                              patience=args.patience or None, seed=args.seed,
                              checkpoint_every=args.checkpoint_every)
    meta = {"sequence_length": args.seq_len, "kind": kind, "windows": len(windows)}

    def checkpoint(epoch, net, opt):
        models.save_checkpoint(args.out, models.Checkpoint(spec, net, opt, dicts.digest(),
                                                           epoch, args.seed, meta))

    result = models.train(spec, dataset.BatchStream(windows, wcfg, args.prefetch), tcfg,
                          on_checkpoint=checkpoint)
    last = result.history.records[-1].epoch if len(result.history) else 0
    checkpoint(last, result.network, result.optimizer)
    history_path = args.history or args.out + ".history.tsv"
    Path(history_path).write_text(result.history.to_tsv(), encoding="utf-8")
    out.write(f"windows\t{len(windows)}\n")
    for r in result.history.records:
        out.write(f"epoch {r.epoch}\tloss {r.loss:.6f}\taccuracy {r.accuracy:.4f}\n")


def cmd_train_notes(args, out):
    _train(args, out, "note")


def cmd_train_durations(args, out):
    _train(args, out, "duration")


def cmd_generate(args, out):
    dicts = _load_dicts(args.dicts)
    notes_ck = models.load_checkpoint(args.checkpoint_notes, dicts.digest())
    durs_ck = models.load_checkpoint(args.checkpoint_durations, dicts.digest())
    if notes_ck.spec.name != "note" or durs_ck.spec.name != "duration":
        raise generator.GenerationError("checkpoints are not a note model and a duration model")
    trained_n = {notes_ck.metadata.get("sequence_length"), durs_ck.metadata.get("sequence_length")}
    seq_len = args.seq_len if args.seq_len is not None else notes_ck.metadata.get("sequence_length")
    if trained_n != {seq_len}:
        raise generator.GenerationError(
            f"sequence length {seq_len} does not match the checkpoints ({sorted(trained_n)})")
    cfg = generator.GenerationConfig(args.length, seq_len, args.seed, args.tempo, args.out)
    notes = generator.generate_notes(notes_ck.network, dicts, cfg)
    durations = generator.generate_durations(durs_ck.network, notes, dicts, cfg)
    provenance = {
        "version": __version__,
        "seed": args.seed,
        "length": args.length,
        "sequence_length": seq_len,
        "tempo_bpm": args.tempo,
        "notes_checkpoint_sha256": _file_digest(args.checkpoint_notes),
        "durations_checkpoint_sha256": _file_digest(args.checkpoint_durations),
        "dicts_sha256": dicts.digest(),
    }
    midi, report = generator.assemble_piece(notes, durations, dicts, cfg, provenance)
    Path(args.out).write_bytes(midi)
    Path(args.report or args.out + ".report.txt").write_text(report.format(), encoding="utf-8")
    out.write(report.format())


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def gradcheck_setup(model: str, scale: float, vocab: int, seq_len: int, batch: int, seed: int):
    """Network and a random one-hot batch for a finite-difference check."""
    rng = np.random.default_rng(seed)
    if model == "note":
        spec = models.build_note_model(vocab, scale)
        x = dataset.one_hot(rng.integers(0, vocab, (batch, seq_len)), vocab)
    else:
        spec = models.build_duration_model(vocab, scale=scale)
        x = np.concatenate([dataset.one_hot(rng.integers(0, vocab, (batch, seq_len)), vocab),
                            dataset.one_hot(rng.integers(0, 3, (batch, seq_len)), 3)], axis=-1)
    y = dataset.one_hot(rng.integers(0, spec.output_dim, batch), spec.output_dim)
    return models.build_network(spec, seed), (x, y)


def cmd_gradcheck(args, out):
    net, batch = gradcheck_setup(args.model, args.scale, args.vocab, args.seq_len,
                                 args.batch_size, args.seed)

    def report(name, err):
        out.write(f"{name}\t{err:.3e}\n")

    worst = tensor_nn.gradient_check(net, batch, args.eps, args.samples or None, args.seed,
                                     args.dropout_mode, report)
    ok = worst < GRADCHECK_TOLERANCE
    out.write(f"max_relative_error\t{worst:.6e}\n{'PASS' if ok else 'FAIL'}\n")
    return EXIT_OK if ok else EXIT_DATA


def cmd_eval_survey(args, out):
    responses = survey_eval.read_responses(args.responses)
    tables = [
        ("table3", survey_eval.aggregate_scores(responses)),
        ("table4", survey_eval.distinguish_rates(responses)),
        ("table5", survey_eval.familiarity_rates(responses)),
    ]
    out.write(f"respondents\t{len(responses)}\n\n")
    out.write("\n".join(t.format_text() for _, t in tables))
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        for name, t in tables:
            Path(args.out_dir, f"{name}.csv").write_text(t.format_csv(), encoding="utf-8")


COMMANDS = {
    "ingest": cmd_ingest,
    "stats": cmd_stats,
    "train-notes": cmd_train_notes,
    "train-durations": cmd_train_durations,
    "generate": cmd_generate,
    "gradcheck": cmd_gradcheck,
    "eval-survey": cmd_eval_survey,
}

DATA_ERRORS = (ValueError, OSError, KeyError, RuntimeError, FloatingPointError)


def dispatch(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
        if not args.command:
            raise UsageError("bachlstm: error: a subcommand is required")
    except UsageError as exc:
        err.write(build_parser().format_usage())
        err.write(f"{exc}\n")
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return exc.code or EXIT_OK
    except OSError as exc:
        err.write(f"bachlstm: {exc}\n")
        return EXIT_DATA
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=err)
    _provenance(args, out)
    try:
        code = COMMANDS[args.command](args, out)
    except DATA_ERRORS as exc:
        err.write(f"bachlstm {args.command}: {exc}\n")
        return EXIT_DATA
    return EXIT_OK if code is None else code


def main():
    sys.exit(dispatch())
