"""``lae`` command-line tool.

Every subcommand exits 0 on success. Failures print a single tab-separated
line ``error<TAB><kind><TAB><message>`` to stderr and exit with 2 (config),
3 (data) or 4 (numeric failure).

Outputs carry the config digest: checkpoints embed it, other files get a
``<file>.digest`` sidecar and output directories a ``config.digest`` file.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

from . import evaluation as ev
from .config import ExperimentConfig
from .ctc import read_nbest, write_nbest
from .data import DataError, load_corpus, read_manifest
from .experiment import DEFAULT_SYSTEMS, SYSTEMS, run_experiment
from .model import build_model
from .ngram import NgramModel, TokenLM
from .nn import checkpoint as ckpt_io
from .nn.layers import ConfigError, LengthError
from .sim import gen_corpus
from .training import TrainingDiverged, average_checkpoints, last_checkpoints, train
from .vocab import Vocabulary, VocabError

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class DigestMismatch(DataError):
    pass


def _config(path) -> ExperimentConfig:
    return ExperimentConfig.load(path) if path else ExperimentConfig()


def _sidecar(path: Path, digest: str) -> None:
    Path(str(path) + ".digest").write_text(digest + "\n", encoding="utf-8")


def _vocab(data_dir: Path) -> Vocabulary:
    path = data_dir / "vocab.tsv"
    if not path.exists():
        raise FileNotFoundError(f"no vocabulary at {path}")
    return Vocabulary.load(path)


def _load_model(ckpt_path, vocab: Vocabulary):
    ck = ckpt_io.load(ckpt_path)
    meta = ck.meta
    if "config" not in meta:
        raise ConfigError(f"{ckpt_path}: checkpoint sidecar carries no config")
    want = meta.get("vocab_digest")
    if want is not None and want != vocab.digest():
        raise DigestMismatch(f"{ckpt_path}: vocabulary digest {want[:12]} differs from the data's "
                             f"{vocab.digest()[:12]}; refusing to decode with a different token inventory")
    cfg = ExperimentConfig.parse(meta["config"], f"{ckpt_path}.json")
    model = build_model(cfg.model(vocab.size))
    model.load_state(ck.params)
    return model.eval(), cfg


# -- subcommands -----------------------------------------------------------------

def cmd_gen_data(a) -> None:
    cfg = _config(a.config)
    vocab = Vocabulary.build(cfg["tokens_per_lang"], cfg["tokens_per_lang"])
    out = Path(a.out)
    utts = gen_corpus(cfg.corpus_spec(), vocab, cfg.sim(), cfg["seed"], out)
    (out / "config.digest").write_text(cfg.hexdigest() + "\n")
    print(f"wrote {len(utts)} utterances to {out}")


def cmd_train(a) -> None:
    cfg = _config(a.config)
    data = Path(a.data)
    vocab = _vocab(data)
    corpus = load_corpus(data, cfg.train_partitions())
    model = build_model(cfg.model(vocab.size))
    out = Path(a.out)
    meta = {"config": cfg.normalized(), "vocab_digest": vocab.digest()}
    res = train(model, corpus, vocab, cfg.train(), out, cfg.digest(), meta)
    (out / "config.digest").write_text(cfg.hexdigest() + "\n")
    print(f"trained {len(res.metrics)} epochs, {res.skipped} utterances skipped")


def cmd_average(a) -> None:
    paths = last_checkpoints(a.in_dir, a.last)
    avg = average_checkpoints(paths)
    ckpt_io.save(a.out, avg)
    print(f"averaged {len(paths)} checkpoints into {a.out}")


def cmd_decode(a) -> None:
    data = Path(a.data)
    vocab = _vocab(data)
    model, cfg = _load_model(a.ckpt, vocab)
    if a.decoder != "global" and model.aux_decoder is None:
        raise ConfigError(f"{a.ckpt}: {model.config.arch} model has no {a.decoder} decoder")
    utts = load_corpus(data, [a.partition])
    if not utts:
        raise DataError(f"partition {a.partition!r} is empty or absent")
    lm = None
    if a.lm:
        lm = TokenLM(NgramModel.load(a.lm), [None, None, None] + list(vocab.tokens[3:]))
    results = ev.decode(model, utts, a.decoder, a.beam, lm, a.lm_weight)
    out = Path(a.out)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        for u, hyps in zip(utts, results):
            write_nbest(fh, u.utt_id, hyps, vocab.tokens)
    _sidecar(out, cfg.hexdigest())
    print(f"decoded {len(utts)} utterances")


def cmd_score(a) -> None:
    manifest = Path(a.ref_manifest)
    vocab = _vocab(manifest.parent)
    refs = {r["utt_id"]: r for r in read_manifest(manifest)}
    with open(a.hyp, encoding="utf-8") as fh:
        nbest = read_nbest(fh)
    ids = sorted(nbest)
    missing = [u for u in ids if u not in refs]
    if missing:
        raise DataError(f"hypothesis for unknown utterance {missing[0]!r}")
    hyps = [[vocab.id_of(s) for s in nbest[u][0][4]] for u in ids]
    parts = sorted({refs[u]["partition"] for u in ids})
    er = ev.mixed_error_rate([refs[u]["targets"] for u in ids], hyps, vocab)
    out = Path(a.out)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        ev.write_score_report(fh, [ev.score_row(",".join(parts), a.system, er)])
    per_utt = Path(str(out) + ".per_utt.tsv")
    per_utt.write_text("".join(f"{u}\t{e}\n" for u, e in zip(ids, er.per_utt)), encoding="utf-8")
    digest = Path(str(a.hyp) + ".digest")
    if digest.exists():
        _sidecar(out, digest.read_text().strip())
        _sidecar(per_utt, digest.read_text().strip())
    print(f"MER={100 * er.MER:.2f} ER_A={100 * er.ER_A:.2f} ER_B={100 * er.ER_B:.2f}")


def cmd_probe(a) -> None:
    data = Path(a.data)
    vocab = _vocab(data)
    model, cfg = _load_model(a.ckpt, vocab)
    train_parts = [p for p in cfg.train_partitions() if p != "train-simu-CS"] or ["train-mono-A", "train-mono-B"]
    probe = ev.train_probe(model, load_corpus(data, train_parts), seed=cfg["seed"])
    evals = load_corpus(data, ["eval-mono-A", "eval-mono-B", "eval-CS"])
    res = ev.probe_accuracy(probe, model, evals)
    out = Path(a.out)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["partition", "accuracy"])
        for part in sorted(res.accuracy):
            w.writerow([part, f"{res.accuracy[part]:.6f}"])
    _sidecar(out, cfg.hexdigest())
    print(json.dumps(res.accuracy, sort_keys=True))


def cmd_spikes(a) -> None:
    data = Path(a.data)
    vocab = _vocab(data)
    model, cfg = _load_model(a.ckpt, vocab)
    utts = [u for u in load_corpus(data) if u.utt_id == a.utt]
    if not utts:
        raise DataError(f"utterance {a.utt!r} not in {data}")
    if model.aux_decoder is None:
        raise ConfigError("spike export needs a model with language-specific branches")
    out = Path(a.out)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        ev.export_spikes(model, utts[0], fh)
    _sidecar(out, cfg.hexdigest())


def _read_per_utt(path) -> dict[str, float]:
    vals = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}:{n}: expected utt_id and error count")
        vals[parts[0]] = float(parts[1])
    return vals


def cmd_sigtest(a) -> None:
    e1, e2 = _read_per_utt(a.per_utt_a), _read_per_utt(a.per_utt_b)
    if set(e1) != set(e2):
        raise DataError("per-utterance files cover different utterances")
    ids = sorted(e1)
    st = ev.mapsswe_test([e1[u] for u in ids], [e2[u] for u in ids], a.resamples, a.seed)
    print(f"n={st.n}\tmean_diff={st.mean_diff:.6g}\tz={st.z:.6g}\tp={st.p_value:.6g}\t"
          f"p_permutation={st.p_permutation:.6g}")


def cmd_experiment(a) -> None:
    cfg = _config(a.config)
    systems = tuple(a.systems.split(",")) if a.systems else DEFAULT_SYSTEMS
    unknown = [s for s in systems if s not in SYSTEMS]
    if unknown:
        raise ConfigError(f"unknown system {unknown[0]!r}; choose from {', '.join(SYSTEMS)}")
    summary = run_experiment(cfg, a.out, systems, reuse=a.reuse)
    print(json.dumps({k: v for k, v in summary.items() if k != "systems"}, sort_keys=True, default=str))


# -- entry point ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lae", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="BLAS thread count (1 = fully deterministic)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="render the synthetic bilingual corpus")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train one model, writing per-epoch checkpoints and metrics.csv")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("average", help="average the last K epoch checkpoints")
    s.add_argument("--in-dir", required=True)
    s.add_argument("--last", type=int, default=5)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_average)

    s = sub.add_parser("decode", help="beam-search one partition into an n-best file")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--partition", default="eval-CS")
    s.add_argument("--beam", type=int, default=10)
    s.add_argument("--lm")
    s.add_argument("--lm-weight", type=float, default=0.0)
    s.add_argument("--decoder", choices=("global", "auxA", "auxB"), default="global")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("score", help="mixed and per-language error rates of an n-best file")
    s.add_argument("--ref-manifest", required=True)
    s.add_argument("--hyp", required=True)
    s.add_argument("--system", default="system")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("probe", help="train the language probe and report eval accuracy")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("spikes", help="per-frame decoder spikes for one utterance")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--utt", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_spikes)

    s = sub.add_parser("sigtest", help="matched-pairs test on two per-utterance error files")
    s.add_argument("--per-utt-a", required=True)
    s.add_argument("--per-utt-b", required=True)
    s.add_argument("--resamples", type=int, default=10000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_sigtest)

    s = sub.add_parser("experiment", help="run the full comparison and write all reports")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--systems", help=f"comma list (default {','.join(DEFAULT_SYSTEMS)})")
    s.add_argument("--reuse", action="store_true", help="reuse final checkpoints with a matching digest")
    s.set_defaults(func=cmd_experiment)
    return p


def _fail(kind: str, code: int, exc: BaseException) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(f"error\t{kind}\t{msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(limits=args.threads)
    else:
        limiter = nullcontext()
    with limiter:
        try:
            args.func(args)
        except ConfigError as exc:
            return _fail("config", EXIT_CONFIG, exc)
        except (TrainingDiverged, FloatingPointError) as exc:
            return _fail("numeric", EXIT_NUMERIC, exc)
        except DigestMismatch as exc:
            return _fail("digest", EXIT_DATA, exc)
        except (DataError, VocabError, ckpt_io.CheckpointError, LengthError, FileNotFoundError) as exc:
            return _fail("data", EXIT_DATA, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
