"""Desk-scale bilingual experiment: trains the compared systems and writes every report.

Systems (all CTC, equal layer budgets):

* ``vanilla``  -- plain encoder, mono-A + mono-B + native code-switched data
* ``lae``      -- language-aware encoder with language-aware training, same data
* ``lae-mono`` -- LAE on monolingual data only
* ``lae-simu`` -- LAE on monolingual data plus spliced code-switched data

Reports land in ``<work>/reports``; they contain no timings or absolute
paths, so two runs with the same config must produce identical bytes.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .config import ExperimentConfig
from .ctc import prefix_beam_search
from .data import Utterance, load_corpus
from .model import EncoderModel, build_model
from .ngram import TokenLM, train_ngram
from .nn import checkpoint as ckpt_io
from .sim import gen_corpus
from .training import average_checkpoints, last_checkpoints, train
from .vocab import LANG_A, LANG_B, Vocabulary

log = logging.getLogger(__name__)

REAL = ("train-mono-A", "train-mono-B", "train-CS")
MONO = ("train-mono-A", "train-mono-B")
SIMU = ("train-mono-A", "train-mono-B", "train-simu-CS")
EVAL = ("eval-mono-A", "eval-mono-B", "eval-CS")


@dataclass(frozen=True)
class System:
    name: str
    arch: str
    partitions: tuple
    aux: bool = True


SYSTEMS = {
    "vanilla": System("vanilla", "vanilla", REAL, aux=False),
    "lae": System("lae", "lae", REAL),
    "lae-mono": System("lae-mono", "lae", MONO),
    "lae-simu": System("lae-simu", "lae", SIMU),
    "vanilla-mono": System("vanilla-mono", "vanilla", MONO, aux=False),
    "vanilla-simu": System("vanilla-simu", "vanilla", SIMU, aux=False),
    "bi-encoder": System("bi-encoder", "bi-encoder", REAL),
}
DEFAULT_SYSTEMS = ("vanilla", "lae", "lae-mono", "lae-simu")


def ensure_corpus(cfg: ExperimentConfig, data_dir: Path) -> tuple[list[Utterance], Vocabulary]:
    vocab = Vocabulary.build(cfg["tokens_per_lang"], cfg["tokens_per_lang"])
    stamp = data_dir / "config.digest"
    if stamp.exists() and stamp.read_text().strip() == corpus_digest(cfg):
        return load_corpus(data_dir), Vocabulary.load(data_dir / "vocab.tsv")
    data_dir.mkdir(parents=True, exist_ok=True)
    utts = gen_corpus(cfg.corpus_spec(), vocab, cfg.sim(), cfg["seed"], data_dir)
    stamp.write_text(corpus_digest(cfg) + "\n")
    return utts, vocab


def corpus_digest(cfg: ExperimentConfig) -> str:
    keys = sorted(k for k in cfg.values if k in _CORPUS_KEYS)
    return ExperimentConfig({k: cfg[k] for k in keys}).hexdigest()


_CORPUS_KEYS = {"seed", "tokens_per_lang", "feat_dim", "dur_min", "dur_max", "noise_std", "proto_scale",
                "min_proto_dist", "silence_max", "mono_len_min", "mono_len_max", "cs_len_min",
                "cs_len_max", "cs_switch_min", "cs_switch_max", "cap_frames", "n_train_mono_a",
                "n_train_mono_b", "n_train_cs", "n_train_simu_cs", "n_eval_mono_a", "n_eval_mono_b",
                "n_eval_cs"}


def system_config(cfg: ExperimentConfig, system: System) -> ExperimentConfig:
    return cfg.replace(arch=system.arch, aux_loss=system.aux,
                       train_partitions=",".join(system.partitions))


def train_system(cfg: ExperimentConfig, system: System, corpus: list[Utterance], vocab: Vocabulary,
                 out_dir: Path, reuse: bool = False) -> EncoderModel:
    scfg = system_config(cfg, system)
    final = out_dir / "final.laec"
    model = build_model(scfg.model(vocab.size))
    if reuse and final.exists():
        ck = ckpt_io.load(final)
        if ck.digest == scfg.digest():
            log.info("reusing %s", final)
            return model.load_state(ck.params).eval()
    parts = set(system.partitions)
    train_set = [u for u in corpus if u.partition in parts]
    meta = {"config": scfg.normalized(), "vocab_digest": vocab.digest(), "system": system.name}
    t0 = time.time()
    train(model, train_set, vocab, scfg.train(), out_dir, scfg.digest(), meta)
    log.info("%s trained in %.0fs", system.name, time.time() - t0)
    avg = average_checkpoints(last_checkpoints(out_dir, scfg["average_last"]))
    ckpt_io.save(final, avg)
    return model.load_state(avg.params).eval()


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _f(x: float) -> str:
    return "nan" if isinstance(x, float) and math.isnan(x) else f"{x:.6g}"


def run_experiment(cfg: ExperimentConfig, work_dir, systems=DEFAULT_SYSTEMS, reuse: bool = False) -> dict:
    work = Path(work_dir)
    reports = work / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    corpus, vocab = ensure_corpus(cfg, work / "data")
    evals = {p: [u for u in corpus if u.partition == p] for p in EVAL}
    beam = cfg["beam"]

    summary: dict = {"config_digest": cfg.hexdigest(), "systems": {}}
    score_rows, per_utt = [], {}
    models = {}
    for name in systems:
        system = SYSTEMS[name]
        model = train_system(cfg, system, corpus, vocab, work / "exp" / name, reuse)
        models[name] = model
        summary["systems"][name] = {"params": model.parameter_count()}
        for part, utts in evals.items():
            hyps = [h[0].tokens for h in ev.decode(model, utts, "global", beam)]
            er = ev.mixed_error_rate([u.targets for u in utts], hyps, vocab)
            score_rows.append(ev.score_row(part, name, er))
            per_utt[(name, part)] = er.per_utt
            summary["systems"][name][part] = {"MER": er.MER, "ER_A": er.ER_A, "ER_B": er.ER_B}
        log.info("%s: %s", name, summary["systems"][name])
    with open(reports / "scores.csv", "w", newline="", encoding="utf-8") as fh:
        ev.write_score_report(fh, score_rows)
    _write_csv(reports / "per_utt_errors.csv", ["system", "partition", "utt_id", "errors"],
               [[s, p, u.utt_id, e] for (s, p), errs in per_utt.items()
                for u, e in zip(evals[p], errs)])

    sig_rows = []
    for a, b in (("vanilla", "lae"), ("lae-mono", "lae-simu"), ("vanilla-mono", "vanilla-simu")):
        if a in models and b in models:
            for part in EVAL:
                st = ev.mapsswe_test(per_utt[(a, part)], per_utt[(b, part)], seed=cfg["seed"])
                sig_rows.append([a, b, part, _f(st.mean_diff), _f(st.z), _f(st.p_value), _f(st.p_permutation)])
                summary.setdefault("sigtest", {})[f"{a}|{b}|{part}"] = {
                    "mean_diff": st.mean_diff, "z": st.z, "p": st.p_value, "p_perm": st.p_permutation}
    _write_csv(reports / "sigtest.csv", ["system_1", "system_2", "partition", "mean_diff", "z", "p_normal",
                                         "p_permutation"], sig_rows)

    if "lae" in models:
        summary["lae"] = analyse_lae(models["lae"], cfg, corpus, evals, vocab, reports)
    with open(reports / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(_jsonable(summary), fh, indent=1, sort_keys=True)
        fh.write("\n")
    return summary


def analyse_lae(model: EncoderModel, cfg: ExperimentConfig, corpus, evals, vocab: Vocabulary,
                reports: Path) -> dict:
    out: dict = {}
    beam = cfg["beam"]
    train_parts = set(REAL)
    train_set = [u for u in corpus if u.partition in train_parts]

    # utterance-level probe
    probe = ev.train_probe(model, train_set, seed=cfg["seed"])
    res = ev.probe_accuracy(probe, model, [u for p in EVAL for u in evals[p]])
    _write_csv(reports / "probe.csv", ["partition", "accuracy", "pred_mono-A", "pred_mono-B", "pred_code-switched"],
               [[p, _f(res.accuracy[p])] + [res.distribution[p][c] for c in ("mono-A", "mono-B", "code-switched")]
                for p in EVAL])
    out["probe"] = res.accuracy

    # language-specific decoders
    rows, aux = [], {}
    for part in EVAL:
        utts = evals[part]
        glob = ev.mixed_error_rate([u.targets for u in utts],
                                   [h[0].tokens for h in ev.decode(model, utts, "global", beam)], vocab)
        rows.append([part, "global", "full", _f(glob.MER), _f(glob.ER_A), _f(glob.ER_B), 0])
        aux[(part, "global")] = {"ER_A": glob.ER_A, "ER_B": glob.ER_B}
        for which in ("A", "B"):
            r = ev.aux_decode_eval(model, utts, which, vocab, beam)
            for view, er in (("projected", r.projected), ("full", r.full)):
                rows.append([part, "aux" + which, view, _f(er.MER), _f(er.ER_A), _f(er.ER_B),
                             r.other_language_tokens])
            aux[(part, "aux" + which)] = {
                "projected_ER_A": r.projected.ER_A, "projected_ER_B": r.projected.ER_B,
                "full_ER_A": r.full.ER_A, "full_ER_B": r.full.ER_B,
                "other_language_tokens": r.other_language_tokens}
    _write_csv(reports / "aux_decode.csv", ["partition", "decoder", "view", "MER", "ER_A", "ER_B",
                                            "other_language_tokens"], rows)
    out["aux_decode"] = {f"{p}|{d}": v for (p, d), v in aux.items()}

    # frame-level spikes
    spike_dir = reports / "spikes"
    spike_dir.mkdir(exist_ok=True)
    for u in evals["eval-CS"][:5]:
        with open(spike_dir / f"{u.utt_id}.csv", "w", newline="", encoding="utf-8") as fh:
            ev.export_spikes(model, u, fh)
    st = ev.spike_stats(model, evals["eval-CS"], vocab)
    idle_a = ev.idle_branch_fraction(model, evals["eval-mono-A"], vocab, "auxB")
    idle_b = ev.idle_branch_fraction(model, evals["eval-mono-B"], vocab, "auxA")
    _write_csv(reports / "spike_stats.csv", ["quantity", "value"],
               [["auxA_spikes_in_B_spans", st.a_spikes], ["auxA_mask_B", st.a_mask],
                ["auxB_spikes_in_A_spans", st.b_spikes], ["auxB_mask_A", st.b_mask],
                ["mask_fraction", _f(st.mask_fraction)],
                ["idle_auxB_on_mono_A", _f(idle_a)], ["idle_auxA_on_mono_B", _f(idle_b)]])
    out["spikes"] = {"mask_fraction": st.mask_fraction, "a_spikes": st.a_spikes, "b_spikes": st.b_spikes,
                     "idle_auxB_on_mono_A": idle_a, "idle_auxA_on_mono_B": idle_b}

    # shallow fusion with the token n-gram
    lm = train_ngram([[vocab.tokens[k] for k in u.targets] for u in train_set], cfg["lm_order"])
    lm.save(reports / "lm.arpa")
    token_lm = TokenLM(lm, [None, None, None] + list(vocab.tokens[3:]))
    fusion_rows = []
    out["fusion"] = {}
    for part in EVAL:
        utts = evals[part]
        g = ev.grids(model, utts, want=("global",))["global"]
        for w in (0.0, cfg["lm_weight"]):
            hyps = [prefix_beam_search(x, beam, token_lm if w > 0 else None, w)[0].tokens for x in g]
            er = ev.mixed_error_rate([u.targets for u in utts], hyps, vocab)
            fusion_rows.append([part, _f(w), _f(er.MER), _f(er.ER_A), _f(er.ER_B)])
            out["fusion"][f"{part}|{w}"] = er.MER
    _write_csv(reports / "fusion.csv", ["partition", "lm_weight", "MER", "ER_A", "ER_B"], fusion_rows)
    return out


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return None if math.isnan(x) else round(x, 10)
    if isinstance(x, np.integer):
        return int(x)
    return x


__all__ = ["run_experiment", "SYSTEMS", "DEFAULT_SYSTEMS", "train_system", "ensure_corpus",
           "LANG_A", "LANG_B"]
