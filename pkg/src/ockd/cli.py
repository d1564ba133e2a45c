"""Command-line driver: ``ockd <verb> [--config PATH] [--out DIR] ...``.

Verbs: gen-data, train-teacher, distill, score, eval, ablate, plot-det, and
pipeline (gen-data through eval in one go). Everything a verb reads or
writes lives under ``--out`` (default ``./run``)::

    corpus/wav/*.wav, corpus/protocols/*.txt, corpus/manifest.json
    teacher.ckpt, teacher.log
    student.ckpt, student.log
    scores/<split>[.trim].<teacher|ockd>.txt
    eval.txt, eval.csv
    ablation/*.ckpt, ablation.txt, ablation.csv
    det/<name>.csv, det/<name>.svg

Exit codes: 0 ok, 2 usage or config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt_io
from .checkpoint import Checkpoint, CheckpointError
from .config import load_config
from .corpus import (
    BONAFIDE,
    SPLITS,
    CorpusError,
    atomic_write,
    build_corpus,
    load_split,
    parse_protocol,
    protocol_path,
    read_protocol,
    read_wav,
    trim_nonspeech,
    write_corpus,
)
from .distill import (
    DegenerateEmbeddingError,
    DistillConfig,
    NumericError,
    OneClassViolation,
    check_bonafide_only,
    distill_student,
    init_student,
    train_teacher,
)
from .estimators import logit_score
from .metrics import (
    ScoreFileError,
    ScoreRecord,
    compute_eer,
    det_points,
    format_scores,
    pooled_eer,
    read_scores,
    stack_similarity,
)
from .models import ConfigError, Encoder, layer_map

log = logging.getLogger("ockd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SYSTEMS = ("teacher", "ockd")
ABLATION_ROWS = ("student_mse", "student_cos", "student_total")
# pooled EER (%) of the three objectives for a 24-to-8 layer system trained on
# large-scale anti-spoofing data; the expected direction at any scale
REFERENCE_POOLED = {"student_mse": 18.46, "student_cos": 5.96, "student_total": 5.88}


class DataError(Exception):
    """Missing or inconsistent input files."""


@dataclass(frozen=True)
class Paths:
    out: Path

    @property
    def corpus(self):
        return self.out / "corpus"

    @property
    def manifest(self):
        return self.corpus / "manifest.json"

    @property
    def teacher(self):
        return self.out / "teacher.ckpt"

    @property
    def student(self):
        return self.out / "student.ckpt"

    def scores(self, split, system, trimmed=False):
        tag = ".trim" if trimmed else ""
        return self.out / "scores" / f"{split}{tag}.{system}.txt"


# -- shared helpers ----------------------------------------------------------

def _manifest(cfg):
    return {"seed": cfg.seed, "counts": asdict(cfg.corpus)}


def _check_corpus(cfg, paths):
    if not paths.manifest.exists():
        raise DataError(f"no corpus under {paths.corpus}; run gen-data first")
    found = json.loads(paths.manifest.read_text(encoding="utf-8"))
    if found != _manifest(cfg):
        raise ConfigError(
            f"corpus at {paths.corpus} was generated with {found}, "
            f"but the config asks for {_manifest(cfg)}"
        )


def _load_split(cfg, paths, split):
    _check_corpus(cfg, paths)
    if not protocol_path(paths.corpus, split).exists():
        raise DataError(f"missing protocol {protocol_path(paths.corpus, split)}")
    return load_split(paths.corpus, split)


def _load_checkpoint(path, kind):
    ck = ckpt_io.load(path)
    if ck.kind != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {ck.kind}")
    return ck


def _write_log(path, history):
    atomic_write(path, "epoch\tloss\twallclock_ms\n" + history.to_text())


def _student_list(cfg, paths):
    """Utterances the student trains on, refusing any spoof entry."""
    if cfg.student.train_list:
        source = Path(cfg.student.train_list)
        try:
            entries = parse_protocol(source.read_text(encoding="utf-8"), str(source))
        except FileNotFoundError:
            raise DataError(f"student train list not found: {source}") from None
    else:
        source = protocol_path(paths.corpus, "train")
        entries = [e for e in read_protocol(source) if e.label == BONAFIDE]
    labels = [1 if e.label == BONAFIDE else 0 for e in entries]
    check_bonafide_only(labels, [e.utt_id for e in entries])
    waves = []
    for e in entries:
        wav = paths.corpus / "wav" / f"{e.utt_id}.wav"
        if not wav.exists():
            raise DataError(f"{source}: no audio for {e.utt_id} ({wav})")
        waves.append(read_wav(wav))
    return waves, entries


def _distill_one(cfg, teacher, waves, objective, lam, callback=None):
    s = cfg.student
    lmap = layer_map(teacher.config.num_layers, s.num_layers)
    student = init_student(teacher, teacher.config.student(s.num_layers),
                           seed=cfg.seed + 1, copy=s.init)
    dc = DistillConfig(lam=lam, layer_map=lmap, objective=objective,
                       settings=s.settings(cfg.seed))
    history = distill_student(waves, teacher, student, dc, callback=callback)
    return student, history


def _maybe_trim(utt, cfg, trimmed):
    return trim_nonspeech(utt, cfg.eval.trim_threshold_db) if trimmed else utt


def _teacher_stacks(teacher, utts, cfg, trimmed):
    out = []
    with ad.no_grad():
        for u in utts:
            x = _maybe_trim(u, cfg, trimmed).samples[None, :]
            out.append(teacher(x).numpy())
    return out


def _similarity_records(student, lmap, utts, t_stacks, cfg, trimmed):
    records = []
    with ad.no_grad():
        for u, st in zip(utts, t_stacks):
            x = _maybe_trim(u, cfg, trimmed).samples[None, :]
            ss = student(x).numpy()
            score = float(stack_similarity(st, ss, lmap, [u.utt_id])[0])
            records.append(ScoreRecord(u.utt_id, u.label, score))
    return records


def _check_finite_scores(records, what):
    for r in records:
        if not np.isfinite(r.score):
            raise NumericError(f"{what}: non-finite score for {r.utt_id}")


def _pct(x):
    return f"{100 * x:.2f}%"


def _table(header, rows):
    cells = [header] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = []
    for r in cells:
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                               for i, (c, w) in enumerate(zip(r, widths))))
    return "\n".join(lines) + "\n"


def _csv(header, rows):
    return "".join(",".join(str(c) for c in r) + "\n" for r in [header] + rows)


# -- verbs -------------------------------------------------------------------

def cmd_gen_data(cfg, paths, args):
    if paths.corpus.exists() and any(paths.corpus.iterdir()) and not args.force:
        raise DataError(f"{paths.corpus} is not empty; pass --force to overwrite")
    t0 = time.perf_counter()
    corpus = build_corpus(cfg.corpus.corpus_config(), seed=cfg.seed)
    write_corpus(corpus, paths.corpus)
    atomic_write(paths.manifest, json.dumps(_manifest(cfg), sort_keys=True, indent=2) + "\n")
    for split in SPLITS:
        utts = corpus.splits[split]
        n_bona = sum(u.label == BONAFIDE for u in utts)
        families = sorted({u.attack_id for u in utts} - {"-"})
        print(f"{split:12s} {len(utts):5d} utterances  bonafide={n_bona}  "
              f"spoof={len(utts) - n_bona}  attacks={','.join(families)}")
    print(f"wrote {len(corpus)} utterances to {paths.corpus} "
          f"in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK


def cmd_train_teacher(cfg, paths, args):
    utts = _load_split(cfg, paths, "train")
    t = cfg.teacher
    model = Encoder(t.encoder_config(), seed=cfg.seed)
    labels = np.array([u.label == BONAFIDE for u in utts], dtype=int)
    t0 = time.perf_counter()
    history = train_teacher([u.samples for u in utts], labels, model,
                            t.settings(cfg.seed), class_weight=t.class_weight)
    meta = {"seed": cfg.seed, "teacher": asdict(t), "final_loss": history.losses[-1]}
    ckpt_io.save(Checkpoint.from_encoder("teacher", model, meta), paths.teacher)
    _write_log(paths.out / "teacher.log", history)
    print(f"teacher: {t.num_layers} layers, {t.epochs} epochs, final loss "
          f"{history.losses[-1]:.5f}, {time.perf_counter() - t0:.1f}s -> {paths.teacher}")
    return EXIT_OK


def _load_teacher(cfg, paths):
    ck = _load_checkpoint(paths.teacher, "teacher")
    if ck.config != cfg.teacher.encoder_config():
        raise ConfigError(
            f"{paths.teacher} has config {ck.config}, but the run config asks for "
            f"{cfg.teacher.encoder_config()}"
        )
    return ck.to_encoder()


def cmd_distill(cfg, paths, args):
    # the student list is checked before anything is trained
    waves, entries = _student_list(cfg, paths)
    _check_corpus(cfg, paths)
    before = ckpt_io.file_digest(paths.teacher) if paths.teacher.exists() else None
    teacher = _load_teacher(cfg, paths)
    s = cfg.student
    t0 = time.perf_counter()
    student, history = _distill_one(cfg, teacher, waves, s.objective, s.lam)
    after = ckpt_io.file_digest(paths.teacher)
    if before != after:
        raise DataError(f"{paths.teacher} changed while distilling")
    meta = {"seed": cfg.seed, "student": asdict(s), "teacher_digest": after,
            "num_train": len(entries), "final_loss": history.losses[-1]}
    ckpt_io.save(Checkpoint.from_encoder("student", student, meta), paths.student)
    _write_log(paths.out / "student.log", history)
    print(f"student: {s.num_layers} layers, objective={s.objective}, lambda={s.lam:g}, "
          f"{len(entries)} bonafide utterances, final loss {history.losses[-1]:.6f}, "
          f"{time.perf_counter() - t0:.1f}s -> {paths.student}")
    print(f"teacher digest unchanged: {after}")
    return EXIT_OK


def cmd_score(cfg, paths, args):
    teacher = _load_teacher(cfg, paths)
    student = _load_checkpoint(paths.student, "student").to_encoder()
    if not teacher.config.compatible_with(student.config):
        raise ConfigError("teacher and student checkpoints do not share frontend/d_model")
    lmap = layer_map(teacher.config.num_layers, student.config.num_layers)
    variants = (False, True) if cfg.eval.trim else (False,)
    for split in cfg.eval.splits:
        utts = _load_split(cfg, paths, split)
        for trimmed in variants:
            t0 = time.perf_counter()
            stacks = _teacher_stacks(teacher, utts, cfg, trimmed)
            teacher_recs = [ScoreRecord(u.utt_id, u.label, float(logit_score(st)[0]))
                            for u, st in zip(utts, stacks)]
            ockd_recs = _similarity_records(student, lmap, utts, stacks, cfg, trimmed)
            for system, recs in (("teacher", teacher_recs), ("ockd", ockd_recs)):
                _check_finite_scores(recs, system)
                atomic_write(paths.scores(split, system, trimmed), format_scores(recs))
            print(f"scored {split}{' (trimmed)' if trimmed else ''}: {len(utts)} utterances, "
                  f"{time.perf_counter() - t0:.1f}s")
    return EXIT_OK


def cmd_eval(cfg, paths, args):
    variants = (False, True) if cfg.eval.trim else (False,)
    columns = [(system, trimmed) for trimmed in variants for system in SYSTEMS]
    per_split = {}
    for split in cfg.eval.splits:
        per_split[split] = {c: read_scores(paths.scores(split, *c)) for c in columns}
    header = ["split", "num_bonafide", "num_spoof"] + [
        f"{system}_eer{'_trim' if trimmed else ''}" for system, trimmed in columns
    ]
    text_rows, csv_rows = [], []
    names = list(cfg.eval.splits) + ["pooled"]
    for name in names:
        if name == "pooled":
            results = [pooled_eer([per_split[s][c] for s in cfg.eval.splits]) for c in columns]
        else:
            results = [compute_eer(per_split[name][c]) for c in columns]
        first = results[0]
        text_rows.append([name, first.num_bonafide, first.num_spoof]
                         + [_pct(r.eer) for r in results])
        csv_rows.append([name, first.num_bonafide, first.num_spoof]
                        + [f"{100 * r.eer:.4f}" for r in results])
    text = _table(header, text_rows)
    atomic_write(paths.out / "eval.txt", text)
    atomic_write(paths.out / "eval.csv", _csv(header, csv_rows))
    print("EER (%), lower is better")
    print(text, end="")
    return EXIT_OK


def cmd_ablate(cfg, paths, args):
    teacher = _load_teacher(cfg, paths)
    before = ckpt_io.file_digest(paths.teacher)
    waves, _ = _student_list(cfg, paths)
    lmap = layer_map(teacher.config.num_layers, cfg.student.num_layers)
    evals = {}
    for split in cfg.eval.splits:
        utts = _load_split(cfg, paths, split)
        evals[split] = (utts, _teacher_stacks(teacher, utts, cfg, False))
    variants = {
        "student_mse": ("mse", cfg.student.lam),
        "student_cos": ("total", 0.0),
        "student_total": ("total", cfg.student.lam),
    }
    header = ["model"] + list(cfg.eval.splits) + ["pooled", "teacher_digest"]
    rows, pooled = [], {}
    out_dir = paths.out / "ablation"
    for name in ABLATION_ROWS:
        objective, lam = variants[name]
        t0 = time.perf_counter()
        student, history = _distill_one(cfg, teacher, waves, objective, lam)
        digest = ckpt_io.file_digest(paths.teacher)
        meta = {"seed": cfg.seed, "objective": objective, "lambda": lam, "teacher_digest": digest}
        ckpt_io.save(Checkpoint.from_encoder("student", student, meta), out_dir / f"{name}.ckpt")
        _write_log(out_dir / f"{name}.log", history)
        sets = [_similarity_records(student, lmap, u, st, cfg, False) for u, st in evals.values()]
        for recs in sets:
            _check_finite_scores(recs, name)
        eers = [compute_eer(r).eer for r in sets]
        pooled[name] = pooled_eer(sets).eer
        rows.append((name, eers, pooled[name], digest))
        log.info("%s trained and scored in %.1fs", name, time.perf_counter() - t0)
    if len({r[3] for r in rows} | {before}) != 1:
        raise DataError("teacher checkpoint changed during the ablation")
    text = _table(header, [[n] + [_pct(e) for e in eers] + [_pct(p), d[:16]]
                           for n, eers, p, d in rows])
    csv_text = _csv(header, [[n] + [f"{100 * e:.4f}" for e in eers] + [f"{100 * p:.4f}", d]
                             for n, eers, p, d in rows])
    ref = " / ".join(f"{REFERENCE_POOLED[n]:.2f}" for n in ABLATION_ROWS)
    notes = [f"reference pooled EER at full scale (mse / cos / total): {ref}; "
             "mse-only is expected to be worst"]
    if pooled["student_mse"] < pooled["student_total"]:
        notes.append("FLAG: student_mse outperforms student_total on pooled EER at this scale")
    text += "\n".join(notes) + "\n"
    atomic_write(paths.out / "ablation.txt", text)
    atomic_write(paths.out / "ablation.csv", csv_text)
    print("EER (%), lower is better")
    print(text, end="")
    return EXIT_OK


def _det_svg(points, title):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    far = [p[0] for p in points]
    frr = [p[1] for p in points]
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.step(far, frr, where="post", color="black", linewidth=1.2)
    ax.plot([0, 1], [0, 1], color="grey", linewidth=0.6, linestyle=":")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("false acceptance rate")
    ax.set_ylabel("false rejection rate")
    ax.set_title(title)
    buf = io.BytesIO()
    # fixed salt and no date keep the SVG byte-stable across runs
    with matplotlib.rc_context({"svg.hashsalt": "ockd", "svg.fonttype": "none"}):
        fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    return buf.getvalue()


def cmd_plot_det(cfg, paths, args):
    src = Path(args.score_file)
    records = read_scores(src)
    points = det_points(records)
    lines = ["far,frr,threshold"] + [f"{far:.8f},{frr:.8f},{thr:.6f}"
                                     if np.isfinite(thr) else f"{far:.8f},{frr:.8f},inf"
                                     for far, frr, thr in points]
    stem = src.name[:-4] if src.name.endswith(".txt") else src.name
    csv_path = paths.out / "det" / f"{stem}.csv"
    svg_path = paths.out / "det" / f"{stem}.svg"
    atomic_write(csv_path, "\n".join(lines) + "\n")
    eer = compute_eer(records)
    atomic_write(svg_path, _det_svg(points, f"{stem}  EER {_pct(eer.eer)}"))
    print(f"{len(points)} DET points -> {csv_path}, {svg_path}")
    return EXIT_OK


def cmd_pipeline(cfg, paths, args):
    for step in (cmd_gen_data, cmd_train_teacher, cmd_distill, cmd_score, cmd_eval):
        code = step(cfg, paths, args)
        if code != EXIT_OK:
            return code
    return EXIT_OK


VERBS = {
    "gen-data": (cmd_gen_data, "generate the synthetic corpus and protocol files"),
    "train-teacher": (cmd_train_teacher, "train the binary teacher on the train split"),
    "distill": (cmd_distill, "distill the bonafide-only student from the frozen teacher"),
    "score": (cmd_score, "write teacher-logit and OCKD similarity score files"),
    "eval": (cmd_eval, "per-split and pooled EER table from the score files"),
    "ablate": (cmd_ablate, "train and compare the mse / cos / total students"),
    "plot-det": (cmd_plot_det, "DET staircase of one score file as CSV and SVG"),
    "pipeline": (cmd_pipeline, "gen-data, train-teacher, distill, score, eval"),
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run config (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override [run] seed")
    common.add_argument("--out", default="run", help="run directory (default: ./run)")
    common.add_argument("--force", action="store_true", help="overwrite an existing corpus")
    common.add_argument("--trim", action="store_true",
                        help="also score and evaluate with non-speech trimmed")
    common.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    parser = argparse.ArgumentParser(
        prog="ockd", description="One-class knowledge distillation for spoofed-speech detection."
    )
    sub = parser.add_subparsers(dest="verb", required=True, metavar="VERB")
    for name, (_, help_text) in VERBS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name == "plot-det":
            p.add_argument("score_file", help="score file (<utt_id> <label> <score>)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
    )
    try:
        cfg = load_config(args.config).with_overrides(seed=args.seed, trim=args.trim)
        return VERBS[args.verb][0](cfg, Paths(Path(args.out)), args)
    except ConfigError as exc:
        print(f"ockd: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, DegenerateEmbeddingError, FloatingPointError) as exc:
        print(f"ockd: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CorpusError, CheckpointError, ScoreFileError, OneClassViolation,
            FileNotFoundError, ValueError) as exc:
        print(f"ockd: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
