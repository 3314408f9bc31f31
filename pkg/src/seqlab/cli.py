"""Command-line surface: make-data, train, finetune, generate, score, evaluate,
ablate, report.

Every command is deterministic given its flags and seeds. Exit codes: 0 on
success, 1 on user error, 2 on internal error. The metric-log directory
defaults next to the output file and can be overridden with SEQLAB_LOG_DIR.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from .corpus import Vocab, build_vocab, decode_ids, gen_synthetic, load_parallel, split_pairs, write_corpus
from .generate import GenerationConfig, build_offline_cache, load_cache, save_cache
from .metrics import corpus_bleu, rouge, sentence_bleu
from .trainer import (
    Checkpoint,
    MetricLog,
    TrainConfig,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train_sequence,
    train_token,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on user error, not argparse's 2
        raise UsageError(message)


def _log_dir(default: Path) -> Path:
    env = os.environ.get("SEQLAB_LOG_DIR", "")
    d = Path(env) if env else default
    d.mkdir(parents=True, exist_ok=True)
    return d


def _load_data(data_dir: str, max_len: int = 175):
    d = Path(data_dir)
    vocab = Vocab.load(d / "vocab.txt")
    pairs = load_parallel(d / "corpus.src", d / "corpus.tgt", vocab, max_len)
    if not pairs:
        raise UsageError(f"no usable pairs in {data_dir}")
    return pairs, vocab


def _split_from_config(pairs, cfg: TrainConfig):
    return split_pairs(pairs, cfg.valid_fraction, cfg.seed)


def _config_from_args(args) -> TrainConfig:
    cfg = TrainConfig.from_flat(Path(args.config).read_text()) if getattr(args, "config", None) else TrainConfig()
    for name in (
        "dim", "lr", "momentum", "max_tokens", "seed", "alpha", "beta",
        "token_epochs", "seq_epochs", "metric", "eval_beam_k",
    ):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    if getattr(args, "token_objective", None):
        cfg.token_objective = args.token_objective
    if getattr(args, "objective", None):
        cfg.objective = args.objective
    if getattr(args, "combine", None):
        cfg.combine = args.combine
    if getattr(args, "k", None):
        cfg.gen.k = args.k
    if getattr(args, "mode", None):
        cfg.gen.mode = args.mode
    if getattr(args, "max_len", None):
        cfg.gen.max_len = args.max_len
    if getattr(args, "offline", False):
        cfg.gen.online = False
    if getattr(args, "rescale_costs", False):
        cfg.rescale_costs = True
    if getattr(args, "bso_compat", False):
        # unnormalized beam (k=5) plus per-set cost rescaling
        cfg.rescale_costs = True
        cfg.gen.normalize = False
        cfg.gen.k = 5
        cfg.eval_normalize = False
        cfg.eval_beam_k = 5
    cfg.gen.seed = cfg.seed
    return cfg.validate()


# -- commands -------------------------------------------------------------


def cmd_make_data(args) -> int:
    if args.count <= 0:
        raise UsageError("empty corpus: --count must be positive")
    if args.vocab_size < 6:
        raise UsageError("--vocab-size must be at least 6")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    words = [f"w{i}" for i in range(args.vocab_size - 4)]
    vocab = Vocab(words)
    pairs = gen_synthetic(
        args.task, args.count, (args.len_min, args.len_max), vocab,
        seed=args.seed, p_sub=args.p_sub,
    )
    vocab.save(out / "vocab.txt")
    write_corpus(pairs, vocab, out / "corpus.src", out / "corpus.tgt")
    print(f"wrote {len(pairs)} pairs to {out} (task={args.task}, V={vocab.size})")
    return 0


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    pairs, vocab = _load_data(args.data, cfg.max_sentence_len)
    train_pairs, valid_pairs = _split_from_config(pairs, cfg)
    from .model import Model

    model = Model(vocab.size, cfg.dim, seed=cfg.seed, max_len=cfg.gen.max_len)
    ckpt, log = train_token(model, train_pairs, valid_pairs, cfg, vocab)
    out = Path(args.out)
    save_checkpoint(ckpt, out)
    log_path = _log_dir(out.parent) / (out.stem + ".log.csv")
    log.save(log_path)
    rep = evaluate(ckpt.model(), valid_pairs, cfg.eval_beam_k, cfg.eval_normalize, cfg.gen.max_len)
    print(f"token checkpoint {out} (best epoch {ckpt.epoch}); valid BLEU {rep.bleu:.4f}")
    print(f"log: {log_path}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _config_from_args(args)
    pairs, vocab = _load_data(args.data, cfg.max_sentence_len)
    init = load_checkpoint(args.init, vocab)
    baseline = load_checkpoint(args.baseline, vocab) if args.baseline else None
    train_pairs, valid_pairs = _split_from_config(pairs, cfg)
    ckpt, log, stats = train_sequence(init, train_pairs, valid_pairs, cfg, vocab, baseline=baseline)
    out = Path(args.out)
    save_checkpoint(ckpt, out)
    log_path = _log_dir(out.parent) / (out.stem + ".log.csv")
    log.save(log_path)
    rep = evaluate(ckpt.model(), valid_pairs, cfg.eval_beam_k, cfg.eval_normalize, cfg.gen.max_len)
    print(
        f"sequence checkpoint {out} (objective={cfg.objective}, combine={cfg.combine}); "
        f"valid BLEU {rep.bleu:.4f}; skipped {stats.skipped}/{stats.samples + stats.skipped}"
    )
    print(f"log: {log_path}")
    return 0


def cmd_generate(args) -> int:
    vocab = Vocab.load(args.vocab)
    ckpt = load_checkpoint(args.ckpt, vocab)
    model = ckpt.model(max_len=args.max_len)
    with open(args.src, encoding="utf-8") as f:
        lines = f.read().splitlines()
    gen = GenerationConfig(k=args.k, max_len=args.max_len, mode=args.mode, seed=args.seed)
    pairs = []
    for i, line in enumerate(lines):
        src = corpus_mod.encode_line(vocab, line)
        pairs.append(corpus_mod.SentencePair(src=src, tgt=src, idx=i))
    cache = build_offline_cache(model, pairs, gen)
    save_cache(cache, args.out)
    print(f"wrote candidate cache for {len(pairs)} sources to {args.out}")
    return 0


def cmd_score(args) -> int:
    with open(args.ref, encoding="utf-8") as f:
        refs = f.read().splitlines()
    with open(args.hyp, encoding="utf-8") as f:
        hyps = f.read().splitlines()
    if len(refs) != len(hyps):
        raise UsageError(f"misaligned files: ref has {len(refs)} lines, hyp has {len(hyps)}")
    per_line = []
    for i, (r, h) in enumerate(zip(refs, hyps), 1):
        if not r.split():
            raise UsageError(f"empty reference at line {i}")
        if args.metric in ("bleu", "bleu_sent"):
            s = sentence_bleu(r, h) if h.split() else 0.0
        elif args.metric in ("rouge1", "rouge2", "rougeL"):
            s = rouge(r, h, args.metric[-1])
        else:
            raise UsageError(f"unknown metric {args.metric!r}")
        per_line.append(s)
        print(f"{i}\t{s:.6f}")
    if args.metric == "bleu":
        agg = corpus_bleu(refs, hyps)
    else:
        agg = sum(per_line) / len(per_line)
    print(f"corpus\t{agg:.6f}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = TrainConfig()
    pairs, vocab = _load_data(args.data, cfg.max_sentence_len)
    ckpt = load_checkpoint(args.ckpt, vocab)
    cfg = ckpt.config
    train_pairs, valid_pairs = _split_from_config(pairs, cfg)
    subset = {"train": train_pairs, "valid": valid_pairs, "all": pairs}[args.split]
    if not subset:
        raise UsageError(f"empty {args.split} split")
    rep = evaluate(
        ckpt.model(),
        subset,
        args.beam_k,
        not args.unnormalized,
        ckpt.config.gen.max_len,
    )
    print("split,n,bleu,rouge1,rouge2,rougeL")
    print(f"{args.split},{rep.n},{rep.bleu:.6f},{rep.rouge1:.6f},{rep.rouge2:.6f},{rep.rougeL:.6f}")
    return 0


# -- ablation -------------------------------------------------------------


def _ablate_cells(args, base: TrainConfig) -> list[dict]:
    grid = [int(g) for g in args.grid.split(",")] if args.grid else [2, 5, 16]
    cells = []
    if args.axis == "candidates":
        for mode in ("beam", "sample"):
            for k in grid:
                cells.append(dict(cell=f"{mode}-k{k}", k=k, mode=mode))
    elif args.axis == "strategy":
        for mode in ("beam", "sample"):
            cells.append(dict(cell=mode, mode=mode))
    elif args.axis == "combo":
        for combine in ("weighted", "constrained", "random", "none"):
            cells.append(dict(cell=combine if combine != "none" else "risk-only", combine=combine))
        cells.append(dict(cell="tokls-only", token_only=True))
    elif args.axis == "init":
        for tok in ("toknll", "tokls"):
            cells.append(dict(cell=f"init-{tok}", init_objective=tok))
    elif args.axis == "online":
        cells.append(dict(cell="online", online=True))
        cells.append(dict(cell="offline", online=False))
    else:
        raise UsageError(f"unknown ablation axis {args.axis!r}")
    return cells


def _run_cell(cell, base_cfg: TrainConfig, pairs, vocab, init_ckpt: Checkpoint | None):
    import dataclasses as dc

    cfg = dc.replace(base_cfg, gen=dc.replace(base_cfg.gen))
    cfg.gen.k = cell.get("k", cfg.gen.k)
    cfg.gen.mode = cell.get("mode", cfg.gen.mode)
    cfg.gen.online = cell.get("online", cfg.gen.online)
    cfg.combine = cell.get("combine", cfg.combine)
    train_pairs, valid_pairs = split_pairs(pairs, cfg.valid_fraction, cfg.seed)
    started = time.time()
    if cell.get("init_objective"):
        tok_cfg = dc.replace(cfg, token_objective=cell["init_objective"], gen=dc.replace(cfg.gen))
        from .model import Model

        model = Model(vocab.size, tok_cfg.dim, seed=tok_cfg.seed, max_len=tok_cfg.gen.max_len)
        init, _ = train_token(model, train_pairs, valid_pairs, tok_cfg, vocab)
    elif init_ckpt is not None:
        init = init_ckpt
    else:
        raise ValueError("ablation cell needs an init checkpoint (--init)")
    base_rep = evaluate(init.model(), valid_pairs, cfg.eval_beam_k, cfg.eval_normalize, cfg.gen.max_len)
    if cell.get("token_only"):
        rep = base_rep
    else:
        ckpt, _, _ = train_sequence(init, train_pairs, valid_pairs, cfg, vocab)
        rep = evaluate(ckpt.model(), valid_pairs, cfg.eval_beam_k, cfg.eval_normalize, cfg.gen.max_len)
    return dict(
        bleu=rep.bleu, rouge1=rep.rouge1, rouge2=rep.rouge2, rougeL=rep.rougeL,
        init_bleu=base_rep.bleu, delta=rep.bleu - base_rep.bleu,
        seconds=time.time() - started,
    )


def cmd_ablate(args) -> int:
    base_cfg = _config_from_args(args)
    pairs, vocab = _load_data(args.data, base_cfg.max_sentence_len)
    init_ckpt = load_checkpoint(args.init, vocab) if args.init else None
    cells = _ablate_cells(args, base_cfg)
    rows = []
    results: dict[int, dict] = {}
    if args.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            futs = {
                i: ex.submit(_run_cell, cell, base_cfg, pairs, vocab, init_ckpt)
                for i, cell in enumerate(cells)
            }
            for i, fut in futs.items():
                try:
                    results[i] = fut.result()
                except Exception as e:  # cell failures mark the row, run continues
                    results[i] = dict(error=str(e))
    else:
        for i, cell in enumerate(cells):
            try:
                results[i] = _run_cell(cell, base_cfg, pairs, vocab, init_ckpt)
            except Exception as e:
                results[i] = dict(error=str(e))
    header = "axis,cell,k,mode,combine,online,status,bleu,init_bleu,delta,rouge1,rouge2,rougeL,seconds"
    lines = [header]
    for i, cell in enumerate(cells):
        r = results[i]
        k = cell.get("k", base_cfg.gen.k)
        mode = cell.get("mode", base_cfg.gen.mode)
        combine = cell.get("combine", "token" if cell.get("token_only") else base_cfg.combine)
        online = cell.get("online", base_cfg.gen.online)
        if "error" in r:
            lines.append(f"{args.axis},{cell['cell']},{k},{mode},{combine},{online},failed,,,,,,,")
        else:
            lines.append(
                f"{args.axis},{cell['cell']},{k},{mode},{combine},{online},ok,"
                f"{r['bleu']:.6f},{r['init_bleu']:.6f},{r['delta']:.6f},"
                f"{r['rouge1']:.6f},{r['rouge2']:.6f},{r['rougeL']:.6f},{r['seconds']:.1f}"
            )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    if args.axis == "candidates":
        # gnuplot-ready: candidate count, beam BLEU, sampling BLEU
        byk: dict[int, dict[str, float]] = {}
        for i, cell in enumerate(cells):
            if "error" in results[i]:
                continue
            byk.setdefault(cell["k"], {})[cell["mode"]] = results[i]["bleu"]
        dat = ["# k beam sample"]
        for k in sorted(byk):
            b = byk[k].get("beam", float("nan"))
            s = byk[k].get("sample", float("nan"))
            dat.append(f"{k} {b:.6f} {s:.6f}")
        dat_path = out.with_suffix(".dat")
        dat_path.write_text("\n".join(dat) + "\n")
        print(f"candidate-size data: {dat_path}")
        if args.svg:
            _plot_candidates(byk, out.with_suffix(".svg"))
    return 0


def _plot_candidates(byk, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ks = sorted(byk)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for mode in ("beam", "sample"):
        ys = [byk[k].get(mode) for k in ks]
        ax.plot(ks, ys, marker="o", label=mode)
    ax.set_xlabel("candidate set size")
    ax.set_ylabel("validation BLEU")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    print(f"plot: {path}")


def cmd_report(args) -> int:
    log_dir = Path(args.log_dir or os.environ.get("SEQLAB_LOG_DIR", "."))
    files = sorted(log_dir.glob("*.csv"))
    if not files:
        raise UsageError(f"no CSV logs under {log_dir}")
    lines = ["source," + "header"]
    out_rows = []
    for f in files:
        body = f.read_text().splitlines()
        if not body:
            continue
        header = body[0]
        for row in body[1:]:
            out_rows.append(f"{f.name},{row}")
        lines[0] = "source," + header
    report = "\n".join([lines[0]] + out_rows) + "\n"
    if args.out:
        Path(args.out).write_text(report)
        print(f"wrote report for {len(files)} logs to {args.out}")
    else:
        sys.stdout.write(report)
    return 0


# -- entry ----------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="seqlab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("make-data", help="generate a synthetic parallel corpus")
    d.add_argument("--task", choices=("copy", "noisy_copy", "reverse"), default="copy")
    d.add_argument("--count", type=int, required=True)
    d.add_argument("--vocab-size", type=int, default=30)
    d.add_argument("--seed", type=int, default=1)
    d.add_argument("--len-min", type=int, default=3)
    d.add_argument("--len-max", type=int, default=12)
    d.add_argument("--p-sub", type=float, default=0.1)
    d.add_argument("--out", required=True)
    d.set_defaults(fn=cmd_make_data)

    def common_train_flags(q):
        q.add_argument("--data", required=True)
        q.add_argument("--out", required=True)
        q.add_argument("--config")
        q.add_argument("--dim", type=int)
        q.add_argument("--lr", type=float)
        q.add_argument("--momentum", type=float)
        q.add_argument("--max-tokens", dest="max_tokens", type=int)
        q.add_argument("--seed", type=int)
        q.add_argument("--eval-beam-k", dest="eval_beam_k", type=int)

    t = sub.add_parser("train", help="token-level phase")
    common_train_flags(t)
    t.add_argument("--token-objective", choices=("toknll", "tokls"))
    t.add_argument("--token-epochs", dest="token_epochs", type=int)
    t.set_defaults(fn=cmd_train)

    ft = sub.add_parser("finetune", help="sequence-level phase from a token checkpoint")
    common_train_flags(ft)
    ft.add_argument("--init", required=True)
    ft.add_argument("--baseline", help="frozen baseline checkpoint for constrained mode")
    ft.add_argument("--objective", choices=("seqnll", "risk", "maxmargin", "multimargin", "softmaxmargin"))
    ft.add_argument("--combine", choices=("none", "weighted", "constrained", "random"))
    ft.add_argument("--token-objective", choices=("toknll", "tokls"))
    ft.add_argument("--seq-epochs", dest="seq_epochs", type=int)
    ft.add_argument("--alpha", type=float)
    ft.add_argument("--beta", type=float)
    ft.add_argument("--metric", choices=("bleu_sent", "rouge1", "rouge2", "rougeL"))
    ft.add_argument("--k", type=int)
    ft.add_argument("--mode", choices=("beam", "sample"))
    ft.add_argument("--max-len", dest="max_len", type=int)
    ft.add_argument("--offline", action="store_true")
    ft.add_argument("--rescale-costs", dest="rescale_costs", action="store_true")
    ft.add_argument("--bso-compat", dest="bso_compat", action="store_true",
                    help="unnormalized beam (k=5) + per-set cost rescaling")
    ft.set_defaults(fn=cmd_finetune)

    g = sub.add_parser("generate", help="emit an offline candidate cache")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--vocab", required=True)
    g.add_argument("--src", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--k", type=int, default=16)
    g.add_argument("--mode", choices=("beam", "sample"), default="beam")
    g.add_argument("--max-len", dest="max_len", type=int, default=200)
    g.add_argument("--seed", type=int, default=1)
    g.set_defaults(fn=cmd_generate)

    s = sub.add_parser("score", help="score hypothesis file against reference file")
    s.add_argument("--ref", required=True)
    s.add_argument("--hyp", required=True)
    s.add_argument("--metric", default="bleu",
                   choices=("bleu", "bleu_sent", "rouge1", "rouge2", "rougeL"))
    s.set_defaults(fn=cmd_score)

    e = sub.add_parser("evaluate", help="beam-decode a checkpoint and report metrics")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "valid", "all"), default="valid")
    e.add_argument("--beam-k", dest="beam_k", type=int, default=5)
    e.add_argument("--unnormalized", action="store_true")
    e.set_defaults(fn=cmd_evaluate)

    a = sub.add_parser("ablate", help="run an ablation grid, one CSV row per cell")
    a.add_argument("--data", required=True)
    a.add_argument("--axis", required=True,
                   choices=("candidates", "strategy", "combo", "init", "online"))
    a.add_argument("--grid", help="comma-separated candidate counts (candidates axis)")
    a.add_argument("--init", help="shared token checkpoint (required unless axis=init)")
    a.add_argument("--out", required=True)
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--svg", action="store_true")
    a.add_argument("--config")
    a.add_argument("--dim", type=int)
    a.add_argument("--lr", type=float)
    a.add_argument("--seed", type=int)
    a.add_argument("--max-tokens", dest="max_tokens", type=int)
    a.add_argument("--token-epochs", dest="token_epochs", type=int)
    a.add_argument("--seq-epochs", dest="seq_epochs", type=int)
    a.add_argument("--objective", choices=("seqnll", "risk", "maxmargin", "multimargin", "softmaxmargin"))
    a.add_argument("--combine", choices=("none", "weighted", "constrained", "random"))
    a.add_argument("--k", type=int)
    a.add_argument("--mode", choices=("beam", "sample"))
    a.set_defaults(fn=cmd_ablate)

    r = sub.add_parser("report", help="merge metric logs into one CSV")
    r.add_argument("--log-dir", dest="log_dir")
    r.add_argument("--out")
    r.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # internal error
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
