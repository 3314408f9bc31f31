"""Two-phase training: token-level pretraining then sequence-level fine-tuning.

Optimization follows the cited protocol: Nesterov momentum SGD (lr 0.25,
momentum 0.99 by default), per-batch gradients normalized by the number of
non-padding target-side tokens that entered the loss, then renormalized to a
global norm cap of 0.1 on excess. After the main token epochs the learning
rate anneals by a factor of 10 per epoch until it falls below 1e-4.

Metric log CSV columns:
    epoch,phase,split,objective,loss,bleu,rouge1,rouge2,rougeL,lr,skipped
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field

import numpy as np

from . import objectives as obj
from .corpus import SentencePair, Vocab, batch_by_tokens
from .generate import (
    GenerationConfig,
    beam_search,
    build_offline_cache,
    candidate_provider,
    strip_eos,
)
from .metrics import corpus_bleu, rescale_set_costs, rouge
from .model import Model, global_norm, grads_add_, grads_scale_, zero_grads

CSV_HEADER = "epoch,phase,split,objective,loss,bleu,rouge1,rouge2,rougeL,lr,skipped"


@dataclass
class TrainConfig:
    dim: int = 64
    lr: float = 0.25
    momentum: float = 0.99
    max_grad_norm: float = 0.1
    anneal_factor: float = 10.0
    min_lr: float = 1e-4
    anneal: bool = True
    max_tokens: int = 500
    token_epochs: int = 20
    seq_epochs: int = 10
    objective: str = "risk"  # sequence-phase objective
    token_objective: str = "tokls"  # token phase and the token side of combos
    combine: str = "weighted"
    alpha: float = 0.3
    beta: float = 1.0
    label_smoothing: float = 0.1
    metric: str = "bleu_sent"
    rescale_costs: bool = False
    valid_fraction: float = 0.1
    seed: int = 1
    eval_every: int = 1  # valid BLEU/ROUGE interval in epochs (0 = end only)
    eval_beam_k: int = 5
    eval_normalize: bool = True
    max_sentence_len: int = 175
    skip_abort_fraction: float = 0.01
    gen: GenerationConfig = field(default_factory=GenerationConfig)

    def validate(self) -> "TrainConfig":
        if self.lr <= 0 or self.max_grad_norm <= 0:
            raise ValueError("lr and max_grad_norm must be positive")
        if self.token_objective not in obj.TOKEN_OBJECTIVES:
            raise ValueError(f"unknown token objective {self.token_objective!r}")
        if self.objective not in obj.SEQUENCE_OBJECTIVES + obj.TOKEN_OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.combine not in obj.COMBINE_MODES:
            raise ValueError(f"unknown combine mode {self.combine!r}")
        self.gen.validate()
        return self

    def to_flat(self) -> str:
        """Flat key=value text; nested generation keys carry a gen. prefix."""
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "gen":
                for gf in dataclasses.fields(GenerationConfig):
                    lines.append(f"gen.{gf.name}={_fmt(getattr(v, gf.name))}")
            else:
                lines.append(f"{f.name}={_fmt(v)}")
        return "\n".join(sorted(lines)) + "\n"

    @classmethod
    def from_flat(cls, text: str) -> "TrainConfig":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"bad config line {line!r}")
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
        cfg = cls()
        for f in dataclasses.fields(cls):
            if f.name == "gen":
                continue
            if f.name in kv:
                setattr(cfg, f.name, _parse(kv.pop(f.name), getattr(cfg, f.name)))
        gen = GenerationConfig()
        for gf in dataclasses.fields(GenerationConfig):
            key = f"gen.{gf.name}"
            if key in kv:
                setattr(gen, gf.name, _parse(kv.pop(key), getattr(gen, gf.name)))
        if kv:
            raise ValueError(f"unknown config keys: {sorted(kv)}")
        cfg.gen = gen
        return cfg


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(s: str, default):
    if isinstance(default, bool):
        if s.lower() in ("true", "1", "yes"):
            return True
        if s.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"bad boolean {s!r}")
    if isinstance(default, int):
        return int(s)
    if isinstance(default, float):
        return float(s)
    return s


class MetricLog:
    """Accumulates training rows and renders the deterministic CSV."""

    def __init__(self):
        self.rows: list[dict] = []

    def add(self, epoch, phase, split, objective, loss=None, bleu=None,
            rouge1=None, rouge2=None, rougeL=None, lr=None, skipped=0):
        self.rows.append(
            dict(epoch=epoch, phase=phase, split=split, objective=objective,
                 loss=loss, bleu=bleu, rouge1=rouge1, rouge2=rouge2,
                 rougeL=rougeL, lr=lr, skipped=skipped)
        )

    def to_csv(self) -> str:
        out = [CSV_HEADER]
        for r in self.rows:
            cells = [str(r["epoch"]), r["phase"], r["split"], r["objective"]]
            for key in ("loss", "bleu", "rouge1", "rouge2", "rougeL", "lr"):
                v = r[key]
                cells.append("" if v is None else repr(float(v)))
            cells.append(str(r["skipped"]))
            out.append(",".join(cells))
        return "\n".join(out) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_csv())


# -- optimizer ----------------------------------------------------------------


def renorm_grads(grads: dict, max_norm: float) -> tuple[dict, float]:
    """Scale gradients down to max_norm when the global L2 norm exceeds it."""
    norm = global_norm(grads)
    if not np.isfinite(norm):
        raise ValueError("non-finite gradient norm; step aborted")
    if norm > max_norm:
        grads_scale_(grads, max_norm / norm)
    return grads, norm


class NesterovSGD:
    """v <- mu v - lr g;  p <- p + mu v - lr g."""

    def __init__(self, params: dict, lr: float, momentum: float):
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        mu, lr = self.momentum, self.lr
        for k in params:
            v = self.velocity[k]
            v *= mu
            v -= lr * grads[k]
            params[k] += mu * v - lr * grads[k]


def anneal(lr: float, factor: float = 10.0) -> float:
    return lr / factor


# -- checkpoints ----------------------------------------------------------------

_MAGIC = b"SQLB"
_VERSION = 1


@dataclass
class Checkpoint:
    params: dict
    config: TrainConfig
    epoch: int
    history: list[tuple[int, str, str, float]]  # (epoch, split, name, value)
    vocab_digest: bytes
    velocity: dict | None = None
    lr: float | None = None

    def model(self, max_len: int | None = None) -> Model:
        V, d = self.params["src_emb"].shape
        return Model(
            V, d,
            max_len=max_len if max_len is not None else self.config.gen.max_len,
            params={k: v.copy() for k, v in self.params.items()},
        )


def _write_block(f, data: bytes) -> None:
    f.write(struct.pack("<I", len(data)))
    f.write(data)


def _read_block(f) -> bytes:
    (n,) = struct.unpack("<I", f.read(4))
    return f.read(n)


def _write_tensor(f, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    f.write(struct.pack("<H", len(nb)))
    f.write(nb)
    arr = np.asarray(arr, dtype=np.float64)
    f.write(struct.pack("<B", arr.ndim))
    for s in arr.shape:
        f.write(struct.pack("<q", s))
    f.write(arr.astype("<f8").tobytes())


def _read_tensor(f) -> tuple[str, np.ndarray]:
    (nlen,) = struct.unpack("<H", f.read(2))
    name = f.read(nlen).decode("utf-8")
    (ndim,) = struct.unpack("<B", f.read(1))
    shape = tuple(struct.unpack("<q", f.read(8))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(f.read(count * 8), dtype="<f8").reshape(shape).astype(np.float64)
    return name, arr


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(ckpt.vocab_digest)
        _write_block(f, ckpt.config.to_flat().encode("utf-8"))
        f.write(struct.pack("<q", ckpt.epoch))
        hist = "\n".join(f"{e},{s},{n},{v!r}" for e, s, n, v in ckpt.history)
        _write_block(f, hist.encode("utf-8"))
        tensors = list(ckpt.params.items())
        if ckpt.velocity is not None:
            tensors += [(f"opt.v.{k}", v) for k, v in ckpt.velocity.items()]
        if ckpt.lr is not None:
            tensors.append(("opt.lr", np.array(ckpt.lr)))
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            _write_tensor(f, name, arr)


def load_checkpoint(path, vocab: Vocab | None = None) -> Checkpoint:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError("not a seqlab checkpoint")
        (version,) = struct.unpack("<I", f.read(4))
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        digest = f.read(32)
        config = TrainConfig.from_flat(_read_block(f).decode("utf-8"))
        (epoch,) = struct.unpack("<q", f.read(8))
        history = []
        hist_text = _read_block(f).decode("utf-8")
        for line in hist_text.splitlines():
            e, s, n, v = line.split(",", 3)
            history.append((int(e), s, n, float(v)))
        (count,) = struct.unpack("<I", f.read(4))
        params, velocity, lr = {}, {}, None
        for _ in range(count):
            name, arr = _read_tensor(f)
            if name == "opt.lr":
                lr = float(arr)
            elif name.startswith("opt.v."):
                velocity[name[6:]] = arr
            else:
                params[name] = arr
    if vocab is not None:
        if digest != vocab.digest():
            raise ValueError("vocab hash mismatch")
        if params["src_emb"].shape[0] != vocab.size:
            raise ValueError("embedding shape inconsistent with vocabulary")
    d = params["src_emb"].shape[1]
    for k, v in params.items():
        if k.endswith("_w_hh") and v.shape != (d, 3 * d):
            raise ValueError(f"bad shape for {k}: {v.shape}")
    return Checkpoint(
        params=params,
        config=config,
        epoch=epoch,
        history=history,
        vocab_digest=digest,
        velocity=velocity or None,
        lr=lr,
    )


# -- evaluation ----------------------------------------------------------------


@dataclass
class EvalReport:
    bleu: float
    rouge1: float
    rouge2: float
    rougeL: float
    n: int
    hyps: list[tuple[int, ...]] = field(default_factory=list, repr=False)


def evaluate(
    model: Model,
    pairs: list[SentencePair],
    beam_k: int = 5,
    normalize: bool = True,
    max_len: int = 200,
) -> EvalReport:
    """Beam-decode every pair and report corpus BLEU plus mean ROUGE F1."""
    if not pairs:
        raise ValueError("empty eval set")
    refs, hyps = [], []
    r1 = r2 = rl = 0.0
    for p in pairs:
        best = beam_search(model, p.src, beam_k, max_len, normalize)[0]
        hyp = strip_eos(best.tokens)
        ref = strip_eos(p.tgt)
        refs.append(ref)
        hyps.append(hyp)
        r1 += rouge(ref, hyp, "1")
        r2 += rouge(ref, hyp, "2")
        rl += rouge(ref, hyp, "L")
    n = len(pairs)
    return EvalReport(
        bleu=corpus_bleu(refs, hyps),
        rouge1=r1 / n,
        rouge2=r2 / n,
        rougeL=rl / n,
        n=n,
        hyps=hyps,
    )


# -- token phase ----------------------------------------------------------------


def _token_loss_on_pair(model: Model, pair: SentencePair, config: TrainConfig, want_grads: bool):
    fwd = model.forward(pair.src, [pair.tgt])
    res = obj.token_loss(config.token_objective, fwd.logits_for(0), pair.tgt, config.label_smoothing)
    if not want_grads:
        return res.value, None
    return res.value, model.backward(fwd, [res.d_logits])


def _valid_token_loss(model: Model, pairs: list[SentencePair], config: TrainConfig) -> float:
    total, tokens = 0.0, 0
    for p in pairs:
        total += _token_loss_on_pair(model, p, config, False)[0]
        tokens += len(p.tgt)
    return total / max(1, tokens)


def train_token(
    model: Model,
    train_pairs: list[SentencePair],
    valid_pairs: list[SentencePair],
    config: TrainConfig,
    vocab: Vocab,
    log: MetricLog | None = None,
) -> tuple[Checkpoint, MetricLog]:
    """Token-level phase: minimize TokNLL/TokLS, anneal, keep best-valid params."""
    config.validate()
    log = log if log is not None else MetricLog()
    opt = NesterovSGD(model.params, config.lr, config.momentum)
    history: list[tuple[int, str, str, float]] = []
    best_loss, best_params, best_epoch = np.inf, {k: v.copy() for k, v in model.params.items()}, -1
    lr = config.lr
    epoch = 0
    diverged = False
    while True:
        if epoch >= config.token_epochs:
            if not config.anneal:
                break
            lr = anneal(lr, config.anneal_factor)
            if lr < config.min_lr:
                break
        opt.lr = lr
        rng = np.random.default_rng([config.seed, 7, epoch])
        total_loss, total_tokens = 0.0, 0
        for batch in batch_by_tokens(train_pairs, config.max_tokens, rng):
            grads = zero_grads(model.params)
            batch_loss = 0.0
            for pair in batch.pairs:
                value, g = _token_loss_on_pair(model, pair, config, True)
                batch_loss += value
                grads_add_(grads, g)
            if not np.isfinite(batch_loss):
                diverged = True
                break
            grads_scale_(grads, 1.0 / batch.token_count)
            renorm_grads(grads, config.max_grad_norm)
            opt.step(model.params, grads)
            total_loss += batch_loss
            total_tokens += batch.token_count
        if diverged:
            break
        train_loss = total_loss / max(1, total_tokens)
        valid_loss = _valid_token_loss(model, valid_pairs, config) if valid_pairs else np.nan
        phase = "token" if epoch < config.token_epochs else "anneal"
        log.add(epoch, phase, "train", config.token_objective, loss=train_loss, lr=lr)
        if valid_pairs:
            log.add(epoch, phase, "valid", config.token_objective, loss=valid_loss, lr=lr)
            history.append((epoch, "valid", "token_loss", float(valid_loss)))
            if valid_loss < best_loss:
                best_loss = valid_loss
                best_params = {k: v.copy() for k, v in model.params.items()}
                best_epoch = epoch
        else:
            best_params = {k: v.copy() for k, v in model.params.items()}
            best_epoch = epoch
        epoch += 1
    model.params = best_params
    return (
        Checkpoint(
            params={k: v.copy() for k, v in best_params.items()},
            config=config,
            epoch=best_epoch,
            history=history,
            vocab_digest=vocab.digest(),
            velocity={k: v.copy() for k, v in opt.velocity.items()},
            lr=lr,
        ),
        log,
    )


# -- sequence phase ----------------------------------------------------------------


@dataclass
class SequenceStats:
    skipped: int = 0
    samples: int = 0
    branch_records: list[tuple[float, float, str]] = field(default_factory=list)


def _sequence_sample_update(
    model: Model,
    pair: SentencePair,
    config: TrainConfig,
    cache,
    baseline: Model | None,
    rng: np.random.Generator,
    grads: dict,
    stats: SequenceStats,
) -> tuple[float, int]:
    """Gradient contribution of one sample; returns (loss value, token count)."""
    cset, fwd = candidate_provider(
        config.gen, model, pair.src, pair.tgt,
        cache=cache, src_id=pair.idx, metric=config.metric, want_forward=True,
    )
    if config.rescale_costs:
        cset = rescale_set_costs(cset)
    tokens = int(fwd.lens.sum())

    combine = config.combine
    if combine == "random":
        combine = "token-only" if rng.random() < 0.5 else "none"

    want_token = combine in ("weighted", "constrained", "token-only")
    tok_res, fwd_ref = None, None
    if want_token:
        fwd_ref = model.forward(pair.src, [pair.tgt])
        tok_res = obj.token_loss(
            config.token_objective, fwd_ref.logits_for(0), pair.tgt, config.label_smoothing
        )
        tokens += len(pair.tgt)

    if combine == "token-only":
        grads_add_(grads, model.backward(fwd_ref, [tok_res.d_logits]))
        return tok_res.value, tokens

    seq_res = obj.sequence_loss(config.objective, cset, config.beta)
    if combine == "none":
        res = seq_res
    elif combine == "weighted":
        res = obj.weighted(tok_res, seq_res, config.alpha)
    else:  # constrained
        fwd_base = baseline.forward(pair.src, [pair.tgt])
        base_res = obj.token_loss(
            config.token_objective, fwd_base.logits_for(0), pair.tgt, config.label_smoothing
        )
        res = obj.constrained(tok_res, base_res.value, seq_res)
        stats.branch_records.append((tok_res.value, base_res.value, res.info["branch"]))

    if res.d_a is not None or res.d_s is not None:
        dls = obj.candidate_logit_grads(fwd, res.d_a, res.d_s)
        grads_add_(grads, model.backward(fwd, dls))
    if res.d_logits is not None:
        grads_add_(grads, model.backward(fwd_ref, [res.d_logits]))
    return res.value, tokens


def train_sequence(
    init: Checkpoint,
    train_pairs: list[SentencePair],
    valid_pairs: list[SentencePair],
    config: TrainConfig,
    vocab: Vocab,
    log: MetricLog | None = None,
    baseline: Checkpoint | None = None,
) -> tuple[Checkpoint, MetricLog, SequenceStats]:
    """Sequence-level fine-tuning from a token-level checkpoint."""
    config.validate()
    if config.objective not in obj.SEQUENCE_OBJECTIVES:
        raise ValueError(f"{config.objective!r} is not a sequence objective")
    log = log if log is not None else MetricLog()
    model = init.model()
    baseline_model = (baseline or init).model() if config.combine == "constrained" else None
    opt = NesterovSGD(model.params, config.lr, config.momentum)
    stats = SequenceStats()
    history: list[tuple[int, str, str, float]] = []
    cache = None
    if not config.gen.online:
        cache = build_offline_cache(model, train_pairs, config.gen)
    best_bleu, best_params, best_epoch = -1.0, {k: v.copy() for k, v in model.params.items()}, -1
    label = config.objective if config.combine == "none" else f"{config.objective}+{config.combine}"
    batch_counter = 0
    for epoch in range(config.seq_epochs):
        rng = np.random.default_rng([config.seed, 13, epoch])
        coin_rng = np.random.default_rng([config.seed, 17, epoch])
        total_loss, total_samples, epoch_skipped = 0.0, 0, 0
        diverged = False
        for batch in batch_by_tokens(train_pairs, config.max_tokens, rng):
            batch_counter += 1
            if cache is not None and config.gen.refresh_every > 0 and batch_counter % config.gen.refresh_every == 0:
                cache = build_offline_cache(model, train_pairs, config.gen)
            grads = zero_grads(model.params)
            batch_loss, norm_tokens, used = 0.0, 0, 0
            for pair in batch.pairs:
                try:
                    value, tokens = _sequence_sample_update(
                        model, pair, config, cache, baseline_model, coin_rng, grads, stats
                    )
                except ValueError:
                    epoch_skipped += 1
                    stats.skipped += 1
                    continue
                stats.samples += 1
                batch_loss += value
                norm_tokens += tokens
                used += 1
            if used == 0:
                continue
            if not np.isfinite(batch_loss):
                diverged = True
                break
            grads_scale_(grads, 1.0 / max(1, norm_tokens))
            renorm_grads(grads, config.max_grad_norm)
            opt.step(model.params, grads)
            total_loss += batch_loss
            total_samples += used
        if diverged:
            break
        if epoch_skipped > config.skip_abort_fraction * max(1, len(train_pairs)):
            raise RuntimeError(
                f"{epoch_skipped} samples skipped in epoch {epoch} "
                f"(> {config.skip_abort_fraction:.0%} of corpus)"
            )
        train_loss = total_loss / max(1, total_samples)
        log.add(epoch, "sequence", "train", label, loss=train_loss, lr=config.lr, skipped=epoch_skipped)
        if valid_pairs and (
            (config.eval_every and (epoch + 1) % config.eval_every == 0)
            or epoch == config.seq_epochs - 1
        ):
            rep = evaluate(model, valid_pairs, config.eval_beam_k, config.eval_normalize, config.gen.max_len)
            log.add(
                epoch, "sequence", "valid", label,
                bleu=rep.bleu, rouge1=rep.rouge1, rouge2=rep.rouge2, rougeL=rep.rougeL,
                lr=config.lr, skipped=epoch_skipped,
            )
            history.append((epoch, "valid", "bleu", rep.bleu))
            if rep.bleu > best_bleu:
                best_bleu = rep.bleu
                best_params = {k: v.copy() for k, v in model.params.items()}
                best_epoch = epoch
    if best_epoch < 0:  # no validation evals ran: keep the final parameters
        best_params = {k: v.copy() for k, v in model.params.items()}
        best_epoch = config.seq_epochs - 1
    model.params = best_params
    return (
        Checkpoint(
            params={k: v.copy() for k, v in best_params.items()},
            config=config,
            epoch=best_epoch,
            history=history,
            vocab_digest=vocab.digest(),
            velocity={k: v.copy() for k, v in opt.velocity.items()},
            lr=config.lr,
        ),
        log,
        stats,
    )
