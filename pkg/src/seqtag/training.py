"""Optimisation loop, the adaptive-moment optimizer, evaluation, the
two-optimizer regime, multi-run averaging, and the model gradient check.

The objective over a batch D with per-sentence gold labels e is

    -sum_d sum_i 0.5 * (logP_fw(e_i) + logP_bw(e_i))  +  (l2/2) * sum |theta|^2

In the dual regime the parameters split into the backward-decoder group
(its decoder block plus the backward output projection), stepped by its
own optimizer on the backward-only term -sum logP_bw(e_i), while a second
optimizer steps all remaining parameters on the full objective.  Both
steps happen every mini-batch on one shared forward pass, gradients
re-zeroed in between.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import model as m
from .autodiff import Tape, Tensor, backward
from .data import (
    Batch,
    EncodedSentence,
    TaggedSentence,
    VocabSet,
    bucket_batches,
    build_vocabularies,
    decode_labels,
    encode_corpus,
    stream_chunks,
)
from .errors import ConfigError, ContractError, NumericError, TrainingError
from .metrics import EvalReport, evaluate_tags
from .model import ModelDims, ModelParameters
from .rng import SplitMix64


@dataclass
class TrainingConfig:
    hidden: int = 300
    word_dim: int = 300
    char_dim: int = 30
    char_hidden: int = 30
    label_dim: int = 30
    feat_dim: int = 30
    lr: float = 2.5e-4
    l2: float = 1e-6
    dropout: float = 0.5
    epochs: int = 30
    batcher: str = "bucket"  # or "stream"
    chunk_len: int = 15
    max_tokens: int = 2000
    regime: str = "dual"  # or "single"
    seed: int = 1
    runs: int = 10
    min_count: int = 1
    clip_norm: float = 5.0
    select_by: str = "acc"  # or "cer"
    blocks: bool = True
    jobs: int = 1

    def validate(self):
        for name in ("hidden", "word_dim", "char_dim", "char_hidden", "label_dim",
                     "feat_dim", "epochs", "runs", "min_count", "jobs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.l2 < 0:
            raise ConfigError(f"l2 must be non-negative, got {self.l2}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.batcher not in ("bucket", "stream"):
            raise ConfigError(f"unknown batcher {self.batcher!r}")
        if self.regime not in ("single", "dual"):
            raise ConfigError(f"unknown regime {self.regime!r}")
        if self.select_by not in ("acc", "cer"):
            raise ConfigError(f"unknown selection criterion {self.select_by!r}")


@dataclass
class Corpus:
    train: list[TaggedSentence]
    dev: list[TaggedSentence]
    test: list[TaggedSentence] = field(default_factory=list)


class Adam:
    """Adaptive-moment gradient steps over one named parameter group, with
    optional global-norm clipping.  Step counts start at zero."""

    def __init__(self, tensors: list[Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, clip_norm: float | None = None):
        self.tensors = tensors
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self._m = [np.zeros_like(t.values) for t in tensors]
        self._v = [np.zeros_like(t.values) for t in tensors]

    def zero_grad(self):
        for t in self.tensors:
            t.zero_grad()

    def step(self):
        if not self.tensors:
            return
        factor = 1.0
        if self.clip_norm is not None:
            total = np.sqrt(sum(float((t.grad * t.grad).sum()) for t in self.tensors))
            if total > self.clip_norm:
                factor = self.clip_norm / total
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for t, mom, vel in zip(self.tensors, self._m, self._v):
            g = t.grad * factor
            mom += (1.0 - self.beta1) * (g - mom)
            vel += (1.0 - self.beta2) * (g * g - vel)
            t.values -= self.lr * (mom / bc1) / (np.sqrt(vel / bc2) + self.eps)


def dual_parameter_groups(params: ModelParameters):
    """(group_a, group_b) names: group B is the backward decoder block plus
    the backward output projection; group A is everything else.  Asserted
    to partition the parameter set."""
    names = params.names()
    group_b = [n for n in names if n.startswith("dec_bw.") or n.startswith("out.bw.")]
    group_a = [n for n in names if n not in set(group_b)]
    if set(group_a) & set(group_b) or set(group_a) | set(group_b) != set(names):
        raise ContractError("optimizer groups do not partition the parameter set")
    return group_a, group_b


def _teacher_matrix(batch: list[EncodedSentence]) -> np.ndarray:
    for sent in batch:
        if sent.label_ids is None:
            raise ContractError("training batch contains an unlabeled sentence")
    return np.stack([sent.label_ids for sent in batch])


def _group_by_length(sentences: list[EncodedSentence]):
    groups: dict[int, list[int]] = {}
    for idx, sent in enumerate(sentences):
        groups.setdefault(len(sent), []).append(idx)
    return groups


def nll_sums(batch: list[EncodedSentence], params: ModelParameters, mode: m.Mode):
    """Summed gold-label log-probabilities (forward total, backward total)
    over a batch, teacher-forced; sentences may have mixed lengths."""
    groups = _group_by_length(batch)
    fw_parts: list[Tensor] = []
    bw_parts: list[Tensor] = []
    for length in sorted(groups):
        sub = [batch[i] for i in groups[length]]
        gold = _teacher_matrix(sub)
        enc = m.encode(sub, params, mode)
        bw_states, bw_lps, _ = m.decode_backward(enc, params, mode, teacher_labels=gold)
        _, fw_lps, _ = m.decode_forward(enc, bw_states, params, mode, teacher_labels=gold)
        fw_acc = ad.pick(fw_lps[0], gold[:, 0])
        bw_acc = ad.pick(bw_lps[0], gold[:, 0])
        for i in range(1, length):
            fw_acc = ad.add(fw_acc, ad.pick(fw_lps[i], gold[:, i]))
            bw_acc = ad.add(bw_acc, ad.pick(bw_lps[i], gold[:, i]))
        fw_parts.append(ad.tensor_sum(fw_acc))
        bw_parts.append(ad.tensor_sum(bw_acc))
    fw_total, bw_total = fw_parts[0], bw_parts[0]
    for t in fw_parts[1:]:
        fw_total = ad.add(fw_total, t)
    for t in bw_parts[1:]:
        bw_total = ad.add(bw_total, t)
    return fw_total, bw_total


def l2_penalty(params: ModelParameters, coefficient: float) -> Tensor | None:
    if coefficient == 0.0:
        return None
    total = None
    for _, t in params.named_tensors():
        sq = ad.tensor_sum(ad.mul(t, t))
        total = sq if total is None else ad.add(total, sq)
    return ad.scale(total, 0.5 * coefficient)


def loss(batch: Batch | list[EncodedSentence], params: ModelParameters,
         config: TrainingConfig, mode: m.Mode) -> Tensor:
    """Full training objective for one batch as a tape scalar."""
    sentences = batch.sentences if isinstance(batch, Batch) else batch
    if not sentences:
        raise ContractError("loss needs a non-empty batch")
    fw_total, bw_total = nll_sums(sentences, params, mode)
    total = ad.scale(ad.add(fw_total, bw_total), -0.5)
    penalty = l2_penalty(params, config.l2)
    return total if penalty is None else ad.add(total, penalty)


# ---------------------------------------------------------------------------
# inference and evaluation


def predict_corpus(params: ModelParameters, sentences: list[EncodedSentence]) -> list[np.ndarray]:
    """Greedy combined predictions per sentence, order-preserving.
    Equal-length sentences run as one batch."""
    out: list[np.ndarray] = [None] * len(sentences)
    groups = _group_by_length(sentences)
    for length in sorted(groups):
        idx = groups[length]
        preds = m.predict_batch(params, [sentences[i] for i in idx])
        for row, i in enumerate(idx):
            out[i] = preds[row]
    return out


def evaluate(params: ModelParameters, split: list[EncodedSentence], vocabs: VocabSet) -> EvalReport:
    """Greedy inference over a split followed by the metric suite."""
    if not split:
        raise ContractError("cannot evaluate an empty split")
    for sent in split:
        if sent.label_ids is None:
            raise ContractError("evaluation split contains an unlabeled sentence")
    pred_ids = predict_corpus(params, split)
    gold = [decode_labels(s.label_ids, vocabs) for s in split]
    pred = [decode_labels(p, vocabs) for p in pred_ids]
    return evaluate_tags(gold, pred)


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    params: ModelParameters
    log: list[str]
    best_epoch: int
    best_report: EvalReport
    epoch_reports: list[EvalReport]


def _make_batches(train: list[EncodedSentence], config: TrainingConfig) -> list[Batch]:
    if config.batcher == "stream":
        return stream_chunks(train, config.chunk_len)
    return bucket_batches(train, config.max_tokens)


def _better(candidate: EvalReport, incumbent: EvalReport | None, select_by: str) -> bool:
    if incumbent is None:
        return True
    if select_by == "cer":
        return candidate.cer < incumbent.cer
    return candidate.token_accuracy > incumbent.token_accuracy


def _format_epoch(epoch: int, train_loss: float, report: EvalReport, seconds: float) -> str:
    return (
        f"epoch={epoch} train_loss={train_loss:.6f} dev_acc={report.token_accuracy:.6f} "
        f"dev_f1={report.f1:.6f} dev_cer={report.cer:.6f} seconds={seconds:.3f}"
    )


def _run_training(corpus: Corpus, config: TrainingConfig, vocabs: VocabSet,
                  dual: bool, group_b_names: list[str] | None = None) -> TrainResult:
    config.validate()
    if not corpus.train or not corpus.dev:
        raise ContractError("training needs non-empty train and dev splits")
    train = encode_corpus(corpus.train, vocabs)
    dev = encode_corpus(corpus.dev, vocabs)
    root = SplitMix64(config.seed)
    init_rng, shuffle_rng, dropout_rng = root.fork(), root.fork(), root.fork()
    dims = ModelDims(
        n_words=len(vocabs.word),
        n_chars=len(vocabs.char),
        n_labels=len(vocabs.label),
        n_feats=tuple(len(v) for v in vocabs.feats),
        word_dim=config.word_dim,
        char_dim=config.char_dim,
        char_hidden=config.char_hidden,
        label_dim=config.label_dim,
        feat_dim=config.feat_dim,
        hidden=config.hidden,
        blocks=config.blocks,
    )
    params = ModelParameters(dims, init_rng)
    batches = _make_batches(train, config)
    mode = m.Mode(training=True, dropout_p=config.dropout if config.blocks else 0.0, rng=dropout_rng)

    if dual:
        group_a, group_b = dual_parameter_groups(params)
        if group_b_names is not None:
            group_b = list(group_b_names)
            group_a = [n for n in params.names() if n not in set(group_b)]
        opt_a = Adam([params.get(n) for n in group_a], config.lr, clip_norm=config.clip_norm)
        opt_b = Adam([params.get(n) for n in group_b], config.lr, clip_norm=config.clip_norm)
    else:
        opt = Adam([t for _, t in params.named_tensors()], config.lr, clip_norm=config.clip_norm)

    log: list[str] = []
    epoch_reports: list[EvalReport] = []
    best_snapshot = None
    best_report = None
    best_epoch = -1
    order = list(range(len(batches)))
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        shuffle_rng.shuffle(order)
        loss_total = 0.0
        token_total = 0
        for step, batch_idx in enumerate(order):
            batch = batches[batch_idx]
            params.zero_grads()
            try:
                with Tape():
                    fw_total, bw_total = nll_sums(batch.sentences, params, mode)
                    full = ad.scale(ad.add(fw_total, bw_total), -0.5)
                    penalty = l2_penalty(params, config.l2)
                    if penalty is not None:
                        full = ad.add(full, penalty)
                    value = float(full.values)
                    if not np.isfinite(value):
                        raise TrainingError(f"non-finite loss at epoch {epoch} step {step}")
                    if dual:
                        backward(ad.scale(bw_total, -1.0))
                        opt_b.step()
                        params.zero_grads()
                        backward(full)
                        opt_a.step()
                    else:
                        backward(full)
                        opt.step()
            except NumericError as exc:
                raise TrainingError(f"diverged at epoch {epoch} step {step}: {exc}") from exc
            loss_total += value
            token_total += batch.n_tokens
        report = evaluate(params, dev, vocabs)
        epoch_reports.append(report)
        seconds = time.perf_counter() - started
        log.append(_format_epoch(epoch, loss_total / token_total, report, seconds))
        if _better(report, best_report, config.select_by):
            best_report = report
            best_snapshot = params.snapshot()
            best_epoch = epoch
    best = ModelParameters(dims, rng=None)
    best.load_snapshot(best_snapshot)
    return TrainResult(
        params=best, log=log, best_epoch=best_epoch,
        best_report=best_report, epoch_reports=epoch_reports,
    )


def train_single(corpus: Corpus, config: TrainingConfig, vocabs: VocabSet | None = None) -> TrainResult:
    """One optimizer over all parameters on the full objective."""
    vocabs = vocabs or build_vocabularies(corpus.train, config.min_count)
    return _run_training(corpus, config, vocabs, dual=False)


def train_dual(corpus: Corpus, config: TrainingConfig, vocabs: VocabSet | None = None,
               group_b_names: list[str] | None = None) -> TrainResult:
    """Two optimizers: the backward-decoder group steps on the backward
    term alone, the rest on the full objective, every mini-batch."""
    vocabs = vocabs or build_vocabularies(corpus.train, config.min_count)
    return _run_training(corpus, config, vocabs, dual=True, group_b_names=group_b_names)


def train(corpus: Corpus, config: TrainingConfig, vocabs: VocabSet | None = None) -> TrainResult:
    if config.regime == "dual":
        return train_dual(corpus, config, vocabs)
    return train_single(corpus, config, vocabs)


# ---------------------------------------------------------------------------
# repeated runs


@dataclass
class RunStats:
    mean: dict[str, float]
    std: dict[str, float]
    reports: list[EvalReport]


_AGGREGATED = ("token_accuracy", "precision", "recall", "f1", "cer")


def _one_run(args) -> EvalReport:
    corpus, config, seed = args
    run_config = replace(config, seed=seed, runs=1)
    vocabs = build_vocabularies(corpus.train, run_config.min_count)
    result = train(corpus, run_config, vocabs)
    held_out = corpus.test if corpus.test else corpus.dev
    return evaluate(result.params, encode_corpus(held_out, vocabs), vocabs)


def multi_run(corpus: Corpus, config: TrainingConfig, seeds: list[int] | None = None) -> RunStats:
    """Repeat training with seeds seed, seed+1, ... (or an explicit seed
    list) and aggregate the held-out reports (test split when present,
    dev otherwise)."""
    if config.runs < 1:
        raise ConfigError(f"runs must be >= 1, got {config.runs}")
    if seeds is None:
        seeds = [config.seed + k for k in range(config.runs)]
    elif len(seeds) != config.runs:
        raise ConfigError(f"{config.runs} runs but {len(seeds)} seeds")
    jobs = [(corpus, config, seed) for seed in seeds]
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            reports = list(pool.map(_one_run, jobs))
    else:
        reports = [_one_run(job) for job in jobs]
    mean = {}
    std = {}
    for name in _AGGREGATED:
        vals = np.array([getattr(r, name) for r in reports])
        mean[name] = float(vals.mean())
        # shifting by the first value keeps the spread exactly zero when
        # every run produced the same number
        std[name] = float((vals - vals[0]).std())
    return RunStats(mean=mean, std=std, reports=reports)


# ---------------------------------------------------------------------------
# model gradient check


def _micro_fixture(seed: int):
    """Tiny deterministic instance: one 3-token sentence, 3 labels, words
    of 1..4 characters, every architectural piece enabled."""
    sentences = [
        TaggedSentence(
            tokens=["abcd", "be", "c"],
            features=[["X", "Y", "X"]],
            labels=["B-p", "I-p", "O"],
        ),
        TaggedSentence(
            tokens=["be", "dd", "abcd"],
            features=[["Y", "Y", "X"]],
            labels=["O", "B-q", "I-q"],
        ),
    ]
    vocabs = build_vocabularies(sentences)
    dims = ModelDims(
        n_words=len(vocabs.word),
        n_chars=len(vocabs.char),
        n_labels=len(vocabs.label),
        n_feats=tuple(len(v) for v in vocabs.feats),
        word_dim=4,
        char_dim=3,
        char_hidden=2,
        label_dim=3,
        feat_dim=2,
        hidden=3,
        blocks=True,
    )
    params = ModelParameters(dims, SplitMix64(seed))
    batch = encode_corpus(sentences[:1], vocabs)
    return params, batch


def run_gradient_check(seed: int = 1, tolerance: float = 1e-4, h: float = 1e-5,
                       l2: float = 0.01) -> tuple[dict[str, float], bool]:
    """Compare every parameter gradient of the full objective on the micro
    instance against central finite differences.  Returns the max relative
    error per tensor and whether all passed the tolerance."""
    params, batch = _micro_fixture(seed)
    config = TrainingConfig(l2=l2, dropout=0.0)
    mode = m.Mode(training=True, dropout_p=0.0, rng=None)

    def forward():
        return loss(batch, params, config, mode)

    params.zero_grads()
    with Tape():
        backward(forward())
    errors = {}
    ok = True
    for name, tensor in params.named_tensors():
        fd = ad.numeric_gradient(forward, tensor, h=h)
        err = ad.relative_error(tensor.grad, fd)
        errors[name] = err
        ok = ok and err < tolerance
    return errors, ok
