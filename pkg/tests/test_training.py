"""Objective, optimizers, training loops, evaluation, and serialization."""

import math
import re

import numpy as np
import pytest

import oracle
from seqtag import autodiff as ad
from seqtag import model as m
from seqtag.autodiff import Tape, backward
from seqtag.data import (
    SyntheticSpec,
    TaggedSentence,
    build_vocabularies,
    encode_corpus,
    make_synthetic_corpus,
)
from seqtag.errors import ConfigError, ContractError
from seqtag.model import ModelDims, ModelParameters
from seqtag.rng import SplitMix64
from seqtag.serialization import load_model, save_model
from seqtag.training import (
    Adam,
    Corpus,
    TrainingConfig,
    dual_parameter_groups,
    evaluate,
    loss,
    multi_run,
    nll_sums,
    run_gradient_check,
    train,
    train_dual,
    train_single,
)

TRAIN_MODE = m.Mode(training=True, dropout_p=0.0, rng=None)


def strip_seconds(log_lines):
    return [re.sub(r" seconds=\S+", "", line) for line in log_lines]


def overfit_corpus(n=20, seed=5):
    spec = SyntheticSpec(
        n_train=n, n_dev=n, n_test=0, min_units=2, max_units=4,
        n_filler_types=12, n_entity_types=6, n_trigger_types=2,
    )
    train_split, _, _ = make_synthetic_corpus(spec, seed)
    # dev == train: the loop's dev accuracy reads training accuracy
    return Corpus(train=train_split, dev=train_split)


def overfit_config(**overrides):
    base = dict(
        hidden=8, word_dim=8, char_dim=6, char_hidden=4, label_dim=6,
        lr=5e-3, l2=0.0, dropout=0.1, epochs=12, batcher="bucket",
        max_tokens=64, regime="single", seed=3, runs=1,
    )
    base.update(overrides)
    return TrainingConfig(**base)


def zero_param_fixture():
    sents = [TaggedSentence(tokens=["aa"], labels=["B-x"]),
             TaggedSentence(tokens=["bb"], labels=["B-y"]),
             TaggedSentence(tokens=["aa", "bb"], labels=["O", "B-x"])]
    vocabs = build_vocabularies(sents)
    dims = ModelDims(
        n_words=len(vocabs.word), n_chars=len(vocabs.char), n_labels=len(vocabs.label),
        word_dim=4, char_dim=3, char_hidden=2, label_dim=3, hidden=2,
    )
    return ModelParameters(dims, rng=None), encode_corpus(sents, vocabs), vocabs


class TestLoss:
    def test_uniform_predictions_give_log_label_count(self):
        # all-zero parameters make every row uniform over the label set
        params, enc, vocabs = zero_param_fixture()
        config = TrainingConfig(l2=0.0)
        value = float(loss(enc[:1], params, config, TRAIN_MODE).values)
        assert value == pytest.approx(math.log(len(vocabs.label)))

    def test_quadratic_penalty_vanishes_at_origin(self):
        params, enc, vocabs = zero_param_fixture()
        for _, t in params.named_tensors():
            t.values[:] = 0.0  # true origin: normalisation gains included
        with_l2 = float(loss(enc[:1], params, TrainingConfig(l2=0.7), TRAIN_MODE).values)
        assert with_l2 == pytest.approx(math.log(len(vocabs.label)))

    def test_penalty_strictly_increases_with_coefficient(self):
        corpus = overfit_corpus(6)
        vocabs = build_vocabularies(corpus.train)
        enc = encode_corpus(corpus.train, vocabs)
        dims = ModelDims(
            n_words=len(vocabs.word), n_chars=len(vocabs.char), n_labels=len(vocabs.label),
            word_dim=4, char_dim=3, char_hidden=2, label_dim=3, hidden=2,
        )
        params = ModelParameters(dims, SplitMix64(2))  # nonzero point
        values = [
            float(loss(enc[:2], params, TrainingConfig(l2=c), TRAIN_MODE).values)
            for c in (0.0, 0.1, 0.2, 0.5)
        ]
        assert values == sorted(values)
        assert len(set(values)) == len(values)

    def test_matches_tape_free_recomputation(self):
        corpus = overfit_corpus(4)
        vocabs = build_vocabularies(corpus.train)
        enc = encode_corpus(corpus.train, vocabs)
        dims = ModelDims(
            n_words=len(vocabs.word), n_chars=len(vocabs.char), n_labels=len(vocabs.label),
            word_dim=5, char_dim=4, char_hidden=3, label_dim=4, hidden=3,
        )
        params = ModelParameters(dims, SplitMix64(9))
        config = TrainingConfig(l2=0.05)
        engine = float(loss(enc[:2], params, config, TRAIN_MODE).values)
        raw = {name: t.values for name, t in params.named_tensors()}
        assert engine == pytest.approx(oracle.loss_value(raw, enc[:2], l2=0.05), abs=1e-10)

    def test_empty_batch_rejected(self):
        params, _, _ = zero_param_fixture()
        with pytest.raises(ContractError):
            loss([], params, TrainingConfig(), TRAIN_MODE)


class TestAdam:
    def test_zero_learning_rate_leaves_parameters_unchanged(self):
        params, enc, _ = zero_param_fixture()
        before = params.snapshot()
        opt = Adam([t for _, t in params.named_tensors()], lr=0.0)
        params.zero_grads()
        with Tape():
            backward(loss(enc, params, TrainingConfig(l2=0.0), TRAIN_MODE))
        opt.step()
        for name, t in params.named_tensors():
            np.testing.assert_array_equal(t.values, before[name])

    def test_moments_shape_match_and_step_counter(self):
        params, _, _ = zero_param_fixture()
        tensors = [t for _, t in params.named_tensors()]
        opt = Adam(tensors, lr=1e-3)
        for t, mom in zip(tensors, opt._m):
            assert mom.shape == t.values.shape
        params.zero_grads()
        opt.step()
        opt.step()
        assert opt.step_count == 2

    def test_clipping_bounds_the_update_norm(self):
        t = ad.Tensor(np.zeros(4), requires_grad=True)
        t.grad = np.full(4, 100.0)
        opt = Adam([t], lr=1.0, clip_norm=1.0)
        opt.step()
        # with clipping the effective gradient has norm 1, so each entry
        # moves by roughly lr * sign
        assert np.all(np.abs(t.values) <= 1.0 + 1e-6)


class TestTrainSingle:
    def test_overfits_small_corpus(self):
        corpus = overfit_corpus()
        result = train_single(corpus, overfit_config())
        assert result.best_report.token_accuracy >= 0.99
        assert result.best_epoch <= 12

    def test_identical_seeds_identical_logs(self):
        corpus = overfit_corpus(8)
        config = overfit_config(epochs=3)
        a = train_single(corpus, config)
        b = train_single(corpus, config)
        assert strip_seconds(a.log) == strip_seconds(b.log)
        for name, t in a.params.named_tensors():
            np.testing.assert_array_equal(t.values, b.params.get(name).values)

    def test_loss_decreases_on_overfit_harness(self):
        corpus = overfit_corpus()
        result = train_single(corpus, overfit_config(epochs=10))
        first = float(result.log[0].split("train_loss=")[1].split()[0])
        last = float(result.log[-1].split("train_loss=")[1].split()[0])
        assert last < first

    def test_best_model_reproduces_logged_dev_accuracy(self):
        corpus = overfit_corpus(10)
        config = overfit_config(epochs=4)
        vocabs = build_vocabularies(corpus.train)
        result = train_single(corpus, config, vocabs)
        logged = float(result.log[result.best_epoch - 1].split("dev_acc=")[1].split()[0])
        re_eval = evaluate(result.params, encode_corpus(corpus.dev, vocabs), vocabs)
        assert f"{re_eval.token_accuracy:.6f}" == f"{logged:.6f}"

    def test_stream_batcher_trains(self):
        corpus = overfit_corpus(6)
        config = overfit_config(epochs=2, batcher="stream", chunk_len=5)
        result = train_single(corpus, config)
        assert len(result.log) == 2

    def test_epoch_log_format(self):
        corpus = overfit_corpus(6)
        result = train_single(corpus, overfit_config(epochs=1))
        assert re.fullmatch(
            r"epoch=1 train_loss=\S+ dev_acc=\S+ dev_f1=\S+ dev_cer=\S+ seconds=\S+",
            result.log[0],
        )


class TestTrainDual:
    def test_group_partition_is_exhaustive_and_disjoint(self):
        params, _, _ = zero_param_fixture()
        group_a, group_b = dual_parameter_groups(params)
        assert set(group_a) | set(group_b) == set(params.names())
        assert not set(group_a) & set(group_b)
        assert all(n.startswith(("dec_bw.", "out.bw.")) for n in group_b)

    def test_optimizer_b_step_changes_no_group_a_parameter_bit(self):
        corpus = overfit_corpus(6)
        vocabs = build_vocabularies(corpus.train)
        enc = encode_corpus(corpus.train, vocabs)
        dims = ModelDims(
            n_words=len(vocabs.word), n_chars=len(vocabs.char), n_labels=len(vocabs.label),
            word_dim=4, char_dim=3, char_hidden=2, label_dim=3, hidden=2,
        )
        params = ModelParameters(dims, SplitMix64(4))
        group_a, group_b = dual_parameter_groups(params)
        opt_b = Adam([params.get(n) for n in group_b], lr=1e-2)
        before = params.snapshot()
        params.zero_grads()
        with Tape():
            fw_total, bw_total = nll_sums(enc[:3], params, TRAIN_MODE)
            backward(ad.scale(bw_total, -1.0))
        opt_b.step()
        for name in group_a:
            np.testing.assert_array_equal(params.get(name).values, before[name])
        changed = sum(
            not np.array_equal(params.get(name).values, before[name]) for name in group_b
        )
        assert changed > 0

    def test_freezing_group_a_still_reduces_backward_nll(self):
        corpus = overfit_corpus(8)
        vocabs = build_vocabularies(corpus.train)
        enc = encode_corpus(corpus.train, vocabs)
        dims = ModelDims(
            n_words=len(vocabs.word), n_chars=len(vocabs.char), n_labels=len(vocabs.label),
            word_dim=6, char_dim=4, char_hidden=3, label_dim=4, hidden=3,
        )
        params = ModelParameters(dims, SplitMix64(6))
        _, group_b = dual_parameter_groups(params)
        opt_b = Adam([params.get(n) for n in group_b], lr=5e-3)

        def backward_nll():
            with Tape():
                _, bw_total = nll_sums(enc, params, TRAIN_MODE)
                return float(bw_total.values)

        start = -backward_nll()
        for _ in range(30):
            params.zero_grads()
            with Tape():
                _, bw_total = nll_sums(enc, params, TRAIN_MODE)
                backward(ad.scale(bw_total, -1.0))
            opt_b.step()
        assert -backward_nll() < start

    def test_dual_overfits_small_corpus(self):
        corpus = overfit_corpus()
        result = train_dual(corpus, overfit_config(regime="dual"))
        assert result.best_report.token_accuracy >= 0.99

    def test_empty_group_b_degenerates_to_single(self):
        corpus = overfit_corpus(6)
        config = overfit_config(epochs=2)
        single = train_single(corpus, config)
        dual = train_dual(corpus, config, group_b_names=[])
        assert strip_seconds(single.log) == strip_seconds(dual.log)
        for name, t in single.params.named_tensors():
            np.testing.assert_array_equal(t.values, dual.params.get(name).values)


class TestBackwardDecoderValue:
    def test_backward_predictions_beat_left_context_ceiling(self):
        # the label of every entity token is decided by the token AFTER it,
        # so any predictor restricted to left context tops out well below
        # the backward decoder, which accumulates right label context
        rng = SplitMix64(17)
        def make(n):
            sents = []
            for _ in range(n):
                tokens, labels = [], []
                for _ in range(2 + rng.randint(3)):
                    c = "ab"[rng.randint(2)]
                    tokens += ["x", f"t{c}"]
                    labels += [f"B-{c}", "O"]
                sents.append(TaggedSentence(tokens=tokens, labels=labels))
            return sents
        train_split, test_split = make(120), make(60)
        corpus = Corpus(train=train_split, dev=test_split)
        config = overfit_config(epochs=6, seed=11)
        vocabs = build_vocabularies(train_split)
        result = train_single(corpus, config, vocabs)

        enc_test = encode_corpus(test_split, vocabs)
        correct = total = 0
        for sent in enc_test:
            outs = m.encode([sent], result.params, m.EVAL)
            _, _, preds = m.decode_backward(outs, result.params, m.EVAL)
            correct += int(np.sum(preds[0] == sent.label_ids))
            total += len(sent)
        backward_acc = correct / total

        # best left-context-only accuracy: triggers are deterministic, the
        # "x" tokens are a coin flip between B-a and B-b
        x_share = np.mean([tok == "x" for s in test_split for tok in s.tokens])
        left_ceiling = 1.0 - x_share / 2.0
        assert backward_acc >= left_ceiling

    def test_divergence_reported_with_epoch(self):
        corpus = overfit_corpus(4)
        config = overfit_config(epochs=3, lr=1e200, clip_norm=1e300)
        from seqtag.errors import TrainingError
        with np.errstate(all="ignore"), pytest.raises(TrainingError, match="epoch"):
            # enormous steps blow the forward pass up to non-finite values
            train_single(corpus, config)


class TestEvaluate:
    def test_deterministic(self):
        corpus = overfit_corpus(6)
        vocabs = build_vocabularies(corpus.train)
        enc = encode_corpus(corpus.dev, vocabs)
        dims = ModelDims(
            n_words=len(vocabs.word), n_chars=len(vocabs.char), n_labels=len(vocabs.label),
            word_dim=4, char_dim=3, char_hidden=2, label_dim=3, hidden=2,
        )
        params = ModelParameters(dims, SplitMix64(8))
        assert evaluate(params, enc, vocabs) == evaluate(params, enc, vocabs)

    def test_forced_outside_predictions_score_zero_f1_full_cer(self):
        corpus = overfit_corpus(8)
        vocabs = build_vocabularies(corpus.train)
        enc = encode_corpus(corpus.dev, vocabs)
        params, _, _ = zero_param_fixture()
        # rebuild with matching vocab sizes, then force the O label
        dims = ModelDims(
            n_words=len(vocabs.word), n_chars=len(vocabs.char), n_labels=len(vocabs.label),
            word_dim=4, char_dim=3, char_hidden=2, label_dim=3, hidden=2,
        )
        params = ModelParameters(dims, rng=None)
        o_id = vocabs.label.lookup("O")
        params.out_bw_b.values[o_id] = 50.0
        params.out_fw_b.values[o_id] = 50.0
        report = evaluate(params, enc, vocabs)
        assert report.f1 == 0.0
        assert report.cer == 1.0


class TestMultiRun:
    def test_single_run_stats(self):
        corpus = overfit_corpus(6)
        config = overfit_config(epochs=2, runs=1)
        stats = multi_run(corpus, config)
        assert len(stats.reports) == 1
        assert stats.mean["token_accuracy"] == stats.reports[0].token_accuracy
        assert all(v == 0.0 for v in stats.std.values())

    def test_forced_identical_seeds_zero_spread(self):
        corpus = overfit_corpus(6)
        config = overfit_config(epochs=2, runs=3)
        stats = multi_run(corpus, config, seeds=[7, 7, 7])
        assert all(v == 0.0 for v in stats.std.values())

    def test_distinct_seeds_aggregate(self):
        corpus = overfit_corpus(8)
        config = overfit_config(epochs=3, runs=3)
        stats = multi_run(corpus, config)
        accs = [r.token_accuracy for r in stats.reports]
        assert stats.mean["token_accuracy"] == pytest.approx(np.mean(accs))
        assert stats.std["token_accuracy"] == pytest.approx(np.std(accs))

    def test_seed_count_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            multi_run(overfit_corpus(4), overfit_config(runs=2), seeds=[1])

    def test_five_runs_spread_below_two_points(self):
        # the rules are deterministic given context, so converged runs land
        # within a couple of accuracy points of each other
        spec = SyntheticSpec(
            n_train=150, n_dev=60, n_test=0, min_units=2, max_units=5,
            n_filler_types=15, n_entity_types=8, n_trigger_types=2,
        )
        train_split, dev_split, _ = make_synthetic_corpus(spec, seed=19)
        corpus = Corpus(train=train_split, dev=dev_split)
        config = overfit_config(epochs=5, runs=5, hidden=12, word_dim=12)
        stats = multi_run(corpus, config)
        assert stats.std["token_accuracy"] < 0.02

    def test_parallel_jobs_match_sequential(self):
        corpus = overfit_corpus(6)
        sequential = multi_run(corpus, overfit_config(epochs=2, runs=2, jobs=1))
        parallel = multi_run(corpus, overfit_config(epochs=2, runs=2, jobs=2))
        assert sequential.reports == parallel.reports


class TestSerialization:
    def _trained(self, tmp_path):
        corpus = overfit_corpus(8)
        config = overfit_config(epochs=2)
        vocabs = build_vocabularies(corpus.train)
        result = train_single(corpus, config, vocabs)
        path = tmp_path / "model.bin"
        save_model(path, result.params, vocabs, {"dropout": config.dropout, "l2": config.l2})
        return corpus, vocabs, result, path

    def test_round_trip_bit_identical_evaluation(self, tmp_path):
        corpus, vocabs, result, path = self._trained(tmp_path)
        params2, vocabs2, meta = load_model(path)
        enc = encode_corpus(corpus.dev, vocabs)
        enc2 = encode_corpus(corpus.dev, vocabs2)
        assert evaluate(result.params, enc, vocabs) == evaluate(params2, enc2, vocabs2)
        assert meta["float"]["dropout"] == pytest.approx(0.1)

    def test_values_and_vocabs_survive(self, tmp_path):
        corpus, vocabs, result, path = self._trained(tmp_path)
        params2, vocabs2, _ = load_model(path)
        for name, t in result.params.named_tensors():
            np.testing.assert_array_equal(t.values, params2.get(name).values)
        assert vocabs2.word.strings == vocabs.word.strings
        assert vocabs2.label.strings == vocabs.label.strings

    def test_resave_is_byte_identical(self, tmp_path):
        corpus, vocabs, result, path = self._trained(tmp_path)
        params2, vocabs2, meta = load_model(path)
        second = tmp_path / "model2.bin"
        save_model(second, params2, vocabs2,
                   {"dropout": meta["float"]["dropout"], "l2": meta["float"]["l2"]})
        assert path.read_bytes() == second.read_bytes()
        assert (tmp_path / "model.bin.manifest.json").read_text() == \
               (tmp_path / "model2.bin.manifest.json").read_text()

    def test_manifest_lists_every_tensor(self, tmp_path):
        import json
        _, _, result, path = self._trained(tmp_path)
        manifest = json.loads((tmp_path / "model.bin.manifest.json").read_text())
        assert [t["name"] for t in manifest["tensors"]] == result.params.names()

    def test_corrupt_magic_rejected(self, tmp_path):
        from seqtag.errors import IngestionError
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOTAMODEL")
        with pytest.raises(IngestionError):
            load_model(path)


class TestGradientCheckHarness:
    def test_full_model_check_passes(self):
        errors, ok = run_gradient_check(seed=1, tolerance=1e-4)
        assert ok
        assert max(errors.values()) < 1e-4
        assert len(errors) > 50  # exercises every parameter tensor

    def test_corrupted_backward_rule_detected(self):
        with ad.corrupt_tanh_backward():
            _, ok = run_gradient_check(seed=1, tolerance=1e-4)
        assert not ok

    def test_unreachable_tolerance_fails(self):
        _, ok = run_gradient_check(seed=1, tolerance=1e-12)
        assert not ok
