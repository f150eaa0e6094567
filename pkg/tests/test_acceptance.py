"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Training-heavy fixtures are session-scoped so each model is trained once;
their wall time is tracked and charged against the end-to-end budget.
Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines.
"""

import math
import time
from contextlib import contextmanager

import numpy as np
import pytest

from finkey.corpus import SentimentLabel, build_mrc_dataset, build_pair_dataset
from finkey.encoder import (
    EncoderConfig,
    bow_encode,
    backward,
    forward,
    forward_cached,
    init_params,
)
from finkey.evaluation import (
    EnsembleSpec,
    ensemble_train_select,
    entity_prf,
    run_pipeline,
    vote_sentiment,
)
from finkey.synthetic import matcher_corpus, mrc_corpus, sentiment_corpus
from finkey.tasks import (
    DEFAULT_TEMPLATE,
    FocalConfig,
    SentimentPrediction,
    build_question,
    classical_fit,
    classical_predict,
    cross_entropy,
    detect_key_entities,
    focal_loss,
    focal_loss_from_logits,
    init_head,
    select_span,
    span_loss,
)
from finkey.tokenizer import encode_pair, encode_single, vocab_from_texts
from finkey.training import (
    TrainConfig,
    kfold_split,
    save_checkpoint,
    train,
)

_fixture_seconds: dict[str, float] = {}


@contextmanager
def criterion(number, name, budget_seconds=None, charged=0.0):
    start = time.perf_counter()
    try:
        yield
    except BaseException:
        print(f"ACCEPTANCE {number} ({name}): FAIL")
        raise
    elapsed = time.perf_counter() - start + charged
    if budget_seconds is not None:
        assert elapsed < budget_seconds, (
            f"criterion {number} took {elapsed:.1f}s, budget {budget_seconds}s"
        )
    print(f"ACCEPTANCE {number} ({name}): PASS [{elapsed:.1f}s]")


def _timed(key, fn):
    start = time.perf_counter()
    out = fn()
    _fixture_seconds[key] = time.perf_counter() - start
    return out


# ---------------------------------------------------------------------------
# Trained-model fixtures (one training run each, reused across criteria)
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def sentiment_run():
    def build():
        docs = sentiment_corpus(700, seed=11)
        tr, dv, te = docs[:500], docs[500:600], docs[600:]
        cfg = TrainConfig(
            task="sentiment", epochs=20, batch_size=32, learning_rate=2e-3,
            seed=3, max_len=24,
        )
        enc = EncoderConfig(
            vocab_size=4, d_model=32, n_heads=4, n_layers=2, d_ff=64,
            max_len=24, dropout_rate=0.1,
        )
        result = train(tr, dv, cfg, encoder=enc)
        return result.checkpoint, tr, dv, te

    return _timed("sentiment", build)


@pytest.fixture(scope="session")
def matcher_run():
    def build():
        docs = matcher_corpus(800, seed=21, n_companies=12)
        tr_docs, dv_docs, te_docs = docs[:560], docs[560:680], docs[680:]
        tr, _ = build_pair_dataset(tr_docs)
        dv, _ = build_pair_dataset(dv_docs)
        cfg = TrainConfig(
            task="match", epochs=80, batch_size=16, learning_rate=3e-3, seed=5,
            max_len=32, loss="cross_entropy", threshold=0.5, clip_norm=5.0,
        )
        enc = EncoderConfig(
            vocab_size=4, d_model=48, n_heads=4, n_layers=2, d_ff=192,
            max_len=32, dropout_rate=0.0,
        )
        result = train(tr, dv, cfg, encoder=enc)
        return result.checkpoint, te_docs

    return _timed("matcher", build)


@pytest.fixture(scope="session")
def mrc_run():
    def build():
        docs = mrc_corpus(800, seed=31)
        tr_docs, dv_docs, te_docs = docs[:560], docs[560:680], docs[680:]
        tr, _ = build_mrc_dataset(tr_docs, DEFAULT_TEMPLATE)
        dv, _ = build_mrc_dataset(dv_docs, DEFAULT_TEMPLATE)
        cfg = TrainConfig(
            task="mrc", epochs=40, batch_size=32, learning_rate=3e-3, seed=5,
            max_len=32, clip_norm=5.0,
        )
        enc = EncoderConfig(
            vocab_size=4, d_model=48, n_heads=4, n_layers=2, d_ff=192,
            max_len=32, dropout_rate=0.0,
        )
        result = train(tr, dv, cfg, encoder=enc)
        return result.checkpoint, te_docs

    return _timed("mrc", build)


@pytest.fixture(scope="session")
def ensemble_run(sentiment_run):
    _, tr, dv, te = sentiment_run

    def build():
        cfg = TrainConfig(
            task="sentiment", epochs=12, batch_size=32, learning_rate=2e-3,
            seed=0, max_len=24,
        )
        enc = EncoderConfig(
            vocab_size=4, d_model=32, n_heads=4, n_layers=2, d_ff=64,
            max_len=24, dropout_rate=0.1,
        )
        vocab = vocab_from_texts(d.cleaned_text for d in tr)
        spec = EnsembleSpec(seeds=tuple(range(1, 7)), top_m=6)
        members = ensemble_train_select(tr, dv, cfg, spec, encoder=enc, vocab=vocab)
        return members, te

    return _timed("ensemble", build)


# ---------------------------------------------------------------------------
# 1. Loss equivalence
# ---------------------------------------------------------------------------


def test_criterion_1_focal_reduces_to_bce():
    with criterion(1, "focal(gamma=0) equals binary cross-entropy", budget_seconds=1.0):
        cfg = FocalConfig(gamma=0.0, alpha=None)
        for p in np.arange(0.01, 0.995, 0.01):
            for y in (0, 1):
                loss, _ = focal_loss(float(p), int(y), cfg)
                bce = -(y * math.log(p) + (1 - y) * math.log(1 - p))
                assert abs(loss - bce) < 1e-9


# ---------------------------------------------------------------------------
# 2. Gradient correctness (64-bit, central differences)
# ---------------------------------------------------------------------------

_EPS = 1e-5
_RTOL = 1e-4
_NOISE_FLOOR = 1e-8  # central-difference cancellation noise at float64


def _assert_grad_close(analytic, fd):
    diff = abs(analytic - fd)
    if diff <= _NOISE_FLOOR:
        return
    assert diff / max(abs(analytic), abs(fd)) < _RTOL, (analytic, fd)


def _fd_all_coords(arrays_with_grads, loss_fn):
    for arr, grad in arrays_with_grads:
        flat, gflat = arr.ravel(), grad.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + _EPS
            up = loss_fn()
            flat[i] = orig - _EPS
            down = loss_fn()
            flat[i] = orig
            _assert_grad_close(gflat[i], (up - down) / (2 * _EPS))


def _grad_check_setup():
    vocab = vocab_from_texts(["alpha beta gamma loss gain", "one two three four"])
    enc = EncoderConfig(
        vocab_size=vocab.size, d_model=8, n_heads=2, n_layers=2, d_ff=16,
        max_len=16, dropout_rate=0.0, dtype="float64",
    )
    params = init_params(enc, 2)
    return vocab, enc, params


def test_criterion_2_gradient_correctness():
    with criterion(2, "analytic gradients match finite differences", budget_seconds=120.0):
        vocab, enc, params = _grad_check_setup()
        rng = np.random.default_rng(9)

        # encoder alone, generic upstream on the token vectors
        seq = encode_pair("alpha", "one two three alpha gamma", vocab, enc.max_len)
        upstream = rng.normal(size=(enc.max_len, enc.d_model))

        def encoder_loss():
            return float((forward(params, enc, seq).token_vecs * upstream).sum())

        _, cache = forward_cached(params, enc, seq)
        grads = backward(params, enc, cache, d_token_vecs=upstream)
        _fd_all_coords(
            list(zip((a for _, a in params.named()), (g for _, g in grads.named()))),
            encoder_loss,
        )

        # sentiment head + cross-entropy, end to end
        head = init_head("sentiment", enc.d_model, np.random.default_rng(3), np.float64)

        def sentiment_loss():
            pooled = forward(params, enc, seq).sentence_vec
            return cross_entropy(pooled @ head.w + head.b, 0)[0]

        _, cache = forward_cached(params, enc, seq)
        pooled = cache["hidden"][0, 0]
        loss, dlogits = cross_entropy(pooled @ head.w + head.b, 0)
        d_pooled = head.w @ dlogits
        enc_grads = backward(params, enc, cache, d_sentence_vec=d_pooled)
        head_grads = [(head.w, np.outer(pooled, dlogits)), (head.b, dlogits)]
        _fd_all_coords(head_grads, sentiment_loss)
        _fd_all_coords(
            list(zip((a for _, a in params.named()), (g for _, g in enc_grads.named()))),
            sentiment_loss,
        )

        # match head + focal loss, end to end
        mhead = init_head("match", enc.d_model, np.random.default_rng(4), np.float64)
        fc = FocalConfig(gamma=2.0, alpha=0.3)

        def match_loss():
            pooled = forward(params, enc, seq).sentence_vec
            z = np.array([pooled @ mhead.w + mhead.b[0]])
            return float(focal_loss_from_logits(z, np.array([1]), fc)[0][0])

        _, cache = forward_cached(params, enc, seq)
        pooled = cache["hidden"][0, 0]
        z = np.array([pooled @ mhead.w + mhead.b[0]])
        _, dz = focal_loss_from_logits(z, np.array([1]), fc)
        enc_grads = backward(params, enc, cache, d_sentence_vec=dz[0] * mhead.w)
        head_grads = [(mhead.w, dz[0] * pooled), (mhead.b, dz.copy())]
        _fd_all_coords(head_grads, match_loss)
        _fd_all_coords(
            list(zip((a for _, a in params.named()), (g for _, g in enc_grads.named()))),
            match_loss,
        )

        # span head + span loss, end to end
        shead = init_head("span", enc.d_model, np.random.default_rng(5), np.float64)
        valid = np.array(
            [seg == 1 and off is not None for seg, off in zip(seq.segment_ids, seq.offsets)]
        )
        gold_s, gold_e = np.nonzero(valid)[0][[0, 2]]

        def span_loss_value():
            hidden = forward(params, enc, seq).token_vecs
            s = hidden @ shead.w_start + shead.b_start[0]
            e = hidden @ shead.w_end + shead.b_end[0]
            return span_loss(s, e, valid, gold_s, gold_e)[0]

        _, cache = forward_cached(params, enc, seq)
        hidden = cache["hidden"][0]
        s = hidden @ shead.w_start + shead.b_start[0]
        e = hidden @ shead.w_end + shead.b_end[0]
        _, ds, de = span_loss(s, e, valid, gold_s, gold_e)
        d_tok = np.outer(ds, shead.w_start) + np.outer(de, shead.w_end)
        enc_grads = backward(params, enc, cache, d_token_vecs=d_tok)
        head_grads = [
            (shead.w_start, hidden.T @ ds),
            (shead.b_start, np.array([ds.sum()])),
            (shead.w_end, hidden.T @ de),
            (shead.b_end, np.array([de.sum()])),
        ]
        _fd_all_coords(head_grads, span_loss_value)
        _fd_all_coords(
            list(zip((a for _, a in params.named()), (g for _, g in enc_grads.named()))),
            span_loss_value,
        )


# ---------------------------------------------------------------------------
# 3. Metric oracle
# ---------------------------------------------------------------------------


def test_criterion_3_entity_metric_oracle():
    with criterion(3, "entity P/R/F1 matches brute-force oracle", budget_seconds=10.0):
        rng = np.random.default_rng(13)
        pool = [f"e{i}" for i in range(10)]
        for _ in range(1000):
            n = int(rng.integers(1, 8))
            preds, golds = [], []
            for _ in range(n):
                preds.append({pool[i] for i in rng.choice(10, size=rng.integers(0, 5), replace=False)})
                golds.append({pool[i] for i in rng.choice(10, size=rng.integers(0, 5), replace=False)})
            m = entity_prf(preds, golds)
            tp = sum(len(p & g) for p, g in zip(preds, golds))
            fp = sum(len(p - g) for p, g in zip(preds, golds))
            fn = sum(len(g - p) for p, g in zip(preds, golds))
            assert (m.tp, m.fp, m.fn) == (tp, fp, fn)
            p_ref = tp / (tp + fp) if tp + fp else 0.0
            r_ref = tp / (tp + fn) if tp + fn else 0.0
            f_ref = 2 * p_ref * r_ref / (p_ref + r_ref) if p_ref + r_ref else 0.0
            assert m.precision == p_ref and m.recall == r_ref and m.f1 == f_ref

        worked = entity_prf([{"A", "C"}, {"D"}], [{"A", "B"}, {"D"}])
        assert (worked.tp, worked.fp, worked.fn) == (2, 1, 1)
        assert worked.precision == pytest.approx(2 / 3)
        assert worked.recall == pytest.approx(2 / 3)
        assert worked.f1 == pytest.approx(2 / 3)

        zero = entity_prf([set(), set()], [{"A"}, set()])
        assert zero.precision == 0.0 and zero.recall == 0.0 and zero.f1 == 0.0


# ---------------------------------------------------------------------------
# 4. Threshold monotonicity
# ---------------------------------------------------------------------------


def test_criterion_4_threshold_monotonicity(matcher_run):
    matcher, te_docs = matcher_run
    with criterion(4, "lower threshold never loses entities or recall", budget_seconds=30.0):
        rng = np.random.default_rng(17)
        for _ in range(1000):
            n = int(rng.integers(1, 10))
            scored = [(f"e{i}", float(s)) for i, s in enumerate(rng.random(n))]
            assert set(detect_key_entities(scored, 0.2)) >= set(
                detect_key_entities(scored, 0.5)
            )

        # staged pipeline on a labeled synthetic set: recall at 0.2 >= at 0.5
        stage1_cfg = TrainConfig(
            task="sentiment", epochs=2, batch_size=32, learning_rate=2e-3,
            seed=1, max_len=32,
        )
        stage1_docs = [d for d in te_docs]  # all negative by construction
        enc = EncoderConfig(
            vocab_size=4, d_model=16, n_heads=2, n_layers=1, d_ff=32,
            max_len=32, dropout_rate=0.0,
        )
        stage1 = train(
            stage1_docs[:80], stage1_docs[80:100], stage1_cfg, encoder=enc,
            vocab=matcher.vocab,
        ).checkpoint
        recalls = {}
        for threshold in (0.5, 0.2):
            result = run_pipeline(
                te_docs, [stage1], mode="coarse", matcher_members=[matcher],
                match_threshold=threshold,
            )
            preds = [
                set(doc.key_entities or []) for doc in result.documents
            ]
            golds = [set(d.key_entities) for d in te_docs]
            recalls[threshold] = entity_prf(preds, golds).recall
        assert recalls[0.2] >= recalls[0.5]


# ---------------------------------------------------------------------------
# 5. Span oracle
# ---------------------------------------------------------------------------


def test_criterion_5_span_selection_oracle():
    with criterion(5, "span selection equals exhaustive argmax", budget_seconds=30.0):
        rng = np.random.default_rng(23)
        for _ in range(500):
            n = int(rng.integers(4, 40))
            s = rng.normal(size=n)
            e = rng.normal(size=n)
            valid = rng.random(n) < 0.75
            if not valid.any():
                valid[int(rng.integers(0, n))] = True
            max_span_len = int(rng.integers(1, 9))
            best, best_score = None, -np.inf
            for i in range(n):
                for j in range(i, min(n, i + max_span_len)):
                    if valid[i] and valid[j] and s[i] + e[j] > best_score:
                        best, best_score = (i, j), s[i] + e[j]
            assert select_span(s, e, valid, max_span_len) == best


# ---------------------------------------------------------------------------
# 6. Determinism
# ---------------------------------------------------------------------------


def test_criterion_6_determinism(tmp_path):
    with criterion(6, "identical runs are byte-identical; folds partition", budget_seconds=120.0):
        docs = sentiment_corpus(80, seed=41)
        cfg = TrainConfig(
            task="sentiment", epochs=3, batch_size=16, learning_rate=2e-3,
            seed=7, max_len=20,
        )
        enc = EncoderConfig(
            vocab_size=4, d_model=16, n_heads=2, n_layers=2, d_ff=32,
            max_len=20, dropout_rate=0.1,
        )
        paths = []
        for run_index in (0, 1):
            result = train(docs[:64], docs[64:], cfg, encoder=enc)
            path = tmp_path / f"run{run_index}.ckpt"
            save_checkpoint(result.checkpoint, path)
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()

        rng = np.random.default_rng(43)
        for _ in range(100):
            n = int(rng.integers(2, 200))
            k = int(rng.integers(2, min(n, 12) + 1))
            split = kfold_split(n, k, int(rng.integers(0, 2**32)))
            flat = [i for fold in split.folds for i in fold]
            assert sorted(flat) == list(range(n))
            sizes = [len(fold) for fold in split.folds]
            assert max(sizes) - min(sizes) <= 1


# ---------------------------------------------------------------------------
# 7. Synthetic end-to-end
# ---------------------------------------------------------------------------


def test_criterion_7a_sentiment_accuracy(sentiment_run):
    ckpt, _, _, te = sentiment_run
    with criterion(
        7, "7a: transformer held-out sentiment accuracy >= 0.95",
        charged=_fixture_seconds.get("sentiment", 0.0),
    ):
        acc = np.mean(
            [ckpt.predict_sentiment(d.cleaned_text).label == d.sentiment for d in te]
        )
        print(f"  sentiment held-out accuracy: {acc:.4f}")
        assert acc >= 0.95


def test_criterion_7b_transformer_beats_bow(sentiment_run):
    ckpt, tr, _, te = sentiment_run
    with criterion(7, "7b: transformer beats frozen bag-of-words + LR by >= 5 points"):
        max_len = ckpt.encoder_config.max_len
        vocab = vocab_from_texts(d.cleaned_text for d in tr)

        def features(docs):
            return np.stack(
                [bow_encode(encode_single(d.cleaned_text, vocab, max_len), vocab.size) for d in docs]
            )

        def labels(docs):
            return np.array(
                [0 if d.sentiment is SentimentLabel.NEGATIVE else 1 for d in docs]
            )

        clf = classical_fit("lr", features(tr), labels(tr))
        bow_acc = np.mean(
            [classical_predict(clf, f) == y for f, y in zip(features(te), labels(te))]
        )
        tx_acc = np.mean(
            [ckpt.predict_sentiment(d.cleaned_text).label == d.sentiment for d in te]
        )
        print(f"  transformer {tx_acc:.4f} vs bag-of-words+LR {bow_acc:.4f}")
        assert tx_acc - bow_acc >= 0.05


def test_criterion_7c_matcher_f1(matcher_run):
    matcher, te_docs = matcher_run
    with criterion(
        7, "7c: matcher entity F1 >= 0.90 at threshold 0.5",
        charged=_fixture_seconds.get("matcher", 0.0),
    ):
        preds, golds = [], []
        for doc in te_docs:
            scored = [
                (e, matcher.score_entity(e, doc.cleaned_text)) for e in doc.entity_list
            ]
            preds.append(set(detect_key_entities(scored, 0.5)))
            golds.append(set(doc.key_entities))
        f1 = entity_prf(preds, golds).f1
        print(f"  matcher test F1@0.5: {f1:.4f}")
        assert f1 >= 0.90


def test_criterion_7d_mrc_exact_match(mrc_run):
    mrc, te_docs = mrc_run
    with criterion(
        7, "7d: span extraction exact match >= 0.90",
        charged=_fixture_seconds.get("mrc", 0.0),
    ):
        hits = 0
        for doc in te_docs:
            question = build_question(doc.tag, DEFAULT_TEMPLATE)
            span = mrc.extract_span(question, doc.cleaned_text, 16)
            hits += int(span.text == doc.key_entities[0])
        em = hits / len(te_docs)
        print(f"  span extraction exact match: {em:.4f}")
        assert em >= 0.90


def test_criterion_7_total_runtime(sentiment_run, matcher_run, mrc_run):
    with criterion(7, "7: total end-to-end runtime < 15 min"):
        total = sum(
            _fixture_seconds.get(key, 0.0) for key in ("sentiment", "matcher", "mrc")
        )
        print(f"  training fixtures took {total:.0f}s")
        assert total < 900.0


# ---------------------------------------------------------------------------
# 8. Ensemble properties
# ---------------------------------------------------------------------------


def test_criterion_8_ensemble_properties(ensemble_run):
    members_all, te = ensemble_run
    with criterion(8, "ensemble voting, selection and accuracy properties"):
        rng = np.random.default_rng(29)
        for _ in range(1000):
            n = int(rng.integers(1, 9))
            probs = rng.random(n)
            members = [
                SentimentPrediction(
                    label=SentimentLabel.NEGATIVE if p >= 0.5 else SentimentLabel.POSITIVE,
                    prob_negative=float(p),
                )
                for p in probs
            ]
            voted = vote_sentiment(members)
            n_neg = sum(p >= 0.5 for p in probs)
            n_pos = n - n_neg
            if n_neg > n_pos:
                expected = SentimentLabel.NEGATIVE
            elif n_pos > n_neg:
                expected = SentimentLabel.POSITIVE
            else:
                expected = (
                    SentimentLabel.NEGATIVE
                    if probs.mean() >= 0.5
                    else SentimentLabel.POSITIVE
                )
            assert voted.label is expected

        # selection property over the trained seed ensemble
        kept, dropped = members_all[:5], members_all[5:]
        assert min(m.dev_score for m in kept) >= max(
            (m.dev_score for m in dropped), default=-1.0
        )

        member_accs = [
            np.mean([m.predict_sentiment(d.cleaned_text).label == d.sentiment for d in te])
            for m in kept
        ]
        ensemble_acc = np.mean(
            [
                vote_sentiment(
                    [m.predict_sentiment(d.cleaned_text) for m in kept]
                ).label
                == d.sentiment
                for d in te
            ]
        )
        print(
            f"  ensemble accuracy {ensemble_acc:.4f}, member median {np.median(member_accs):.4f}"
        )
        assert ensemble_acc >= np.median(member_accs) - 0.01
