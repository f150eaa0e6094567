"""Synthetic financial-text corpora for end-to-end exercising of the stack.

The generated language is a tiny templated dialect of company names, event
words and a negation marker.  Its three corpora mirror the production data
shapes:

* sentiment: the label is decided by the leading headline clause, with the
  negation marker flipping the polarity of the headline event.  Later
  distractor clauses reuse the same words with random negations, so a
  bag-of-words model sees near-identical token counts for both labels and
  hits a ceiling, while an order-aware encoder can read the headline.
* match: entity lists mix subject companies (followed by their event) with
  companies that are merely mentioned in the trailer; only subjects are key.
* span: every text pairs each company with a distinct event; the tag picks
  one event, and the answer is that event's company.

Run as a module to write JSON-lines corpus files:

    python -m finkey.synthetic --task sentiment --n 600 --seed 7 --out corpus.jsonl
"""

from __future__ import annotations

import argparse

import numpy as np

from .corpus import Document, SentimentLabel, clean_text, save_corpus

COMPANIES = [
    "acme", "apexion", "bluepeak", "cindral", "corvex", "dunmore", "eastbay",
    "fenwick", "glenroy", "hartwell", "irongate", "jasperco", "kelvane",
    "lumora", "midvale", "nimbus", "orbix", "pantheon", "quillon", "rossfield",
    "solvent", "tarragon", "umbra", "vantara", "westholm", "zenith",
]
BAD_EVENTS = [
    "bankruptcy", "default", "fraud", "lawsuit", "losses",
    "penalty", "scandal", "writedown",
]
GOOD_EVENTS = [
    "award", "dividend", "expansion", "growth",
    "profit", "record", "surplus", "upgrade",
]
FILLERS = ["analysts", "market", "note", "quarter", "report", "shares"]
NEGATOR = "no"


def _doc(doc_id: str, text: str, **fields) -> Document:
    return Document(id=doc_id, raw_text=text, cleaned_text=clean_text(text), **fields)


def sentiment_corpus(
    n: int, seed: int, n_distractors: int = 2, negation_rate: float = 0.4
) -> list[Document]:
    """Documents whose sentiment hinges on the headline clause.

    The headline is "<company> [no] <event>"; the text is negative exactly
    when the headline event is bad and not negated, or good and negated.
    Distractor clauses carry random events and negations that do not affect
    the label.
    """
    rng = np.random.default_rng(seed)
    docs = []
    for i in range(n):
        company = str(rng.choice(COMPANIES))
        negated = bool(rng.random() < negation_rate)
        bad = bool(rng.random() < 0.5)
        event = str(rng.choice(BAD_EVENTS if bad else GOOD_EVENTS))
        headline = f"{company} {NEGATOR} {event}" if negated else f"{company} {event}"
        negative = bad != negated
        clauses = [headline]
        mentioned = [company]
        for _ in range(n_distractors):
            other = str(rng.choice(COMPANIES))
            ev = str(rng.choice(BAD_EVENTS + GOOD_EVENTS))
            neg = rng.random() < negation_rate
            filler = str(rng.choice(FILLERS))
            clause = f"{filler} {other} {NEGATOR} {ev}" if neg else f"{filler} {other} {ev}"
            clauses.append(clause)
            mentioned.append(other)
        entity_list = list(dict.fromkeys(mentioned))
        docs.append(
            _doc(
                f"sent-{seed}-{i}",
                " ; ".join(clauses),
                sentiment=SentimentLabel.NEGATIVE if negative else SentimentLabel.POSITIVE,
                entity_list=entity_list,
                key_entities=[company] if negative else [],
            )
        )
    return docs


def matcher_corpus(n: int, seed: int, n_companies: int | None = None) -> list[Document]:
    """Documents with entity lists where only event subjects are key.

    Key companies each head a "<company> <bad event>" clause; non-key
    companies only appear in the "with ..." trailer.  ``n_companies``
    restricts the company pool (a smaller pool makes the matching task
    learnable faster at small model scale).
    """
    rng = np.random.default_rng(seed)
    pool = COMPANIES if n_companies is None else COMPANIES[:n_companies]
    docs = []
    for i in range(n):
        n_key = int(rng.integers(1, 3))
        n_other = int(rng.integers(1, 3))
        companies = list(rng.choice(pool, size=n_key + n_other, replace=False))
        keys = [str(c) for c in companies[:n_key]]
        others = [str(c) for c in companies[n_key:]]
        events = [str(e) for e in rng.choice(BAD_EVENTS, size=n_key, replace=False)]
        clauses = [f"{c} {e}" for c, e in zip(keys, events)]
        text = " ; ".join(clauses) + " with " + " and ".join(others)
        entity_list = keys + others
        order = rng.permutation(len(entity_list))
        entity_list = [entity_list[j] for j in order]
        docs.append(
            _doc(
                f"match-{seed}-{i}",
                text,
                sentiment=SentimentLabel.NEGATIVE,
                entity_list=entity_list,
                key_entities=keys,
            )
        )
    return docs


def mrc_corpus(n: int, seed: int, n_clauses: int = 3) -> list[Document]:
    """Tagged documents whose answer is the company of the tagged event."""
    rng = np.random.default_rng(seed)
    docs = []
    for i in range(n):
        companies = [str(c) for c in rng.choice(COMPANIES, size=n_clauses, replace=False)]
        events = [str(e) for e in rng.choice(BAD_EVENTS, size=n_clauses, replace=False)]
        target = int(rng.integers(0, n_clauses))
        text = " ; ".join(f"{c} {e}" for c, e in zip(companies, events))
        docs.append(
            _doc(
                f"mrc-{seed}-{i}",
                text,
                sentiment=SentimentLabel.NEGATIVE,
                key_entities=[companies[target]],
                tag=events[target],
            )
        )
    return docs


GENERATORS = {
    "sentiment": sentiment_corpus,
    "match": matcher_corpus,
    "mrc": mrc_corpus,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Generate a synthetic corpus file")
    parser.add_argument("--task", choices=sorted(GENERATORS), required=True)
    parser.add_argument("--n", type=int, default=600)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--out", required=True)
    args = parser.parse_args(argv)
    docs = GENERATORS[args.task](args.n, args.seed)
    save_corpus(docs, args.out)
    print(f"wrote {len(docs)} documents to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
