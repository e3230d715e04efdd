#!/usr/bin/env python3
"""Generates the synthetic CoNLL fixtures (BIOES, LOC/ORG/PER/MISC).

Entity and capitalized filler vocabularies are disjoint, sentence texts are
unique within each file, and entities are never adjacent.

    python3 gen_conll.py   # writes conll_train.txt and conll_test.txt
"""

import random
from pathlib import Path

ENTITIES = {
    "LOC": [
        "Paris", "Berlin", "Tokyo", "Kenya", "Brazil", "Norway", "Ohio", "Lagos",
        "Madrid", "Cairo", "Peru", "Quebec", "Oslo", "Lima", "Jakarta", "Bavaria",
        "New York", "South Africa", "Hong Kong", "Sri Lanka", "Rio de Janeiro",
        "Gulf of Mexico", "Mount Kenya", "West Bank",
    ],
    "ORG": [
        "Reuters", "Siemens", "Nokia", "Ajax", "Chelsea", "Interpol", "Fiat",
        "Boeing", "Unilever", "Nasdaq", "United Nations", "Bank of England",
        "Red Cross", "Toyota Motor Corp", "European Commission", "Real Madrid",
        "World Bank", "Bundesbank",
    ],
    "PER": [
        "Yeltsin", "Clinton", "Kohl", "Mandela", "Pele", "John Smith",
        "Maria Lopez", "Anna Berg", "Pierre Dubois", "Kofi Annan", "Wang Li",
        "Ahmed Hassan", "Olga Petrova", "Carlos Mendes", "Ingrid Holm",
    ],
    "MISC": [
        "German", "French", "Dutch", "Japanese", "Olympic", "Christian",
        "Nobel Prize", "World Cup", "Tour de France", "Cold War",
        "English Premier League", "Grand Prix",
    ],
}

CAPITALIZED_FILLERS = [
    "The", "Officials", "Monday", "Tuesday", "Friday", "However", "Analysts",
    "Police", "Shares", "Minister", "President", "Sources", "Meanwhile",
    "Earlier", "Chairman", "Talks", "Prices", "Results", "Investors", "Critics",
    "Residents", "Spokesman", "Overall", "Later",
]

LOWER_FILLERS = [
    "said", "the", "on", "in", "of", "a", "was", "will", "after", "with",
    "talks", "market", "percent", "team", "government", "statement", "for",
    "to", "by", "at", "and", "match", "won", "lost", "rose", "fell", "new",
    "plan", "week", "year", ",", "'s", "1996", "3-1", "12", "$", "million",
    "expected", "agreed", "visit", "final", "season", "company", "deal",
]


def check_vocab():
    entity_tokens = {t for names in ENTITIES.values() for n in names for t in n.split()}
    clash = entity_tokens & set(CAPITALIZED_FILLERS)
    assert not clash, clash
    assert all(t for t in LOWER_FILLERS)


def entity_tags(n, ty):
    if n == 1:
        return [f"S-{ty}"]
    return [f"B-{ty}"] + [f"I-{ty}"] * (n - 2) + [f"E-{ty}"]


def sentence(rng, lo, hi):
    target = rng.randint(lo, hi)
    tokens, tags = [], []
    if rng.random() < 0.7:
        tokens.append(rng.choice(CAPITALIZED_FILLERS))
        tags.append("O")
    last_entity = False
    while len(tokens) < target - 1:
        r = rng.random()
        if r < 0.22 and not last_entity:
            ty = rng.choice(sorted(ENTITIES))
            words = rng.choice(ENTITIES[ty]).split()
            tokens += words
            tags += entity_tags(len(words), ty)
            last_entity = True
            continue
        if r < 0.34:
            tokens.append(rng.choice(CAPITALIZED_FILLERS))
        else:
            tokens.append(rng.choice(LOWER_FILLERS))
        tags.append("O")
        last_entity = False
    tokens.append(".")
    tags.append("O")
    return tokens, tags


def corpus(rng, n, lo, hi, seen):
    out = []
    while len(out) < n:
        tokens, tags = sentence(rng, lo, hi)
        text = " ".join(tokens)
        if text in seen:
            continue
        seen.add(text)
        out.append((tokens, tags))
    return out


def write(path, sentences):
    with open(path, "w") as f:
        f.write("-DOCSTART- O\n\n")
        for tokens, tags in sentences:
            for tok, tag in zip(tokens, tags):
                f.write(f"{tok} {tag}\n")
            f.write("\n")


def main():
    check_vocab()
    rng = random.Random(20230426)
    here = Path(__file__).parent
    seen = set()
    write(here / "conll_train.txt", corpus(rng, 240, 20, 70, seen))
    write(here / "conll_test.txt", corpus(rng, 200, 8, 30, seen))


if __name__ == "__main__":
    main()
