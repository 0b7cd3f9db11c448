"""Generates the Finnish-like fixture corpora under fixtures/.

The grammar is a toy: pronoun subjects agree with verb endings, nouns take
case endings that follow back/front vowel harmony, and some sentences carry
punctuation so preprocessing has work to do. Output is deterministic.
"""

import random
from pathlib import Path

BACK_NOUNS = ["talo", "auto", "kirja", "kauppa", "koulu", "kala", "ruoka", "tuoli", "lapsi", "kukka",
              "vuori", "ranta", "puisto", "laiva", "juna", "tupa", "sauna", "kota", "muna", "oja"]
FRONT_NOUNS = ["metsä", "kynä", "pöytä", "järvi", "kylä", "tyttö", "sävel", "nenä", "äiti", "hävikki",
               "kenkä", "syksy", "pelto", "käsi", "kieli"]
BACK_CASES = ["", "n", "ssa", "sta", "lla", "lta", "lle", "ksi", "t", "ssakin", "lla", "sta"]
FRONT_CASES = ["", "n", "ssä", "stä", "llä", "ltä", "lle", "ksi", "t", "ssäkin", "llä", "stä"]
BACK_VERBS = ["puhu", "luke", "osta", "anta", "otta", "kirjoitta", "laula", "hakkaa", "kuuntele", "opiskele"]
FRONT_VERBS = ["näke", "käy", "syö", "pelää", "etsi", "kysy", "tietä", "ymmärtä"]
SUBJECTS = [("minä", "n"), ("sinä", "t"), ("me", "mme"), ("te", "tte"), ("hän", None), ("he", "vat")]
ADVERBS = ["tänään", "huomenna", "nopeasti", "hitaasti", "usein", "aina", "joskus", "taas", "myös", "vielä"]
NAMES = ["Matti", "Liisa", "Pekka", "Aino", "Helsinki", "Tampere", "Oulu"]
CONJ = ["ja", "mutta", "koska", "kun", "että"]


def noun(r):
    if r.random() < 0.6:
        return r.choice(BACK_NOUNS) + r.choice(BACK_CASES)
    return r.choice(FRONT_NOUNS) + r.choice(FRONT_CASES)


def verb(r, ending):
    front = r.random() < 0.4
    stem = r.choice(FRONT_VERBS if front else BACK_VERBS)
    if ending is None:
        return stem + stem[-1]
    if ending == "vat" and front:
        ending = "vät"
    return stem + ending


def clause(r):
    subj, ending = r.choice(SUBJECTS)
    words = []
    if r.random() < 0.2:
        words.append(r.choice(NAMES))
        ending = None
    else:
        words.append(subj)
    words.append(verb(r, ending))
    for _ in range(r.randint(1, 3)):
        words.append(noun(r))
    if r.random() < 0.5:
        words.append(r.choice(ADVERBS))
    return words


def sentence(r):
    words = clause(r)
    if r.random() < 0.3:
        words[-1] += ","
        words.append(r.choice(CONJ))
        words.extend(clause(r))
    words[0] = words[0][0].upper() + words[0][1:]
    end = r.choices([".", "?", "!", ""], weights=[6, 2, 1, 1])[0]
    return " ".join(words) + end


def main():
    r = random.Random(20190901)
    out = Path(__file__).resolve().parent.parent / "fixtures"
    lines = [sentence(r) for _ in range(1000)]
    (out / "fixture_1k.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    short = [s for s in lines if len(s.split()) <= 5][:32]
    (out / "memorize_32.txt").write_text("\n".join(short) + "\n", encoding="utf-8")


if __name__ == "__main__":
    main()
