"""Synthetic stand-ins for the court corpus and the three task datasets.

Every generator plants label-bearing cue words in otherwise templated legal
prose, so a model that learns the cues reaches perfect accuracy on the
noiseless data while the cue rule itself serves as the Bayes-optimal oracle.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .seeding import rng_for

PARTIES = ["appellant", "respondent", "petitioner", "accused", "complainant", "state", "witness", "defendant"]
COURTS = ["high court", "sessions court", "trial court", "district court", "tribunal", "supreme court"]
ACTIONS = ["filed", "challenged", "submitted", "contended", "argued", "alleged", "denied", "stated"]
OBJECTS = ["the appeal", "the petition", "the order", "the evidence", "the complaint", "the application",
           "the charge", "the judgment"]
PLACES = ["village", "district", "station", "house", "office", "market", "road", "field"]
TIMES = ["in the year", "on the date", "during the month", "before the hearing", "after the incident"]
FILLER = ["the", "said", "learned", "counsel", "for", "of", "in", "and", "that", "was", "has", "been",
          "matter", "case", "court", "record", "present", "further", "hence", "thereafter", "shri",
          "smt", "section", "act", "under", "held", "proceedings", "before", "hon", "ble"]

TEMPLATES = [
    "the {party} {action} {object} before the {court} .",
    "learned counsel for the {party} {action} that {object} was not maintainable .",
    "the {party} resided in the {place} {time} .",
    "{object} was {action} by the {party} {time} .",
    "the {court} considered {object} and the {party} was heard .",
    "it is the case of the {party} that the {party2} {action} {object} .",
    "the {party} was present at the {place} when the incident occurred .",
    "the {court} recorded the statement of the {party} under section {num} .",
    "the {party} {action} {object} within {num} days of the order .",
    "no material was placed by the {party} before the {court} .",
]

NUMBERS = ["two", "three", "four", "five", "ten", "thirty", "ninety", "hundred"]

# subject-area lexicons: a corpus document draws most content words from one area
DOMAINS = {
 "tax": ["assessee", "income", "deduction", "levy", "exemption", "refund"],
 "excise": ["excise", "duty", "manufacture", "clearance", "goods", "tariff"],
 "land": ["acquisition", "compensation", "collector", "award", "acre", "survey"],
 "tenancy": ["tenant", "landlord", "eviction", "rent", "premises", "lease"],
 "family": ["divorce", "maintenance", "custody", "wife", "husband", "marriage"],
 "succession": ["will", "testator", "heir", "probate", "legacy", "estate"],
 "murder": ["deceased", "weapon", "injury", "postmortem", "blood", "homicide"],
 "narcotics": ["contraband", "seizure", "ganja", "heroin", "sample", "narcotic"],
 "service": ["employee", "promotion", "seniority", "pension", "dismissal", "pay"],
 "election": ["candidate", "ballot", "poll", "votes", "nomination", "constituency"],
 "company": ["shareholder", "director", "winding", "creditor", "liquidator", "debenture"],
 "banking": ["loan", "mortgage", "borrower", "guarantor", "interest", "recovery"],
 "insurance": ["insurer", "policy", "claim", "premium", "accident", "insured"],
 "labour": ["workman", "retrenchment", "wages", "factory", "bonus", "union"],
 "arbitration": ["arbitrator", "arbitral", "reference", "clause", "tribunal", "seat"],
 "contract": ["breach", "agreement", "damages", "performance", "consideration", "offer"],
 "customs": ["import", "export", "consignment", "smuggled", "baggage", "vessel"],
 "forest": ["timber", "forest", "sandalwood", "wildlife", "felling", "ranger"],
 "motor": ["vehicle", "driver", "claimant", "collision", "rash", "negligent"],
 "cheque": ["cheque", "dishonour", "drawer", "payee", "notice", "bounced"],
 "dowry": ["dowry", "harassment", "cruelty", "inlaws", "bride", "demand"],
 "corruption": ["bribe", "sanction", "illegal", "gratification", "trap", "officer"],
 "property": ["title", "possession", "partition", "boundary", "plot", "encroachment"],
 "education": ["student", "admission", "university", "examination", "college", "marks"],
 "environment": ["pollution", "effluent", "emission", "mining", "river", "clearance"],
 "patent": ["patent", "invention", "infringement", "trademark", "copyright", "design"],
 "electoral": ["electoral", "roll", "booth", "counting", "recount", "returning"],
 "prison": ["bail", "custody", "remand", "parole", "undertrial", "jail"],
 "municipal": ["municipality", "building", "demolition", "permit", "license", "zoning"],
 "cooperative": ["society", "member", "cooperative", "registrar", "audit", "dues"],
 "railway": ["railway", "passenger", "ticket", "train", "platform", "compartment"],
 "electricity": ["electricity", "tariff", "meter", "supply", "consumer", "connection"],
}
FUNCTION_WORDS = ["the", "of", "and", "in"]

# one cue word per statute label
STATUTE_TRIGGERS = ["murder", "theft", "forgery", "bribery", "trespass", "assault", "kidnapping", "dowry",
                    "cheating", "defamation", "extortion", "robbery", "arson", "rioting", "perjury",
                    "smuggling", "poisoning", "abduction", "embezzlement", "counterfeiting"]

ROLE_NAMES = ["Facts", "Arguments", "Statutes", "Precedents", "Ratio Decidendi",
              "Ruling by Lower Court", "Ruling by Present Court"]
ROLE_CUES = [
    ["incident", "occurred", "resided", "deceased", "night"],
    ["contended", "submitted", "urged", "argued", "canvassed"],
    ["provision", "clause", "enacted", "statute", "subsection"],
    ["precedent", "reported", "relied", "decision", "citation"],
    ["reasoning", "principle", "therefore", "conclude", "satisfied"],
    ["convicted", "sentenced", "acquitted", "trial", "magistrate"],
    ["allow", "dismiss", "quash", "costs", "disposed"],
]

ACCEPT_CUES = ["meritorious", "erroneous", "perverse", "unsustainable", "infirmity"]
REJECT_CUES = ["unmeritorious", "justified", "plausible", "sustainable", "reasoned"]


# filler never carries a task cue, so the planted words are the only signal
CUE_WORDS = frozenset(w for c in ROLE_CUES for w in c) | frozenset(ACCEPT_CUES + REJECT_CUES + STATUTE_TRIGGERS)


def _sentence(rng: np.random.Generator, lexicon: Optional[Sequence[str]] = None) -> str:
    return " ".join(w for w in _raw_sentence(rng, lexicon).split() if w not in CUE_WORDS)


def _raw_sentence(rng: np.random.Generator, lexicon: Optional[Sequence[str]] = None) -> str:
    if lexicon is not None:
        n = int(rng.integers(6, 14))
        return " ".join(lexicon[i] for i in rng.integers(len(lexicon), size=n)) + " ."
    tpl = TEMPLATES[int(rng.integers(len(TEMPLATES)))]
    p1, p2 = rng.choice(len(PARTIES), size=2, replace=False)
    return tpl.format(
        party=PARTIES[p1], party2=PARTIES[p2],
        action=ACTIONS[int(rng.integers(len(ACTIONS)))],
        object=OBJECTS[int(rng.integers(len(OBJECTS)))],
        court=COURTS[int(rng.integers(len(COURTS)))],
        place=PLACES[int(rng.integers(len(PLACES)))],
        time=TIMES[int(rng.integers(len(TIMES)))],
        num=NUMBERS[int(rng.integers(len(NUMBERS)))],
    )


def _cue_sentence(rng, cues: Sequence[str], lexicon=None) -> str:
    words = _sentence(rng, lexicon).split()
    n_cue = int(rng.integers(1, min(2, len(cues)) + 1))
    for c in rng.choice(len(cues), size=n_cue, replace=False):
        words.insert(int(rng.integers(0, max(len(words), 1))), cues[c])
    return " ".join(words)


def _area_sentence(rng, lexicon: Sequence[str], content_share: float = 0.8) -> str:
    n = int(rng.integers(5, 11))
    words = [lexicon[int(rng.integers(len(lexicon)))] if rng.random() < content_share
             else FUNCTION_WORDS[int(rng.integers(len(FUNCTION_WORDS)))] for _ in range(n)]
    return " ".join(words) + " ."


def corpus_documents(size: int, seed: int, min_sentences: int = 20, max_sentences: int = 60,
                     artifacts: bool = False, lexicon=None) -> list[dict]:
    """Pre-training corpus records (JSONL schema dicts).

    Each document belongs to one subject area and draws ~80% of its words
    from that area's lexicon, so the surrounding text pins down most of a
    masked word's distribution. ``lexicon`` replaces the area lexicons with
    a single word list.
    """
    rng = rng_for(seed, "synthetic", "corpus")
    areas = sorted(DOMAINS)
    docs = []
    for d in range(size):
        area = areas[int(rng.integers(len(areas)))]
        words = DOMAINS[area] if lexicon is None else list(lexicon)
        n = int(rng.integers(min_sentences, max_sentences + 1))
        lines = []
        for s in range(n):
            lines.append(_area_sentence(rng, words))
            if artifacts and s and s % 15 == 0:
                lines.append(f"----- Page {s // 15} -----")
        text = "\n".join(lines)
        if artifacts:
            text = text.replace(" .", " .  ", 1) + "\n" + str(d + 1)
        docs.append({"id": f"doc{d:05d}", "text": text, "court": COURTS[d % len(COURTS)],
                     "year": 1950 + d % 70, "area": area})
    return docs


def lsi_examples(size: int, seed: int, num_labels: int = 8, noise: float = 0.0, lexicon=None) -> list[dict]:
    if not 1 <= num_labels <= len(STATUTE_TRIGGERS):
        raise ValueError(f"num_labels must be in [1, {len(STATUTE_TRIGGERS)}]")
    rng = rng_for(seed, "synthetic", "lsi")
    out = []
    for i in range(size):
        k = int(rng.integers(1, min(3, num_labels) + 1))
        planted = sorted(int(x) for x in rng.choice(num_labels, size=k, replace=False))
        sentences = [_sentence(rng, lexicon) for _ in range(int(rng.integers(3, 8)))]
        for lab in planted:
            pos = int(rng.integers(0, len(sentences) + 1))
            sentences.insert(pos, _cue_sentence(rng, [STATUTE_TRIGGERS[lab]], lexicon))
        bits = np.zeros(num_labels, dtype=bool)
        bits[planted] = True
        if noise > 0:
            bits ^= rng.random(num_labels) < noise
        out.append({"id": f"lsi{i:05d}", "sentences": sentences,
                    "labels": [int(x) for x in np.flatnonzero(bits)], "planted": planted})
    return out


def seg_examples(size: int, seed: int, noise: float = 0.0, lexicon=None) -> list[dict]:
    rng = rng_for(seed, "synthetic", "seg")
    out = []
    for i in range(size):
        roles_present = sorted(int(r) for r in rng.choice(7, size=int(rng.integers(3, 8)), replace=False))
        sentences, planted = [], []
        for r in roles_present:
            for _ in range(int(rng.integers(1, 4))):
                sentences.append(_cue_sentence(rng, ROLE_CUES[r], lexicon))
                planted.append(r)
        roles = list(planted)
        if noise > 0:
            for j in range(len(roles)):
                if rng.random() < noise:
                    roles[j] = int((roles[j] + rng.integers(1, 7)) % 7)
        out.append({"id": f"seg{i:05d}", "sentences": sentences, "roles": roles, "planted": planted})
    return out


def cjpe_examples(size: int, seed: int, noise: float = 0.0, min_sentences: int = 20,
                  max_sentences: int = 60, lexicon=None) -> list[dict]:
    """Judgments whose decisive reasoning sentences sit in the final third.

    Each record carries ``rationale``: character spans of the cue sentences,
    usable as synthetic expert annotations.
    """
    rng = rng_for(seed, "synthetic", "cjpe")
    out = []
    for i in range(size):
        planted = int(rng.integers(0, 2))
        cues = ACCEPT_CUES if planted else REJECT_CUES
        n = int(rng.integers(min_sentences, max_sentences + 1))
        sentences = [_sentence(rng, lexicon) for _ in range(n)]
        n_cue = int(rng.integers(2, 5))
        lo = (2 * n) // 3
        cue_pos = set(int(p) for p in rng.choice(np.arange(lo, n + n_cue), size=n_cue, replace=False))
        text_parts, spans, cursor = [], [], 0
        k = 0
        for j in range(n + n_cue):
            if j in cue_pos:
                s = _cue_sentence(rng, cues, lexicon)
                spans.append([cursor, cursor + len(s)])
            else:
                s = sentences[k]
                k += 1
            text_parts.append(s)
            cursor += len(s) + 1
        label = planted
        if noise > 0 and rng.random() < noise:
            label = 1 - label
        out.append({"id": f"cjpe{i:05d}", "text": " ".join(text_parts), "label": label,
                    "planted": planted, "rationale": spans})
    return out
