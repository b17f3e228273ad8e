"""Templated text reports for the synthetic dataset.

Each report is three sentences: imaging context, breast density, findings.
Sentence content is a deterministic function of the sample metadata (variant
and synonym choices come from a stable hash of the metadata), so regenerating
a report with a different rng only changes sentence ORDER, never the sentence
multiset. The rng drives the order shuffle; training-time text augmentation
reuses the same shuffle.

The closed vocabulary of every template (all variants and synonyms included)
also feeds the tokenizer and the zero-shot prompt sets, which keeps prompts
free of unknown tokens by construction.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

DENSITY_SENTENCES = {
    0: (
        "the breasts are almost entirely fatty .",
        "breast tissue is predominantly fatty .",
        "fatty replacement of the breast tissue is seen .",
        "the parenchyma is mostly fatty .",
    ),
    1: (
        "there are scattered areas of fibroglandular density .",
        "scattered fibroglandular tissue is present .",
        "the breasts show scattered fibroglandular elements .",
        "mild scattered density is seen in the parenchyma .",
    ),
    2: (
        "the breast tissue is heterogeneously dense .",
        "heterogeneously dense parenchyma is present .",
        "the breasts are heterogeneously dense which may obscure small masses .",
        "dense tissue is distributed heterogeneously .",
    ),
    3: (
        "the breast tissue is extremely dense .",
        "the parenchyma is extremely dense .",
        "extremely dense tissue lowers the sensitivity of mammography .",
        "the breasts are extremely dense throughout .",
    ),
}

MASS_SENTENCES = (
    "a well circumscribed mass is noted .",
    "an oval mass is noted in the breast .",
    "a rounded mass is noted on both views .",
)

CALC_SENTENCES = (
    "grouped calcifications are identified .",
    "a cluster of calcifications is identified .",
    "punctate calcifications are identified in the breast .",
)

NO_FINDING_SENTENCES = (
    "no suspicious mass or calcification is identified .",
    "no suspicious finding is identified .",
    "the examination shows no suspicious abnormality .",
)

IMAGING_SENTENCES = (
    "standard cc and mlo views of the {lat} breast were obtained .",
    "cc and mlo projections of the {lat} breast were acquired .",
)

# word -> interchangeable alternates; substitution choice is metadata-keyed
SYNONYMS = {
    "noted": ("seen", "observed"),
    "identified": ("noted", "demonstrated"),
    "present": ("seen", "evident"),
    "shows": ("demonstrates", "reveals"),
}

LATERALITIES = ("left", "right")


@dataclass
class ReportText:
    text: str
    fields: dict  # {"density": ..., "finding": ..., "laterality": ...}


def _stable_hash(*parts) -> int:
    blob = "|".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(blob.encode()).digest()[:8], "big")


def _apply_synonyms(sentence: str, key: int) -> str:
    words = sentence.split()
    out = []
    for i, w in enumerate(words):
        alts = SYNONYMS.get(w)
        if alts is not None:
            pick = _stable_hash(key, i, w) % (len(alts) + 1)
            w = w if pick == 0 else alts[pick - 1]
        out.append(w)
    return " ".join(out)


def synthesize_report(meta: dict, rng: np.random.Generator) -> ReportText:
    """Build a report from {densityClass, rois, laterality} metadata.

    rois is a sequence of ROI kinds ("mass" / "calcification") or objects with
    a .kind attribute. Raises ConfigError on an unknown density class.
    """
    density = meta["densityClass"]
    if density not in DENSITY_SENTENCES:
        from .config import ConfigError

        raise ConfigError(f"unknown densityClass {density!r}")
    laterality = meta.get("laterality", "left")
    kinds = [getattr(r, "kind", r) for r in meta.get("rois", [])]

    key = _stable_hash(density, tuple(sorted(kinds)), laterality)
    sentences = [IMAGING_SENTENCES[key % len(IMAGING_SENTENCES)].format(lat=laterality)]
    density_sentence = DENSITY_SENTENCES[density][_stable_hash(key, "density") % 4]
    sentences.append(density_sentence)

    finding_parts = []
    if "mass" in kinds:
        finding_parts.append(MASS_SENTENCES[_stable_hash(key, "mass") % len(MASS_SENTENCES)])
    if "calcification" in kinds:
        finding_parts.append(CALC_SENTENCES[_stable_hash(key, "calc") % len(CALC_SENTENCES)])
    if not finding_parts:
        finding_parts.append(NO_FINDING_SENTENCES[_stable_hash(key, "none") % len(NO_FINDING_SENTENCES)])
    sentences.extend(finding_parts)

    sentences = [_apply_synonyms(s, key) for s in sentences]
    order = rng.permutation(len(sentences))
    text = " ".join(sentences[i] for i in order)
    return ReportText(
        text=text,
        fields={
            "density": density_sentence,
            "finding": " ".join(finding_parts),
            "laterality": laterality,
        },
    )


def augment_text(text: str, rng: np.random.Generator) -> str:
    """Training-time augmentation: shuffle sentence order."""
    sentences = split_sentences(text)
    order = rng.permutation(len(sentences))
    return " ".join(sentences[i] for i in order)


def split_sentences(text: str) -> list:
    parts = [p.strip() for p in text.split(" . ")]
    return [p if p.endswith(".") else p + " ." for p in parts if p]


def all_template_sentences() -> list:
    """Every sentence any report or prompt can contain, synonyms expanded."""
    base = []
    for variants in DENSITY_SENTENCES.values():
        base.extend(variants)
    base.extend(MASS_SENTENCES)
    base.extend(CALC_SENTENCES)
    base.extend(NO_FINDING_SENTENCES)
    for s in IMAGING_SENTENCES:
        for lat in LATERALITIES:
            base.append(s.format(lat=lat))
    expanded = set(base)
    for word, alts in SYNONYMS.items():
        for s in list(expanded):
            for alt in alts:
                expanded.add(s.replace(f" {word} ", f" {alt} "))
    return sorted(expanded)


def template_vocabulary() -> list:
    words = set()
    for s in all_template_sentences():
        words.update(s.split())
    return sorted(words)


def class_prompts(task: str) -> dict:
    """Per-class prompt sentences for zero-shot classification."""
    if task == "density":
        return {k: list(v) for k, v in DENSITY_SENTENCES.items()}
    if task == "birads":
        return {
            0: list(NO_FINDING_SENTENCES),
            1: list(MASS_SENTENCES),
            2: list(CALC_SENTENCES),
        }
    if task == "cancerLike":
        return {
            0: list(NO_FINDING_SENTENCES),
            1: list(MASS_SENTENCES) + list(CALC_SENTENCES),
        }
    raise ValueError(f"unknown task {task!r}")
