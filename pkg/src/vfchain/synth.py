"""Seeded synthetic voice/face benchmark with controllable contamination.

Every identity owns a latent vector made of a gender offset plus an
identity component.  A voice sample is ``A_v (latent + language offset)``
and a face sample ``A_f latent``, each plus isotropic noise; ``A_v`` and
``A_f`` are random full-rank maps, so raw features of the two modalities
live in unrelated coordinates.  Embedding records are what an ideal
shared encoder would emit: the same content pushed through one
orthonormal map into the embedding space and normalised.

Contamination kinds:

* ``label_swap``: the recorded identity label is replaced by another one;
  the content is untouched (only training is affected).
* ``noise_blast``: heavy isotropic noise is added to the content.
* ``cross_gender_swap``: the content is mixed with a minority share of a
  random identity of the other gender.

Random streams for the world, the clean samples, the contamination and the
pair list are independent, so changing ``outlier_rate`` leaves the clean
part of the data bit-identical.
"""

from __future__ import annotations

import enum
import os
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError
from .rng import stage_rng
from .vectorstore import EmbeddingRecord, Modality, TestPair, write_csv, write_embeddings, write_pairs


class OutlierKind(str, enum.Enum):
    LABEL_SWAP = "label_swap"
    NOISE_BLAST = "noise_blast"
    CROSS_GENDER_SWAP = "cross_gender_swap"


@dataclass(frozen=True)
class SynthConfig:
    identities: int = 20
    samples_per_identity: int = 4
    languages: int = 2
    dim_latent: int = 48
    dim_raw: int = 48
    dim_embed: int = 48
    noise_sigma: float = 0.05
    outlier_rate: float = 0.2
    outlier_kind: OutlierKind = OutlierKind.NOISE_BLAST
    seed: int = 0
    train_identities: int = 0
    gender_separation: float = 0.6
    language_scale: float = 0.3
    blast_scale: float = 2.0
    interferer_weight: float = 0.4

    def __post_init__(self):
        object.__setattr__(self, "outlier_kind", OutlierKind(self.outlier_kind))
        if self.identities < 2:
            raise ConfigError("need at least 2 test identities")
        if self.samples_per_identity < 1 or self.languages < 1:
            raise ConfigError("samples_per_identity and languages must be at least 1")
        if min(self.dim_latent, self.dim_raw, self.dim_embed) < 2:
            raise ConfigError("all dimensions must be at least 2")
        if self.dim_raw < self.dim_latent:
            raise ConfigError("dim_raw must be at least dim_latent for full-rank raw maps")
        if not self.noise_sigma >= 0.0:
            raise ConfigError("noise_sigma must be non-negative")
        if not 0.0 <= self.outlier_rate < 1.0:
            raise ConfigError("outlier_rate must be in [0, 1)")
        if self.train_identities < 0 or self.seed < 0:
            raise ConfigError("train_identities and seed must be non-negative")
        if not (self.gender_separation >= 0 and self.language_scale >= 0 and self.blast_scale >= 0):
            raise ConfigError("scales must be non-negative")
        if not 0.0 <= self.interferer_weight < 0.5:
            raise ConfigError("interferer_weight must be in [0, 0.5)")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["outlier_kind"] = self.outlier_kind.value
        return d


class SampleTruth(NamedTuple):
    sample_id: str
    modality: Modality
    identity: str
    gender: int
    language: int | None
    outlier: bool
    split: str


@dataclass
class GroundTruth:
    samples: dict  # sample_id -> SampleTruth
    pair_labels: list

    def identity(self, sample_id):
        return self.samples[sample_id].identity


@dataclass
class SynthData:
    config: SynthConfig
    raw_train: list
    raw_test: list
    embeddings: list
    pairs: list
    truth: GroundTruth


def _identity_name(i):
    return f"id{i:03d}"


def _full_rank(rng, rows, cols):
    while True:
        m = rng.normal(size=(rows, cols)) / np.sqrt(cols)
        if np.linalg.matrix_rank(m) == min(rows, cols):
            return m


def _embed_map(rng, dim_embed, dim_latent):
    g = rng.normal(size=(dim_embed, dim_latent))
    if dim_embed >= dim_latent:
        q, r = np.linalg.qr(g)
        return q * np.sign(np.diag(r))
    return g / np.sqrt(dim_latent)


def generate(config: SynthConfig = SynthConfig()) -> SynthData:
    world = stage_rng(config.seed, "synth/world")
    samples_rng = stage_rng(config.seed, "synth/samples")
    outlier_rng = stage_rng(config.seed, "synth/outliers")
    pair_rng = stage_rng(config.seed, "synth/pairs")

    n_total = config.identities + config.train_identities
    dl = config.dim_latent
    gender_axis = world.normal(size=dl)
    gender_axis /= np.linalg.norm(gender_axis)
    genders = np.zeros(n_total, dtype=int)
    for split_ids in (np.arange(config.train_identities, n_total), np.arange(config.train_identities)):
        perm = world.permutation(split_ids)
        genders[perm[: len(perm) // 2]] = 1
    signs = np.where(genders == 0, 1.0, -1.0)
    latents = signs[:, None] * config.gender_separation * gender_axis + world.normal(size=(n_total, dl)) / np.sqrt(dl)
    lang_offsets = world.normal(size=(config.languages, dl))
    lang_offsets *= config.language_scale / np.linalg.norm(lang_offsets, axis=1, keepdims=True)
    a_voice = _full_rank(world, config.dim_raw, dl)
    a_face = _full_rank(world, config.dim_raw, dl)
    q = _embed_map(world, config.dim_embed, dl)

    # identity order: training identities first, then test identities
    plan = []  # (sample_id, modality, identity index, language, split)
    counters = {Modality.VOICE: 0, Modality.FACE: 0}
    for ident in range(n_total):
        split = "train" if ident < config.train_identities else "test"
        for modality in (Modality.VOICE, Modality.FACE):
            for _ in range(config.samples_per_identity):
                counters[modality] += 1
                prefix = "v" if modality is Modality.VOICE else "f"
                sid = f"{prefix}{counters[modality]:05d}"
                lang = int(samples_rng.integers(config.languages)) if modality is Modality.VOICE else None
                plan.append((sid, modality, ident, lang, split))

    content = np.empty((len(plan), dl))
    for row, (_, modality, ident, lang, _) in enumerate(plan):
        content[row] = latents[ident] + (lang_offsets[lang] if lang is not None else 0.0)
    raw_noise = samples_rng.normal(size=(len(plan), config.dim_raw)) * config.noise_sigma
    emb_noise = samples_rng.normal(size=(len(plan), config.dim_embed)) * config.noise_sigma

    outlier = np.zeros(len(plan), dtype=bool)
    recorded = [ident for (_, _, ident, _, _) in plan]
    for modality in (Modality.VOICE, Modality.FACE):
        rows = np.array([r for r, p in enumerate(plan) if p[1] is modality])
        count = int(round(config.outlier_rate * len(rows)))
        chosen = np.sort(outlier_rng.permutation(rows)[:count])
        for row in chosen:
            ident = plan[row][2]
            outlier[row] = True
            if config.outlier_kind is OutlierKind.NOISE_BLAST:
                content[row] += outlier_rng.normal(size=dl) * config.blast_scale / np.sqrt(dl)
            elif config.outlier_kind is OutlierKind.CROSS_GENDER_SWAP:
                pool = np.flatnonzero(genders != genders[ident])
                other = int(outlier_rng.choice(pool))
                w = config.interferer_weight
                content[row] = (1.0 - w) * content[row] + w * latents[other]
            else:
                pool = [i for i in range(n_total) if i != ident]
                recorded[row] = int(outlier_rng.choice(pool))

    truth_samples = {}
    raw_train, raw_test, embeddings = [], [], []
    for row, (sid, modality, ident, lang, split) in enumerate(plan):
        a = a_voice if modality is Modality.VOICE else a_face
        raw = a @ content[row] + raw_noise[row]
        label = _identity_name(recorded[row])
        (raw_train if split == "train" else raw_test).append(EmbeddingRecord(sid, modality, label, raw))
        if split == "test":
            emb = q @ content[row] + emb_noise[row]
            embeddings.append(EmbeddingRecord(sid, modality, label, emb / np.linalg.norm(emb)))
        truth_samples[sid] = SampleTruth(sid, modality, _identity_name(ident), int(genders[ident]), lang,
                                         bool(outlier[row]), split)

    voice_test = [r for r in raw_test if r.modality is Modality.VOICE]
    face_test = [r for r in raw_test if r.modality is Modality.FACE]
    true_id = {sid: t.identity for sid, t in truth_samples.items()}
    positives = [(v.sample_id, f.sample_id) for v in voice_test for f in face_test
                 if true_id[v.sample_id] == true_id[f.sample_id]]
    negatives_pool = [(v.sample_id, f.sample_id) for v in voice_test for f in face_test
                      if true_id[v.sample_id] != true_id[f.sample_id]]
    n_neg = min(len(positives), len(negatives_pool))
    neg_idx = np.sort(pair_rng.choice(len(negatives_pool), size=n_neg, replace=False))
    negatives = [negatives_pool[i] for i in neg_idx]
    combined = [(v, f, True) for v, f in positives] + [(v, f, False) for v, f in negatives]
    order = pair_rng.permutation(len(combined))
    pairs = [TestPair(*combined[i]) for i in order]
    truth = GroundTruth(truth_samples, [p.label for p in pairs])
    return SynthData(config, raw_train, raw_test, embeddings, pairs, truth)


def write_truth_csv(path, truth: GroundTruth):
    rows = [
        (t.sample_id, t.identity, t.gender, "" if t.language is None else t.language, int(t.outlier))
        for t in truth.samples.values()
    ]
    write_csv(path, ["sample_id", "identity", "gender", "language", "outlier"], rows)


def write_synth(directory, data: SynthData) -> list[str]:
    """Write the benchmark files into ``directory``; returns the file names."""
    files = {
        "raw_train.tsv": lambda p: write_embeddings(p, data.raw_train),
        "raw_test.tsv": lambda p: write_embeddings(p, data.raw_test),
        "embeddings.tsv": lambda p: write_embeddings(p, data.embeddings),
        "pairs.csv": lambda p: write_pairs(p, data.pairs),
        "truth.csv": lambda p: write_truth_csv(p, data.truth),
    }
    for name, writer in files.items():
        writer(os.path.join(directory, name))
    return list(files)
