"""Chaining-cluster refinement of initial voice-face pair scores.

Stages, run per modality on the test embeddings:

1. gender clustering: K-Means with k=2, samples far from their center are
   gender outliers;
2. identity clustering of the gender inliers, with the count fixed or
   picked by the elbow rule, and identity outliers by distance again;
3. prototypes: the mean of the identity inliers of each identity cluster;
4. cross-modal cosine similarity of voice and face prototypes per gender.

Scores are then refined.  Pairs whose two sides fall in the same gender
cluster and whose prototypes are similar enough are pulled toward the
lowest initial score.  Pairs whose sides fall in different gender clusters
are set to the highest initial score.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .cluster import (
    ClusterModel,
    ElbowReport,
    distance_filter,
    elbow_select,
    kmeans_fit,
    squared_distances,
    write_elbow_csv,
)
from .errors import ConfigError, DegenerateInputError, FormatError
from .rng import derive_seed
from .vectorstore import EmbeddingRecord, Modality, ScoreSet, TestPair, index_records, write_csv

MODALITIES = (Modality.VOICE, Modality.FACE)


def _check_rule(rule, name):
    try:
        kind, value = rule
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a (kind, value) pair") from None
    if kind == "percentile":
        if not 0.0 < float(value) <= 100.0:
            raise ConfigError(f"{name} percentile must be in (0, 100]")
    elif kind == "absolute":
        if not float(value) >= 0.0:
            raise ConfigError(f"{name} absolute threshold must be non-negative")
    else:
        raise ConfigError(f"{name} kind must be 'percentile' or 'absolute'")
    return (kind, float(value))


@dataclass(frozen=True)
class RefineConfig:
    gender_rule: tuple = ("percentile", 90.0)
    identity_rule: tuple = ("percentile", 90.0)
    sim_threshold: float = 0.6
    alpha: float = 0.5
    identity_clusters: int | None = None
    elbow_target: int | None = None
    elbow_max_k: int = 20
    gender_clusters: int = 2
    reward_below: bool = False  # literal "sim < T" reward condition
    restarts: int = 5

    def __post_init__(self):
        object.__setattr__(self, "gender_rule", _check_rule(self.gender_rule, "gender threshold"))
        object.__setattr__(self, "identity_rule", _check_rule(self.identity_rule, "identity threshold"))
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError("alpha must be in (0, 1]")
        if math.isnan(self.sim_threshold):
            raise ConfigError("similarity threshold must be a number")
        if self.gender_clusters not in (1, 2):
            raise ConfigError("gender_clusters must be 1 or 2")
        if self.identity_clusters is not None and self.identity_clusters < 1:
            raise ConfigError("identity_clusters must be positive")
        if self.elbow_target is not None and self.elbow_target < 1:
            raise ConfigError("elbow_target must be positive")
        if self.elbow_max_k < 1 or self.restarts < 1:
            raise ConfigError("elbow_max_k and restarts must be positive")


@dataclass(frozen=True)
class ScoreBounds:
    lower: float
    upper: float

    @classmethod
    def from_scores(cls, scores: ScoreSet) -> "ScoreBounds":
        s = scores.scores
        if s.size == 0:
            raise ConfigError("cannot bound an empty score set")
        return cls(float(s.min()), float(s.max()))


@dataclass(eq=False)
class CandidateSet:
    """Samples of one modality that fell in one gender cluster."""

    modality: Modality
    gender_cluster: int
    member_ids: tuple
    embeddings: np.ndarray
    gender_inlier: np.ndarray
    identity_assignments: np.ndarray | None = None  # -1 where not clustered
    identity_inlier: np.ndarray | None = None
    identity_model: ClusterModel | None = None
    elbow: ElbowReport | None = None

    def __len__(self):
        return len(self.member_ids)

    @property
    def n_identity_clusters(self) -> int:
        return 0 if self.identity_model is None else self.identity_model.k


@dataclass(frozen=True)
class GenderClustering:
    modality: Modality
    model: ClusterModel
    sample_ids: tuple
    embeddings: np.ndarray
    inlier: np.ndarray
    csets: tuple


@dataclass
class PrototypeTable:
    """``prototypes[(modality, g)][c]`` is the inlier mean of identity cluster c, or None."""

    prototypes: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def present(self, modality: Modality, gender: int) -> list[int]:
        return [c for c, p in enumerate(self.prototypes.get((modality, gender), [])) if p is not None]


@dataclass(frozen=True)
class SimilarityMatrix:
    gender: int
    voice_clusters: tuple
    face_clusters: tuple
    values: np.ndarray

    def lookup(self, voice_cluster: int, face_cluster: int) -> float:
        return float(self.values[self.voice_clusters.index(voice_cluster), self.face_clusters.index(face_cluster)])


# --- stages ----------------------------------------------------------------


def _align_to(reference: ClusterModel, model: ClusterModel) -> ClusterModel:
    """Relabel a k=2 model so its cluster j faces the reference's cluster j."""
    if model.k != 2:
        return model
    d = np.sqrt(squared_distances(reference.centers, model.centers))
    if d[0, 0] + d[1, 1] <= d[0, 1] + d[1, 0]:
        return model
    return ClusterModel(
        centers=model.centers[::-1].copy(),
        assignments=1 - model.assignments,
        distances=model.distances,
        inertia=model.inertia,
        n_iter=model.n_iter,
        converged=model.converged,
        inertia_history=model.inertia_history,
    )


def gender_cluster(embeddings: dict, config: RefineConfig = RefineConfig(), seed: int = 0,
                   jobs: int = 1) -> dict:
    """Split each modality into gender clusters and flag gender outliers.

    ``embeddings`` maps each modality to ``(sample_ids, matrix)``.  Face
    cluster labels are aligned to voice labels by center proximity, so a
    shared label means "same side" across modalities; no semantic gender
    is attached.
    """
    out = {}
    for modality in MODALITIES:
        ids, x = embeddings[modality]
        x = np.asarray(x, dtype=np.float64)
        if len(ids) < 2:
            raise DegenerateInputError(f"gender clustering needs at least 2 {modality.value} samples, got {len(ids)}")
        model = kmeans_fit(x, config.gender_clusters, seed=derive_seed(seed, f"chain/gender/{modality.value}"),
                           restarts=config.restarts, jobs=jobs)
        if modality is Modality.FACE:
            model = _align_to(out[Modality.VOICE].model, model)
        inlier = np.zeros(len(ids), dtype=bool)
        inlier[distance_filter(model, config.gender_rule)] = True
        csets = []
        for g in range(config.gender_clusters):
            idx = np.flatnonzero(model.assignments == g)
            csets.append(CandidateSet(modality, g, tuple(ids[i] for i in idx), x[idx], inlier[idx]))
        out[modality] = GenderClustering(modality, model, tuple(ids), x, inlier, tuple(csets))
    return out


def _elbow_target(config: RefineConfig, n_pairs: int | None, n_members: int) -> int:
    # Default: half the number of test pairs, i.e. the largest k that still
    # shows a large drop unless the data has fewer clusters than that.
    if config.elbow_target is not None:
        return config.elbow_target
    return max(1, (n_pairs if n_pairs is not None else n_members) // 2)


def identity_cluster(cset: CandidateSet, config: RefineConfig = RefineConfig(), seed: int = 0,
                     jobs: int = 1, n_pairs: int | None = None) -> CandidateSet:
    """Cluster the gender inliers of ``cset`` into identities and flag identity outliers.

    Without a fixed ``identity_clusters`` the count comes from
    :func:`elbow_select` over ``1..min(inliers, elbow_max_k)``, targeting
    ``config.elbow_target`` or else half of ``n_pairs``.
    """
    members = np.flatnonzero(cset.gender_inlier)
    assignments = np.full(len(cset), -1, dtype=np.int64)
    identity_inlier = np.zeros(len(cset), dtype=bool)
    if members.size == 0:
        return CandidateSet(cset.modality, cset.gender_cluster, cset.member_ids, cset.embeddings, cset.gender_inlier,
                            assignments, identity_inlier, None, None)
    x = cset.embeddings[members]
    local_seed = derive_seed(seed, f"chain/identity/{cset.modality.value}/{cset.gender_cluster}")
    elbow = None
    if config.identity_clusters is not None:
        n = config.identity_clusters
        if n > members.size:
            raise ConfigError(
                f"{n} identity clusters requested but only {members.size} gender inliers in "
                f"{cset.modality.value} cluster {cset.gender_cluster}"
            )
        model = kmeans_fit(x, n, seed=local_seed, restarts=config.restarts, jobs=jobs)
    else:
        top = min(members.size, config.elbow_max_k)
        elbow = elbow_select(x, range(1, top + 1), _elbow_target(config, n_pairs, len(cset)), seed=local_seed,
                             restarts=config.restarts, jobs=jobs)
        model = elbow.model_for(elbow.selected)
    assignments[members] = model.assignments
    identity_inlier[members[distance_filter(model, config.identity_rule)]] = True
    return CandidateSet(cset.modality, cset.gender_cluster, cset.member_ids, cset.embeddings, cset.gender_inlier,
                        assignments, identity_inlier, model, elbow)


def compute_prototypes(csets: Sequence[CandidateSet]) -> PrototypeTable:
    table = PrototypeTable()
    for cs in csets:
        key = (cs.modality, cs.gender_cluster)
        protos, counts = [], []
        for c in range(cs.n_identity_clusters):
            mask = cs.identity_inlier & (cs.identity_assignments == c)
            counts.append(int(mask.sum()))
            protos.append(cs.embeddings[mask].mean(axis=0) if mask.any() else None)
        table.prototypes[key] = protos
        table.counts[key] = counts
    return table


def prototype_similarity(table: PrototypeTable, gender: int) -> SimilarityMatrix:
    """Cosine similarity of every voice prototype (rows) with every face prototype (columns)."""
    vc = table.present(Modality.VOICE, gender)
    fc = table.present(Modality.FACE, gender)
    if not vc or not fc:
        raise ConfigError(f"gender cluster {gender} lacks voice or face prototypes")
    pv = np.stack([table.prototypes[(Modality.VOICE, gender)][c] for c in vc])
    pf = np.stack([table.prototypes[(Modality.FACE, gender)][c] for c in fc])
    nv = np.linalg.norm(pv, axis=1, keepdims=True)
    nf = np.linalg.norm(pf, axis=1, keepdims=True)
    if np.any(nv == 0.0) or np.any(nf == 0.0):
        raise DegenerateInputError(f"zero-norm prototype in gender cluster {gender}")
    values = np.clip((pv / nv) @ (pf / nf).T, -1.0, 1.0)
    return SimilarityMatrix(gender, tuple(vc), tuple(fc), values)


# --- refinement ------------------------------------------------------------


@dataclass
class ChainState:
    """Everything refine_scores needs to look a sample up."""

    genders: dict
    csets: dict  # (modality, g) -> CandidateSet with identity clustering
    prototypes: PrototypeTable
    sims: dict  # g -> SimilarityMatrix

    def __post_init__(self):
        self._where = {}
        for (modality, g), cs in self.csets.items():
            for i, sid in enumerate(cs.member_ids):
                self._where[sid] = (modality, g, cs, i)

    def locate(self, sample_id: str):
        try:
            return self._where[sample_id]
        except KeyError:
            raise FormatError(f"pair references unknown sample id {sample_id!r}") from None

    def identity_of(self, sample_id: str) -> int | None:
        """Identity cluster used for the prototype lookup of one sample."""
        modality, g, cs, i = self.locate(sample_id)
        if cs.identity_inlier is not None and cs.identity_inlier[i]:
            return int(cs.identity_assignments[i])
        present = self.prototypes.present(modality, g)
        if not present:
            return None
        protos = np.stack([self.prototypes.prototypes[(modality, g)][c] for c in present])
        d2 = squared_distances(cs.embeddings[i : i + 1], protos)[0]
        return present[int(np.argmin(d2))]


class AuditEntry(NamedTuple):
    voice_id: str
    face_id: str
    rule: str
    before: float
    after: float
    similarity: float | None = None


def refine_scores(initial: ScoreSet, state: ChainState, config: RefineConfig = RefineConfig(),
                  audit: list | None = None) -> ScoreSet:
    """Apply the similarity reward, then the gender-mismatch penalty."""
    bounds = ScoreBounds.from_scores(initial)
    scores = initial.scores.copy()
    cluster_cache: dict = {}

    def identity(sid):
        if sid not in cluster_cache:
            cluster_cache[sid] = state.identity_of(sid)
        return cluster_cache[sid]

    fired = [None] * len(scores)
    for k, e in enumerate(initial):
        gv = state.locate(e.voice_id)[1]
        gf = state.locate(e.face_id)[1]
        if gv != gf:
            continue
        sim_matrix = state.sims.get(gv)
        if sim_matrix is None:
            continue
        cv, cf = identity(e.voice_id), identity(e.face_id)
        if cv is None or cf is None:
            continue
        sim = sim_matrix.lookup(cv, cf)
        hit = sim < config.sim_threshold if config.reward_below else sim >= config.sim_threshold
        if hit:
            scores[k] = bounds.lower + (scores[k] - bounds.lower) * config.alpha
            fired[k] = ("reward", sim)

    for k, e in enumerate(initial):
        if state.locate(e.voice_id)[1] != state.locate(e.face_id)[1]:
            scores[k] = bounds.upper
            fired[k] = ("penalty", None)

    if audit is not None:
        for k, e in enumerate(initial):
            if fired[k] is not None:
                audit.append(AuditEntry(e.voice_id, e.face_id, fired[k][0], e.score, float(scores[k]), fired[k][1]))
    return initial.with_scores(scores)


@dataclass
class ChainResult:
    refined: ScoreSet
    state: ChainState
    bounds: ScoreBounds
    audit: list


def _test_embeddings(records: Sequence[EmbeddingRecord], pairs: Sequence[TestPair]):
    index = index_records(records)
    used = set()
    for p in pairs:
        for sid, want in ((p.voice_id, Modality.VOICE), (p.face_id, Modality.FACE)):
            rec = index.get(sid)
            if rec is None:
                raise FormatError(f"pair references unknown sample id {sid!r}")
            if rec.modality is not want:
                raise FormatError(f"sample {sid!r} is {rec.modality.value}, expected {want.value}")
            used.add(sid)
    out = {}
    for modality in MODALITIES:
        chosen = [r for r in records if r.modality is modality and r.sample_id in used]
        dims = {r.dim for r in chosen}
        if len(dims) > 1:
            raise FormatError("embeddings of one modality have different dimensions")
        out[modality] = (
            tuple(r.sample_id for r in chosen),
            np.stack([r.vector for r in chosen]) if chosen else np.empty((0, 0)),
        )
    return out


def run_chain(records: Sequence[EmbeddingRecord], pairs: Sequence[TestPair], initial: ScoreSet,
              config: RefineConfig = RefineConfig(), seed: int = 0, jobs: int = 1) -> ChainResult:
    """Full chaining-cluster pass over the embeddings referenced by ``pairs``."""
    if len(pairs) != len(initial):
        raise FormatError(f"{len(pairs)} pairs but {len(initial)} scores")
    for p, e in zip(pairs, initial):
        if (p.voice_id, p.face_id) != (e.voice_id, e.face_id):
            raise FormatError(f"score row ({e.voice_id}, {e.face_id}) does not match pair ({p.voice_id}, {p.face_id})")
    embeddings = _test_embeddings(records, pairs)
    genders = gender_cluster(embeddings, config, seed=seed, jobs=jobs)
    csets = {}
    for modality in MODALITIES:
        for cs in genders[modality].csets:
            csets[(modality, cs.gender_cluster)] = identity_cluster(cs, config, seed=seed, jobs=jobs, n_pairs=len(pairs))
    table = compute_prototypes(list(csets.values()))
    sims = {}
    for g in range(config.gender_clusters):
        if table.present(Modality.VOICE, g) and table.present(Modality.FACE, g):
            sims[g] = prototype_similarity(table, g)
    state = ChainState(genders, csets, table, sims)
    audit: list = []
    refined = refine_scores(initial, state, config, audit)
    return ChainResult(refined, state, ScoreBounds.from_scores(initial), audit)


# --- exports ---------------------------------------------------------------


def write_similarity_csv(path, sim: SimilarityMatrix):
    header = ["voice_cluster"] + [f"face_{c}" for c in sim.face_clusters]
    rows = [[vc] + [float(x) for x in row] for vc, row in zip(sim.voice_clusters, sim.values)]
    write_csv(path, header, rows)


def write_audit_csv(path, audit: Sequence[AuditEntry]):
    write_csv(path, list(AuditEntry._fields), audit)


def write_chain_exports(directory, result: ChainResult) -> list[str]:
    """Write elbow curves and similarity matrices; returns the file names."""
    names = []
    for (modality, g), cs in sorted(result.state.csets.items(), key=lambda kv: (kv[0][0].value, kv[0][1])):
        if cs.elbow is not None:
            name = f"elbow_{modality.value}_g{g}.csv"
            write_elbow_csv(os.path.join(directory, name), cs.elbow)
            names.append(name)
    for g, sim in sorted(result.state.sims.items()):
        name = f"similarity_g{g}.csv"
        write_similarity_csv(os.path.join(directory, name), sim)
        names.append(name)
    return names
